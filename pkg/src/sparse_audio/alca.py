"""Adaptive LCA: gradient descent on the per-channel Gammachirp parameters.

The scaled energy ``0.5*||D a - s||^2 + alpha*lam*S(a)`` is differentiated
through the last ``tbptt_window`` unrolled LCA iterations, through the atom
normalization, and through the closed-form Gammachirp partials.
"""

import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import AdaptationError, ConfigError
from .gammachirp import clamp_params, raw_response_partials
from .lca import Dictionary, project, reconstruct, run_lca, sparsity_cost
from .optim import AdamaxState, adamax_update


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    tbptt_window: int = 64
    sparsity_scale: float = 1.0
    num_epochs: int = 20
    adamax_beta1: float = 0.9
    adamax_beta2: float = 0.999
    adamax_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tbptt_window < 1:
            raise ConfigError(f"tbptt_window must be >= 1, got {self.tbptt_window}")
        if not self.sparsity_scale >= 0:
            raise ConfigError(f"sparsity_scale must be >= 0, got {self.sparsity_scale}")
        if self.num_epochs < 0:
            raise ConfigError(f"num_epochs must be >= 0, got {self.num_epochs}")

    def check_against(self, cfg):
        if self.tbptt_window > cfg.num_iterations:
            raise ConfigError(
                f"tbptt_window {self.tbptt_window} exceeds LCA num_iterations {cfg.num_iterations}"
            )

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown adaptation keys: {sorted(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_mapping(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class ParamGradients:
    d_c: np.ndarray
    d_b: np.ndarray
    d_l: np.ndarray

    def as_dict(self):
        return {"chirp": self.d_c, "bandwidth_scale": self.d_b, "gamma_order": self.d_l}

    def __add__(self, other):
        return ParamGradients(self.d_c + other.d_c, self.d_b + other.d_b, self.d_l + other.d_l)

    def scaled(self, factor):
        return ParamGradients(self.d_c * factor, self.d_b * factor, self.d_l * factor)

    def check_finite(self):
        for arr in (self.d_c, self.d_b, self.d_l):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise AdaptationError("non-finite gradient", channel=int(bad[0]))
        return self


def scaled_energy(signal, dictionary, a, lam, alpha):
    """0.5 * ||D a - s||^2 + alpha * lam * S(a)."""
    if not alpha >= 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    s = dictionary.pad(signal)
    resid = reconstruct(dictionary, a) - s
    return 0.5 * float(resid @ resid) + alpha * lam * sparsity_cost(a, lam)


def _atom_grad(dictionary, x, y):
    """Atom-space gradient of <x, D y>-shaped terms: sum_j y[i, j] * x[j*r + t]."""
    return y @ dictionary.frames(x)


def _atom_to_params(bank, atom_grad):
    """Chain atom gradients through unit-norm scaling and the Gammachirp partials."""
    k = bank.num_channels
    d_c, d_b, d_l = np.empty(k), np.empty(k), np.empty(k)
    for i, p in enumerate(bank.params):
        psi, p_c, p_b, p_l = raw_response_partials(p, bank.config)
        norm = np.linalg.norm(psi)
        phi = bank.atoms[i]
        g = atom_grad[i]
        raw_grad = (g - phi * (phi @ g)) / norm
        d_c[i], d_b[i], d_l[i] = raw_grad @ p_c, raw_grad @ p_b, raw_grad @ p_l
    return ParamGradients(d_c, d_b, d_l)


@dataclass
class GradientResult:
    grads: ParamGradients
    scaled_energy: float
    mse: float
    l0: int


def forward_backward(signal, dictionary, cfg, acfg):
    """Encode ``signal`` and differentiate its scaled energy w.r.t. (c, b, l)."""
    acfg.check_against(cfg)
    s = dictionary.pad(signal)
    run = run_lca(s, dictionary, cfg, record=True)
    eta, lam, alpha = cfg.step_ratio, cfg.threshold, acfg.sparsity_scale
    hist = run.history
    n_last = len(hist) - 1
    v_n, a_n = hist[n_last]
    mask = lambda n: (np.abs(hist[n][0]) >= lam).astype(float)  # da/dv on the active set

    resid = reconstruct(dictionary, a_n) - s
    # reconstruction path, a held fixed
    atom_grad = _atom_grad(dictionary, resid, a_n)
    a_bar = project(dictionary, resid)
    # sparsity path: lam * dS/da = v - a, which vanishes wherever da/dv is nonzero
    v_bar = (a_bar + alpha * (v_n - a_n)) * mask(n_last)

    p_bar = np.zeros_like(a_n)
    first = max(1, n_last - acfg.tbptt_window + 1)
    for n in range(n_last, first - 1, -1):
        a_prev = hist[n - 1][1]
        p_bar += eta * v_bar
        u = reconstruct(dictionary, a_prev)
        w = reconstruct(dictionary, v_bar)
        # -eta * <D v_bar, D a_prev> differentiated w.r.t. D
        atom_grad -= eta * (_atom_grad(dictionary, u, v_bar) + _atom_grad(dictionary, w, a_prev))
        if n == first:
            break
        a_prev_bar = -eta * (project(dictionary, w) - v_bar)
        v_bar = (1 - eta) * v_bar + a_prev_bar * mask(n - 1)
    # p = D^T s
    atom_grad += _atom_grad(dictionary, s, p_bar)

    grads = _atom_to_params(dictionary.bank, atom_grad).check_finite()
    l0 = int(np.count_nonzero(a_n))
    mse = 0.5 * float(resid @ resid)
    return GradientResult(grads, mse + alpha * lam * 0.5 * lam * l0, mse, l0)


def grad_params(signal, dictionary, cfg, acfg):
    return forward_backward(signal, dictionary, cfg, acfg).grads


def adamax_step(params, grads, state, acfg):
    """One Adamax update of ``params`` (dict of c/b/l arrays), then clamp."""
    new, state = adamax_update(
        params,
        grads.as_dict(),
        state,
        acfg.learning_rate,
        acfg.adamax_beta1,
        acfg.adamax_beta2,
        acfg.adamax_eps,
    )
    c, b, l = clamp_params(new["chirp"], new["bandwidth_scale"], new["gamma_order"])
    return {"chirp": c, "bandwidth_scale": b, "gamma_order": l}, state


@dataclass
class AdaptTrace:
    epochs: list = field(default_factory=list)
    mean_scaled_energy: list = field(default_factory=list)
    mean_l0: list = field(default_factory=list)
    mean_mse: list = field(default_factory=list)

    def append(self, epoch, energy, l0, mse):
        self.epochs.append(epoch)
        self.mean_scaled_energy.append(energy)
        self.mean_l0.append(l0)
        self.mean_mse.append(mse)

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_scaled_energy", "mean_L0", "mean_mse"])
        for row in zip(self.epochs, self.mean_scaled_energy, self.mean_l0, self.mean_mse):
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


class _DictCache:
    """One Dictionary per distinct signal length, rebuilt when the bank changes."""

    def __init__(self, bank, stride):
        self.bank, self.stride, self._cache = bank, stride, {}

    def update(self, bank):
        self.bank, self._cache = bank, {}

    def __call__(self, signal_len):
        if signal_len not in self._cache:
            self._cache[signal_len] = Dictionary.for_length(self.bank, self.stride, signal_len)
        return self._cache[signal_len]


def evaluate(corpus, bank, stride, cfg, alpha):
    """Mean (scaled energy, L0, MSE term) of encoding every signal with ``bank``."""
    dicts = _DictCache(bank, stride)
    totals = np.zeros(3)
    for sig in corpus:
        sig = np.asarray(sig, dtype=float)
        d = dicts(sig.size)
        s = d.pad(sig)
        a = run_lca(s, d, cfg).state.activations
        mse = scaled_energy(s, d, a, cfg.threshold, 0.0)
        l0 = np.count_nonzero(a)
        totals += (mse + alpha * cfg.threshold * sparsity_cost(a, cfg.threshold), l0, mse)
    return tuple(totals / len(corpus))


def adapt(corpus, bank0, stride, cfg, acfg, seed=0, callback=None):
    """Mini-batch TBPTT + Adamax adaptation of (c, b, l) starting from ``bank0``.

    Trace entries are means over the forward passes of each epoch, so epoch 1
    reflects (mostly) the starting bank.
    """
    if len(corpus) == 0:
        raise ConfigError("adaptation corpus is empty")
    acfg.check_against(cfg)
    rng = np.random.default_rng(seed)
    bank = bank0
    c, b, l = bank.param_arrays()
    params = {"chirp": c, "bandwidth_scale": b, "gamma_order": l}
    state = AdamaxState()
    dicts = _DictCache(bank, stride)
    trace = AdaptTrace()
    signals = [np.asarray(x, dtype=float) for x in corpus]

    for epoch in range(1, acfg.num_epochs + 1):
        order = rng.permutation(len(signals))
        sums = np.zeros(3)
        for start in range(0, len(order), acfg.batch_size):
            batch = order[start : start + acfg.batch_size]
            total = None
            for idx in batch:
                res = forward_backward(signals[idx], dicts(signals[idx].size), cfg, acfg)
                total = res.grads if total is None else total + res.grads
                sums += (res.scaled_energy, res.l0, res.mse)
            params, state = adamax_step(params, total.scaled(1.0 / len(batch)), state, acfg)
            bank = bank.with_params(params["chirp"], params["bandwidth_scale"], params["gamma_order"])
            dicts.update(bank)
        means = sums / len(signals)
        trace.append(epoch, *means)
        if callback is not None:
            callback(epoch, bank, trace)
    return bank, trace
