"""Current-based LIF readout network with fast-sigmoid surrogate gradients.

Per hidden layer and time step (decay, then integrate, then fire, then reset)::

    I_t  = syn_decay * I_{t-1} + W x_t (+ V s_{t-1} if recurrent)
    m~_t = mem_decay * m_{t-1} + I_t
    s_t  = [m~_t >= threshold]
    m_t  = m~_t - threshold * s_t       (reset="subtract")
           m~_t * (1 - s_t)             (reset="zero")

The readout is linear and non-spiking; class scores are its time average.
One synaptic operation is one presynaptic event reaching one postsynaptic
target.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .optim import AdamaxState, adamax_update

MODEL_MAGIC = b"SNNC"
MODEL_VERSION = 1
RESETS = ("subtract", "zero")


@dataclass(frozen=True)
class LifConfig:
    mem_decay: float = 0.95
    syn_decay: float = 0.85
    threshold: float = 1.0
    reset: str = "subtract"
    surrogate_beta: float = 10.0

    def __post_init__(self):
        for name in ("mem_decay", "syn_decay"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie strictly inside (0, 1)")
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be > 0, got {self.threshold}")
        if self.reset not in RESETS:
            raise ConfigError(f"reset must be one of {RESETS}, got {self.reset!r}")
        if not self.surrogate_beta > 0:
            raise ConfigError(f"surrogate_beta must be > 0, got {self.surrogate_beta}")


def fast_sigmoid(x, beta):
    x = np.asarray(x, dtype=float)
    return x / (1 + beta * np.abs(x))


def fast_sigmoid_slope(x, beta):
    """Derivative of :func:`fast_sigmoid`, used as the spike surrogate gradient."""
    x = np.asarray(x, dtype=float)
    return 1.0 / (1 + beta * np.abs(x)) ** 2


def spike_fn(x, beta, relaxed=False):
    """Return (spikes, surrogate slope) for membrane-minus-threshold ``x``.

    ``relaxed`` replaces the Heaviside forward by the fast sigmoid itself so the
    network becomes smooth; only gradient checks use it.
    """
    slope = fast_sigmoid_slope(x, beta)
    spikes = fast_sigmoid(x, beta) if relaxed else (x >= 0).astype(float)
    return spikes, slope


@dataclass
class LifLayerState:
    synaptic_current: np.ndarray
    membrane: np.ndarray
    spikes: np.ndarray
    synops_in: int = 0

    @classmethod
    def zeros(cls, size, batch=None):
        shape = (size,) if batch is None else (batch, size)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), 0)


def lif_step(state, input_spikes, weights, cfg, recurrent_weights=None):
    """Advance one LIF layer by one time step."""
    x = np.asarray(input_spikes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if x.shape[-1] != weights.shape[1] or state.membrane.shape[-1] != weights.shape[0]:
        raise ShapeError(f"input {x.shape} / weights {weights.shape} / layer {state.membrane.shape} mismatch")
    n_out = weights.shape[0]
    current = cfg.syn_decay * state.synaptic_current + x @ weights.T
    synops = int(np.count_nonzero(x)) * n_out
    if recurrent_weights is not None:
        current = current + state.spikes @ recurrent_weights.T
        synops += int(np.count_nonzero(state.spikes)) * n_out
    pre = cfg.mem_decay * state.membrane + current
    spikes = (pre >= cfg.threshold).astype(float)
    if cfg.reset == "subtract":
        membrane = pre - cfg.threshold * spikes
    else:
        membrane = pre * (1 - spikes)
    return LifLayerState(current, membrane, spikes, state.synops_in + synops)


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int
    hidden_sizes: tuple = (128,)
    recurrent: tuple = None
    num_classes: int = 2
    init_multiplier: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        rec = self.recurrent
        if rec is None:
            rec = (False,) * len(self.hidden_sizes)
        elif isinstance(rec, bool):
            rec = (rec,) * len(self.hidden_sizes)
        object.__setattr__(self, "recurrent", tuple(bool(r) for r in rec))
        if len(self.recurrent) != len(self.hidden_sizes):
            raise ConfigError("recurrent flags must match hidden_sizes")
        if self.input_size < 1 or self.num_classes < 1 or not self.hidden_sizes:
            raise ConfigError("network needs input_size, num_classes >= 1 and at least one hidden layer")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden layer sizes must be >= 1")


def glorot_sigma(fan_in, fan_out):
    return np.sqrt(2.0 / (fan_in + fan_out))


@dataclass
class Network:
    spec: NetworkSpec
    lif: LifConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec, lif=None, seed=0):
        """Glorot-scaled normal weights; feed-forward hidden weights get mean multiplier * sigma."""
        lif = lif or LifConfig()
        rng = np.random.default_rng(seed)
        params = {}
        fan_in = spec.input_size
        for idx, (size, rec) in enumerate(zip(spec.hidden_sizes, spec.recurrent)):
            sigma = glorot_sigma(fan_in, size)
            params[f"w{idx}"] = rng.normal(spec.init_multiplier * sigma, sigma, (size, fan_in))
            if rec:
                params[f"v{idx}"] = rng.normal(0.0, glorot_sigma(size, size), (size, size))
            fan_in = size
        params["w_out"] = rng.normal(0.0, glorot_sigma(fan_in, spec.num_classes), (spec.num_classes, fan_in))
        params["b_out"] = np.zeros(spec.num_classes)
        return cls(spec, lif, params)

    def copy(self):
        return Network(self.spec, self.lif, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self):
        spec, lif = self.spec, self.lif
        out = [MODEL_MAGIC, struct.pack("<IIII", MODEL_VERSION, spec.input_size, spec.num_classes, len(spec.hidden_sizes))]
        for size, rec in zip(spec.hidden_sizes, spec.recurrent):
            out.append(struct.pack("<IB", size, rec))
        out.append(struct.pack(
            "<ddddBd", lif.mem_decay, lif.syn_decay, lif.threshold, lif.surrogate_beta,
            RESETS.index(lif.reset), spec.init_multiplier,
        ))
        for name in param_names(spec):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != MODEL_MAGIC:
            raise FormatError("not a model checkpoint (bad magic)")
        try:
            off = 4
            version, n_in, n_cls, n_hidden = struct.unpack_from("<IIII", data, off)
            if version != MODEL_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            off += 16
            sizes, recs = [], []
            for _ in range(n_hidden):
                size, rec = struct.unpack_from("<IB", data, off)
                sizes.append(size)
                recs.append(bool(rec))
                off += 5
            mem, syn, thr, beta, reset, mult = struct.unpack_from("<ddddBd", data, off)
            off += struct.calcsize("<ddddBd")
            spec = NetworkSpec(n_in, tuple(sizes), tuple(recs), n_cls, mult)
            lif = LifConfig(mem, syn, thr, RESETS[reset], beta)
            params = {}
            for name in param_names(spec):
                (ndim,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                n = int(np.prod(shape))
                params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
                off += 8 * n
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated checkpoint: {exc}") from exc
        if off != len(data):
            raise FormatError("checkpoint has trailing bytes")
        return cls(spec, lif, params)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def param_names(spec):
    names = []
    for idx, rec in enumerate(spec.recurrent):
        names.append(f"w{idx}")
        if rec:
            names.append(f"v{idx}")
    return names + ["w_out", "b_out"]


@dataclass
class SynOps:
    input: int = 0
    hidden: int = 0

    @property
    def total(self):
        return self.input + self.hidden

    def __add__(self, other):
        return SynOps(self.input + other.input, self.hidden + other.hidden)


@dataclass
class ForwardResult:
    scores: np.ndarray  # (B, C)
    synops: SynOps
    rasters: list  # per hidden layer, (B, T, n)
    cache: dict = field(default=None, repr=False)


def as_input(rep_or_array):
    """EventRepresentation -> (T, k) dense input; arrays pass through."""
    if hasattr(rep_or_array, "to_dense"):
        return rep_or_array.to_dense().T
    return np.asarray(rep_or_array, dtype=float)


def forward(net, inputs, relaxed=False, keep_cache=False):
    """Unroll the network over ``inputs`` of shape (T, n_in) or (B, T, n_in)."""
    x = as_input(inputs)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != net.spec.input_size:
        raise ShapeError(f"input shape {x.shape} does not fit input size {net.spec.input_size}")
    cfg, p = net.lif, net.params
    batch, steps, _ = x.shape
    synops = SynOps()
    layer_in = x
    rasters, caches = [], []
    for idx, (size, rec) in enumerate(zip(net.spec.hidden_sizes, net.spec.recurrent)):
        w = p[f"w{idx}"]
        v = p.get(f"v{idx}") if rec else None
        n_targets = size
        count = int(np.count_nonzero(layer_in)) * n_targets
        if idx == 0:
            synops.input += count
        else:
            synops.hidden += count
        drive = layer_in @ w.T  # (B, T, n)
        cur = np.zeros((batch, size))
        mem = np.zeros((batch, size))
        s_prev = np.zeros((batch, size))
        spikes = np.zeros((batch, steps, size))
        pre_all = np.zeros((batch, steps, size))
        slopes = np.zeros((batch, steps, size))
        for t in range(steps):
            cur = cfg.syn_decay * cur + drive[:, t]
            if v is not None:
                cur = cur + s_prev @ v.T
            pre = cfg.mem_decay * mem + cur
            s, slope = spike_fn(pre - cfg.threshold, cfg.surrogate_beta, relaxed)
            mem = pre - cfg.threshold * s if cfg.reset == "subtract" else pre * (1 - s)
            spikes[:, t], pre_all[:, t], slopes[:, t] = s, pre, slope
            s_prev = s
        if v is not None:
            synops.hidden += int(np.count_nonzero(spikes[:, :-1])) * size
        rasters.append(spikes)
        caches.append({"input": layer_in, "spikes": spikes, "pre": pre_all, "slope": slopes})
        layer_in = spikes
    synops.hidden += int(np.count_nonzero(layer_in)) * net.spec.num_classes
    readout = layer_in @ p["w_out"].T + p["b_out"]  # (B, T, C)
    scores = readout.mean(axis=1)
    cache = {"layers": caches, "last": layer_in} if keep_cache else None
    if single:
        scores = scores[0]
    return ForwardResult(scores, synops, rasters, cache)


def softmax_cross_entropy(scores, labels):
    """Mean cross-entropy and its gradient w.r.t. ``scores`` (B, C)."""
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    batch = scores.shape[0]
    loss = -float(np.mean(logp[np.arange(batch), labels]))
    grad = np.exp(logp)
    grad[np.arange(batch), labels] -= 1
    return loss, grad / batch


def backward(net, result, score_grad, tbptt_window=None):
    """Surrogate-gradient BPTT; ``tbptt_window`` cuts the time recursion every W steps."""
    cfg, p = net.lif, net.params
    layers = result.cache["layers"]
    last = result.cache["last"]
    steps = last.shape[1]
    grads = {}
    # readout is linear in each step, scores average over steps
    y_bar = np.repeat(score_grad[:, None, :] / steps, steps, axis=1)
    grads["w_out"] = np.einsum("btc,btn->cn", y_bar, last)
    grads["b_out"] = y_bar.sum(axis=(0, 1))
    s_bar_ext = y_bar @ p["w_out"]
    thr, a_m, a_s = cfg.threshold, cfg.mem_decay, cfg.syn_decay
    for idx in range(len(layers) - 1, -1, -1):
        lc = layers[idx]
        v = p.get(f"v{idx}") if net.spec.recurrent[idx] else None
        spikes, pre, slope = lc["spikes"], lc["pre"], lc["slope"]
        batch, _, size = spikes.shape
        i_bar_all = np.zeros_like(spikes)
        mem_bar = np.zeros((batch, size))  # adjoint of post-reset membrane m_t
        i_carry = np.zeros((batch, size))  # syn_decay * adjoint of I_{t+1}
        s_carry = np.zeros((batch, size))  # V^T adjoint of I_{t+1}
        for t in range(steps - 1, -1, -1):
            if tbptt_window and (t + 1) % tbptt_window == 0:
                mem_bar[:] = 0
                i_carry[:] = 0
                s_carry[:] = 0
            s_bar = s_bar_ext[:, t] + s_carry
            if cfg.reset == "subtract":
                pre_bar = mem_bar.copy()
                s_bar = s_bar - thr * mem_bar
            else:
                pre_bar = mem_bar * (1 - spikes[:, t])
                s_bar = s_bar - mem_bar * pre[:, t]
            pre_bar += s_bar * slope[:, t]
            i_bar = pre_bar + i_carry
            i_bar_all[:, t] = i_bar
            mem_bar = a_m * pre_bar
            i_carry = a_s * i_bar
            s_carry = i_bar @ v if v is not None else s_carry
        grads[f"w{idx}"] = np.einsum("btn,bti->ni", i_bar_all, lc["input"])
        if v is not None:
            prev = np.concatenate([np.zeros((batch, 1, size)), spikes[:, :-1]], axis=1)
            grads[f"v{idx}"] = np.einsum("btn,btm->nm", i_bar_all, prev)
        s_bar_ext = i_bar_all @ p[f"w{idx}"]
    return grads


def loss_and_grads(net, x, labels, relaxed=False, tbptt_window=None, weight_decay=0.0):
    res = forward(net, x, relaxed=relaxed, keep_cache=True)
    scores = res.scores if res.scores.ndim == 2 else res.scores[None]
    loss, g = softmax_cross_entropy(scores, np.atleast_1d(labels))
    grads = backward(net, res, g, tbptt_window)
    if weight_decay:
        for name in grads:
            if name != "b_out":
                grads[name] = grads[name] + weight_decay * net.params[name]
                loss += 0.5 * weight_decay * float(np.sum(net.params[name] ** 2))
    return loss, grads, res


def stack_inputs(reps):
    xs = [as_input(r) for r in reps]
    steps = max(x.shape[0] for x in xs)
    out = np.zeros((len(xs), steps, xs[0].shape[1]))
    for i, x in enumerate(xs):
        out[i, : x.shape[0]] = x
    return out


def accuracy(net, x, labels, batch_size=256):
    correct = 0
    for start in range(0, len(x), batch_size):
        scores = forward(net, x[start : start + batch_size]).scores
        correct += int(np.sum(np.argmax(scores, axis=1) == labels[start : start + batch_size]))
    return correct / len(x)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    num_epochs: int = 50
    batch_size: int = 32
    weight_decay: float = 1e-5
    tbptt_window: int = None  # used for recurrent nets only
    seed: int = 0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, valid_acc, mean_synops)

    @property
    def valid_accuracy(self):
        return [r[2] for r in self.rows]

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_acc", "mean_synops"])
        for e, loss, acc, syn in self.rows:
            writer.writerow([e, repr(float(loss)), repr(float(acc)), repr(float(syn))])


def _labels(reps):
    labels = [r.label for r in reps]
    if any(lab is None for lab in labels):
        raise ConfigError("training needs labelled representations")
    return np.asarray(labels, dtype=np.intp)


def train(net, train_reps, valid_reps, tcfg=None):
    """Adamax + L2 surrogate-gradient training; returns (trained copy, TrainLog)."""
    tcfg = tcfg or TrainConfig()
    net = net.copy()
    x_tr, y_tr = stack_inputs(train_reps), _labels(train_reps)
    x_va, y_va = stack_inputs(valid_reps), _labels(valid_reps)
    rng = np.random.default_rng(tcfg.seed)
    window = tcfg.tbptt_window if any(net.spec.recurrent) else None
    state = AdamaxState()
    log = TrainLog()
    for epoch in range(1, tcfg.num_epochs + 1):
        order = rng.permutation(len(x_tr))
        losses, synops = [], 0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            loss, grads, res = loss_and_grads(net, x_tr[idx], y_tr[idx], tbptt_window=window,
                                              weight_decay=tcfg.weight_decay)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            net.params, state = adamax_update(net.params, grads, state, tcfg.learning_rate)
            losses.append(loss * len(idx))
            synops += res.synops.total
        acc = accuracy(net, x_va, y_va)
        log.rows.append((epoch, sum(losses) / len(x_tr), acc, synops / len(x_tr)))
    return net, log
