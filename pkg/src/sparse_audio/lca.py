"""Locally Competitive Algorithm over a block-strided filter-bank dictionary.

Coefficient arrays are shaped ``(k, T)``: channel-major, frame-minor. Their
C-order ravel gives the column order of the dense dictionary, in which atom
``i`` placed at frame ``j`` is column ``i*T + j`` and occupies rows
``j*r .. j*r + F_l - 1``.
"""

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, ShapeError, StateError

CODE_MAGIC = b"SPCD"
CODE_VERSION = 1
EVENT_DTYPE = np.dtype([("channel", "<u4"), ("frame", "<u4"), ("value", "<f8")])


def num_frames_for(signal_len, filter_len, stride):
    """Frames needed to cover ``signal_len`` samples; the tail is zero-padded."""
    if signal_len <= filter_len:
        return 1
    return math.ceil((signal_len - filter_len) / stride) + 1


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Strided placement of every bank atom at every frame offset.

    ``signal_len_samples`` is always an exact tiling length,
    ``F_l + (T - 1) * r``; use :meth:`for_length` to round a raw length up.
    """

    bank: object
    stride_samples: int
    signal_len_samples: int
    num_frames: int = field(init=False)

    def __post_init__(self):
        flen = self.bank.filter_len
        r = self.stride_samples
        if int(r) != r or not 1 <= r <= flen:
            raise ConfigError(f"stride must satisfy 1 <= r <= F_l={flen}, got {r}")
        if self.signal_len_samples < flen:
            raise ConfigError(f"signal length {self.signal_len_samples} is shorter than F_l={flen}")
        if (self.signal_len_samples - flen) % r:
            raise ConfigError(
                f"signal length {self.signal_len_samples} is not F_l + m*r; use Dictionary.for_length"
            )
        object.__setattr__(self, "num_frames", (self.signal_len_samples - flen) // r + 1)

    @classmethod
    def for_length(cls, bank, stride, signal_len):
        t = num_frames_for(signal_len, bank.filter_len, stride)
        return cls(bank, stride, bank.filter_len + (t - 1) * stride)

    @property
    def num_channels(self):
        return self.bank.num_channels

    @property
    def filter_len(self):
        return self.bank.filter_len

    @property
    def shape(self):
        """Coefficient grid shape (k, T)."""
        return (self.bank.num_channels, self.num_frames)

    @property
    def total_atoms(self):
        return self.bank.num_channels * self.num_frames

    @property
    def frame_period_s(self):
        return self.stride_samples / self.bank.config.sample_rate_hz

    def pad(self, signal):
        s = np.asarray(signal, dtype=float)
        if s.ndim != 1:
            raise ShapeError(f"signal must be 1-D, got shape {s.shape}")
        n = self.signal_len_samples
        if s.size > n:
            raise ShapeError(f"signal has {s.size} samples, dictionary covers {n}")
        if s.size == n:
            return s
        return np.concatenate([s, np.zeros(n - s.size)])

    def check_signal(self, signal):
        s = np.asarray(signal, dtype=float)
        if s.shape != (self.signal_len_samples,):
            raise ShapeError(
                f"signal shape {s.shape} does not match dictionary length {self.signal_len_samples}"
            )
        return s

    def check_coeffs(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape == self.shape:
            return a
        if a.shape == (self.total_atoms,):
            return a.reshape(self.shape)
        raise ShapeError(f"coefficients shape {a.shape} does not match {self.shape}")

    def frames(self, x):
        """Read-only ``(T, F_l)`` view of the frame windows of ``x``."""
        return sliding_window_view(x, self.filter_len)[:: self.stride_samples]

    def overlap_add(self, frames):
        """Inverse of :meth:`frames` placement: sum ``(T, F_l)`` rows at their offsets."""
        t, flen = frames.shape
        r = self.stride_samples
        q = -(-flen // r)
        blocks = np.zeros((t + q - 1, r))
        padded = np.zeros((t, q * r))
        padded[:, :flen] = frames
        padded = padded.reshape(t, q, r)
        for m in range(q):
            blocks[m : m + t] += padded[:, m, :]
        return blocks.ravel()[: self.signal_len_samples]

    def dense(self):
        """Explicit ``(signal_len, N)`` matrix; the oracle for the strided path."""
        k, t = self.shape
        flen, r = self.filter_len, self.stride_samples
        mat = np.zeros((self.signal_len_samples, k * t))
        for i in range(k):
            for j in range(t):
                mat[j * r : j * r + flen, i * t + j] = self.bank.atoms[i]
        return mat


def project(dictionary, signal):
    """D^T s as a ``(k, T)`` array, via strided correlation."""
    s = dictionary.check_signal(signal)
    return dictionary.bank.atoms @ dictionary.frames(s).T


def reconstruct(dictionary, a):
    """D a via overlap-add of the strided atoms."""
    a = dictionary.check_coeffs(a)
    return dictionary.overlap_add(a.T @ dictionary.bank.atoms)


def project_dense(dictionary, signal, mat=None):
    mat = dictionary.dense() if mat is None else mat
    return (mat.T @ dictionary.check_signal(signal)).reshape(dictionary.shape)


def reconstruct_dense(dictionary, a, mat=None):
    mat = dictionary.dense() if mat is None else mat
    return mat @ dictionary.check_coeffs(a).ravel()


def hard_threshold(v, lam):
    """Zero every entry with ``|v| < lam``; entries at or above threshold pass unchanged."""
    if not lam > 0:
        raise ConfigError(f"threshold must be > 0, got {lam}")
    v = np.asarray(v, dtype=float)
    return np.where(np.abs(v) < lam, 0.0, v)


@dataclass(frozen=True)
class LcaConfig:
    threshold: float
    step_ratio: float = 0.01
    num_iterations: int = 64
    tolerance: float = None  # early exit on max|dv| < tolerance; off by default

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be > 0, got {self.threshold}")
        if not 0 < self.step_ratio < 1:
            raise ConfigError(f"step_ratio must lie in (0, 1), got {self.step_ratio}")
        if int(self.num_iterations) != self.num_iterations or self.num_iterations < 1:
            raise ConfigError(f"num_iterations must be >= 1, got {self.num_iterations}")


@dataclass
class LcaState:
    potentials: np.ndarray
    activations: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def lca_step(state, p, dictionary, cfg):
    """One Euler step of the LCA dynamics; inhibition is D^T(D a) - a."""
    if state.iteration >= cfg.num_iterations:
        raise StateError(f"LCA state already at iteration {state.iteration} of {cfg.num_iterations}")
    a = state.activations
    inhibition = project(dictionary, reconstruct(dictionary, a)) - a
    return _advance(state, p, inhibition, cfg)


def lca_step_dense(state, p, dictionary, cfg, mat=None):
    """Same step with the explicit Gram matrix; reference path only."""
    if state.iteration >= cfg.num_iterations:
        raise StateError(f"LCA state already at iteration {state.iteration} of {cfg.num_iterations}")
    mat = dictionary.dense() if mat is None else mat
    gram = mat.T @ mat - np.eye(mat.shape[1])
    inhibition = (gram @ state.activations.ravel()).reshape(dictionary.shape)
    return _advance(state, p, inhibition, cfg)


def _advance(state, p, inhibition, cfg):
    eta = cfg.step_ratio
    v = eta * (p - inhibition) + (1 - eta) * state.potentials
    return LcaState(v, hard_threshold(v, cfg.threshold), state.iteration + 1)


def sparsity_cost(a, lam):
    """S(a) = (lam / 2) * L0(a)."""
    return 0.5 * lam * np.count_nonzero(a)


def energy(signal, dictionary, a, lam):
    """0.5 * ||D a - s||^2 + lam * S(a)."""
    s = dictionary.pad(signal)
    resid = reconstruct(dictionary, a) - s
    return 0.5 * float(resid @ resid) + lam * sparsity_cost(a, lam)


@dataclass
class EnergyTrace:
    """Per-iteration energy terms, entry n-1 evaluated on a[n]."""

    mse_term: np.ndarray
    sparsity_term: np.ndarray

    @property
    def total(self):
        return self.mse_term + self.sparsity_term

    def __len__(self):
        return len(self.mse_term)

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "mse_term", "sparsity_term", "total"])
        for n, (m, s) in enumerate(zip(self.mse_term, self.sparsity_term), start=1):
            writer.writerow([n, repr(float(m)), repr(float(s)), repr(float(m + s))])


@dataclass
class LcaRun:
    """Everything an encoding produced; ``history`` is filled only on request."""

    state: LcaState
    p: np.ndarray
    trace: EnergyTrace
    history: list = None  # [(v[n], a[n]) for n = 0 .. iterations]


def run_lca(signal, dictionary, cfg, method="strided", record=False):
    """Run the LCA from the zero state on an already padded signal."""
    s = dictionary.check_signal(signal)
    lam = cfg.threshold
    if method == "strided":
        p = project(dictionary, s)

        def step(st):
            return lca_step(st, p, dictionary, cfg)

        def recon(a):
            return reconstruct(dictionary, a)

    elif method == "dense":
        mat = dictionary.dense()
        p = project_dense(dictionary, s, mat)

        def step(st):
            return lca_step_dense(st, p, dictionary, cfg, mat)

        def recon(a):
            return reconstruct_dense(dictionary, a, mat)

    else:
        raise ConfigError(f"unknown method {method!r}")

    state = LcaState.zeros(dictionary.shape)
    history = [(state.potentials, state.activations)] if record else None
    mse, sparse = [], []
    while state.iteration < cfg.num_iterations:
        prev = state.potentials
        state = step(state)
        resid = recon(state.activations) - s
        mse.append(0.5 * float(resid @ resid))
        sparse.append(lam * sparsity_cost(state.activations, lam))
        if record:
            history.append((state.potentials, state.activations))
        if cfg.tolerance is not None and np.max(np.abs(state.potentials - prev)) < cfg.tolerance:
            break
    trace = EnergyTrace(np.array(mse), np.array(sparse))
    return LcaRun(state, p, trace, history)


@dataclass
class SparseCode:
    """Nonzero coefficients of one encoding as (channel, frame, value) events."""

    channels: np.ndarray
    frames: np.ndarray
    values: np.ndarray
    shape: tuple
    source_len: int
    lambda_used: float
    sample_rate_hz: float = 0.0
    stride: int = 0

    @classmethod
    def from_dense(cls, a, source_len, lambda_used, sample_rate_hz=0.0, stride=0):
        a = np.asarray(a, dtype=float)
        ch, fr = np.nonzero(a)
        return cls(
            ch.astype(np.uint32),
            fr.astype(np.uint32),
            a[ch, fr].copy(),
            tuple(int(x) for x in a.shape),
            int(source_len),
            float(lambda_used),
            float(sample_rate_hz),
            int(stride),
        )

    @property
    def events(self):
        return [(int(c), int(f), float(v)) for c, f, v in zip(self.channels, self.frames, self.values)]

    def __len__(self):
        return len(self.values)

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.channels.astype(np.intp), self.frames.astype(np.intp)] = self.values
        return out

    def to_bytes(self):
        k, t = self.shape
        head = CODE_MAGIC + struct.pack(
            "<IIIIIddI",
            CODE_VERSION,
            k,
            t,
            self.source_len,
            self.stride,
            self.lambda_used,
            self.sample_rate_hz,
            len(self.values),
        )
        ev = np.empty(len(self.values), dtype=EVENT_DTYPE)
        ev["channel"], ev["frame"], ev["value"] = self.channels, self.frames, self.values
        return head + ev.tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != CODE_MAGIC:
            raise FormatError("not a sparse code file (bad magic)")
        head = struct.Struct("<IIIIIddI")
        version, k, t, source_len, stride, lam, fs, n = head.unpack_from(data, 4)
        if version != CODE_VERSION:
            raise FormatError(f"unsupported sparse code version {version}")
        off = 4 + head.size
        if len(data) != off + n * EVENT_DTYPE.itemsize:
            raise FormatError("sparse code file is truncated or has trailing bytes")
        ev = np.frombuffer(data, dtype=EVENT_DTYPE, count=n, offset=off)
        if n and (ev["channel"].max() >= k or ev["frame"].max() >= t):
            raise FormatError("event index outside the (k, T) grid")
        return cls(
            ev["channel"].copy(), ev["frame"].copy(), ev["value"].astype(float),
            (k, t), source_len, lam, fs, stride,
        )

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["channel", "frame", "value"])
        for c, f, v in self.events:
            writer.writerow([c, f, repr(v)])


def encode(signal, dictionary, cfg, method="strided"):
    """Encode ``signal`` (zero-padded to the frame grid) into a SparseCode and energy trace."""
    s = np.asarray(signal, dtype=float)
    run = run_lca(dictionary.pad(s), dictionary, cfg, method=method)
    code = SparseCode.from_dense(
        run.state.activations,
        source_len=s.size,
        lambda_used=cfg.threshold,
        sample_rate_hz=dictionary.bank.config.sample_rate_hz,
        stride=dictionary.stride_samples,
    )
    return code, run.trace


def snr_db(reference, estimate):
    ref = np.asarray(reference, dtype=float)
    err = ref - np.asarray(estimate, dtype=float)[: ref.size]
    noise = float(err @ err)
    if noise == 0:
        return math.inf
    return 10 * math.log10(float(ref @ ref) / noise)
