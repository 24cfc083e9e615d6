"""ERB-spaced Gammachirp filter banks.

A channel's impulse response is

    phi(t) = t**(l - 1) * exp(-2*pi*b*ERB(f)*t) * cos(2*pi*f*t + c*ln(t))

sampled at t_n = (n + 1) / fs for n = 0 .. F_l - 1 and scaled to unit
Euclidean norm. With c = 0, b = 1, l = 4 this is the classic Gammatone.
"""

import csv
import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError

ERB_OFFSET = 24.7
ERB_SLOPE = 0.108

# Gammatone starting point for every channel
GAMMATONE_ORDER = 4.0
GAMMATONE_BANDWIDTH = 1.0
GAMMATONE_CHIRP = 0.0

# Bounds applied after each adaptation step; chirp is unbounded.
ORDER_BOUNDS = (1.1, 10.0)
BANDWIDTH_BOUNDS = (0.1, 10.0)

BANK_MAGIC = b"GCBK"
BANK_VERSION = 1


def erb(freq_hz):
    """Equivalent rectangular bandwidth in Hz at ``freq_hz``."""
    f = np.asarray(freq_hz, dtype=float)
    if np.any(f < 0):
        raise ConfigError(f"ERB is undefined for negative frequency {freq_hz!r}")
    out = ERB_OFFSET + ERB_SLOPE * f
    return float(out) if out.ndim == 0 else out


def erb_number(freq_hz):
    """ERB-number (Cam-like) scale: the integral of 1/ERB from 0 to ``freq_hz``."""
    f = np.asarray(freq_hz, dtype=float)
    return np.log1p(ERB_SLOPE * f / ERB_OFFSET) / ERB_SLOPE


def erb_number_to_hz(number):
    n = np.asarray(number, dtype=float)
    return np.expm1(ERB_SLOPE * n) * ERB_OFFSET / ERB_SLOPE


@dataclass(frozen=True)
class GammachirpParams:
    channel_index: int
    center_freq_hz: float
    gamma_order: float = GAMMATONE_ORDER
    bandwidth_scale: float = GAMMATONE_BANDWIDTH
    chirp: float = GAMMATONE_CHIRP

    def validate(self, sample_rate_hz=None):
        if not self.gamma_order > 1:
            raise ConfigError(f"gamma_order must be > 1, got {self.gamma_order}")
        if not self.bandwidth_scale > 0:
            raise ConfigError(f"bandwidth_scale must be > 0, got {self.bandwidth_scale}")
        if not self.center_freq_hz > 0:
            raise ConfigError(f"center_freq_hz must be > 0, got {self.center_freq_hz}")
        if not np.isfinite(self.chirp):
            raise ConfigError(f"chirp must be finite, got {self.chirp}")
        if sample_rate_hz is not None and not self.center_freq_hz < sample_rate_hz / 2:
            raise ConfigError(
                f"channel {self.channel_index}: center frequency {self.center_freq_hz} Hz "
                f"is not below Nyquist ({sample_rate_hz / 2} Hz)"
            )


@dataclass(frozen=True)
class BankConfig:
    num_channels: int
    filter_len_samples: int
    sample_rate_hz: float
    freq_min_hz: float = 20.0
    freq_max_hz: float = None

    def __post_init__(self):
        if self.freq_max_hz is None:
            object.__setattr__(self, "freq_max_hz", 0.4 * self.sample_rate_hz)
        self.validate()

    def validate(self):
        if int(self.num_channels) != self.num_channels or self.num_channels < 1:
            raise ConfigError(f"num_channels must be an integer >= 1, got {self.num_channels}")
        if int(self.filter_len_samples) != self.filter_len_samples or self.filter_len_samples < 2:
            raise ConfigError(f"filter_len_samples must be >= 2, got {self.filter_len_samples}")
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not 0 < self.freq_min_hz < self.freq_max_hz < self.sample_rate_hz / 2:
            raise ConfigError(
                "need 0 < freq_min_hz < freq_max_hz < sample_rate_hz / 2, got "
                f"{self.freq_min_hz}, {self.freq_max_hz}, fs={self.sample_rate_hz}"
            )


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Immutable set of k unit-norm atoms, one per channel, row-stacked."""

    config: BankConfig
    params: tuple
    atoms: np.ndarray = field(repr=False)

    @property
    def num_channels(self):
        return self.config.num_channels

    @property
    def filter_len(self):
        return self.config.filter_len_samples

    def param_arrays(self):
        """Return (chirp, bandwidth_scale, gamma_order) as float arrays of length k."""
        c = np.array([p.chirp for p in self.params], dtype=float)
        b = np.array([p.bandwidth_scale for p in self.params], dtype=float)
        l = np.array([p.gamma_order for p in self.params], dtype=float)
        return c, b, l

    def with_params(self, chirp, bandwidth_scale, gamma_order):
        """Rebuild the bank with new modulation parameters, center frequencies kept."""
        new = [
            replace(p, chirp=float(c), bandwidth_scale=float(b), gamma_order=float(l))
            for p, c, b, l in zip(self.params, chirp, bandwidth_scale, gamma_order)
        ]
        return build_bank(self.config, new)

    def to_bytes(self):
        cfg = self.config
        head = BANK_MAGIC + struct.pack(
            "<IIId dd",
            BANK_VERSION,
            cfg.num_channels,
            cfg.filter_len_samples,
            float(cfg.sample_rate_hz),
            float(cfg.freq_min_hz),
            float(cfg.freq_max_hz),
        )
        recs = b"".join(
            struct.pack(
                "<Idddd", p.channel_index, p.center_freq_hz, p.gamma_order, p.bandwidth_scale, p.chirp
            )
            for p in self.params
        )
        return head + recs + np.ascontiguousarray(self.atoms, dtype="<f8").tobytes()

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, FilterBank):
            return NotImplemented
        return (
            self.config == other.config
            and self.params == other.params
            and np.array_equal(self.atoms, other.atoms)
        )

    __hash__ = None


def center_frequencies(config):
    """k center frequencies uniformly spaced on the ERB-number scale."""
    k = config.num_channels
    if k == 1:
        return [float(config.freq_min_hz)]
    lo, hi = erb_number([config.freq_min_hz, config.freq_max_hz])
    freqs = erb_number_to_hz(np.linspace(lo, hi, k))
    # pin the endpoints against round-off in the log/exp round trip
    freqs[0], freqs[-1] = config.freq_min_hz, config.freq_max_hz
    return [float(f) for f in freqs]


def time_grid(config):
    return np.arange(1, config.filter_len_samples + 1, dtype=float) / config.sample_rate_hz


def _envelope_and_phase(p, t):
    decay = 2 * np.pi * p.bandwidth_scale * erb(p.center_freq_hz)
    log_t = np.log(t)
    envelope = np.exp((p.gamma_order - 1) * log_t - decay * t)
    phase = 2 * np.pi * p.center_freq_hz * t + p.chirp * log_t
    return envelope, phase, log_t


def raw_response(p, config):
    """Unnormalized impulse response on the sampling grid."""
    envelope, phase, _ = _envelope_and_phase(p, time_grid(config))
    return envelope * np.cos(phase)


def raw_response_partials(p, config):
    """Raw response and its partial derivatives w.r.t. chirp, bandwidth scale, order."""
    t = time_grid(config)
    envelope, phase, log_t = _envelope_and_phase(p, t)
    psi = envelope * np.cos(phase)
    d_c = -envelope * np.sin(phase) * log_t
    d_b = -2 * np.pi * erb(p.center_freq_hz) * t * psi
    d_l = log_t * psi
    return psi, d_c, d_b, d_l


def impulse_response(p, config):
    """Sampled, unit-norm Gammachirp impulse response of length F_l."""
    p.validate(config.sample_rate_hz)
    psi = raw_response(p, config)
    norm = np.linalg.norm(psi)
    if not np.isfinite(norm) or norm == 0:
        raise ConfigError(f"channel {p.channel_index}: degenerate impulse response (norm={norm})")
    return psi / norm


def gammatone_params(config):
    return [GammachirpParams(i, f) for i, f in enumerate(center_frequencies(config))]


def build_bank(config, params=None):
    """Assemble a FilterBank; ``params`` defaults to Gammatones on ERB-spaced centers."""
    if params is None:
        params = gammatone_params(config)
    params = tuple(params)
    if len(params) != config.num_channels:
        raise ConfigError(f"expected {config.num_channels} channel params, got {len(params)}")
    atoms = np.empty((config.num_channels, config.filter_len_samples))
    for i, p in enumerate(params):
        atoms[i] = impulse_response(p, config)
    atoms.setflags(write=False)
    return FilterBank(config, params, atoms)


def clamp_params(chirp, bandwidth_scale, gamma_order):
    return (
        np.asarray(chirp, dtype=float),
        np.clip(bandwidth_scale, *BANDWIDTH_BOUNDS),
        np.clip(gamma_order, *ORDER_BOUNDS),
    )


def bank_from_bytes(data):
    if data[:4] != BANK_MAGIC:
        raise FormatError("not a filter bank container (bad magic)")
    head = struct.Struct("<IIId dd")
    version, k, flen, fs, fmin, fmax = head.unpack_from(data, 4)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    rec = struct.Struct("<Idddd")
    off = 4 + head.size
    expected = off + k * rec.size + k * flen * 8
    if len(data) != expected:
        raise FormatError(f"bank container is {len(data)} bytes, expected {expected}")
    config = BankConfig(k, flen, fs, fmin, fmax)
    params = []
    for _ in range(k):
        idx, f, l, b, c = rec.unpack_from(data, off)
        params.append(GammachirpParams(idx, f, l, b, c))
        off += rec.size
    atoms = np.frombuffer(data, dtype="<f8", offset=off).reshape(k, flen).astype(float)
    atoms.setflags(write=False)
    return FilterBank(config, tuple(params), atoms)


def save_bank(bank, path):
    with open(path, "wb") as fh:
        fh.write(bank.to_bytes())


def load_bank(path):
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read())


def dump_bank_csv(bank, fh):
    """One row per channel: parameters followed by the atom samples."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(
        ["channel", "center_freq_hz", "gamma_order", "bandwidth_scale", "chirp"]
        + [f"s{n}" for n in range(bank.filter_len)]
    )
    for p, atom in zip(bank.params, bank.atoms):
        writer.writerow(
            [p.channel_index, repr(p.center_freq_hz), repr(p.gamma_order), repr(p.bandwidth_scale), repr(p.chirp)]
            + [repr(float(x)) for x in atom]
        )
