import math

import numpy as np
import pytest

from sparse_audio.gammachirp import BankConfig, GammachirpParams, build_bank


def eq9_dense(atoms, stride, num_frames):
    """D built row-by-row as D^T: for each channel, one row per frame offset."""
    k, flen = atoms.shape
    length = flen + (num_frames - 1) * stride
    rows = []
    for i in range(k):
        for j in range(num_frames):
            row = [0.0] * length
            for n in range(flen):
                row[j * stride + n] = float(atoms[i, n])
            rows.append(row)
    return np.array(rows).T


def dense_lca_step(v, a, p, gram_minus_eye, eta, lam):
    """Textbook Euler step on flat vectors."""
    v_new = eta * (p - gram_minus_eye @ a) + (1 - eta) * v
    a_new = np.array([0.0 if abs(x) < lam else x for x in v_new])
    return v_new, a_new


def scalar_gammachirp(n_samples, fs, f, l, b, c):
    """Per-sample evaluation with the math module, then unit-norm scaling."""
    erb = 24.7 + 0.108 * f
    raw = []
    for n in range(n_samples):
        t = (n + 1) / fs
        raw.append(t ** (l - 1) * math.exp(-2 * math.pi * b * erb * t) * math.cos(2 * math.pi * f * t + c * math.log(t)))
    norm = math.sqrt(math.fsum(x * x for x in raw))
    return np.array([x / norm for x in raw])


def random_small_bank(rng, k=None, flen=None, fs=8000.0):
    k = k or int(rng.integers(1, 6))
    flen = flen or int(rng.integers(4, 17))
    cfg = BankConfig(k, flen, fs, 100.0, 3000.0)
    freqs = np.sort(rng.uniform(100, 3000, k))
    params = [
        GammachirpParams(i, float(f), rng.uniform(1.5, 6), rng.uniform(0.3, 2), rng.uniform(-2, 2))
        for i, f in enumerate(freqs)
    ]
    return build_bank(cfg, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_bank():
    return build_bank(BankConfig(4, 16, 8000.0, 200.0, 3000.0))


def fd_param_grads(signal, bank, stride, cfg, alpha, h=1e-5):
    """Central differences of scaled_energy(encode(.)) per (c, b, l) and channel.

    Also reports whether every perturbed run kept the exact active-set
    trajectory of the unperturbed run.
    """
    from dataclasses import replace

    from sparse_audio.alca import scaled_energy
    from sparse_audio.lca import Dictionary, run_lca

    def run(bk):
        d = Dictionary(bk, stride, len(signal))
        r = run_lca(signal, d, cfg, record=True)
        masks = [np.abs(v) >= cfg.threshold for v, _ in r.history]
        return scaled_energy(signal, d, r.state.activations, cfg.threshold, alpha), masks

    _, base = run(bank)
    fixed = True
    out = {}
    for key in ("chirp", "bandwidth_scale", "gamma_order"):
        g = np.zeros(bank.num_channels)
        for i in range(bank.num_channels):
            values = []
            for sign in (1, -1):
                params = list(bank.params)
                params[i] = replace(params[i], **{key: getattr(params[i], key) + sign * h})
                e, masks = run(build_bank(bank.config, params))
                fixed &= all(np.array_equal(m, b) for m, b in zip(masks, base))
                values.append(e)
            g[i] = (values[0] - values[1]) / (2 * h)
        out[key] = g
    return out, fixed


def toy_spike_dataset(rng, n, k=20, steps=30, hi=0.3, lo=0.05):
    """Two classes; class c fires channels of its half at rate ``hi`` and the other half at ``lo``."""
    from sparse_audio.pipeline import EventRepresentation

    reps = []
    half = k // 2
    for i in range(n):
        label = i % 2
        rates = np.full(k, lo)
        rates[label * half : (label + 1) * half] = hi
        dense = (rng.random((k, steps)) < rates[:, None]).astype(float)
        reps.append(EventRepresentation.from_dense(dense, kind="external_spike_histogram", label=label))
    return reps
