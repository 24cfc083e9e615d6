import io

import numpy as np
import pytest

from conftest import fd_param_grads, random_small_bank
from sparse_audio.alca import (
    AdaptConfig,
    ParamGradients,
    adamax_step,
    adapt,
    forward_backward,
    grad_params,
    scaled_energy,
)
from sparse_audio.errors import AdaptationError, ConfigError
from sparse_audio.gammachirp import (
    BANDWIDTH_BOUNDS,
    ORDER_BOUNDS,
    BankConfig,
    GammachirpParams,
    build_bank,
    impulse_response,
)
from sparse_audio.lca import Dictionary, LcaConfig, energy, reconstruct, run_lca
from sparse_audio.optim import AdamaxState


@pytest.fixture
def dict8():
    bank = build_bank(BankConfig(6, 32, 8000.0, 200.0, 3000.0))
    return Dictionary.for_length(bank, 16, 160)


def test_scaled_energy_closed_forms(dict8, rng):
    a = np.zeros(dict8.shape)
    a[0, 1], a[2, 3], a[5, 0] = 0.3, -0.7, 1.5
    s = reconstruct(dict8, a)
    assert scaled_energy(s, dict8, a, 0.1, 2.0) == pytest.approx(0.03, abs=1e-15)
    noisy = s + rng.normal(size=s.size)
    assert scaled_energy(noisy, dict8, a, 0.1, 1.0) == energy(noisy, dict8, a, 0.1)
    resid = reconstruct(dict8, a) - noisy
    assert scaled_energy(noisy, dict8, a, 0.1, 0.0) == pytest.approx(0.5 * resid @ resid, rel=1e-14)
    with pytest.raises(ConfigError):
        scaled_energy(s, dict8, a, 0.1, -1.0)


def test_zero_signal_zero_gradient(dict8):
    g = grad_params(np.zeros(dict8.signal_len_samples), dict8, LcaConfig(0.05), AdaptConfig())
    for arr in (g.d_c, g.d_b, g.d_l):
        assert not np.any(arr)


def test_gradient_matches_finite_differences(rng):
    checked = 0
    while checked < 5:
        bank = random_small_bank(rng, k=3, flen=16)
        stride = 8
        length = 16 + 5 * stride
        s = rng.normal(size=length)
        cfg = LcaConfig(0.3, step_ratio=0.05, num_iterations=64)
        fd, fixed = fd_param_grads(s, bank, stride, cfg, alpha=1.0)
        if not fixed:
            continue
        g = grad_params(s, Dictionary(bank, stride, length), cfg, AdaptConfig(tbptt_window=64))
        for ana, key in ((g.d_c, "chirp"), (g.d_b, "bandwidth_scale"), (g.d_l, "gamma_order")):
            big = np.abs(ana) > 1e-8
            rel = np.abs(ana - fd[key])[big] / np.abs(ana[big])
            assert np.all(rel < 1e-4), (key, rel)
        checked += 1


def test_truncated_window_differs_from_full(rng):
    bank = random_small_bank(rng, k=3, flen=16)
    d = Dictionary(bank, 8, 56)
    s = rng.normal(size=56)
    cfg = LcaConfig(0.3, step_ratio=0.05)
    full = grad_params(s, d, cfg, AdaptConfig(tbptt_window=64))
    short = grad_params(s, d, cfg, AdaptConfig(tbptt_window=4))
    assert np.all(np.isfinite(short.d_c))
    assert not np.allclose(full.d_c, short.d_c)
    with pytest.raises(ConfigError):
        grad_params(s, d, cfg, AdaptConfig(tbptt_window=65))


def test_duplicate_channels_get_equal_gradients(rng):
    cfg_b = BankConfig(3, 32, 8000.0, 200.0, 3000.0)
    p = GammachirpParams(0, 900.0, 3.5, 1.2, 0.4)
    other = GammachirpParams(2, 2400.0)
    bank = build_bank(cfg_b, [p, GammachirpParams(1, 900.0, 3.5, 1.2, 0.4), other])
    d = Dictionary.for_length(bank, 16, 128)
    s = rng.normal(size=d.signal_len_samples)
    g = grad_params(s, d, LcaConfig(0.2, step_ratio=0.05), AdaptConfig())
    for arr in (g.d_c, g.d_b, g.d_l):
        assert arr[0] == pytest.approx(arr[1], rel=1e-12)


def test_alpha_only_enters_through_sparsity_path(dict8, rng):
    s = rng.normal(size=dict8.signal_len_samples)
    cfg = LcaConfig(0.2, step_ratio=0.05)
    g0, g1, g2 = (grad_params(s, dict8, cfg, AdaptConfig(sparsity_scale=a)) for a in (0.0, 1.0, 2.0))
    for x0, x1, x2 in ((g0.d_c, g1.d_c, g2.d_c), (g0.d_b, g1.d_b, g2.d_b), (g0.d_l, g1.d_l, g2.d_l)):
        np.testing.assert_allclose(x2 - x0, 2 * (x1 - x0), atol=1e-10, rtol=0)


def test_nonfinite_gradient_reports_channel():
    g = ParamGradients(np.zeros(3), np.array([0.0, np.nan, 0.0]), np.zeros(3))
    with pytest.raises(AdaptationError) as info:
        g.check_finite()
    assert info.value.channel == 1


def _params(k=4):
    return {"chirp": np.zeros(k), "bandwidth_scale": np.ones(k), "gamma_order": np.full(k, 4.0)}


def test_adamax_zero_gradient_is_noop():
    params = _params()
    zero = ParamGradients(np.zeros(4), np.zeros(4), np.zeros(4))
    new, state = adamax_step(params, zero, AdamaxState(), AdaptConfig(learning_rate=0.1))
    for key in params:
        np.testing.assert_array_equal(new[key], params[key])
    assert state.step_count == 1


def test_adamax_first_step_moves_by_learning_rate():
    params = _params()
    g = ParamGradients(np.array([0.3, -2.0, 1e-3, -5e-6]), np.array([1.0, -1.0, 2.0, -3.0]), np.array([4.0, -0.1, 0.2, -0.3]))
    new, _ = adamax_step(params, g, AdamaxState(), AdaptConfig(learning_rate=0.05))
    for key, grad in zip(("chirp", "bandwidth_scale", "gamma_order"), (g.d_c, g.d_b, g.d_l)):
        np.testing.assert_allclose(new[key] - params[key], -0.05 * np.sign(grad), rtol=1e-12, atol=0)


def test_adamax_second_identical_step_not_larger():
    params = _params()
    g = ParamGradients(np.array([0.3, -2.0, 1.0, 1.0]), np.full(4, 0.5), np.full(4, -0.5))
    acfg = AdaptConfig(learning_rate=0.05)
    p1, st = adamax_step(params, g, AdamaxState(), acfg)
    p2, st = adamax_step(p1, g, st, acfg)
    for key in params:
        first = np.abs(p1[key] - params[key])
        second = np.abs(p2[key] - p1[key])
        assert np.all(second <= first + 1e-12)
        assert np.all(st.inf_norm[key] >= 0)


def test_adamax_clamps():
    params = {"chirp": np.zeros(2), "bandwidth_scale": np.array([0.1, 10.0]), "gamma_order": np.array([1.1, 10.0])}
    g = ParamGradients(np.zeros(2), np.array([1.0, -1.0]), np.array([1.0, -1.0]))
    new, _ = adamax_step(params, g, AdamaxState(), AdaptConfig(learning_rate=1.0))
    np.testing.assert_array_equal(new["bandwidth_scale"], [0.1, 10.0])
    np.testing.assert_array_equal(new["gamma_order"], [1.1, 10.0])


def _chirp_corpus(bank, n, rng, length=512, stride=32, flen=64):
    """Gammachirp tones with a shared chirp of 5, frame-aligned onsets, light noise."""
    fs = bank.config.sample_rate_hz
    gen_cfg = BankConfig(1, flen, fs, 20.0, 0.45 * fs)
    out = []
    for _ in range(n):
        s = np.zeros(length)
        for _ in range(2):
            f = bank.params[rng.integers(bank.num_channels)].center_freq_hz
            tone = impulse_response(GammachirpParams(0, f, 4.0, 1.0, 5.0), gen_cfg)
            off = rng.integers(0, (length - flen) // stride + 1) * stride
            s[off : off + flen] += rng.uniform(0.5, 1.0) * rng.choice([-1, 1]) * tone
        out.append(s + 0.01 * rng.normal(size=length))
    return out


def test_adapt_identity_cases(rng):
    bank = build_bank(BankConfig(6, 64, 8000.0, 150.0, 3000.0))
    corpus = _chirp_corpus(bank, 4, rng)
    cfg = LcaConfig(0.05)
    same, trace = adapt(corpus, bank, 32, cfg, AdaptConfig(learning_rate=0.0, num_epochs=2, batch_size=2))
    assert same == bank and same.to_bytes() == bank.to_bytes()
    assert len(trace.epochs) == 2
    same, trace = adapt(corpus, bank, 32, cfg, AdaptConfig(num_epochs=0))
    assert same is bank and trace.epochs == []
    with pytest.raises(ConfigError):
        adapt([], bank, 32, cfg, AdaptConfig())
    with pytest.raises(ConfigError):
        adapt(corpus, bank, 32, LcaConfig(0.05, num_iterations=8), AdaptConfig(tbptt_window=16))


def test_adapt_keeps_unit_norm_bounds_and_improves(rng):
    bank = build_bank(BankConfig(8, 64, 8000.0, 150.0, 3000.0))
    corpus = _chirp_corpus(bank, 12, rng)
    cfg = LcaConfig(0.05)
    seen = []

    def check(epoch, bk, _trace):
        np.testing.assert_allclose(np.linalg.norm(bk.atoms, axis=1), 1.0, atol=1e-12, rtol=0)
        c, b, l = bk.param_arrays()
        assert np.all((b >= BANDWIDTH_BOUNDS[0]) & (b <= BANDWIDTH_BOUNDS[1]))
        assert np.all((l >= ORDER_BOUNDS[0]) & (l <= ORDER_BOUNDS[1]))
        seen.append(epoch)

    adapted, trace = adapt(corpus, bank, 32, cfg, AdaptConfig(learning_rate=0.2, batch_size=4, num_epochs=10), callback=check)
    assert seen == list(range(1, 11))
    assert np.mean(trace.mean_scaled_energy[-5:]) < trace.mean_scaled_energy[0]
    assert adapted != bank
    buf = io.StringIO()
    trace.write_csv(buf)
    assert buf.getvalue().splitlines()[0] == "epoch,mean_scaled_energy,mean_L0,mean_mse"


def test_adapt_is_seed_deterministic(rng):
    bank = build_bank(BankConfig(4, 32, 8000.0, 200.0, 3000.0))
    corpus = _chirp_corpus(bank, 4, rng, length=256, stride=16, flen=32)
    acfg = AdaptConfig(learning_rate=0.1, batch_size=2, num_epochs=2)
    b1, _ = adapt(corpus, bank, 16, LcaConfig(0.05), acfg, seed=7)
    b2, _ = adapt(corpus, bank, 16, LcaConfig(0.05), acfg, seed=7)
    assert b1.to_bytes() == b2.to_bytes()


def test_forward_backward_reports_energy_terms(dict8, rng):
    s = rng.normal(size=dict8.signal_len_samples)
    cfg = LcaConfig(0.2, step_ratio=0.05)
    res = forward_backward(s, dict8, cfg, AdaptConfig(sparsity_scale=2.0))
    a = run_lca(s, dict8, cfg).state.activations
    assert res.l0 == np.count_nonzero(a)
    assert res.scaled_energy == pytest.approx(scaled_energy(s, dict8, a, 0.2, 2.0), rel=1e-12)


def test_adapt_config_from_mapping(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"learning_rate": 0.5, "tbptt_window": 8}')
    acfg = AdaptConfig.from_json(path)
    assert acfg.learning_rate == 0.5 and acfg.tbptt_window == 8 and acfg.adamax_beta2 == 0.999
    with pytest.raises(ConfigError):
        AdaptConfig.from_mapping({"nope": 1})
