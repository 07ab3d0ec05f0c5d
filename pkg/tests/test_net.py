import numpy as np
import pytest

from lcmkit.net import (
    Denoiser,
    EmaPair,
    StaleCacheError,
    default_freqs,
    ema_update,
    fourier_embed,
    make_ema,
    net_grad,
)


def small_net(**kw):
    args = dict(d_in=3, width=16, embed_dim=8, n_classes=2,
                omega_conditioned=True, seed=4)
    args.update(kw)
    return Denoiser(**args)


def test_theta_length_accounting():
    den = small_net()
    d, w, e = 3, 16, 8
    layers = (d + 1) * w + 2 * (w + 1) * w + (w + 1) * d
    embeds = w * e + w * e + (2 + 1) * w  # t-proj, omega-proj, class table
    assert den.n_params == layers + embeds
    uncond = small_net(omega_conditioned=False)
    assert uncond.n_params == den.n_params - w * e


def test_zero_theta_zero_output():
    den = small_net()
    den.theta[...] = 0.0
    out = den.forward(np.ones(3), 0.3, omega=5.0, c=1)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_determinism_same_seed():
    a = small_net().forward(np.ones(3), 0.5, omega=3.0, c=0)
    b = small_net().forward(np.ones(3), 0.5, omega=3.0, c=0)
    np.testing.assert_array_equal(a, b)


def test_forward_validation():
    den = small_net()
    with pytest.raises(ValueError):
        den.forward(np.ones(4), 0.5, omega=3.0)
    with pytest.raises(ValueError):
        den.forward(np.ones(3), 0.5)  # missing omega
    uncond = small_net(omega_conditioned=False)
    with pytest.raises(ValueError):
        uncond.forward(np.ones(3), 0.5, omega=3.0)


def test_gradient_finite_difference():
    rng = np.random.default_rng(7)
    den = small_net()
    z = rng.standard_normal((5, 3))
    t = rng.uniform(0, 1, 5)
    om = rng.uniform(0, 12, 5)
    c = np.array([0, 1, -1, 0, 1])
    target = rng.standard_normal((5, 3))
    out, cache = den.forward(z, t, omega=om, c=c, want_cache=True)
    g = net_grad(den, 2 * (out - target), cache)
    h = 1e-5
    idx = rng.choice(den.n_params, 200, replace=False)
    worst = 0.0
    for i in idx:
        old = den.theta[i]
        den.theta[i] = old + h
        lp = np.sum((den.forward(z, t, omega=om, c=c) - target) ** 2)
        den.theta[i] = old - h
        lm = np.sum((den.forward(z, t, omega=om, c=c) - target) ** 2)
        den.theta[i] = old
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8))
    assert worst < 1e-4


def test_single_linear_layer_closed_form_gradient():
    # strip the net to its last layer: out = w4 a3 + b4 with a3 cached;
    # squared loss gradient must be 2 (out - y) a3^T
    rng = np.random.default_rng(8)
    den = small_net()
    z = rng.standard_normal((4, 3))
    out, cache = den.forward(z, 0.4, omega=2.0, c=None, want_cache=True)
    y = rng.standard_normal(out.shape)
    g = net_grad(den, 2 * (out - y), cache)
    gw4 = den.view("w4", g)
    expected = (2 * (out - y)).T @ cache.a3
    np.testing.assert_allclose(gw4, expected, atol=1e-12)
    gb4 = den.view("b4", g)
    np.testing.assert_allclose(gb4, (2 * (out - y)).sum(axis=0), atol=1e-12)


def test_zero_upstream_gradient():
    den = small_net()
    out, cache = den.forward(np.ones(3), 0.2, omega=1.0, want_cache=True)
    g = net_grad(den, np.zeros(3), cache)
    np.testing.assert_array_equal(g, np.zeros(den.n_params))


def test_stale_cache_detection():
    den = small_net()
    out, cache = den.forward(np.ones(3), 0.2, omega=1.0, want_cache=True)
    den.apply_delta(np.full(den.n_params, 1e-3))
    with pytest.raises(StaleCacheError):
        net_grad(den, np.ones(3), cache)


def test_fourier_embed_properties():
    freqs = default_freqs(8)
    e0 = fourier_embed(0.0, 8, freqs)
    np.testing.assert_array_equal(e0[:4], np.zeros(4))
    np.testing.assert_array_equal(e0[4:], np.ones(4))
    for v in (0.17, 3.0, 13.9):
        e = fourier_embed(v, 8, freqs)
        assert np.linalg.norm(e) == pytest.approx(np.sqrt(4), rel=1e-12)
    with pytest.raises(ValueError):
        fourier_embed(1.0, 7, freqs)
    with pytest.raises(ValueError):
        fourier_embed(1.0, 8, freqs[:2])


def test_fourier_embed_distinct_omegas():
    # pairwise-distance scan over the guidance range
    freqs = default_freqs(16)
    omegas = np.linspace(2.0, 14.0, 241)
    embs = fourier_embed(omegas, 16, freqs)
    d2 = np.sum((embs[:, None, :] - embs[None, :, :]) ** 2, axis=2)
    d2 += np.eye(len(omegas))
    assert d2.min() > 1e-6


def test_omega_projection_zero_at_init():
    den = small_net()
    emb = fourier_embed(7.3, 8, den.base_freqs)
    np.testing.assert_array_equal(den.omega_projection(emb), np.zeros(16))


def test_fresh_conditioned_equals_unconditioned_teacher():
    teacher = small_net(omega_conditioned=False, seed=21)
    cond = small_net(omega_conditioned=True, seed=99)
    cond.theta[: teacher.n_params] = teacher.theta
    cond.theta[teacher.n_params:] = 0.0
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 3))
    t = rng.uniform(0, 1, 6)
    for om in (0.0, 2.0, 14.0):
        np.testing.assert_array_equal(
            teacher.forward(z, t, c=1), cond.forward(z, t, omega=om, c=1)
        )


def test_projection_changes_after_gradient_step():
    rng = np.random.default_rng(5)
    den = small_net()
    z = rng.standard_normal((8, 3))
    out, cache = den.forward(z, 0.5, omega=6.0, c=0, want_cache=True)
    g = net_grad(den, 2 * out, cache)  # pull toward zero, nonzero loss
    den.apply_delta(-0.05 * g)
    emb = fourier_embed(6.0, 8, den.base_freqs)
    assert np.linalg.norm(den.omega_projection(emb)) > 0


def test_ema_update_cases():
    den = small_net()
    pair = make_ema(den, mu=1.0)
    before = pair.theta_target.copy()
    den.theta += 0.5
    ema_update(pair, 1.0)
    np.testing.assert_array_equal(pair.theta_target, before)
    ema_update(pair, 0.0)
    np.testing.assert_array_equal(pair.theta_target, den.theta)
    with pytest.raises(ValueError):
        ema_update(pair, 2.0)


def test_ema_paper_rate():
    den = small_net()
    pair = make_ema(den, mu=0.999943)
    den.theta += 1.0
    before = pair.theta_target.copy()
    ema_update(pair)
    moved = pair.theta_target - before
    np.testing.assert_allclose(moved, np.full_like(moved, 5.7e-5), rtol=1e-9)


def test_ema_contraction():
    den = small_net()
    pair = make_ema(den, mu=0.9)
    den.theta += 1.0
    gaps = []
    for _ in range(5):
        ema_update(pair)
        gaps.append(np.linalg.norm(pair.theta_target - den.theta))
    assert np.all(np.diff(gaps) < 0)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        EmaPair(theta_online=np.zeros(3), theta_target=np.zeros(4))
