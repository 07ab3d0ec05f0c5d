import numpy as np
import pytest

from lcmkit.schedule import (
    forward_sample,
    forward_sample_batch,
    make_time_grid,
    make_vp_schedule,
)

DEFAULTS = dict(n_steps=1000, beta_min=1e-4, beta_max=0.02)


@pytest.fixture(scope="module")
def sched():
    return make_vp_schedule(**DEFAULTS)


def test_index_zero_boundary(sched):
    assert sched.alpha_bar[0] == 1.0
    alpha, sigma = sched.alpha_sigma(0)
    assert alpha == 1.0 and sigma == 0.0


def test_first_factor(sched):
    alpha, _ = sched.alpha_sigma(1)
    assert alpha == pytest.approx(np.sqrt(1 - 1e-4), abs=1e-15)


def test_final_alpha_bar_against_log_sum_oracle(sched):
    # independent oracle: sum of logs, exponentiated
    betas = np.linspace(1e-4, 0.02, 1000)
    expected = np.exp(np.sum(np.log1p(-betas)))
    assert sched.alpha_bar[1000] == pytest.approx(expected, rel=1e-12)
    # frozen value from the oracle above
    assert sched.alpha_bar[1000] == pytest.approx(4.035829765375687e-05, rel=1e-10)
    _, sigma = sched.alpha_sigma(1000)
    assert sigma == pytest.approx(0.99997982064757, abs=1e-12)


def test_vp_identity_every_index(sched):
    alpha = np.sqrt(sched.alpha_bar)
    sigma = np.sqrt(1 - sched.alpha_bar)
    np.testing.assert_allclose(alpha**2 + sigma**2, 1.0, atol=1e-12)


def test_monotonicity(sched):
    assert np.all(np.diff(sched.alpha_bar) < 0)
    lam = [sched.log_snr(n) for n in range(1, 1001)]
    assert np.all(np.diff(lam) < 0)


def test_log_snr_values(sched):
    assert sched.log_snr(1) == pytest.approx(
        np.log(np.sqrt(1 - 1e-4) / np.sqrt(1e-4)), rel=1e-12
    )
    with pytest.raises(ZeroDivisionError):
        sched.log_snr(0)


def test_alpha_equals_sigma_crossing():
    s = make_vp_schedule(200, 1e-3, 0.05)
    lam = np.array([s.log_snr(n) for n in range(1, 201)])
    n_cross = 1 + int(np.argmin(np.abs(lam)))
    a, sg = s.alpha_sigma(n_cross)
    assert abs(np.log(a / sg)) < 0.05


def test_drift_diffusion_sign_and_positivity(sched):
    for n in (1, 100, 500, 999):
        f, g2 = sched.drift_diffusion(n)
        assert f < 0  # log alpha decreasing
        assert g2 >= 0


def test_drift_near_constant_alpha():
    s = make_vp_schedule(100, 1e-9, 1e-9)
    f, _ = s.drift_diffusion(50)
    assert abs(f) < 1e-6


def test_g2_matches_beta_scaling_oracle(sched):
    # continuous-time VP relation: g^2(t_n) ~ beta_n * N (T = 1); the
    # central-difference stencil sits half an index off the oracle, so
    # the comparison is loose where beta varies fastest relative to itself
    for n in (10, 200, 500, 900):
        _, g2 = sched.drift_diffusion(n)
        expected = sched.betas[n] * sched.n_steps
        assert g2 == pytest.approx(expected, rel=0.05)


def test_sigma2_ode_recovery(sched):
    # integrating d sigma^2/dt = g^2 + 2 f sigma^2 over the grid recovers
    # sigma^2(t_N) within 1% (trapezoid on central-difference coefficients)
    h = 1.0 / sched.n_steps
    sig2 = 1.0 - sched.alpha_bar[1]
    for n in range(1, sched.n_steps - 1):
        f0, g0 = sched.drift_diffusion(n)
        f1, g1 = sched.drift_diffusion(n + 1)
        d0 = g0 + 2 * f0 * sig2
        sig2_pred = sig2 + h * d0
        d1 = g1 + 2 * f1 * sig2_pred
        sig2 = sig2 + 0.5 * h * (d0 + d1)
    target = 1.0 - sched.alpha_bar[sched.n_steps - 1]
    assert sig2 == pytest.approx(target, rel=0.01)


def test_forward_sample_cases(sched):
    z0 = np.array([1.5, -2.0])
    eps = np.array([0.3, 0.7])
    np.testing.assert_allclose(forward_sample(z0, 0, eps * 0, sched), z0)
    alpha, sigma = sched.alpha_sigma(400)
    np.testing.assert_allclose(forward_sample(z0, 400, eps * 0, sched), alpha * z0)
    np.testing.assert_allclose(forward_sample(z0 * 0, 400, eps, sched), sigma * eps)


def test_forward_sample_affine(sched):
    rng = np.random.default_rng(0)
    z0, y0, eps = rng.standard_normal((3, 4))
    a, b = 1.7, -0.4
    lhs = forward_sample(a * z0 + b * y0, 300, eps, sched)
    rhs = a * forward_sample(z0, 300, eps / (a + b), sched) + b * forward_sample(
        y0, 300, eps / (a + b), sched
    )
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_forward_sample_batch_matches_scalar(sched):
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    n = np.array([1, 10, 100, 500, 1000])
    batch = forward_sample_batch(z0, n, eps, sched)
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward_sample(z0[i], n[i], eps[i], sched))


def test_forward_sample_dim_mismatch(sched):
    with pytest.raises(ValueError):
        forward_sample(np.zeros(3), 10, np.zeros(4), sched)


def test_make_time_grid(sched):
    grid = make_time_grid(sched, 1)
    assert grid.n_max == 999
    grid = make_time_grid(sched, 20)
    assert grid.n_max == 980
    assert grid.indices[0] == 1 and grid.indices[-1] == 980
    assert np.all(grid.indices + grid.k <= sched.n_steps)
    with pytest.raises(ValueError):
        make_time_grid(sched, 1000)
    with pytest.raises(ValueError):
        make_time_grid(sched, 0)


def test_invalid_schedule_params():
    with pytest.raises(ValueError):
        make_vp_schedule(1, 1e-4, 0.02)
    with pytest.raises(ValueError):
        make_vp_schedule(100, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_vp_schedule(100, 0.03, 0.02)
    with pytest.raises(ValueError):
        make_vp_schedule(100, 0.5, 1.0)


def test_index_out_of_range(sched):
    with pytest.raises(IndexError):
        sched.alpha_sigma(1001)
    with pytest.raises(IndexError):
        sched.drift_diffusion(1000)
    with pytest.raises(IndexError):
        sched.drift_diffusion(0)


def test_continuous_extension_interpolates(sched):
    s_cont = sched.log_alpha_bar_cont(sched.t_values)
    np.testing.assert_allclose(s_cont, np.log(sched.alpha_bar), atol=5e-9)


def test_continuous_derivative_matches_finite_difference(sched):
    t = np.array([0.1, 0.4, 0.85])
    h = 1e-4  # large enough to beat log-Gamma cancellation noise
    fd = (sched.log_alpha_bar_cont(t + h) - sched.log_alpha_bar_cont(t - h)) / (2 * h)
    np.testing.assert_allclose(sched.dlog_alpha_bar_dt(t), fd, rtol=1e-5)


def test_degenerate_beta_range_extension():
    s = make_vp_schedule(50, 0.01, 0.01)
    np.testing.assert_allclose(
        s.log_alpha_bar_cont(s.t_values), np.log(s.alpha_bar), atol=1e-10
    )
    np.testing.assert_allclose(
        s.dlog_alpha_bar_dt(np.array([0.3])), 50 * np.log1p(-0.01), rtol=1e-12
    )
