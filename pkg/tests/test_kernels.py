"""Parity between the numba and numpy kernel paths."""

import numpy as np
import pytest

from lcmkit import kernels

needs_numba = pytest.mark.skipif(
    not kernels.NUMBA_ENABLED, reason="numba path disabled (LCMKIT_NUMBA=0)"
)


def _mixture(rng, k=4, d=3):
    means = rng.standard_normal((k, d))
    variances = rng.uniform(0.05, 0.8, k)
    w = rng.uniform(0.2, 1.0, k)
    return means, variances, np.log(w / w.sum())


@needs_numba
def test_gmm_score_parity():
    rng = np.random.default_rng(0)
    means, variances, logw = _mixture(rng)
    z = rng.standard_normal((32, 3))
    abar = rng.uniform(0.01, 0.99, 32)
    a = kernels.gmm_score_numpy(z, abar, means, variances, logw)
    b = kernels.gmm_score_numba(z, abar, means, variances, logw)
    np.testing.assert_allclose(a, b, atol=1e-13)


@needs_numba
def test_rk4_flow_parity():
    rng = np.random.default_rng(1)
    mc, vc, lwc = _mixture(rng, k=3, d=2)
    mn, vn, lwn = _mixture(rng, k=5, d=2)
    b, steps = 6, 40
    z0 = rng.standard_normal((b, 2))
    t0 = rng.uniform(0.5, 0.9, b)
    t1 = rng.uniform(0.05, 0.3, b)
    frac = np.arange(2 * steps + 1) / (2 * steps)
    tgrid = t0[:, None] + (t1 - t0)[:, None] * frac[None, :]
    # any smooth positive abar profile works for a parity check
    abar = np.exp(-3.0 * tgrid**2)
    ds = -6.0 * tgrid
    h = (t1 - t0) / steps
    for omega in (0.0, 4.0):
        a = kernels.rk4_gmm_flow_numpy(z0, abar, ds, h, mc, vc, lwc, mn, vn, lwn, omega)
        c = kernels.rk4_gmm_flow_numba(z0, abar, ds, h, mc, vc, lwc, mn, vn, lwn, omega)
        np.testing.assert_allclose(a, c, atol=1e-10)


@needs_numba
def test_mlp_parity():
    rng = np.random.default_rng(2)
    b, d, w, e, ncls = 9, 3, 12, 8, 3
    z = rng.standard_normal((b, d))
    phit = rng.standard_normal((b, e))
    phiw = rng.standard_normal((b, e))
    cidx = rng.integers(0, ncls, b)
    w1 = rng.standard_normal((w, d))
    b1 = rng.standard_normal(w)
    pt = rng.standard_normal((w, e))
    pw = rng.standard_normal((w, e))
    emb = rng.standard_normal((ncls, w))
    w2 = rng.standard_normal((w, w))
    b2 = rng.standard_normal(w)
    w3 = rng.standard_normal((w, w))
    b3 = rng.standard_normal(w)
    w4 = rng.standard_normal((d, w))
    b4 = rng.standard_normal(d)
    args = (z, phit, phiw, cidx, w1, b1, pt, pw, emb, w2, b2, w3, b3, w4, b4)
    fa = kernels.mlp_forward_numpy(*args)
    fb = kernels.mlp_forward_numba(*args)
    for x, y in zip(fa, fb):
        np.testing.assert_allclose(x, y, atol=1e-12)
    gout = rng.standard_normal((b, d))
    bargs = (gout, z, phit, phiw, cidx, w2, w3, w4) + tuple(fa[:-1]) + (ncls,)
    ga = kernels.mlp_backward_numpy(*bargs)
    gb = kernels.mlp_backward_numba(*bargs)
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, atol=1e-11)


def test_gmm_score_single_gaussian_closed_form():
    # one component N(m, s^2 I): score = (alpha m - z) / (abar s^2 + 1 - abar)
    rng = np.random.default_rng(3)
    m = np.array([[0.7, -1.2]])
    s2 = np.array([0.3])
    logw = np.array([0.0])
    z = rng.standard_normal((10, 2))
    abar = rng.uniform(0.1, 0.9, 10)
    got = kernels.gmm_score(z, abar, m, s2, logw)
    v = abar * s2[0] + (1 - abar)
    expected = (np.sqrt(abar)[:, None] * m - z) / v[:, None]
    np.testing.assert_allclose(got, expected, atol=1e-12)
