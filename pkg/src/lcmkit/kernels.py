"""Hot numeric kernels with numba-jitted and pure-numpy twins.

Every kernel exists in two interchangeable implementations:

* ``*_numpy`` — vectorized numpy, always available,
* ``*_numba`` — loop-style source compiled with ``@njit``.

The active set is chosen once at import time: numba is used when it is
importable and the environment variable ``LCMKIT_NUMBA`` is not set to
``0``/``false``.  ``benchmarks/bench_kernels.py`` times both paths; the
parity tests assert they agree.

Kernels are exception-free and operate on plain float64 arrays so the
same call sites work on either path.  Schedule coefficients (cumulative
signal variance and its log-derivative) are precomputed by the caller,
which keeps special functions out of the jitted code.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and os.environ.get("LCMKIT_NUMBA", "1").lower() not in (
    "0",
    "false",
)

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian-mixture score
# ---------------------------------------------------------------------------

def gmm_score_numpy(z, abar, means, variances, logw):
    """Score of the noised mixture marginal at signal level ``abar``.

    The clean mixture sum_k w_k N(m_k, s_k^2 I) pushed through
    x -> alpha x + sigma eps (alpha^2 = abar, sigma^2 = 1 - abar) stays a
    mixture with means alpha m_k and isotropic variances
    abar s_k^2 + (1 - abar).  Returns grad_z log q(z), shape (B, d).
    """
    alpha = np.sqrt(abar)[:, None]
    v = abar[:, None] * variances[None, :] + (1.0 - abar)[:, None]  # (B, K)
    diff = alpha[:, None] * means[None, :, :] - z[:, None, :]  # (B, K, d)
    d = z.shape[1]
    loglik = (
        logw[None, :]
        - 0.5 * d * (np.log(v) + _LOG_2PI)
        - 0.5 * np.sum(diff * diff, axis=2) / v
    )
    loglik -= np.max(loglik, axis=1, keepdims=True)
    resp = np.exp(loglik)
    resp /= np.sum(resp, axis=1, keepdims=True)
    return np.sum((resp / v)[:, :, None] * diff, axis=1)


def _gmm_score_loops(z, abar, means, variances, logw):
    n, d = z.shape
    k = means.shape[0]
    out = np.empty((n, d))
    loglik = np.empty(k)
    diff = np.empty((k, d))
    for i in range(n):
        ab = abar[i]
        alpha = math.sqrt(ab)
        top = -1e300
        for j in range(k):
            v = ab * variances[j] + (1.0 - ab)
            sq = 0.0
            for c in range(d):
                dd = alpha * means[j, c] - z[i, c]
                diff[j, c] = dd
                sq += dd * dd
            loglik[j] = logw[j] - 0.5 * d * (math.log(v) + _LOG_2PI) - 0.5 * sq / v
            if loglik[j] > top:
                top = loglik[j]
        norm = 0.0
        for j in range(k):
            loglik[j] = math.exp(loglik[j] - top)
            norm += loglik[j]
        for c in range(d):
            acc = 0.0
            for j in range(k):
                v = ab * variances[j] + (1.0 - ab)
                acc += loglik[j] / norm / v * diff[j, c]
            out[i, c] = acc
    return out


# ---------------------------------------------------------------------------
# RK4 integration of the (augmented) probability-flow field
# ---------------------------------------------------------------------------
#
# The field is v(z, t) = f z - (g^2 / 2) * score(z, t) which, for the VP
# relations f = s'/2 and g^2 = -s' (s = log abar), collapses to
# v = (s'/2) (z + score).  With guidance weight w the score is the
# combination (1 + w) score_cond - w score_uncond.
#
# abar_grid / ds_grid hold abar(t) and s'(t) at the 2S+1 half-step times
# of each batch row, so rows may integrate over different spans.

def _rk4_field_numpy(z, ab, ds, mc, vc, lwc, mn, vn, lwn, omega):
    score = gmm_score_numpy(z, ab, mc, vc, lwc)
    if omega != 0.0:
        score = (1.0 + omega) * score - omega * gmm_score_numpy(z, ab, mn, vn, lwn)
    return 0.5 * ds[:, None] * (z + score)


def rk4_gmm_flow_numpy(z0, abar_grid, ds_grid, h, mc, vc, lwc, mn, vn, lwn, omega):
    z = z0.copy()
    steps = (abar_grid.shape[1] - 1) // 2
    hcol = h[:, None]
    for j in range(steps):
        a0, am, a1 = abar_grid[:, 2 * j], abar_grid[:, 2 * j + 1], abar_grid[:, 2 * j + 2]
        d0, dm, d1 = ds_grid[:, 2 * j], ds_grid[:, 2 * j + 1], ds_grid[:, 2 * j + 2]
        k1 = _rk4_field_numpy(z, a0, d0, mc, vc, lwc, mn, vn, lwn, omega)
        k2 = _rk4_field_numpy(z + 0.5 * hcol * k1, am, dm, mc, vc, lwc, mn, vn, lwn, omega)
        k3 = _rk4_field_numpy(z + 0.5 * hcol * k2, am, dm, mc, vc, lwc, mn, vn, lwn, omega)
        k4 = _rk4_field_numpy(z + hcol * k3, a1, d1, mc, vc, lwc, mn, vn, lwn, omega)
        z += (hcol / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


def _rk4_gmm_flow_loops(z0, abar_grid, ds_grid, h, mc, vc, lwc, mn, vn, lwn, omega):
    n, d = z0.shape
    steps = (abar_grid.shape[1] - 1) // 2
    z = z0.copy()
    zs = np.empty((1, d))
    for i in range(n):
        hi = h[i]
        for j in range(steps):
            m0 = 2 * j
            for c in range(d):
                zs[0, c] = z[i, c]
            k1 = _field_row(zs, abar_grid[i, m0], ds_grid[i, m0], mc, vc, lwc, mn, vn, lwn, omega)
            for c in range(d):
                zs[0, c] = z[i, c] + 0.5 * hi * k1[0, c]
            k2 = _field_row(zs, abar_grid[i, m0 + 1], ds_grid[i, m0 + 1], mc, vc, lwc, mn, vn, lwn, omega)
            for c in range(d):
                zs[0, c] = z[i, c] + 0.5 * hi * k2[0, c]
            k3 = _field_row(zs, abar_grid[i, m0 + 1], ds_grid[i, m0 + 1], mc, vc, lwc, mn, vn, lwn, omega)
            for c in range(d):
                zs[0, c] = z[i, c] + hi * k3[0, c]
            k4 = _field_row(zs, abar_grid[i, m0 + 2], ds_grid[i, m0 + 2], mc, vc, lwc, mn, vn, lwn, omega)
            for c in range(d):
                z[i, c] += hi / 6.0 * (k1[0, c] + 2.0 * k2[0, c] + 2.0 * k3[0, c] + k4[0, c])
    return z


def _field_row_impl(zs, ab, ds, mc, vc, lwc, mn, vn, lwn, omega):
    abv = np.empty(1)
    abv[0] = ab
    score = _GMM_ROW(zs, abv, mc, vc, lwc)
    if omega != 0.0:
        score = (1.0 + omega) * score - omega * _GMM_ROW(zs, abv, mn, vn, lwn)
    return 0.5 * ds * (zs + score)


# ---------------------------------------------------------------------------
# MLP forward / backward
# ---------------------------------------------------------------------------
#
# Architecture: pre1 = z W1^T + b1 + phi_t Pt^T + phi_w Pw^T + Emb[cidx],
# three silu hidden layers, linear readout.  Unconditioned nets pass a
# zero Pw and zero phi_w so both paths share one signature.

def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _dsilu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def mlp_forward_numpy(z, phit, phiw, cidx, w1, b1, pt, pw, emb, w2, b2, w3, b3, w4, b4):
    pre1 = z @ w1.T + b1 + phit @ pt.T + phiw @ pw.T + emb[cidx]
    a1 = _silu(pre1)
    pre2 = a1 @ w2.T + b2
    a2 = _silu(pre2)
    pre3 = a2 @ w3.T + b3
    a3 = _silu(pre3)
    out = a3 @ w4.T + b4
    return pre1, a1, pre2, a2, pre3, a3, out


def mlp_backward_numpy(gout, z, phit, phiw, cidx, w2, w3, w4, pre1, a1, pre2, a2, pre3, a3, n_emb):
    gw4 = gout.T @ a3
    gb4 = gout.sum(axis=0)
    gpre3 = (gout @ w4) * _dsilu(pre3)
    gw3 = gpre3.T @ a2
    gb3 = gpre3.sum(axis=0)
    gpre2 = (gpre3 @ w3) * _dsilu(pre2)
    gw2 = gpre2.T @ a1
    gb2 = gpre2.sum(axis=0)
    gpre1 = (gpre2 @ w2) * _dsilu(pre1)
    gw1 = gpre1.T @ z
    gb1 = gpre1.sum(axis=0)
    gpt = gpre1.T @ phit
    gpw = gpre1.T @ phiw
    gemb = np.zeros((n_emb, gpre1.shape[1]))
    np.add.at(gemb, cidx, gpre1)
    return gw1, gb1, gpt, gpw, gemb, gw2, gb2, gw3, gb3, gw4, gb4


def _mlp_forward_loops(z, phit, phiw, cidx, w1, b1, pt, pw, emb, w2, b2, w3, b3, w4, b4):
    n = z.shape[0]
    width = w1.shape[0]
    pre1 = z @ w1.T + phit @ pt.T + phiw @ pw.T
    for i in range(n):
        row = cidx[i]
        for c in range(width):
            pre1[i, c] += b1[c] + emb[row, c]
    a1 = pre1 / (1.0 + np.exp(-pre1))
    pre2 = a1 @ w2.T
    for i in range(n):
        for c in range(width):
            pre2[i, c] += b2[c]
    a2 = pre2 / (1.0 + np.exp(-pre2))
    pre3 = a2 @ w3.T
    for i in range(n):
        for c in range(width):
            pre3[i, c] += b3[c]
    a3 = pre3 / (1.0 + np.exp(-pre3))
    out = a3 @ w4.T
    dout = w4.shape[0]
    for i in range(n):
        for c in range(dout):
            out[i, c] += b4[c]
    return pre1, a1, pre2, a2, pre3, a3, out


def _dsilu_loops(x):
    out = np.empty_like(x)
    n, m = x.shape
    for i in range(n):
        for j in range(m):
            s = 1.0 / (1.0 + math.exp(-x[i, j]))
            out[i, j] = s * (1.0 + x[i, j] * (1.0 - s))
    return out


def _mlp_backward_loops(gout, z, phit, phiw, cidx, w2, w3, w4, pre1, a1, pre2, a2, pre3, a3, n_emb):
    gw4 = gout.T @ a3
    gb4 = _colsum(gout)
    gpre3 = (gout @ w4) * _dsilu_loops(pre3)
    gw3 = gpre3.T @ a2
    gb3 = _colsum(gpre3)
    gpre2 = (gpre3 @ w3) * _dsilu_loops(pre2)
    gw2 = gpre2.T @ a1
    gb2 = _colsum(gpre2)
    gpre1 = (gpre2 @ w2) * _dsilu_loops(pre1)
    gw1 = gpre1.T @ z
    gb1 = _colsum(gpre1)
    gpt = gpre1.T @ phit
    gpw = gpre1.T @ phiw
    width = gpre1.shape[1]
    gemb = np.zeros((n_emb, width))
    for i in range(gpre1.shape[0]):
        row = cidx[i]
        for c in range(width):
            gemb[row, c] += gpre1[i, c]
    return gw1, gb1, gpt, gpw, gemb, gw2, gb2, gw3, gb3, gw4, gb4


def _colsum_impl(x):
    n, m = x.shape
    out = np.zeros(m)
    for i in range(n):
        for j in range(m):
            out[j] += x[i, j]
    return out


# ---------------------------------------------------------------------------
# Path selection
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    _jit = njit(cache=True)
    gmm_score_numba = _jit(_gmm_score_loops)
    _GMM_ROW = gmm_score_numba
    _field_row = _jit(_field_row_impl)
    rk4_gmm_flow_numba = _jit(_rk4_gmm_flow_loops)
    _colsum = _jit(_colsum_impl)
    _dsilu_loops = _jit(_dsilu_loops)
    mlp_forward_numba = _jit(_mlp_forward_loops)
    mlp_backward_numba = _jit(_mlp_backward_loops)

    gmm_score = gmm_score_numba
    rk4_gmm_flow = rk4_gmm_flow_numba
    mlp_forward = mlp_forward_numba
    mlp_backward = mlp_backward_numba
else:
    _GMM_ROW = gmm_score_numpy
    _field_row = _field_row_impl
    _colsum = _colsum_impl

    gmm_score = gmm_score_numpy
    rk4_gmm_flow = rk4_gmm_flow_numpy
    mlp_forward = mlp_forward_numpy
    mlp_backward = mlp_backward_numpy
