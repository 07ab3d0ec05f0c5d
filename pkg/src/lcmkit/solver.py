"""Probability-flow ODE steps and the high-accuracy reference integrator.

The skipping step functions move a state from grid index n_from down to
n_to in one solver invocation and return the increment (new - old).
Guided steps combine per-condition increments linearly,

    z_hat = z + (1 + w) Psi(z, c) - w Psi(z, null),

which for the first-order step is identical to driving it with the
combined noise prediction (both are affine in the prediction).

Second-order steps follow the log-SNR midpoint scheme with the interior
index round(n_from - span/2), ties toward n_to.  The reference solution
is classical RK4 on the exact mixture flow field using the schedule's
smooth continuous extension; with guidance it integrates the combined
score field, so the guided trajectory endpoint is a computable target.
"""

from dataclasses import dataclass

import numpy as np

from .teacher import teacher_eps

DDIM = "ddim"
DPM2 = "dpm2"
DPMPP2 = "dpmpp2"
ORACLE_RK4 = "oracle_rk4"
SOLVER_KINDS = (DDIM, DPM2, DPMPP2)


@dataclass(frozen=True)
class SolverStep:
    """Record of one solver invocation, mostly for bench CSV output."""

    z_from: np.ndarray
    n_from: int
    n_to: int
    condition: object
    increment: np.ndarray


def _check_order(n_from, n_to, n_max):
    n_from = np.asarray(n_from, dtype=np.int64)
    n_to = np.asarray(n_to, dtype=np.int64)
    if np.any(n_to > n_from):
        raise ValueError("solver steps must move to an earlier index (n_to <= n_from)")
    if np.any(n_from > n_max) or np.any(n_to < 0):
        raise IndexError("solver indices outside the schedule")
    return n_from, n_to


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def ddim_step(teacher, z, n_from, n_to, c=None):
    """One-evaluation exponential-integrator increment from n_from to n_to."""
    zb, single = _as_batch(z)
    sched = teacher.schedule
    n_from, n_to = _check_order(n_from, n_to, sched.n_steps)
    a_f, s_f = sched.alpha_sigma_arrays(np.broadcast_to(n_from, zb.shape[:1]))
    a_t, s_t = sched.alpha_sigma_arrays(np.broadcast_to(n_to, zb.shape[:1]))
    eps = teacher_eps(teacher, zb, n_from, c)
    # sigma_to * (sigma_from alpha_to / (alpha_from sigma_to) - 1), written
    # without the 0/0 at n_to = 0
    coef = s_f * a_t / a_f - s_t
    inc = (a_t / a_f - 1.0)[:, None] * zb - coef[:, None] * eps
    return inc[0] if single else inc


def _mid_index(n_from, n_to):
    span = n_from - n_to
    return n_from - (span + 1) // 2


def _second_order_setup(sched, n_from, n_to, zb):
    n_from = np.broadcast_to(np.asarray(n_from, dtype=np.int64), zb.shape[:1])
    n_to = np.broadcast_to(np.asarray(n_to, dtype=np.int64), zb.shape[:1])
    span = n_from - n_to
    moving = span > 0
    if np.any(moving & (span < 2)):
        raise ValueError("second-order step needs an interior midpoint (span >= 2)")
    if np.any(moving & (n_to < 1)):
        raise ValueError("second-order step needs sigma > 0 at the target (n_to >= 1)")
    mid = _mid_index(n_from, n_to)
    safe_to = np.where(moving, n_to, 1)
    safe_mid = np.where(moving, mid, 1)
    lam_f = sched.log_snr_arrays(n_from)
    lam_t = sched.log_snr_arrays(safe_to)
    lam_m = sched.log_snr_arrays(safe_mid)
    h0 = lam_t - lam_f
    h1 = lam_t - lam_m
    r = np.where(moving, h1 / np.where(moving, h0, 1.0), 1.0)
    return n_from, n_to, mid, moving, h0, h1, r


def dpm2_step(teacher, z, n_from, n_to, c=None):
    """Two-evaluation log-SNR midpoint increment (noise prediction form)."""
    zb, single = _as_batch(z)
    sched = teacher.schedule
    _check_order(n_from, n_to, sched.n_steps)
    n_from, n_to, mid, moving, h0, h1, r = _second_order_setup(sched, n_from, n_to, zb)
    a_f, _ = sched.alpha_sigma_arrays(n_from)
    a_t, s_t = sched.alpha_sigma_arrays(n_to)
    a_m, s_m = sched.alpha_sigma_arrays(np.where(moving, mid, n_from))
    eps_f = teacher_eps(teacher, zb, n_from, c)
    z_mid = (a_m / a_f)[:, None] * zb - (s_m * np.expm1(h1))[:, None] * eps_f
    eps_m = teacher_eps(teacher, z_mid, np.where(moving, mid, n_from), c)
    zhat = (
        (a_t / a_f)[:, None] * zb
        - (s_t * np.expm1(h0))[:, None] * eps_f
        - (s_t / (2.0 * r) * np.expm1(h0))[:, None] * (eps_m - eps_f)
    )
    inc = np.where(moving[:, None], zhat - zb, 0.0)
    return inc[0] if single else inc


def dpmpp2_step(teacher, z, n_from, n_to, c=None):
    """Two-evaluation midpoint increment in data-prediction form."""
    zb, single = _as_batch(z)
    sched = teacher.schedule
    _check_order(n_from, n_to, sched.n_steps)
    n_from, n_to, mid, moving, h0, h1, r = _second_order_setup(sched, n_from, n_to, zb)
    a_f, s_f = sched.alpha_sigma_arrays(n_from)
    a_t, s_t = sched.alpha_sigma_arrays(n_to)
    a_m, s_m = sched.alpha_sigma_arrays(np.where(moving, mid, n_from))
    eps_f = teacher_eps(teacher, zb, n_from, c)
    x_f = (zb - s_f[:, None] * eps_f) / a_f[:, None]
    z_mid = (s_m / s_f)[:, None] * zb - (a_m * np.expm1(-h1))[:, None] * x_f
    eps_m = teacher_eps(teacher, z_mid, np.where(moving, mid, n_from), c)
    x_m = (z_mid - s_m[:, None] * eps_m) / a_m[:, None]
    zhat = (
        (s_t / s_f)[:, None] * zb
        - (a_t * np.expm1(-h0))[:, None] * x_f
        - (a_t / (2.0 * r) * np.expm1(-h0))[:, None] * (x_m - x_f)
    )
    inc = np.where(moving[:, None], zhat - zb, 0.0)
    return inc[0] if single else inc


_STEP_FNS = {DDIM: ddim_step, DPM2: dpm2_step, DPMPP2: dpmpp2_step}


def solver_step(teacher, z, n_from, n_to, c=None, kind=DDIM):
    try:
        fn = _STEP_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown solver kind {kind!r}") from None
    return fn(teacher, z, n_from, n_to, c)


def cfg_solver_step(teacher, z, n_from, n_to, omega, c, kind=DDIM):
    """Guided estimate z + (1+w) Psi(..., c) - w Psi(..., null)."""
    inc_c = solver_step(teacher, z, n_from, n_to, c, kind)
    inc_u = solver_step(teacher, z, n_from, n_to, None, kind)
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim == 1:
        omega = omega[:, None]
    return np.asarray(z, dtype=np.float64) + (1.0 + omega) * inc_c - omega * inc_u


def oracle_integrate(teacher, z, n_from, n_to, c=None, omega=None, substeps=1000):
    """RK4 reference solution of the (guided) flow between grid indices.

    Analytic teachers only: the integrand uses the exact mixture score at
    the smooth continuous-time schedule.  ``omega=None`` integrates the
    plain conditional field; a float integrates the guided combination.
    """
    zb, single = _as_batch(z)
    out = oracle_integrate_batch(
        teacher,
        zb,
        np.full(zb.shape[0], int(n_from), dtype=np.int64),
        np.full(zb.shape[0], int(n_to), dtype=np.int64),
        c=None if c is None else np.full(zb.shape[0], int(c), dtype=np.int64),
        omega=omega,
        substeps=substeps,
    )
    return out[0] if single else out


def oracle_integrate_batch(teacher, z, n_from, n_to, c=None, omega=None, substeps=1000):
    """Vectorized oracle; rows may have distinct spans and labels."""
    if teacher.kind != "analytic":
        raise ValueError("the reference integrator needs the analytic teacher")
    substeps = int(substeps)
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    from . import kernels

    sched = teacher.schedule
    zb = np.ascontiguousarray(z, dtype=np.float64)
    t0 = np.asarray(n_from, dtype=np.float64) / sched.n_steps
    t1 = np.asarray(n_to, dtype=np.float64) / sched.n_steps
    frac = np.arange(2 * substeps + 1) / (2.0 * substeps)
    tgrid = t0[:, None] + (t1 - t0)[:, None] * frac[None, :]
    abar_grid = sched.abar_cont(tgrid)
    ds_grid = sched.dlog_alpha_bar_dt(tgrid)
    h = (t1 - t0) / substeps
    w = 0.0 if omega is None else float(omega)
    mix = teacher.mixture
    m_n, v_n, lw_n = mix.component_subset(None)
    out = np.empty_like(zb)
    if c is None:
        groups = [(None, np.arange(zb.shape[0]))]
    else:
        c = np.asarray(c)
        groups = [(cv, np.flatnonzero(c == cv)) for cv in np.unique(c)]
    for cval, rows in groups:
        m_c, v_c, lw_c = mix.component_subset(
            None if cval is None or cval < 0 else int(cval)
        )
        out[rows] = kernels.rk4_gmm_flow(
            np.ascontiguousarray(zb[rows]),
            np.ascontiguousarray(abar_grid[rows]),
            np.ascontiguousarray(ds_grid[rows]),
            np.ascontiguousarray(h[rows]),
            m_c, v_c, lw_c, m_n, v_n, lw_n, w,
        )
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("reference integration produced non-finite state")
    return out


def convergence_study(teacher, probes, n_hi, n_lo, step_counts, kinds=SOLVER_KINDS,
                      c=None, oracle_substeps=10_000):
    """Endpoint error vs step count against the RK4 reference.

    ``probes`` is a (B, d) batch of start states at index n_hi.  The span
    n_hi - n_lo must be divisible by every step count (even per-step
    spans keep the second-order midpoints exact).  Returns
    {kind: (steps, per_step_span, errors, fitted_order)}.
    """
    span = n_hi - n_lo
    for s in step_counts:
        if span % s:
            raise ValueError(f"span {span} not divisible by {s} steps")
    b = probes.shape[0]
    carr = None if c is None else np.full(b, int(c), dtype=np.int64)
    ref = oracle_integrate_batch(
        teacher, probes,
        np.full(b, n_hi, dtype=np.int64), np.full(b, n_lo, dtype=np.int64),
        c=carr, substeps=oracle_substeps,
    )
    results = {}
    for kind in kinds:
        errors = []
        for steps in step_counts:
            ladder = np.linspace(n_hi, n_lo, steps + 1).astype(np.int64)
            z = probes.copy()
            for a, bb in zip(ladder[:-1], ladder[1:]):
                z = z + solver_step(teacher, z, int(a), int(bb), carr, kind)
            errors.append(float(np.mean(np.linalg.norm(z - ref, axis=1))))
        errors = np.array(errors)
        slope = np.polyfit(np.log(np.asarray(step_counts, dtype=float)), np.log(errors), 1)[0]
        results[kind] = (
            list(step_counts),
            [span // s for s in step_counts],
            errors.tolist(),
            float(-slope),
        )
    return results
