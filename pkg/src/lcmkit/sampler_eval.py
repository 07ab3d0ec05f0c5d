"""Multistep consistency sampling and desk-scale distribution metrics.

Sampling alternates origin prediction with re-noising: start from pure
noise at the terminal time, map to an origin estimate, then for each
decreasing timestep tau diffuse the estimate back to tau and map again.
One step (empty tau list) is a single function evaluation per sample.

Quality metrics avoid pretrained scorers: sliced Wasserstein-1 against
a reference cloud measures distribution match, and mode coverage/purity
against the known mixture measure diversity and per-mode tightness.
"""

from dataclasses import dataclass

import numpy as np

from .latent import decode, identity_codec
from .schedule import forward_sample_batch
from .solver import DDIM, cfg_solver_step, oracle_integrate_batch, solver_step


@dataclass(frozen=True)
class SampleSchedule:
    """Strictly decreasing interior indices; the terminal time is implicit."""

    taus: np.ndarray
    steps: int

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.int64)
        if taus.size + 1 != self.steps:
            raise ValueError("steps must equal len(taus) + 1")
        if taus.size and (np.any(np.diff(taus) >= 0) or taus[0] < 0):
            raise ValueError("re-noise indices must be strictly decreasing and >= 0")


def default_sample_schedule(schedule, steps):
    """Uniform-in-index tau ladder: round(N * j / steps) for j = steps-1..1."""
    steps = int(steps)
    if steps < 1:
        raise ValueError("need at least one sampling step")
    taus = np.round(
        schedule.n_steps * np.arange(steps - 1, 0, -1) / steps
    ).astype(np.int64)
    return SampleSchedule(taus=taus, steps=steps)


@dataclass
class EvalReport:
    sliced_w1: float
    mode_coverage: float
    mean_endpoint_error: float
    per_omega: list


def multistep_sample(model, sample_schedule, omega, c, count, rng, codec=None):
    """Draw ``count`` samples with alternating denoise / re-noise steps."""
    sched = model.schedule
    if np.any(np.asarray(sample_schedule.taus) > sched.n_steps):
        raise ValueError("re-noise index beyond the schedule")
    codec = codec or identity_codec(model.net.d_in)
    n_total = sched.n_steps
    _, sigma_t = sched.alpha_sigma(n_total)
    z_hat = sigma_t * rng.standard_normal((count, model.net.d_in))
    z = model.apply(z_hat, omega, c, n_total)
    for tau in sample_schedule.taus:
        tau = int(tau)
        alpha, sigma = sched.alpha_sigma(tau)
        z_hat = alpha * z + sigma * rng.standard_normal((count, model.net.d_in))
        z = model.apply(z_hat, omega, c, tau)
    return decode(codec, z)


def teacher_ddim_sample(teacher, count, steps, rng, omega=None, c=None, kind=DDIM):
    """Reference sampler: walk the teacher's flow down a uniform index ladder."""
    sched = teacher.schedule
    _, sigma_t = sched.alpha_sigma(sched.n_steps)
    z = sigma_t * rng.standard_normal((count, teacher.mixture.dim))
    ladder = np.round(np.linspace(sched.n_steps, 0, steps + 1)).astype(np.int64)
    carr = None if c is None else np.full(count, int(c), dtype=np.int64)
    for a, b in zip(ladder[:-1], ladder[1:]):
        if omega is None:
            z = z + solver_step(teacher, z, int(a), int(b), carr, kind)
        else:
            z = cfg_solver_step(teacher, z, int(a), int(b), float(omega), carr, kind)
    return z


def sliced_w1(a, b, n_projections=128, rng=None):
    """Mean 1-D Wasserstein-1 over random unit-vector projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("sliced distance needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets live in different dimensions")
    rng = np.random.default_rng(0) if rng is None else rng
    proj = rng.standard_normal((int(n_projections), a.shape[1]))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    pa = np.sort(a @ proj.T, axis=0)
    pb = np.sort(b @ proj.T, axis=0)
    if a.shape[0] == b.shape[0]:
        return float(np.mean(np.abs(pa - pb)))
    # unequal counts: compare empirical quantile functions on a common grid
    m = max(a.shape[0], b.shape[0])
    q = (np.arange(m) + 0.5) / m
    ia = np.minimum((q * a.shape[0]).astype(np.int64), a.shape[0] - 1)
    ib = np.minimum((q * b.shape[0]).astype(np.int64), b.shape[0] - 1)
    return float(np.mean(np.abs(pa[ia] - pb[ib])))


def mode_metrics(samples, mixture, c=None):
    """(coverage, purity) against the known mixture modes.

    coverage: fraction of modes that own at least count/(2 * modes)
    nearest samples.  purity: negative mean distance to the owning mode
    mean in units of that mode's standard deviation (higher = tighter).
    """
    samples = np.asarray(samples, dtype=np.float64)
    means, variances, _ = mixture.component_subset(c)
    d2 = np.sum((samples[:, None, :] - means[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    k = means.shape[0]
    counts = np.bincount(assign, minlength=k)
    coverage = float(np.mean(counts >= samples.shape[0] / (2.0 * k)))
    dist = np.sqrt(d2[np.arange(samples.shape[0]), assign])
    purity = float(-np.mean(dist / np.sqrt(variances[assign])))
    return coverage, purity


def _probe_states(teacher, count, rng, c=None, n_lo=1):
    """Forward-process probes: x0 from the mixture, uniform n, one noising."""
    sched = teacher.schedule
    x0, labels = teacher.mixture.sample(count, rng, c=c)
    n = rng.integers(n_lo, sched.n_steps, count, endpoint=True)
    eps = rng.standard_normal(x0.shape)
    z = forward_sample_batch(x0, n, eps, sched)
    carr = labels if c is not None else None
    return z, n, carr


def endpoint_error(model, teacher, probes, omega, c=None, rng=None, substeps=256):
    """Mean gap between f(z_t) and the true guided-flow origin of z_t."""
    rng = np.random.default_rng(0) if rng is None else rng
    z, n, carr = _probe_states(teacher, int(probes), rng, c=c)
    ref = oracle_integrate_batch(
        teacher, z, n, np.zeros_like(n), c=carr,
        omega=float(omega), substeps=substeps,
    )
    f = model.apply(z, float(omega), carr if carr is not None else c, n)
    return float(np.mean(np.linalg.norm(f - ref, axis=1)))


def self_consistency_gap(model, teacher, probes, omega=0.0, c=None, rng=None,
                         substeps=256):
    """Mean |f(z_t, t) - f(z_s, s)| along shared reference trajectories."""
    rng = np.random.default_rng(0) if rng is None else rng
    sched = teacher.schedule
    z_hi, n_hi, carr = _probe_states(teacher, int(probes), rng, c=c, n_lo=2)
    n_lo = np.array([rng.integers(1, int(n)) for n in n_hi], dtype=np.int64)
    z_lo = oracle_integrate_batch(
        teacher, z_hi, n_hi, n_lo, c=carr, omega=float(omega), substeps=substeps
    )
    cond = carr if carr is not None else c
    f_hi = model.apply(z_hi, float(omega), cond, n_hi)
    f_lo = model.apply(z_lo, float(omega), cond, n_lo)
    return float(np.mean(np.linalg.norm(f_hi - f_lo, axis=1)))
