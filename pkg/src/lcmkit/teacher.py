"""Noise-prediction teachers: exact Gaussian-mixture and trained nets.

The analytic teacher knows the marginal of a labeled isotropic mixture
under the forward process in closed form, so its score (and therefore
epsilon* = -sigma * score) is exact at every noise level.  Restricting
to one label gives an exact class-conditional teacher, which makes the
guided combination (1 + w) eps_c - w eps_null a computable ground truth.

A learned teacher is an epsilon-prediction Denoiser fit by denoising
score matching with unit loss weight; condition dropout during training
keeps its null-condition branch meaningful for guidance.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .net import Denoiser, net_grad
from .schedule import forward_sample_batch


@dataclass(frozen=True)
class MixtureSpec:
    """Labeled isotropic Gaussian mixture playing the role of p_data."""

    weights: np.ndarray  # (K,), positive, sums to 1
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K,), isotropic s_i^2
    labels: np.ndarray  # (K,) int class ids

    def __post_init__(self):
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.weights <= 0) or np.any(self.variances <= 0):
            raise ValueError("mixture weights and variances must be positive")
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("component count mismatch between weights and means")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_classes(self):
        return int(np.max(self.labels)) + 1 if self.labels.size else 0

    def component_subset(self, c=None):
        """(means, variances, logw) restricted to label c, renormalized."""
        if c is None or int(c) < 0:
            keep = np.ones(len(self.weights), dtype=bool)
        else:
            keep = self.labels == int(c)
            if not np.any(keep):
                raise ValueError(f"no mixture component carries label {c}")
        w = self.weights[keep]
        return (
            np.ascontiguousarray(self.means[keep]),
            np.ascontiguousarray(self.variances[keep]),
            np.log(w / np.sum(w)),
        )

    def sample(self, count, rng, c=None):
        """Draw (points, labels) from the (optionally class-restricted) mixture."""
        if c is None or int(c) < 0:
            w = self.weights
            idx_pool = np.arange(len(self.weights))
        else:
            keep = self.labels == int(c)
            w = self.weights[keep] / np.sum(self.weights[keep])
            idx_pool = np.flatnonzero(keep)
        comp = idx_pool[rng.choice(len(w), size=count, p=w)]
        x = self.means[comp] + np.sqrt(self.variances[comp])[:, None] * rng.standard_normal(
            (count, self.dim)
        )
        return x, self.labels[comp].copy()

    def data_std(self):
        """Scalar scale sqrt(mean per-coordinate variance) of the mixture."""
        mean = np.sum(self.weights[:, None] * self.means, axis=0)
        second = np.sum(
            self.weights[:, None] * (self.means**2 + self.variances[:, None]), axis=0
        )
        return float(np.sqrt(np.mean(second - mean**2)))


def make_ring_mixture(n_modes=8, radius=1.0, mode_std=0.1, labeled=True, shift=None):
    """Equal-weight modes on a circle; one class per mode when labeled."""
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if shift is not None:
        means = means + np.asarray(shift, dtype=np.float64)
    labels = np.arange(n_modes) if labeled else np.full(n_modes, -1)
    return MixtureSpec(
        weights=np.full(n_modes, 1.0 / n_modes),
        means=means,
        variances=np.full(n_modes, mode_std**2),
        labels=labels,
    )


def standard_normal_mixture(dim=2):
    return MixtureSpec(
        weights=np.array([1.0]),
        means=np.zeros((1, dim)),
        variances=np.array([1.0]),
        labels=np.array([-1]),
    )


@dataclass
class TeacherModel:
    """Supplier of noise predictions for distillation; analytic or learned."""

    kind: str  # "analytic" | "learned"
    schedule: object
    mixture: MixtureSpec = None
    net: Denoiser = None
    calls: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind == "analytic":
            if self.mixture is None or self.net is not None:
                raise ValueError("analytic teacher takes a mixture and no net")
        elif self.kind == "learned":
            if self.net is None or self.mixture is not None:
                raise ValueError("learned teacher takes a net and no mixture")
            if self.net.prediction_kind != "epsilon":
                raise ValueError("learned teacher must be an epsilon predictor")
        else:
            raise ValueError(f"unknown teacher kind {self.kind!r}")


def gmm_score(mixture, z, n, schedule, c=None):
    """Exact grad_z log q_{t_n}(z | label c) of the noised mixture."""
    n = int(n)
    if not 1 <= n <= schedule.n_steps:
        raise IndexError(f"score needs 1 <= n <= N, got {n}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    means, variances, logw = mixture.component_subset(c)
    abar = np.full(zb.shape[0], schedule.alpha_bar[n])
    out = kernels.gmm_score(zb, abar, means, variances, logw)
    return out[0] if single else out


def _analytic_eps(teacher, zb, n_arr, c_arr):
    """Batched epsilon* = -sigma_t * score for per-row indices/labels."""
    sched = teacher.schedule
    abar = sched.alpha_bar[n_arr]
    sigma = np.sqrt(1.0 - abar)
    out = np.empty_like(zb)
    if c_arr is None:
        means, variances, logw = teacher.mixture.component_subset(None)
        score = kernels.gmm_score(zb, abar, means, variances, logw)
        return -sigma[:, None] * score
    c_arr = np.asarray(c_arr)
    for cval in np.unique(c_arr):
        rows = c_arr == cval
        means, variances, logw = teacher.mixture.component_subset(
            None if cval < 0 else int(cval)
        )
        score = kernels.gmm_score(
            np.ascontiguousarray(zb[rows]), abar[rows], means, variances, logw
        )
        out[rows] = -sigma[rows, None] * score
    return out


def teacher_eps(teacher, z, n, c=None):
    """Noise prediction epsilon_hat(z, c, t_n) from either teacher kind."""
    teacher.calls += 1
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if np.isscalar(n) or np.asarray(n).ndim == 0:
        nval = int(n)
        if not 1 <= nval <= teacher.schedule.n_steps:
            raise IndexError(f"teacher_eps needs 1 <= n <= N, got {nval}")
        n_arr = np.full(zb.shape[0], nval, dtype=np.int64)
    else:
        n_arr = np.asarray(n, dtype=np.int64)
    if teacher.kind == "analytic":
        out = _analytic_eps(teacher, zb, n_arr, c)
    else:
        t = n_arr / teacher.schedule.n_steps
        out = teacher.net.forward(zb, t, c=c)
    return out[0] if single else out


def cfg_eps(teacher, z, omega, c, n):
    """Guided combination (1 + w) eps(z, c, t) - w eps(z, null, t)."""
    if c is None:
        raise ValueError("guided prediction needs an explicit condition")
    eps_c = teacher_eps(teacher, z, n, c)
    eps_u = teacher_eps(teacher, z, n, None)
    return (1.0 + float(omega)) * eps_c - float(omega) * eps_u


def train_teacher(den, data, schedule, cfg, rng=None, labels=None):
    """Fit an epsilon predictor by denoising score matching (unit weight).

    Minimizes E || eps_theta(alpha x + sigma eps, t_n) - eps ||^2 over
    uniform n in [1, N] and fresh Gaussian noise; plain SGD or Adam per
    cfg.optimizer.  Condition dropout replaces labels with the null row
    so the trained net supports unconditional evaluation.
    """
    if den.prediction_kind != "epsilon":
        raise ValueError("teacher training expects an epsilon-prediction net")
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    adam_m = adam_v = None
    if cfg.optimizer == "adam":
        adam_m = np.zeros(den.n_params)
        adam_v = np.zeros(den.n_params)
    n_data = data.shape[0]
    for it in range(cfg.iters):
        idx = rng.integers(0, n_data, cfg.batch)
        n = rng.integers(1, schedule.n_steps, cfg.batch, endpoint=True)
        eps = rng.standard_normal((cfg.batch, den.d_in))
        drop = rng.random(cfg.batch)
        x_t = forward_sample_batch(data[idx], n, eps, schedule)
        if labels is None:
            c = None
        else:
            c = labels[idx].copy()
            c[drop < cfg.cond_dropout] = -1
        pred, cache = den.forward(x_t, n / schedule.n_steps, c=c, want_cache=True)
        resid = pred - eps
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        if not np.isfinite(loss):
            raise FloatingPointError(f"teacher loss diverged at iteration {it}")
        grad = net_grad(den, 2.0 * resid / cfg.batch, cache)
        if cfg.optimizer == "adam":
            adam_m = 0.9 * adam_m + 0.1 * grad
            adam_v = 0.999 * adam_v + 0.001 * grad**2
            mhat = adam_m / (1.0 - 0.9 ** (it + 1))
            vhat = adam_v / (1.0 - 0.999 ** (it + 1))
            den.apply_delta(-cfg.lr * mhat / (np.sqrt(vhat) + 1e-8))
        else:
            den.apply_delta(-cfg.lr * grad)
    return den
