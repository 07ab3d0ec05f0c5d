"""Discrete variance-preserving noise schedule on t = n/N, N steps, T = 1.

Per-step variances are linear in the step index; the cumulative signal
level alpha_bar[n] = prod_{i<=n} (1 - beta_i) defines alpha = sqrt(abar)
and sigma = sqrt(1 - abar), so alpha^2 + sigma^2 = 1 holds exactly at
every index.

The schedule also carries an exact smooth continuous-time extension.
Because beta_i is linear in i, the partial products are falling
factorials:

    prod_{i<=n} (1 - beta_i) = b^n Gamma(q + 1) / Gamma(q + 1 - n),
    b = (beta_max - beta_min) / (N - 1),  q = (1 - beta_min) / b,

which is analytic in n via log-Gamma and interpolates the grid values.
The reference integrator uses this extension: it makes the flow field
infinitely smooth and gives f alpha^2 + sigma sigma' = 0 identically,
so unit-Gaussian data has exactly constant trajectories.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, psi


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable discrete VP schedule; safe to share across workers."""

    n_steps: int
    beta_min: float
    beta_max: float
    betas: np.ndarray  # (N+1,), betas[0] = 0 placeholder
    alpha_bar: np.ndarray  # (N+1,), alpha_bar[0] = 1
    t_values: np.ndarray  # (N+1,), t_n = n/N

    def _check_index(self, n, lo=0):
        n = int(n)
        if not lo <= n <= self.n_steps:
            raise IndexError(f"timestep index {n} outside [{lo}, {self.n_steps}]")
        return n

    def alpha_sigma(self, n):
        """(alpha(t_n), sigma(t_n)); the squares sum to 1."""
        n = self._check_index(n)
        ab = self.alpha_bar[n]
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    def alpha_sigma_arrays(self, n):
        """Vectorized alpha/sigma lookup for an integer index array."""
        ab = self.alpha_bar[np.asarray(n, dtype=np.int64)]
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def drift_diffusion(self, n):
        """Central-difference (f(t_n), g^2(t_n)) on the grid.

        f = d log alpha / dt and g^2 = d sigma^2/dt - 2 f sigma^2; interior
        indices only since the stencil needs both neighbors.
        """
        n = self._check_index(n, lo=1)
        if n > self.n_steps - 1:
            raise IndexError(f"drift_diffusion needs 1 <= n <= N-1, got {n}")
        h2 = 2.0 / self.n_steps
        la = 0.5 * np.log(self.alpha_bar)
        f = (la[n + 1] - la[n - 1]) / h2
        dsig2 = (self.alpha_bar[n - 1] - self.alpha_bar[n + 1]) / h2
        g2 = dsig2 - 2.0 * f * (1.0 - self.alpha_bar[n])
        return float(f), float(g2)

    def log_snr(self, n):
        """lambda(t_n) = log(alpha/sigma); undefined at n = 0 where sigma = 0."""
        n = self._check_index(n)
        if n == 0:
            raise ZeroDivisionError("log-SNR diverges at n=0 (sigma = 0)")
        ab = self.alpha_bar[n]
        return float(0.5 * (np.log(ab) - np.log1p(-ab)))

    def log_snr_arrays(self, n):
        ab = self.alpha_bar[np.asarray(n, dtype=np.int64)]
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    # -- smooth continuous extension (exact at grid points) ----------------

    @property
    def _gamma_consts(self):
        b = (self.beta_max - self.beta_min) / (self.n_steps - 1)
        if b == 0.0:
            return None
        return b, (1.0 - self.beta_min) / b

    def log_alpha_bar_cont(self, t):
        """log alpha_bar at continuous t in [0, 1]."""
        n = np.asarray(t, dtype=np.float64) * self.n_steps
        consts = self._gamma_consts
        if consts is None:
            return n * np.log1p(-self.beta_min)
        b, q = consts
        return n * np.log(b) + gammaln(q + 1.0) - gammaln(q + 1.0 - n)

    def dlog_alpha_bar_dt(self, t):
        """d/dt log alpha_bar at continuous t (negative for any valid beta)."""
        n = np.asarray(t, dtype=np.float64) * self.n_steps
        consts = self._gamma_consts
        if consts is None:
            return np.full_like(n, self.n_steps * np.log1p(-self.beta_min))
        b, q = consts
        return self.n_steps * (np.log(b) + psi(q + 1.0 - n))

    def abar_cont(self, t):
        return np.exp(self.log_alpha_bar_cont(t))


@dataclass(frozen=True)
class TimeGrid:
    """Start indices n for consistency pairs (n, n+k), n_max = N - k."""

    indices: np.ndarray
    k: int
    n_max: int


def make_vp_schedule(n_steps, beta_min, beta_max):
    """Build the linear-beta VP schedule with N+1 grid points."""
    n_steps = int(n_steps)
    if n_steps < 2:
        raise ValueError(f"need at least 2 steps, got {n_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.zeros(n_steps + 1)
    betas[1:] = np.linspace(beta_min, beta_max, n_steps)
    alpha_bar = np.ones(n_steps + 1)
    alpha_bar[1:] = np.cumprod(1.0 - betas[1:])
    t_values = np.arange(n_steps + 1) / n_steps
    return NoiseSchedule(
        n_steps=n_steps,
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        betas=betas,
        alpha_bar=alpha_bar,
        t_values=t_values,
    )


def forward_sample(z0, n, eps, schedule):
    """Diffuse z0 to index n: alpha(t_n) z0 + sigma(t_n) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data shape {z0.shape}")
    alpha, sigma = schedule.alpha_sigma(n)
    return alpha * z0 + sigma * eps


def forward_sample_batch(z0, n, eps, schedule):
    """Per-row diffusion with an index array n of shape (B,)."""
    alpha, sigma = schedule.alpha_sigma_arrays(n)
    return alpha[:, None] * z0 + sigma[:, None] * eps


def make_time_grid(schedule, k):
    """All valid pair starts for skipping interval k."""
    k = int(k)
    if not 1 <= k <= schedule.n_steps - 1:
        raise ValueError(f"skipping interval k={k} outside [1, {schedule.n_steps - 1}]")
    n_max = schedule.n_steps - k
    return TimeGrid(indices=np.arange(1, n_max + 1), k=k, n_max=n_max)
