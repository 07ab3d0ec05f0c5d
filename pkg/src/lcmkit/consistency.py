"""Consistency function f(z, w, c, t): boundary coefficients + net wrapper.

f = c_skip(t) z + c_out(t) * origin_prediction, where the origin comes
from the wrapped net under one of three equivalent output conventions
(noise, clean data, or velocity).  The coefficient forms

    c_skip = sd^2 / ((t/ts)^2 + sd^2),  c_out = (t/ts) / sqrt((t/ts)^2 + sd^2)

give c_skip(0) = 1 and c_out(0) = 0 exactly, so f is the identity at the
clean endpoint regardless of the net.
"""

from dataclasses import dataclass

import numpy as np

from .net import Denoiser, EmaPair, make_ema


@dataclass(frozen=True)
class BoundarySpec:
    """Scales for the skip/output coefficients; defaults suit unit-ish data."""

    sigma_data: float = 0.5
    t_scale: float = 0.01

    def coeffs(self, t):
        """(c_skip, c_out) at continuous time t (scalar or array)."""
        u = np.asarray(t, dtype=np.float64) / self.t_scale
        sd2 = self.sigma_data**2
        denom = u * u + sd2
        return sd2 / denom, u / np.sqrt(denom)


def boundary_coeffs(boundary, n, schedule):
    """Grid-index view of the boundary coefficients, t = t_n."""
    n = int(n)
    if not 0 <= n <= schedule.n_steps:
        raise IndexError(f"index {n} outside schedule")
    cs, co = boundary.coeffs(schedule.t_values[n])
    return float(cs), float(co)


def origin_from_prediction(kind, z, pred, alpha, sigma):
    """Origin estimate implied by a net output under each convention.

    noise:  (z - sigma e) / alpha;  data: the output itself;
    velocity: alpha z - sigma v.  alpha/sigma broadcast per-row.
    """
    if kind == "epsilon":
        if np.any(alpha == 0.0):
            raise ZeroDivisionError("epsilon parameterization undefined where alpha = 0")
        return (z - sigma * pred) / alpha
    if kind == "x":
        return pred
    if kind == "v":
        return alpha * z - sigma * pred
    raise ValueError(f"unknown prediction kind {kind!r}")


def prediction_grad_coeff(kind, alpha, sigma):
    """d(origin)/d(net output), per row; chain factor for backprop."""
    if kind == "epsilon":
        return -sigma / alpha
    if kind == "x":
        return np.ones_like(alpha)
    if kind == "v":
        return -sigma
    raise ValueError(f"unknown prediction kind {kind!r}")


class ConsistencyModel:
    """Online net, its EMA target, boundary coefficients and schedule."""

    def __init__(self, net, schedule, boundary=None, mu=0.999943):
        if not net.omega_conditioned:
            raise ValueError("consistency nets must take the guidance scale as input")
        self.net = net
        self.schedule = schedule
        self.boundary = boundary or BoundarySpec()
        self.ema = make_ema(net, mu=mu)
        self.prediction_kind = net.prediction_kind
        self.iteration = 0

    def apply(self, z, omega, c, n, use_target=False):
        """f(z, w, c, t_n); z may be (d,) or (B, d), n scalar or (B,)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        out = self._apply_batch(zb, omega, c, n, use_target=use_target)
        return out[0] if single else out

    def _indices(self, n, batch):
        n_arr = np.broadcast_to(np.asarray(n, dtype=np.int64), (batch,))
        if np.any(n_arr < 0) or np.any(n_arr > self.schedule.n_steps):
            raise IndexError("timestep index outside schedule")
        return n_arr

    def _apply_batch(self, zb, omega, c, n, use_target=False, want_cache=False):
        n_arr = self._indices(n, zb.shape[0])
        t = n_arr / self.schedule.n_steps
        alpha, sigma = self.schedule.alpha_sigma_arrays(n_arr)
        cs, co = self.boundary.coeffs(t)
        theta = self.ema.theta_target if use_target else None
        if want_cache:
            pred, cache = self.net.forward(zb, t, omega=omega, c=c, theta=theta,
                                           want_cache=True)
        else:
            pred = self.net.forward(zb, t, omega=omega, c=c, theta=theta)
        origin = origin_from_prediction(
            self.prediction_kind, zb, pred, alpha[:, None], sigma[:, None]
        )
        f = cs[:, None] * zb + co[:, None] * origin
        if want_cache:
            return f, cache, co, alpha, sigma
        return f


def consistency_apply(model, z, omega, c, n, use_target=False):
    """Functional spelling of ConsistencyModel.apply."""
    return model.apply(z, omega, c, n, use_target=use_target)


def init_from_teacher(model, teacher):
    """Copy a learned teacher's parameters into the consistency net.

    The teacher has no guidance pathway; its parameter vector is the
    prefix of the conditioned layout, and the guidance projection stays
    zero, so the fresh consistency net computes the teacher's function.
    Also resets the EMA target to the online parameters.
    """
    if teacher.kind != "learned":
        raise ValueError("parameter initialization needs a learned teacher")
    src = teacher.net
    dst = model.net
    if (src.layer_sizes != dst.layer_sizes or src.embed_dim != dst.embed_dim
            or src.n_classes != dst.n_classes):
        raise ValueError("teacher/consistency architectures are incompatible")
    if dst.prediction_kind != src.prediction_kind:
        raise ValueError("prediction kinds differ between teacher and student")
    dst.theta[: src.n_params] = src.theta
    dst.theta[src.n_params:] = 0.0
    dst.bump_version()
    model.ema.theta_target[...] = dst.theta
    return model
