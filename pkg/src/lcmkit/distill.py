"""One-stage guided consistency distillation and teacher-free fine-tuning.

Each distillation iteration draws per-example (n, w, eps), noises the
data to index n+k, estimates the guided flow back to index n with the
chosen solver using frozen teacher predictions, and matches the online
model at the far point against the EMA target at the estimate:

    d( f_theta(z_{n+k}, w, c, t_{n+k}),  f_target(z_hat_n, w, c, t_n) ).

Gradients flow only through the online branch; the teacher and target
parameters are never touched by the update.  Fine-tuning drops the
teacher entirely: both points come from noising the same datum with one
shared draw, consistency between them is enforced directly.
"""

import time
from dataclasses import dataclass

import numpy as np

from .consistency import prediction_grad_coeff
from .net import ema_update, net_grad
from .schedule import forward_sample_batch, make_time_grid
from .solver import DDIM, cfg_solver_step

LOSS_ABORT = 1e6


class DivergenceError(FloatingPointError):
    """Training loss became non-finite or blew past the abort threshold."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 8e-6
    mu: float = 0.999943
    batch: int = 64
    iters: int = 2000
    k: int = 20
    omega_min: float = 2.0
    omega_max: float = 14.0
    metric: str = "squared_l2"  # or "huber"
    huber_delta: float = 1.0
    seed: int = 0
    solver: str = DDIM
    optimizer: str = "sgd"  # or "adam"
    cond_dropout: float = 0.1
    log_every: int = 100
    eval_every: int = 0  # 0 disables endpoint-error logging
    eval_probes: int = 64

    def __post_init__(self):
        if self.omega_min > self.omega_max:
            raise ValueError("omega_min must not exceed omega_max")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("EMA rate must lie in [0, 1]")
        if self.metric not in ("squared_l2", "huber"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class TrainLogRow:
    iter: int
    loss: float
    endpoint_error: float = None  # optional
    wall_ms: int = 0

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise ValueError("log rows require a finite loss")


def distance(metric, a, b, delta=1.0):
    """Scalar distance between two vectors: squared L2 or Huber."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    gap = a - b
    if metric == "squared_l2":
        return float(np.sum(gap * gap))
    if metric == "huber":
        absg = np.abs(gap)
        quad = 0.5 * gap * gap
        lin = delta * (absg - 0.5 * delta)
        return float(np.sum(np.where(absg <= delta, quad, lin)))
    raise ValueError(f"unknown metric {metric!r}")


def _distance_batch_and_grad(metric, online, target, delta):
    """Mean per-row distance and dL/d(online); target carries no gradient."""
    gap = online - target
    batch = gap.shape[0]
    if metric == "squared_l2":
        loss = float(np.mean(np.sum(gap * gap, axis=1)))
        return loss, 2.0 * gap / batch
    absg = np.abs(gap)
    per = np.where(absg <= delta, 0.5 * gap * gap, delta * (absg - 0.5 * delta))
    loss = float(np.mean(np.sum(per, axis=1)))
    return loss, np.clip(gap, -delta, delta) / batch


def consistency_pair_loss(model, z_online, n_online, z_target, n_target, omega, c,
                          metric="squared_l2", delta=1.0):
    """Loss and grads for one batch of (online, target) consistency pairs."""
    f_on, cache, co, alpha, sigma = model._apply_batch(
        z_online, omega, c, n_online, want_cache=True
    )
    f_tg = model._apply_batch(z_target, omega, c, n_target, use_target=True)
    loss, dldf = _distance_batch_and_grad(metric, f_on, f_tg, delta)
    if not np.isfinite(loss):
        raise DivergenceError("consistency loss is non-finite")
    chain = co * prediction_grad_coeff(model.prediction_kind, alpha, sigma)
    grads = net_grad(model.net, dldf * chain[:, None], cache)
    return loss, grads


def _draw_batch(data, labels, cfg, n_max, rng, dim):
    idx = rng.integers(0, data.shape[0], cfg.batch)
    n = rng.integers(1, n_max, cfg.batch, endpoint=True)
    omega = rng.uniform(cfg.omega_min, cfg.omega_max, cfg.batch)
    eps = rng.standard_normal((cfg.batch, dim))
    c = None if labels is None else labels[idx]
    return data[idx], c, n, omega, eps


def lcd_loss(model, teacher, schedule, batch, cfg, rng):
    """One guided-distillation loss evaluation on a fresh draw.

    ``batch`` is (data, labels-or-None); draws per-example n, w, eps,
    forms z_{n+k}, estimates z_hat_n through the teacher-driven guided
    solver, and scores the consistency pair.  Returns (loss, grads).
    """
    data, labels = batch
    grid = make_time_grid(schedule, cfg.k)
    z0, c, n, omega, eps = _draw_batch(data, labels, cfg, grid.n_max, rng, data.shape[1])
    n_hi = n + cfg.k
    z_hi = forward_sample_batch(z0, n_hi, eps, schedule)
    z_hat = cfg_solver_step(teacher, z_hi, n_hi, n, omega, c, kind=cfg.solver)
    return consistency_pair_loss(
        model, z_hi, n_hi, z_hat, n, omega, c,
        metric=cfg.metric, delta=cfg.huber_delta,
    )


class _Optimizer:
    """SGD or Adam over the flat parameter vector."""

    def __init__(self, cfg, n_params):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = np.zeros(n_params)
            self.v = np.zeros(n_params)
        elif cfg.optimizer != "sgd":
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    def step(self, net, grads):
        self.t += 1
        if self.cfg.optimizer == "sgd":
            net.apply_delta(-self.cfg.lr * grads)
            return
        self.m = 0.9 * self.m + 0.1 * grads
        self.v = 0.999 * self.v + 0.001 * grads * grads
        mhat = self.m / (1.0 - 0.9**self.t)
        vhat = self.v / (1.0 - 0.999**self.t)
        net.apply_delta(-self.cfg.lr * mhat / (np.sqrt(vhat) + 1e-8))


def _run_loop(model, schedule, cfg, loss_fn, eval_fn=None, ckpt_every=0, ckpt_fn=None):
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg, model.net.n_params)
    log = []
    block_start = time.perf_counter()
    for it in range(cfg.iters):
        loss, grads = loss_fn(rng)
        if not np.isfinite(loss) or loss > LOSS_ABORT:
            raise DivergenceError(f"loss {loss} at iteration {model.iteration + 1}")
        opt.step(model.net, grads)
        ema_update(model.ema, cfg.mu)
        model.iteration += 1
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            wall_ms = int(1000 * (time.perf_counter() - block_start))
            epe = None
            if eval_fn is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                epe = eval_fn()
            log.append(TrainLogRow(iter=model.iteration, loss=loss,
                                   endpoint_error=epe, wall_ms=wall_ms))
            block_start = time.perf_counter()
        if ckpt_fn is not None and ckpt_every and (it + 1) % ckpt_every == 0:
            ckpt_fn(model)
    return log


def lcd_train(model, teacher, schedule, data, cfg, labels=None,
              ckpt_every=0, ckpt_fn=None):
    """Guided latent consistency distillation against a frozen teacher."""
    data = np.asarray(data, dtype=np.float64)
    make_time_grid(schedule, cfg.k)  # validates k
    eval_fn = None
    if teacher.kind == "analytic" and cfg.eval_every:
        from .sampler_eval import endpoint_error

        eval_rng_seed = cfg.seed + 0x5EED
        omega_mid = 0.5 * (cfg.omega_min + cfg.omega_max)

        def eval_fn():
            return endpoint_error(
                model, teacher, cfg.eval_probes, omega_mid, None,
                rng=np.random.default_rng(eval_rng_seed),
            )

    def loss_fn(rng):
        return lcd_loss(model, teacher, schedule, (data, labels), cfg, rng=rng)

    log = _run_loop(model, schedule, cfg, loss_fn, eval_fn,
                    ckpt_every=ckpt_every, ckpt_fn=ckpt_fn)
    return model, log


def lcf_train(model, data, schedule, cfg, labels=None, ckpt_every=0, ckpt_fn=None):
    """Teacher-free consistency fine-tuning on a customized dataset.

    The pair (z_{t_{n+k}}, z_{t_n}) reuses one shared noise draw per
    example; no solver and no teacher predictions are involved.
    """
    data = np.asarray(data, dtype=np.float64)
    grid = make_time_grid(schedule, cfg.k)

    def loss_fn(rng):
        z0, c, n, omega, eps = _draw_batch(
            data, labels, cfg, grid.n_max, rng, data.shape[1]
        )
        z_hi = forward_sample_batch(z0, n + cfg.k, eps, schedule)
        z_lo = forward_sample_batch(z0, n, eps, schedule)
        return consistency_pair_loss(
            model, z_hi, n + cfg.k, z_lo, n, omega, c,
            metric=cfg.metric, delta=cfg.huber_delta,
        )

    log = _run_loop(model, schedule, cfg, loss_fn,
                    ckpt_every=ckpt_every, ckpt_fn=ckpt_fn)
    return model, log
