"""Flat key=value run configuration with a typed, validated schema.

One ``key = value`` per line, ``#`` starts a comment, unknown keys are
rejected.  Every config-exposed knob of the other modules lives here
with its default; the training defaults follow the reference recipe
(skipping interval 20, guidance range [2, 14], EMA rate 0.999943,
learning rate 8e-6).
"""

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Malformed run configuration (parse error, unknown key, bad value)."""


def _enum(*choices):
    def check(v):
        if v not in choices:
            raise ValueError(f"must be one of {choices}")
        return v

    return check


def _bounded_float(lo=None, hi=None):
    def check(v):
        v = float(v)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v

    return check


def _pos_int(v):
    v = int(v)
    if v <= 0:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(v):
    v = int(v)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _float_list(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in v.replace(",", " ").split()]


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in v.replace(",", " ").split()]


def _matrix(v):
    """Semicolon-separated rows of space/comma-separated numbers."""
    rows = [r.strip() for r in v.split(";") if r.strip()]
    return [[float(x) for x in r.replace(",", " ").split()] for r in rows]


# name -> (converter, default); converters raise ValueError on bad input
SCHEMA = {
    # schedule
    "n_steps": (_pos_int, 1000),
    "beta_min": (_bounded_float(lo=0.0), 1e-4),
    "beta_max": (_bounded_float(lo=0.0, hi=1.0), 0.02),
    # mixture / data
    "mixture": (_enum("ring", "normal", "custom"), "ring"),
    "mixture_components": (_pos_int, 8),
    "mixture_radius": (float, 1.0),
    "mixture_std": (_bounded_float(lo=1e-9), 0.1),
    "mixture_shift": (_float_list, [0.0, 0.0]),
    "mixture_means": (str, ""),
    "mixture_stds": (str, ""),
    "mixture_weights": (str, ""),
    "mixture_labels": (str, ""),
    "conditional": (_enum("0", "1"), "1"),
    "data_csv": (str, ""),
    "data_size": (_pos_int, 4096),
    "dim": (_pos_int, 2),
    # net
    "width": (_pos_int, 128),
    "embed_dim": (_pos_int, 16),
    "prediction_kind": (_enum("epsilon", "x", "v"), "epsilon"),
    # boundary
    "sigma_data": (_bounded_float(lo=1e-9), 0.5),
    "t_scale": (_bounded_float(lo=1e-9), 0.01),
    # teacher
    "teacher": (_enum("analytic", "learned"), "analytic"),
    "teacher_ckpt": (str, ""),
    "cond_dropout": (_bounded_float(lo=0.0, hi=1.0), 0.1),
    # training
    "lr": (_bounded_float(lo=1e-300), 8e-6),
    "mu": (_bounded_float(lo=0.0, hi=1.0), 0.999943),
    "batch": (_pos_int, 64),
    "iters": (_nonneg_int, 2000),
    "k": (_pos_int, 20),
    "omega_min": (float, 2.0),
    "omega_max": (float, 14.0),
    "metric": (_enum("squared_l2", "huber"), "squared_l2"),
    "huber_delta": (_bounded_float(lo=1e-9), 1.0),
    "optimizer": (_enum("sgd", "adam"), "sgd"),
    "solver": (_enum("ddim", "dpm2", "dpmpp2"), "ddim"),
    "seed": (int, 0),
    "log_every": (_nonneg_int, 100),
    "eval_every": (_nonneg_int, 0),
    "eval_probes": (_pos_int, 64),
    "ckpt_every": (_nonneg_int, 0),
    # latent codec
    "codec": (_enum("identity", "linear"), "identity"),
    "d_latent": (_pos_int, 2),
    "codec_ckpt": (str, ""),
    # sampling
    "steps": (_pos_int, 4),
    "count": (_pos_int, 2000),
    "omega": (float, 8.0),
    "sample_class": (int, -1),
    "taus": (_int_list, []),
    # evaluation
    "n_projections": (_pos_int, 128),
    "eval_count": (_pos_int, 2000),
    "ref_steps": (_pos_int, 500),
    "eval_omegas": (_float_list, []),
    "endpoint_probes": (_pos_int, 64),
    "oracle_substeps": (_pos_int, 400),
    "svg": (_enum("0", "1"), "0"),
    # solver bench
    "bench_steps": (_int_list, [5, 10, 20, 40, 80]),
    "bench_n_hi": (_pos_int, 640),
    "bench_n_lo": (_nonneg_int, 160),
    "bench_probes": (_pos_int, 16),
    "bench_oracle_substeps": (_pos_int, 10000),
    # io
    "out_dir": (str, "out"),
    "ckpt": (str, ""),
}


@dataclass
class RunConfig:
    """Validated configuration; attribute access per schema key."""

    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def replace(self, **kw):
        vals = dict(self.values)
        for key, raw in kw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            conv, _ = SCHEMA[key]
            try:
                vals[key] = conv(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        return RunConfig(vals)

    def echo_lines(self):
        return [f"{k} = {self.values[k]}" for k in sorted(self.values)]


def default_config():
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config_text(text, source="<config>"):
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        conv, _ = SCHEMA[key]
        try:
            values[key] = conv(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    return RunConfig(values)


def parse_config(path):
    """Load and validate a config file; defaults fill every missing key."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def mixture_from_config(cfg):
    """Build the data mixture described by a RunConfig."""
    from .teacher import MixtureSpec, make_ring_mixture, standard_normal_mixture

    labeled = cfg.conditional == "1"
    if cfg.mixture == "normal":
        return standard_normal_mixture(dim=cfg.dim)
    if cfg.mixture == "ring":
        shift = cfg.mixture_shift if any(cfg.mixture_shift) else None
        return make_ring_mixture(
            n_modes=cfg.mixture_components,
            radius=cfg.mixture_radius,
            mode_std=cfg.mixture_std,
            labeled=labeled,
            shift=shift,
        )
    means = np.array(_matrix(cfg.mixture_means))
    if means.size == 0:
        raise ConfigError("custom mixture needs mixture_means")
    k = means.shape[0]
    stds = np.array(_float_list(cfg.mixture_stds)) if cfg.mixture_stds else np.full(k, cfg.mixture_std)
    weights = np.array(_float_list(cfg.mixture_weights)) if cfg.mixture_weights else np.full(k, 1.0 / k)
    labels = np.array(_int_list(cfg.mixture_labels)) if cfg.mixture_labels else np.arange(k)
    if not labeled:
        labels = np.full(k, -1)
    try:
        return MixtureSpec(
            weights=weights / np.sum(weights),
            means=means,
            variances=stds**2,
            labels=labels,
        )
    except ValueError as exc:
        raise ConfigError(f"bad custom mixture: {exc}") from None


def train_config_from(cfg):
    from .distill import TrainConfig

    return TrainConfig(
        lr=cfg.lr,
        mu=cfg.mu,
        batch=cfg.batch,
        iters=cfg.iters,
        k=cfg.k,
        omega_min=cfg.omega_min,
        omega_max=cfg.omega_max,
        metric=cfg.metric,
        huber_delta=cfg.huber_delta,
        seed=cfg.seed,
        solver=cfg.solver,
        optimizer=cfg.optimizer,
        cond_dropout=cfg.cond_dropout,
        log_every=cfg.log_every,
        eval_every=cfg.eval_every,
        eval_probes=cfg.eval_probes,
    )
