"""Command-line entry point and experiment orchestration.

Subcommands: teacher-train, fit-codec, distill, finetune, sample, eval,
solver-bench.  Every run is fully determined by (config, seed): random
streams are spawned from one root seed sequence in a fixed order, CSV
floats are printed with a fixed repr, and nothing except the wall-clock
column of training logs depends on the machine state.

Exit codes by error family: 2 config, 3 checkpoint, 4 divergence,
5 validation, 1 anything else.
"""

import argparse
import csv
import sys

import numpy as np

from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    default_config,
    mixture_from_config,
    parse_config,
    train_config_from,
)
from .consistency import BoundarySpec, ConsistencyModel, init_from_teacher
from .distill import DivergenceError, lcd_train, lcf_train
from .latent import LatentCodec, decode, encode, fit_linear_codec, identity_codec
from .net import Denoiser
from .sampler_eval import (
    SampleSchedule,
    default_sample_schedule,
    endpoint_error,
    mode_metrics,
    multistep_sample,
    sliced_w1,
    teacher_ddim_sample,
)
from .schedule import forward_sample_batch, make_vp_schedule
from .solver import convergence_study
from .teacher import TeacherModel, train_teacher

COMMANDS = ("teacher-train", "fit-codec", "distill", "finetune", "sample", "eval",
            "solver-bench")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_data_csv(path):
    """Sample CSV: header with x0..x{d-1} and optional class column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [h.strip() for h in header]
        xcols = [i for i, h in enumerate(cols) if h.startswith("x")]
        ccol = cols.index("class") if "class" in cols else None
        xs, labels = [], []
        for row in reader:
            if not row:
                continue
            xs.append([float(row[i]) for i in xcols])
            labels.append(int(float(row[ccol])) if ccol is not None else -1)
    if not xs:
        raise ValueError(f"no samples in {path}")
    return np.array(xs), np.array(labels)


def write_scatter_svg(path, points, labels=None, size=480):
    """Standalone scatter plot from primitive circles; no plotting deps."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    scale = (size - 40) / span.max()
    xy = 20 + (pts - lo) * scale
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i, (x, y) in enumerate(xy):
        color = palette[0]
        if labels is not None and labels[i] >= 0:
            color = palette[int(labels[i]) % len(palette)]
        parts.append(
            f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2" fill="{color}" fill-opacity="0.6"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoint bridging
# ---------------------------------------------------------------------------

def _net_meta(net):
    return {
        "d_in": net.d_in,
        "width": net.width,
        "embed_dim": net.embed_dim,
        "n_classes": net.n_classes,
        "omega_conditioned": int(net.omega_conditioned),
        "prediction_kind": net.prediction_kind,
    }


def _net_from_meta(meta):
    return Denoiser(
        d_in=int(meta["d_in"]),
        width=int(meta["width"]),
        embed_dim=int(meta["embed_dim"]),
        n_classes=int(meta["n_classes"]),
        omega_conditioned=bool(int(meta["omega_conditioned"])),
        prediction_kind=meta["prediction_kind"],
        seed=0,
    )


def _sched_meta(sched):
    return {"n_steps": sched.n_steps, "beta_min": repr(sched.beta_min),
            "beta_max": repr(sched.beta_max)}


def _sched_from_meta(meta):
    return make_vp_schedule(int(meta["n_steps"]), float(meta["beta_min"]),
                            float(meta["beta_max"]))


def save_model(path, model, cfg=None):
    meta = {"kind": "model", "iteration": model.iteration,
            "sigma_data": repr(model.boundary.sigma_data),
            "t_scale": repr(model.boundary.t_scale),
            "mu": repr(model.ema.mu)}
    meta.update(_net_meta(model.net))
    meta.update(_sched_meta(model.schedule))
    if cfg is not None:
        meta.update({f"config.{k}": v for k, v in
                     (line.split(" = ", 1) for line in cfg.echo_lines())})
    save_checkpoint(path, meta, {
        "theta": model.net.theta,
        "theta_target": model.ema.theta_target,
    })


def load_model(path):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a consistency-model checkpoint")
    net = _net_from_meta(meta)
    if tensors["theta"].shape != net.theta.shape:
        raise CheckpointError(f"{path}: parameter vector does not match architecture")
    sched = _sched_from_meta(meta)
    boundary = BoundarySpec(sigma_data=float(meta["sigma_data"]),
                            t_scale=float(meta["t_scale"]))
    model = ConsistencyModel(net, sched, boundary=boundary, mu=float(meta["mu"]))
    net.theta[...] = tensors["theta"]
    net.bump_version()
    model.ema.theta_target[...] = tensors["theta_target"]
    model.iteration = int(meta["iteration"])
    return model


def save_teacher_net(path, net, sched, cfg=None):
    meta = {"kind": "teacher"}
    meta.update(_net_meta(net))
    meta.update(_sched_meta(sched))
    save_checkpoint(path, meta, {"theta": net.theta})


def load_teacher_net(path):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise CheckpointError(f"{path}: not a teacher checkpoint")
    net = _net_from_meta(meta)
    if tensors["theta"].shape != net.theta.shape:
        raise CheckpointError(f"{path}: parameter vector does not match architecture")
    net.theta[...] = tensors["theta"]
    net.bump_version()
    return net, _sched_from_meta(meta)


def save_codec(path, codec):
    meta = {"kind": "codec", "codec_kind": codec.kind,
            "d_data": codec.d_data, "d_latent": codec.d_latent}
    tensors = {}
    if codec.kind == "linear":
        tensors = {"encode_matrix": codec.encode_matrix,
                   "decode_matrix": codec.decode_matrix}
    save_checkpoint(path, meta, tensors)


def load_codec(path):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "codec":
        raise CheckpointError(f"{path}: not a codec checkpoint")
    if meta["codec_kind"] == "identity":
        return identity_codec(int(meta["d_data"]))
    return LatentCodec(kind="linear", d_data=int(meta["d_data"]),
                       d_latent=int(meta["d_latent"]),
                       encode_matrix=tensors["encode_matrix"],
                       decode_matrix=tensors["decode_matrix"])


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------

def _streams(seed, n=6):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _load_dataset(cfg, mixture, rng):
    """(latents, labels-or-None) for training; identity codec by default."""
    if cfg.data_csv:
        data, labels = read_data_csv(cfg.data_csv)
    else:
        data, labels = mixture.sample(cfg.data_size, rng)
    if cfg.conditional != "1" or np.all(labels < 0):
        labels = None
    codec = load_codec(cfg.codec_ckpt) if cfg.codec_ckpt else identity_codec(data.shape[1])
    return encode(codec, data), labels, codec


def _build_teacher(cfg, sched, mixture):
    if cfg.teacher == "analytic":
        return TeacherModel(kind="analytic", schedule=sched, mixture=mixture)
    if not cfg.teacher_ckpt:
        raise ConfigError("learned teacher needs teacher_ckpt")
    net, tsched = load_teacher_net(cfg.teacher_ckpt)
    if tsched.n_steps != sched.n_steps:
        raise ConfigError("teacher checkpoint was trained on a different schedule")
    return TeacherModel(kind="learned", schedule=sched, net=net)


def _log_rows(log):
    return [(r.iter, r.loss, r.endpoint_error, r.wall_ms) for r in log]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_teacher_train(cfg, out, resume):
    sched = make_vp_schedule(cfg.n_steps, cfg.beta_min, cfg.beta_max)
    mixture = mixture_from_config(cfg)
    data_rng, init_rng, train_rng = _streams(cfg.seed, 3)
    data, labels, _ = _load_dataset(cfg, mixture, data_rng)
    n_classes = int(labels.max()) + 1 if labels is not None else 0
    net = Denoiser(d_in=data.shape[1], width=cfg.width, embed_dim=cfg.embed_dim,
                   n_classes=n_classes, prediction_kind="epsilon",
                   seed=int(init_rng.integers(2**31)))
    train_teacher(net, data, sched, train_config_from(cfg), rng=train_rng,
                  labels=labels)
    save_teacher_net(out / "teacher.ckpt", net, sched, cfg)
    return 0


def _cmd_fit_codec(cfg, out, resume):
    if not cfg.data_csv:
        raise ConfigError("fit-codec needs data_csv")
    data, _ = read_data_csv(cfg.data_csv)
    codec = fit_linear_codec(data, cfg.d_latent)
    save_codec(out / "codec.ckpt", codec)
    return 0


def _make_model(cfg, sched, n_classes, init_rng):
    net = Denoiser(d_in=cfg.dim, width=cfg.width, embed_dim=cfg.embed_dim,
                   n_classes=n_classes, omega_conditioned=True,
                   prediction_kind=cfg.prediction_kind,
                   seed=int(init_rng.integers(2**31)))
    boundary = BoundarySpec(sigma_data=cfg.sigma_data, t_scale=cfg.t_scale)
    return ConsistencyModel(net, sched, boundary=boundary, mu=cfg.mu)


def _cmd_distill(cfg, out, resume):
    sched = make_vp_schedule(cfg.n_steps, cfg.beta_min, cfg.beta_max)
    mixture = mixture_from_config(cfg)
    data_rng, init_rng = _streams(cfg.seed, 2)
    data, labels, _ = _load_dataset(cfg, mixture, data_rng)
    teacher = _build_teacher(cfg, sched, mixture)
    if resume:
        model = load_model(resume)
    else:
        n_classes = int(labels.max()) + 1 if labels is not None else 0
        model = _make_model(cfg, sched, n_classes, init_rng)
        if teacher.kind == "learned":
            init_from_teacher(model, teacher)
    ckpt_fn = (lambda m: save_model(out / f"lcm_{m.iteration:07d}.ckpt", m, cfg))
    model, log = lcd_train(model, teacher, sched, data, train_config_from(cfg),
                           labels=labels, ckpt_every=cfg.ckpt_every, ckpt_fn=ckpt_fn)
    write_csv(out / "train_log.csv", ["iter", "loss", "endpoint_error", "wall_ms"],
              _log_rows(log))
    save_model(out / "lcm.ckpt", model, cfg)
    return 0


def _cmd_finetune(cfg, out, resume):
    if not resume:
        raise ConfigError("finetune needs --resume with a pretrained model")
    model = load_model(resume)
    sched = model.schedule
    mixture = mixture_from_config(cfg)
    (data_rng,) = _streams(cfg.seed, 1)
    data, labels, _ = _load_dataset(cfg, mixture, data_rng)
    if labels is not None and int(labels.max()) >= model.net.n_classes:
        raise ConfigError("fine-tuning labels exceed the model's class table")
    ckpt_fn = (lambda m: save_model(out / f"lcm_ft_{m.iteration:07d}.ckpt", m, cfg))
    model, log = lcf_train(model, data, sched, train_config_from(cfg),
                           labels=labels, ckpt_every=cfg.ckpt_every, ckpt_fn=ckpt_fn)
    write_csv(out / "finetune_log.csv", ["iter", "loss", "endpoint_error", "wall_ms"],
              _log_rows(log))
    save_model(out / "lcm_ft.ckpt", model, cfg)
    return 0


def _sample_schedule(cfg, sched):
    if cfg.taus:
        return SampleSchedule(taus=np.asarray(cfg.taus, dtype=np.int64),
                              steps=len(cfg.taus) + 1)
    return default_sample_schedule(sched, cfg.steps)


def _cmd_sample(cfg, out, resume):
    src = resume or cfg.ckpt
    if not src:
        raise ConfigError("sample needs ckpt (or --resume) pointing at a model")
    model = load_model(src)
    codec = load_codec(cfg.codec_ckpt) if cfg.codec_ckpt else None
    (rng,) = _streams(cfg.seed, 1)
    sch = _sample_schedule(cfg, model.schedule)
    c = None if cfg.sample_class < 0 else cfg.sample_class
    samples = multistep_sample(model, sch, cfg.omega, c, cfg.count, rng, codec=codec)
    d = samples.shape[1]
    rows = [tuple(s) + (cfg.sample_class, cfg.omega) for s in samples]
    write_csv(out / "samples.csv", [f"x{i}" for i in range(d)] + ["class", "omega"],
              rows)
    if cfg.svg == "1":
        write_scatter_svg(out / "samples.svg", samples,
                          labels=np.full(len(samples), cfg.sample_class))
    return 0


def _cmd_eval(cfg, out, resume):
    src = resume or cfg.ckpt
    if not src:
        raise ConfigError("eval needs ckpt (or --resume) pointing at a model")
    model = load_model(src)
    sched = model.schedule
    mixture = mixture_from_config(cfg)
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=mixture)
    ref_rng, proj_rng, probe_rng, sample_rng = _streams(cfg.seed, 4)
    c = None if cfg.sample_class < 0 else cfg.sample_class
    ref = teacher_ddim_sample(teacher, cfg.eval_count, cfg.ref_steps, ref_rng, c=c)
    sch = _sample_schedule(cfg, sched)
    omegas = cfg.eval_omegas or [cfg.omega]
    rows = []
    for i, om in enumerate(omegas):
        rng = np.random.default_rng(sample_rng.integers(2**63))
        samples = multistep_sample(model, sch, om, c, cfg.eval_count, rng)
        sw = sliced_w1(samples, ref, cfg.n_projections,
                       np.random.default_rng(proj_rng.integers(2**63)))
        cov, pur = mode_metrics(samples, mixture, c=c)
        epe = endpoint_error(model, teacher, cfg.endpoint_probes, om, c=c,
                             rng=np.random.default_rng(probe_rng.integers(2**63)),
                             substeps=cfg.oracle_substeps)
        rows.append((om, sw, cov, pur, epe))
        if cfg.svg == "1" and i == 0:
            write_scatter_svg(out / "eval_samples.svg", samples)
    write_csv(out / "eval_report.csv",
              ["omega", "sliced_w1", "mode_coverage", "mode_purity", "endpoint_error"],
              rows)
    return 0


def _cmd_solver_bench(cfg, out, resume):
    sched = make_vp_schedule(cfg.n_steps, cfg.beta_min, cfg.beta_max)
    mixture = mixture_from_config(cfg)
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=mixture)
    (rng,) = _streams(cfg.seed, 1)
    x0, _ = mixture.sample(cfg.bench_probes, rng)
    eps = rng.standard_normal(x0.shape)
    probes = forward_sample_batch(
        x0, np.full(len(x0), cfg.bench_n_hi, dtype=np.int64), eps, sched
    )
    results = convergence_study(
        teacher, probes, cfg.bench_n_hi, cfg.bench_n_lo, cfg.bench_steps,
        oracle_substeps=cfg.bench_oracle_substeps,
    )
    rows = []
    for kind, (steps, spans, errors, order) in results.items():
        for s, span, err in zip(steps, spans, errors):
            rows.append((kind, span, span / sched.n_steps, err, order))
    write_csv(out / "solver_bench.csv",
              ["solver", "k", "step_size", "endpoint_error", "fitted_order"], rows)
    return 0


_DISPATCH = {
    "teacher-train": _cmd_teacher_train,
    "fit-codec": _cmd_fit_codec,
    "distill": _cmd_distill,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "solver-bench": _cmd_solver_bench,
}


def run(command, cfg, resume=""):
    """Execute one subcommand; returns a process exit status."""
    try:
        if command not in _DISPATCH:
            raise ConfigError(f"unknown command {command!r}")
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return _DISPATCH[command](cfg, out, resume)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, IndexError, ZeroDivisionError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


def main(argv=None):
    parser = argparse.ArgumentParser(prog="lcmkit",
                                     description="desk-scale consistency distillation")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--steps", type=int, default=None, help="sampling steps")
    parser.add_argument("--omega", type=float, default=None, help="guidance scale")
    parser.add_argument("--resume", default="", help="checkpoint to continue from")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else default_config()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.steps is not None:
            overrides["steps"] = args.steps
        if args.omega is not None:
            overrides["omega"] = args.omega
        if overrides:
            cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(args.command, cfg, resume=args.resume)


if __name__ == "__main__":
    sys.exit(main())
