"""Command-line surface: train, gradcheck, params, sweep.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 divergence, 4 I/O error.
``METANORM_THREADS`` (default 1) caps sweep worker processes; determinism is
guaranteed only at 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Variable, finite_diff_check
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, load_config, serialize_config
from .errors import CheckpointError, ConfigError, DivergenceError, MetanormError
from .ilm import init_ilm_params, ilm_forward
from .models import NormOptions, build_micro_cnn, count_parameters, resnet_arch_table
from .norms import AffineParams, PartitionScheme, rescale, standardize
from .train import SgdState, StepSchedule, load_cifar10, synthetic_dataset, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

CSV_HEADER = "epoch,split,loss,error_rate,lr,wall_time_s"


def _norm_options(cfg: ExperimentConfig) -> NormOptions:
    return NormOptions(
        kind=cfg.norm_kind,
        groups=cfg.norm_groups,
        key_group_size=cfg.ilm_key_group_size,
        embed_dim_rule=cfg.ilm_embed_dim_rule,
        act_mu=cfg.ilm_act_mu,
        act_gamma=cfg.ilm_act_gamma,
    )


def _dataset(cfg: ExperimentConfig):
    if cfg.dataset_kind == "synthetic":
        return synthetic_dataset(cfg.dataset_seed, cfg.dataset_classes,
                                 cfg.dataset_samples, cfg.dataset_noise_std,
                                 cfg.dataset_instance_gain)
    return load_cifar10(cfg.dataset_path, split="train")


def _sgd_state(cfg: ExperimentConfig, params: dict) -> SgdState:
    no_decay = frozenset(
        name for name in params
        if cfg.optimizer_no_decay_base
        and name.rsplit(".", 1)[-1] in ("omega", "beta", "b_omega", "b_beta")
    )
    return SgdState(lr=cfg.optimizer_lr, momentum=cfg.optimizer_momentum,
                    weight_decay=cfg.optimizer_weight_decay, no_decay=no_decay)


def write_metrics_csv(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(f"{r.epoch},{r.split},{r.loss!r},{r.error_rate!r},"
                     f"{r.lr!r},{r.wall_time_s:.3f}\n")


def run_experiment(cfg: ExperimentConfig, out_dir: str, seed: int | None = None):
    """Train per config; write metrics.csv, final.ckpt, run.log. Returns records."""
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.train_seed if seed is None else seed
    opts = _norm_options(cfg)
    data = _dataset(cfg)
    dtype = np.float64 if cfg.train_dtype == "float64" else np.float32
    model = build_micro_cnn(opts, seed=seed, classes=data.classes, dtype=dtype)
    total, extra, ratio = count_parameters(model)
    sgd = _sgd_state(cfg, model.parameters())
    schedule = StepSchedule(cfg.optimizer_lr, cfg.milestones())
    records = train(model, data, sgd, schedule, epochs=cfg.train_epochs,
                    batch_size=cfg.train_batch_size, seed=seed, dtype=dtype)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    save_checkpoint(os.path.join(out_dir, "final.ckpt"),
                    {name: var.value for name, var in model.parameters().items()})
    with open(os.path.join(out_dir, "run.log"), "w", encoding="utf-8") as fh:
        fh.write(f"norm_kind={cfg.norm_kind} seed={seed}\n")
        fh.write(f"parameters total={total} norm_extra={extra} ratio={ratio:.6f}\n")
        if records:
            final = [r for r in records if r.split == "val"][-1]
            fh.write(f"final_val_error={final.error_rate!r}\n")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    return records, model


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.train_seed = args.seed
        out_dir = args.out or cfg.output_dir
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        records, _ = run_experiment(cfg, out_dir)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    final = [r for r in records if r.split == "val"]
    if final:
        print(f"final val error: {final[-1].error_rate:.4f}")
    print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _corrupted_scale(a: Variable) -> Variable:
    # negative-control fixture: forward doubles, backward lies
    out = Variable(a.value * 2.0)
    return ad._record(out, (a,), lambda g: (3.0 * g,))


def gradcheck_layer(layer: str, shape: tuple, seed: int,
                    inject_error: bool = False):
    """Finite-difference check of one layer kind on a random float64 input.

    Inputs are resampled until no ReLU pre-activation sits near a kink.
    """
    rng = np.random.default_rng(seed)
    b, c, h, w = shape
    x = Variable(rng.standard_normal(shape), requires_grad=True)
    # fixed random projection; a symmetric loss like sum(out^2) is nearly
    # invariant to x for standardizers and starves the check of signal
    coeff = Variable(rng.standard_normal(shape))
    eps = 1e-5

    if layer == "standardize":
        scheme = PartitionScheme.group(2)

        def f():
            xs, _ = standardize(x, scheme, eps)
            out = _corrupted_scale(xs) if inject_error else xs
            return ad.vsum(out * coeff)

        return finite_diff_check(f, [x], names=["x"])

    if layer == "rescale":
        affine = AffineParams.init(c)
        affine.omega.value = rng.standard_normal(c)
        affine.beta.value = rng.standard_normal(c)

        def f():
            out = rescale(x, affine)
            out = _corrupted_scale(out) if inject_error else out
            return ad.vsum(out * coeff)

        params = [x, affine.omega, affine.beta]
        return finite_diff_check(f, params, names=["x", "omega", "beta"])

    if layer in ("gn", "ln", "in", "ilm+gn", "ilm+ln", "ilm+in"):
        base = layer.split("+")[-1]
        scheme = {"gn": PartitionScheme.group(2), "ln": PartitionScheme.layer(),
                  "in": PartitionScheme.instance()}[base]
        if layer.startswith("ilm+"):
            kgs = c // 2
            ilm = init_ilm_params(c, kgs, rng)

            def f():
                out = ilm_forward(x, scheme, ilm, kgs, epsilon=eps)
                out = _corrupted_scale(out) if inject_error else out
                return ad.vsum(out * coeff)

            params = [x] + list(ilm.variables.values())
            names = ["x"] + list(ilm.variables.keys())
            return finite_diff_check(f, params, names=names)
        affine = AffineParams.init(c)
        affine.omega.value = rng.standard_normal(c)
        affine.beta.value = rng.standard_normal(c)

        def f():
            from .norms import norm_layer_forward

            out = norm_layer_forward(x, scheme, affine, mode="train", epsilon=eps)
            out = _corrupted_scale(out) if inject_error else out
            return ad.vsum(out * coeff)

        params = [x, affine.omega, affine.beta]
        return finite_diff_check(f, params, names=["x", "omega", "beta"])

    raise ValueError(f"unknown layer kind {layer!r}")


def cmd_gradcheck(args) -> int:
    try:
        shape = tuple(int(s) for s in args.shape.split("x"))
        if len(shape) != 4:
            raise ValueError("shape must be BxCxHxW")
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = gradcheck_layer(args.layer, shape, args.seed,
                             inject_error=args.inject_error)
    for entry in report.entries:
        status = "ok" if entry.max_rel_err <= report.tol_rel else "FAIL"
        print(f"{entry.name}: max_rel_err={entry.max_rel_err:.3e} "
              f"excluded={entry.excluded} [{status}]")
    if report.passed:
        print(f"gradcheck passed (tol {report.tol_rel})")
        return EXIT_OK
    worst = report.worst
    print(f"gradcheck FAILED: worst offender {worst.name} "
          f"({worst.max_rel_err:.3e} > {report.tol_rel})", file=sys.stderr)
    return EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# params


def cmd_params(args) -> int:
    try:
        arch = resnet_arch_table(args.arch)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    kgs = 16 if args.key_style == "gn" else 1
    total, extra, ratio = count_parameters(arch, ilm=True, key_group_size=kgs)
    result = {"arch": args.arch, "key_style": args.key_style, "total": total,
              "norm_extra": extra, "ratio_percent": 100.0 * ratio}
    if args.json:
        print(json.dumps(result))
    else:
        print(f"{args.arch} ({args.key_style}-style keys): total={total} "
              f"extra={extra} increment={100.0 * ratio:.3f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _batch_independence_spotcheck(model, data, log_path: str) -> None:
    """Log max per-instance output difference between batch-1 and batch-8 eval."""
    x1 = data.images[:1].astype(np.float64)
    x8 = data.images[:8].astype(np.float64)
    out1 = model.forward(Variable(x1), mode="eval").value[0]
    out8 = model.forward(Variable(x8), mode="eval").value[0]
    diff = float(np.max(np.abs(out1 - out8)))
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(f"batch_independence_max_diff={diff:.3e}\n")


def _sweep_run_one(cfg_text: str, run_dir: str, axis: str, value: str):
    """One sweep run; importable so worker processes can execute it."""
    from .config import parse_config

    cfg = parse_config(cfg_text)
    if axis == "batch_size":
        cfg.train_batch_size = int(value)
    else:
        act_mu, act_gamma = value.split(":")
        cfg.ilm_act_mu = act_mu
        cfg.ilm_act_gamma = act_gamma
    records, model = run_experiment(cfg, run_dir)
    if axis == "batch_size" and cfg.norm_kind != "bn":
        _batch_independence_spotcheck(model, _dataset(cfg),
                                      os.path.join(run_dir, "run.log"))
    return [(value, r.epoch, r.split, r.loss, r.error_rate, r.lr, r.wall_time_s)
            for r in records]


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.train_seed = args.seed
        values = [v for v in args.values.split(",") if v]
        if not values:
            raise ConfigError("empty sweep axis")
        workers = int(os.environ.get("METANORM_THREADS", "1"))
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    cfg_text = serialize_config(cfg)
    jobs = [(value, os.path.join(out_dir, f"run_{value.replace(':', '_')}"))
            for value in values]
    rows = []
    failed = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            futures = {pool.submit(_sweep_run_one, cfg_text, run_dir, args.axis,
                                   value): value for value, run_dir in jobs}
            for future, value in futures.items():
                try:
                    rows.extend(future.result())
                except (MetanormError, ValueError) as exc:
                    print(f"run {value} failed: {exc}", file=sys.stderr)
                    failed.append(value)
    else:
        for value, run_dir in jobs:
            try:
                rows.extend(_sweep_run_one(cfg_text, run_dir, args.axis, value))
            except (MetanormError, ValueError) as exc:
                print(f"run {value} failed: {exc}", file=sys.stderr)
                failed.append(value)
    combined = os.path.join(out_dir, "sweep.csv")
    with open(combined, "w", encoding="utf-8") as fh:
        fh.write("axis_value," + CSV_HEADER + "\n")
        for value, epoch, split, loss, err, lr, wt in rows:
            fh.write(f"{value},{epoch},{split},{loss!r},{err!r},{lr!r},{wt:.3f}\n")
    print(f"wrote {combined}")
    if failed:
        print(f"{len(failed)} run(s) failed: {failed}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="metanorm",
                                     description="Meta-normalization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one experiment from a config")
    p_train.add_argument("--config", help="config file path")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--layer", default="ilm+gn",
                        choices=["standardize", "rescale", "gn", "ln", "in",
                                 "ilm+gn", "ilm+ln", "ilm+in"])
    p_grad.add_argument("--shape", default="2x8x4x4")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--inject-error", action="store_true",
                        help=argparse.SUPPRESS)  # negative-control fixture
    p_grad.set_defaults(func=cmd_gradcheck)

    p_params = sub.add_parser("params", help="parameter increment accounting")
    p_params.add_argument("arch", help="resnet18|resnet34|resnet50|resnet101|resnet152")
    p_params.add_argument("--key-style", choices=["gn", "in"], default="gn")
    p_params.add_argument("--json", action="store_true")
    p_params.set_defaults(func=cmd_params)

    p_sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    p_sweep.add_argument("--config", help="config file path")
    p_sweep.add_argument("--axis", choices=["batch_size", "activations"],
                         required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma list, e.g. 8,2 or tanh:sigmoid,relu:relu")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", help="output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
