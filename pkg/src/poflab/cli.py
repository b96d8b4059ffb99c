"""``poflab`` command line.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments, config or input files. On
failure a one-line JSON record ``{"error": ..., "message": ..., ...}`` is
written to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flatness as fl
from .checkpoint import Checkpoint, CheckpointError
from .data import BatchSampler, export_csv, generate
from .harness import (ConfigError, ExperimentConfig, HarnessError, compare_checkpoints,
                      load_dataset, prepare_dir, resolve_output, run_experiment, write_json)
from .nn import init_params
from .optim import train
from .tables import read_table, write_table

DIAGNOSE_KINDS = ("xi-hist", "delta-l", "slice", "corr", "hessian-hist", "effective-loss",
                  "perturbation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="YAML experiment config (defaults apply to missing keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key, e.g. --set posttrain.epochs=20 (repeatable)")
    p.add_argument("--out", help="output directory (default: $POFLAB_OUTPUT_ROOT/<name>)")
    p.add_argument("--seed", type=int, help="master seed; also reseeds the dataset")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="poflab", description="PoF post-training laboratory on toy MLPs.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and export a toy dataset")
    p.add_argument("--spec", default="default",
                   help="'default' or a config file whose dataset section is used")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override, e.g. --set dataset.noise_sigma=0.3")
    _common(p, config=False)

    p = sub.add_parser("train", help="pre-train with SGD or SAM")
    p.add_argument("--recipe", choices=("sgd", "sam"), help="overrides pretrain.recipe")
    _common(p)

    p = sub.add_parser("pof", help="post-train the feature extractor of a checkpoint")
    p.add_argument("--ckpt", required=True, help="pre-trained checkpoint")
    _common(p)

    p = sub.add_parser("diagnose", help="run one landscape diagnostic on a checkpoint")
    p.add_argument("kind", choices=DIAGNOSE_KINDS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scope", choices=("train", "test"), default="train",
                   help="which split batches (and the Hessian data) come from")
    p.add_argument("--block", help="layer id (default: last classifier layer)")
    p.add_argument("--n-batches", type=int, help="override diagnostics.n_batches")
    p.add_argument("--gamma", type=float, default=2.0, help="expansion factor for effective-loss")
    p.add_argument("--steps", help="pof_steps.tsv to read PoF perturbation sizes from")
    _common(p)

    p = sub.add_parser("compare", help="side-by-side table for two checkpoints")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--n-batches", type=int, default=400)
    _common(p, config=False)

    p = sub.add_parser("run", help="full pipeline: data, pre-train, PoF, diagnostics")
    _common(p)
    return ap


def _config(args) -> ExperimentConfig:
    overrides = list(getattr(args, "overrides", []))
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"dataset.seed={args.seed}"]
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_dict({}, overrides)


def _out(args, name: str) -> Path:
    return prepare_dir(resolve_output(args.out, name), args.force)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=float))


def cmd_gen_data(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"dataset.seed={args.seed}")
    if args.spec == "default":
        cfg = ExperimentConfig.from_dict({}, overrides)
    else:
        cfg = ExperimentConfig.load(args.spec, overrides)
    out = _out(args, "data")
    ds = generate(cfg.dataset_spec())
    export_csv(ds.train, out / "train.csv")
    export_csv(ds.test, out / "test.csv")
    write_json(out / "dataset.json", cfg["dataset"])
    return {"out": str(out), "n_train": len(ds.train), "n_test": len(ds.test)}


def _save_training(out: Path, res, ck: Checkpoint, name: str) -> None:
    ck.save(out / f"{name}.ckpt")
    write_table(out / "metrics.tsv", res.metrics)
    if res.step_logs:
        write_table(out / "steps.tsv", res.step_logs)
    write_table(out / "timing.tsv", [{"epoch": i + 1, "seconds": s}
                                     for i, s in enumerate(res.epoch_seconds)])


def cmd_train(args) -> dict:
    if args.recipe:
        args.overrides.append(f"pretrain.recipe={args.recipe}")
    cfg = _config(args)
    out = _out(args, f"train-{cfg['pretrain']['recipe']}")
    spec, split, seeds = cfg.mlp_spec(), cfg.split(), cfg.seeds()
    ds = generate(cfg.dataset_spec())
    p = cfg["pretrain"]
    res = train(p["recipe"], init_params(spec, split, seeds["init"]), spec, split, ds,
                p["epochs"], cfg.pretrain_config(), seed=seeds["pretrain"],
                batch_size=p["batch_size"])
    ck = Checkpoint(res.params, spec, split, f"pretrain-seed{seeds['pretrain']}",
                    {"dataset": cfg["dataset"], "phase": "pretrain", "config_hash": cfg.hash()})
    _save_training(out, res, ck, p["recipe"])
    cfg.dump(out / "config.yaml")
    if args.figures:
        from .plots import metrics_figure
        metrics_figure(out / "metrics.tsv", out / "metrics.png")
    return {"out": str(out), "checkpoint": str(out / f"{p['recipe']}.ckpt"), **res.metrics[-1]}


def cmd_pof(args) -> dict:
    cfg = _config(args)
    ck = Checkpoint.load(args.ckpt)
    ds = load_dataset(ck)
    out = _out(args, "pof")
    q = cfg["posttrain"]
    res = train("pof", ck.params, ck.spec, ck.split, ds, q["epochs"], cfg.pof_config(),
                seed=cfg.seeds()["posttrain"])
    new = Checkpoint(res.params, ck.spec, ck.split, f"posttrain-seed{cfg.seeds()['posttrain']}",
                     {**ck.meta, "phase": "posttrain", "config_hash": cfg.hash()})
    new.save(out / "pof.ckpt")
    write_table(out / "metrics.tsv", res.metrics)
    write_table(out / "pof_steps.tsv", res.step_logs)
    write_table(out / "timing.tsv", [{"epoch": i + 1, "seconds": s}
                                     for i, s in enumerate(res.epoch_seconds)])
    cfg.dump(out / "config.yaml")
    if args.figures:
        from .plots import metrics_figure
        metrics_figure(out / "metrics.tsv", out / "metrics.png")
    return {"out": str(out), "checkpoint": str(out / "pof.ckpt"),
            **(res.metrics[-1] if res.metrics else {})}


def _hist_files(out: Path, name: str, hist: fl.Histogram) -> dict:
    write_table(out / f"{name}.tsv", hist.rows(), ["bin_lo", "bin_hi", "count"])
    write_table(out / f"{name}.samples.tsv", [{"value": v} for v in hist.samples], ["value"])
    return hist.summary()


def cmd_diagnose(args) -> dict:
    cfg = _config(args)
    ck = Checkpoint.load(args.ckpt)
    ds = load_dataset(ck)
    spec, split, params = ck.spec, ck.split, ck.params
    d = cfg["diagnostics"]
    n = args.n_batches if args.n_batches is not None else d["n_batches"]
    if n < 0:
        raise ConfigError("--n-batches must be non-negative")
    block = args.block or split.classifier_block_ids[-1]
    if block not in spec.layer_ids:
        raise ConfigError(f"unknown block {block!r}; layers are {spec.layer_ids}")
    data = ds.train if args.scope == "train" else ds.test
    base = cfg.seeds()["diagnostics"]
    ls_cfg = cfg.pof_config().linesearch
    out = _out(args, f"diagnose-{args.kind}")
    summary: dict = {"kind": args.kind, "scope": args.scope, "checkpoint": str(args.ckpt)}
    k = args.kind
    figure = None

    if k == "xi-hist":
        off = 1 if args.scope == "train" else 2
        h, _ = fl.xi_star_histogram(params, spec, split, BatchSampler(data, d["batch_size"], base + off),
                                    n, ls_cfg)
        summary.update(_hist_files(out, f"xi_star_{args.scope}", h))
        figure = ("hist", {args.scope: out / f"xi_star_{args.scope}.tsv"}, "xi*")
    elif k == "delta-l":
        rep = fl.delta_l_scan(params, spec, ds.train, ds.test, n_points=d["n_points"])
        write_table(out / "delta_l.tsv", rep.rows())
        summary["layers"] = rep.rows()
    elif k == "slice":
        (pair,) = fl.block_eigenpairs(params, spec, ds.train, block, 1)
        (r,) = fl.delta_l_scan(params, spec, ds.train, ds.test, [block], d["n_points"]).layers
        table = fl.landscape_slice(params, spec, data, block, pair.eigenvector,
                                   fl.scan_grid(r.s_scale, d["n_points"]))
        write_table(out / "slice.tsv", [{"s": s, "loss": l} for s, l in table])
        summary.update({"block": block, "lambda_max": pair.eigenvalue, "s_scale": r.s_scale})
        figure = ("slice", {args.scope: out / "slice.tsv"}, None)
    elif k == "corr":
        pairs = fl.block_eigenpairs(params, spec, ds.train, split.classifier_block_ids, d["k"])
        counts = fl.grad_eigvec_correlation_counts(
            params, spec, split, [q.eigenvector for q in pairs],
            BatchSampler(data, d["batch_size"], base + 3), n)
        write_table(out / "corr_counts.tsv",
                    [{"index": i + 1, "eigenvalue": q.eigenvalue, "residual": q.residual,
                      "converged": q.converged, "count": int(c)}
                     for i, (q, c) in enumerate(zip(pairs, counts))])
        summary.update({"counts": counts.tolist(), "mode_index": int(np.argmax(counts)) + 1})
    elif k == "hessian-hist":
        v = fl.projected_hessian_values(params, spec, split,
                                        BatchSampler(data, d["batch_size"], base + 5), data, n)
        summary.update(_hist_files(out, f"projected_hessian_{args.scope}",
                                   fl.Histogram.from_samples(v)))
        figure = ("hist", {args.scope: out / f"projected_hessian_{args.scope}.tsv"}, "u^T H u")
    elif k == "effective-loss":
        smp = BatchSampler(data, cfg["posttrain"]["weak_batch_size"], base + 8)
        rows = []
        for i in range(n):
            e = fl.effective_loss(params, spec, split, smp.next_batch(), data, args.gamma, ls_cfg)
            rows.append({"batch": i, **{f: getattr(e, f) for f in e.__dataclass_fields__},
                         "total_xi": e.total_xi, "total_ratio": e.total_ratio,
                         "relative_gap": e.relative_gap})
        write_table(out / "effective_loss.tsv", rows)
        gaps = [r["relative_gap"] for r in rows if r["ratio_form_valid"]]
        summary["median_relative_gap"] = float(np.median(gaps)) if gaps else None
    elif k == "perturbation":
        if not args.steps:
            raise ConfigError("diagnose perturbation needs --steps <pof_steps.tsv>")
        sizes = [r["delta_norm"] for r in read_table(args.steps)]
        h = fl.perturbation_size_histogram(sizes)
        summary.update(_hist_files(out, "perturbation_pof", h))
        figure = ("loghist", {"pof": out / "perturbation_pof.tsv"}, "||delta theta||")

    write_json(out / "summary.json", summary)
    if args.figures and figure is not None:
        from . import plots
        kind, paths, label = figure
        if kind == "slice":
            plots.slice_figure(paths, out / "slice.png")
        else:
            plots.histogram_figure(paths, out / f"{k}.png", label, log=kind == "loghist")
    summary["out"] = str(out)
    return summary


def cmd_compare(args) -> dict:
    a, b = Checkpoint.load(args.ckpt_a), Checkpoint.load(args.ckpt_b)
    out = _out(args, "compare")
    seed = 1000 * (args.seed or 0) + 9
    rows = compare_checkpoints(a, b, load_dataset(a), args.n_batches, seed=seed)
    write_table(out / "comparison.tsv", rows)
    return {"out": str(out), "rows": rows}


def cmd_run(args) -> dict:
    cfg = _config(args)
    rec = run_experiment(cfg, args.out, force=args.force, figures=args.figures)
    return {"out": str(rec.run_dir), "config_hash": rec.config_hash,
            **{k: v for k, v in rec.summary.items() if k != "final_metrics"}}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "pof": cmd_pof,
            "diagnose": cmd_diagnose, "compare": cmd_compare, "run": cmd_run}


def _fail(code: int, exc: BaseException, **extra) -> int:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **extra}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, exc)
    try:
        _emit(COMMANDS[args.command](args))
        return 0
    except (ConfigError, UsageError, FileExistsError, FileNotFoundError, CheckpointError) as exc:
        return _fail(2, exc, command=args.command)
    except HarnessError as exc:
        return _fail(1, exc, command=args.command, stage=exc.stage)
    except Exception as exc:  # runtime failure: report, never dump a traceback
        return _fail(1, exc, command=args.command)


if __name__ == "__main__":
    sys.exit(main())
