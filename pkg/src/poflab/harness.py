"""Experiment recipes: data, pre-training, PoF post-training and diagnostics.

A run directory holds::

    config.yaml            canonical config snapshot
    record.json            config hash, artifact paths
    metrics.tsv            per-epoch train/test loss and error for every phase
    timing.tsv             wall-clock seconds per epoch (the only timing output)
    pof_steps.tsv          one row per PoF iteration
    data/{train,test}.csv
    checkpoints/{pretrain,posttrain}.ckpt
    diagnostics/*.tsv      one table per report
    diagnostics/summary.json
    figures/*.png          only when figures are requested
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from scipy.stats import mannwhitneyu

from . import flatness as fl
from .checkpoint import Checkpoint
from .data import BatchSampler, ToyDataset, ToyDatasetSpec, export_csv, generate
from .linesearch import LineSearchConfig
from .nn import MlpSpec, error_rate, forward_loss, init_params
from .optim import (GammaSchedule, PofConfig, SamConfig, SgdConfig, sgd_config_from_dict,
                    train)
from .params import ModelSplit
from .tables import write_table

OUTPUT_ROOT_ENV = "POFLAB_OUTPUT_ROOT"

DIAGNOSTICS = ("delta-l", "slice", "corr", "xi-hist", "hessian-hist", "perturbation",
               "effective-loss", "compare")

DEFAULTS: dict = {
    "name": "default",
    "seed": 0,
    "output_dir": "",
    "dataset": {"kind": "gaussian-mixture", "n_classes": 4, "n_train": 2000, "n_test": 2000,
                "input_dim": 2, "noise_sigma": 0.5, "seed": 0},
    "model": {"layer_widths": [2, 32, 32, 32, 32, 4], "activation": "relu",
              "loss_kind": "softmax-cross-entropy", "n_classifier_layers": 1},
    "pretrain": {"recipe": "sgd", "epochs": 200, "batch_size": 256,
                 "lr": 0.1, "momentum": 0.9, "nesterov": True, "weight_decay": 5e-4,
                 "lr_schedule": [[60, 0.2], [120, 0.2], [160, 0.2]], "rho": 0.05},
    "posttrain": {"recipe": "pof", "epochs": 10, "lr": 3e-5, "lr_scale": 1.0,
                  "momentum": 0.9, "nesterov": True, "weight_decay": 5e-4,
                  "batch_size": 256, "weak_batch_size": 32,
                  "gamma": {"kind": "uniform", "a": 0.0, "b": 2.0},
                  "drift_correction": False, "reject_asymmetric": False, "max_redraws": 8,
                  "linesearch": {"xi_max": 10.0, "coarse_points": 32, "refine": "parabolic",
                                 "refine_tol": 1e-7, "asymmetry_ratio": 0.5}},
    "diagnostics": {"enabled": list(DIAGNOSTICS), "batch_size": 32, "n_batches": 200,
                    "hessian_batches": 400, "k": 10, "n_points": 41, "effective_batches": 8},
    "timing": {"enabled": False, "epochs": 3},
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style floats (YAML 1.1 wants a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789."))


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    pass


class HarnessError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


def _check_type(key: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
        value = list(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def merge(base: Mapping, override: Mapping, prefix: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys and wrong types raise."""
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"{key}: expected a mapping, got {v!r}")
            out[k] = merge(base[k], v, key + ".")
        else:
            out[k] = _check_type(key, base[k], v)
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = _load_yaml(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from None
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, d: Mapping | None = None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        merged = merge(DEFAULTS, d or {})
        for item in overrides:
            merged = merge(merged, parse_override(item))
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = _load_yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        return cls.from_dict(d, overrides)

    def __getitem__(self, key: str):
        return self.data[key]

    def validate(self) -> None:
        try:
            self.dataset_spec().validate()
            spec = self.mlp_spec()
            self.split(spec)
            if spec.input_dim != self.data["dataset"]["input_dim"]:
                raise ValueError("model input width must equal dataset input_dim")
            if spec.output_dim != self.data["dataset"]["n_classes"]:
                raise ValueError("model output width must equal n_classes")
            if self.data["pretrain"]["recipe"] not in ("sgd", "sam"):
                raise ValueError("pretrain.recipe must be sgd or sam")
            if self.data["posttrain"]["recipe"] != "pof":
                raise ValueError("posttrain.recipe must be pof")
            if self.data["pretrain"]["epochs"] < 1 or self.data["posttrain"]["epochs"] < 0:
                raise ValueError("epoch counts must be positive")
            self.pretrain_config()
            self.pof_config()
            bad = set(self.data["diagnostics"]["enabled"]) - set(DIAGNOSTICS)
            if bad:
                raise ValueError(f"unknown diagnostics {sorted(bad)}; choose from {DIAGNOSTICS}")
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """sha256 of the canonical JSON form; independent of key order."""
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def dataset_spec(self) -> ToyDatasetSpec:
        return ToyDatasetSpec(**self.data["dataset"])

    def mlp_spec(self) -> MlpSpec:
        m = self.data["model"]
        return MlpSpec(tuple(m["layer_widths"]), m["activation"], m["loss_kind"])

    def split(self, spec: MlpSpec | None = None) -> ModelSplit:
        spec = spec or self.mlp_spec()
        return spec.default_split(self.data["model"]["n_classifier_layers"])

    def pretrain_config(self):
        p = self.data["pretrain"]
        base = sgd_config_from_dict({k: p[k] for k in
                                     ("lr", "momentum", "nesterov", "weight_decay", "lr_schedule")})
        return base if p["recipe"] == "sgd" else SamConfig(rho=p["rho"], base=base)

    def pof_config(self) -> PofConfig:
        p = self.data["posttrain"]
        base = SgdConfig(lr=p["lr"] * p["lr_scale"], momentum=p["momentum"],
                         nesterov=p["nesterov"], weight_decay=p["weight_decay"])
        return PofConfig(gamma=GammaSchedule(**p["gamma"]), base=base,
                         linesearch=LineSearchConfig(**p["linesearch"]),
                         weak_batch_size=p["weak_batch_size"], batch_size=p["batch_size"],
                         drift_correction=p["drift_correction"],
                         reject_asymmetric=p["reject_asymmetric"], max_redraws=p["max_redraws"])

    def seeds(self) -> dict[str, int]:
        s = self.data["seed"]
        return {"init": s, "pretrain": s, "posttrain": s + 100, "diagnostics": 1000 * s}

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.data, sort_keys=True))
        return path


@dataclass
class RunRecord:
    config_hash: str
    run_dir: Path
    metrics: list[dict]
    checkpoints: dict[str, Path]
    reports: dict[str, Path]
    epoch_seconds: dict[str, list[float]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash,
                "checkpoints": {k: str(v.relative_to(self.run_dir)) for k, v in self.checkpoints.items()},
                "reports": {k: str(v.relative_to(self.run_dir)) for k, v in self.reports.items()}}


def resolve_output(path: str | os.PathLike | None, name: str) -> Path:
    if path:
        return Path(path)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def prepare_dir(path: Path, force: bool = False) -> Path:
    """Create a fresh output directory; an existing one is an error unless ``force``."""
    if path.exists():
        if not force:
            raise FileExistsError(f"output directory {path} exists (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")
    return path


def load_dataset(ckpt: Checkpoint) -> ToyDataset:
    """Regenerate the dataset a checkpoint was trained on from its metadata."""
    if "dataset" not in ckpt.meta:
        raise ValueError("checkpoint carries no dataset spec")
    return generate(ToyDatasetSpec(**ckpt.meta["dataset"]))


def _rank_test(before: np.ndarray, after: np.ndarray) -> dict:
    p = float(mannwhitneyu(after, before, alternative="less").pvalue)
    mb, ma = float(np.median(before)), float(np.median(after))
    return {"median_before": mb, "median_after": ma, "ratio": ma / mb, "p_value": p}


def _hist_outputs(out: Path, name: str, hist: fl.Histogram, reports: dict) -> dict:
    reports[name] = write_table(out / f"{name}.tsv", hist.rows(), ["bin_lo", "bin_hi", "count"])
    write_table(out / f"{name}.samples.tsv", [{"value": v} for v in hist.samples], ["value"])
    return hist.summary()


def symmetric_slice(table: np.ndarray) -> np.ndarray:
    """Average of the loss at +s and -s for a grid symmetric about zero."""
    n = len(table)
    mid = n // 2
    return 0.5 * (table[mid:, 1] + table[mid::-1, 1])


def slice_comparison(sgd: np.ndarray, pof: np.ndarray) -> dict:
    """Fraction of matched |s| at which the PoF slice lies at or below the SGD slice."""
    a, b = symmetric_slice(sgd), symmetric_slice(pof)
    mid = len(sgd) // 2
    return {"frac_at_or_below": float(np.mean(b <= a)),
            "frac_increment_at_or_below": float(np.mean(b - pof[mid, 1] <= a - sgd[mid, 1])),
            "n_abs_s": int(len(a))}


def compare_checkpoints(a: Checkpoint, b: Checkpoint, data: ToyDataset | None = None,
                        n_batches: int = 400, batch_size: int = 32, seed: int = 0,
                        names: tuple[str, str] = ("a", "b")) -> list[dict]:
    """Side-by-side test error, per-layer Delta L and median projected Hessian."""
    if a.spec != b.spec or a.split != b.split:
        raise ValueError("checkpoints differ in model spec or split")
    data = data or load_dataset(a)
    spec, split = a.spec, a.split
    vals: dict[str, dict[str, float]] = {}
    for name, ck in zip(names, (a, b)):
        v = {"test_error": error_rate(ck.params, spec, data.test),
             "test_loss": forward_loss(ck.params, spec, data.test)}
        for r in fl.delta_l_scan(ck.params, spec, data.train, data.test).layers:
            v[f"delta_l.{r.layer_id}"] = r.delta_l
        ph = fl.projected_hessian_values(ck.params, spec, split,
                                         BatchSampler(data.test, batch_size, seed), data.test,
                                         n_batches)
        v["median_projected_hessian.test"] = float(np.median(ph))
        vals[name] = v
    va, vb = vals[names[0]], vals[names[1]]
    return [{"metric": k, names[0]: va[k], names[1]: vb[k], "delta": vb[k] - va[k]} for k in va]


class _Run:
    def __init__(self, cfg: ExperimentConfig, run_dir: Path):
        self.cfg = cfg
        self.dir = run_dir
        self.diag = run_dir / "diagnostics"
        self.reports: dict[str, Path] = {}
        self.summary: dict[str, Any] = {}
        self.seeds = cfg.seeds()
        self.spec = cfg.mlp_spec()
        self.split = cfg.split(self.spec)
        self.d = cfg["diagnostics"]

    def sampler(self, data, offset: int, batch_size: int | None = None) -> BatchSampler:
        return BatchSampler(data, batch_size or self.d["batch_size"],
                            self.seeds["diagnostics"] + offset)

    def ckpt(self, params, label: str, phase: str) -> Checkpoint:
        return Checkpoint(params, self.spec, self.split, rng_label=label,
                          meta={"dataset": self.cfg["dataset"], "phase": phase,
                                "config_hash": self.cfg.hash()})


def run_experiment(cfg: ExperimentConfig, run_dir: str | os.PathLike | None = None,
                   force: bool = False, figures: bool = False) -> RunRecord:
    """Execute data -> pre-train -> PoF -> diagnostics and write every artifact.

    Identical config and seeds reproduce every file except ``timing.tsv``.
    """
    run_dir = prepare_dir(resolve_output(run_dir or cfg["output_dir"], cfg["name"]), force)
    R = _Run(cfg, run_dir)
    cfg.dump(run_dir / "config.yaml")
    stage = "data"
    try:
        (run_dir / "data").mkdir()
        (run_dir / "checkpoints").mkdir()
        R.diag.mkdir()
        ds = generate(cfg.dataset_spec())
        export_csv(ds.train, run_dir / "data" / "train.csv")
        export_csv(ds.test, run_dir / "data" / "test.csv")

        stage = "pretrain"
        p = cfg["pretrain"]
        params0 = init_params(R.spec, R.split, R.seeds["init"])
        pre = train(p["recipe"], params0, R.spec, R.split, ds, p["epochs"],
                    cfg.pretrain_config(), seed=R.seeds["pretrain"], batch_size=p["batch_size"])
        ck_pre = R.ckpt(pre.params, f"pretrain-seed{R.seeds['pretrain']}", "pretrain")
        checkpoints = {"pretrain": ck_pre.save(run_dir / "checkpoints" / "pretrain.ckpt")}

        stage = "posttrain"
        q = cfg["posttrain"]
        pof_cfg = cfg.pof_config()
        post = train("pof", pre.params, R.spec, R.split, ds, q["epochs"], pof_cfg,
                     seed=R.seeds["posttrain"])
        ck_post = R.ckpt(post.params, f"posttrain-seed{R.seeds['posttrain']}", "posttrain")
        checkpoints["posttrain"] = ck_post.save(run_dir / "checkpoints" / "posttrain.ckpt")

        metrics = ([{"phase": "pretrain", **m} for m in pre.metrics]
                   + [{"phase": "posttrain", **m} for m in post.metrics])
        write_table(run_dir / "metrics.tsv", metrics)
        write_table(run_dir / "pof_steps.tsv", post.step_logs, list(post.step_logs[0])
                    if post.step_logs else ["iter"])
        seconds = {"pretrain": pre.epoch_seconds, "posttrain": post.epoch_seconds}

        if cfg["timing"]["enabled"]:
            stage = "timing"
            seconds.update(_timing_runs(R, ds, pre.params))
        write_table(run_dir / "timing.tsv",
                    [{"phase": k, "epoch": i + 1, "seconds": s}
                     for k, v in seconds.items() for i, s in enumerate(v)],
                    ["phase", "epoch", "seconds"])

        stage = "diagnostics"
        _diagnostics(R, ds, ck_pre, ck_post, pre, post)
        R.summary["config_hash"] = cfg.hash()
        R.summary["final_metrics"] = {"pretrain": pre.metrics[-1],
                                      "posttrain": post.metrics[-1] if post.metrics else None}
        write_json(R.diag / "summary.json", R.summary)
        rec = RunRecord(cfg.hash(), run_dir, metrics, checkpoints, R.reports, seconds, R.summary)
        write_json(run_dir / "record.json", rec.to_dict())

        if figures:
            stage = "figures"
            from .plots import render_run
            render_run(run_dir)
        return rec
    except HarnessError:
        raise
    except Exception as exc:
        raise HarnessError(stage, f"{type(exc).__name__}: {exc}") from exc


def _timing_runs(R: _Run, ds: ToyDataset, params) -> dict[str, list[float]]:
    """A few epochs of each trainer from the same start, for wall-clock comparison."""
    p = R.cfg["pretrain"]
    n = R.cfg["timing"]["epochs"]
    base = sgd_config_from_dict({k: p[k] for k in ("lr", "momentum", "nesterov", "weight_decay")})
    out = {}
    for recipe, c in (("sgd", base), ("sam", SamConfig(p["rho"], base)), ("pof", R.cfg.pof_config())):
        out[f"timing-{recipe}"] = train(recipe, params, R.spec, R.split, ds, n, c,
                                        seed=R.seeds["pretrain"], batch_size=p["batch_size"]).epoch_seconds
    out_med = {k: float(np.median(v)) for k, v in out.items()}
    R.summary["timing_median_epoch_seconds"] = out_med
    R.summary["timing_order_sgd_pof_sam"] = bool(
        out_med["timing-sgd"] < out_med["timing-pof"] < out_med["timing-sam"])
    return out


def _diagnostics(R: _Run, ds: ToyDataset, ck_pre: Checkpoint, ck_post: Checkpoint, pre, post):
    cfg, spec, split, d = R.cfg, R.spec, R.split, R.d
    enabled = set(d["enabled"])
    out, S = R.diag, R.summary
    final = split.classifier_block_ids[-1]
    ls_cfg = cfg.pof_config().linesearch
    p_pre, p_post = ck_pre.params, ck_post.params

    if "delta-l" in enabled or "slice" in enabled:
        dl_pre = fl.delta_l_scan(p_pre, spec, ds.train, ds.test, n_points=d["n_points"])
        scales = {r.layer_id: r.s_scale for r in dl_pre.layers}
        dl_post = fl.delta_l_scan(p_post, spec, ds.train, ds.test, n_points=d["n_points"])
        for name, rep in (("pretrain", dl_pre), ("posttrain", dl_post)):
            R.reports[f"delta_l_{name}"] = write_table(out / f"delta_l_{name}.tsv", rep.rows())
        S["delta_l"] = {"final_layer": final,
                        "pretrain": dl_pre.by_layer()[final].delta_l,
                        "posttrain": dl_post.by_layer()[final].delta_l,
                        "reliable": bool(dl_pre.by_layer()[final].reliable
                                         and dl_post.by_layer()[final].reliable)}
        if "slice" in enabled:
            grid = fl.scan_grid(scales[final], d["n_points"])
            tables = {}
            for name, prm in (("pretrain", p_pre), ("posttrain", p_post)):
                (pair,) = fl.block_eigenpairs(prm, spec, ds.train, final, 1)
                tables[name] = fl.landscape_slice(prm, spec, ds.train, final, pair.eigenvector, grid)
                R.reports[f"slice_{name}"] = write_table(
                    out / f"slice_{name}.tsv", [{"s": s, "loss": l} for s, l in tables[name]])
            S["slice"] = {"layer": final, "s_scale": scales[final],
                          **slice_comparison(tables["pretrain"], tables["posttrain"])}

    if "corr" in enabled:
        pairs = fl.block_eigenpairs(p_pre, spec, ds.train, split.classifier_block_ids, d["k"])
        counts = fl.grad_eigvec_correlation_counts(
            p_pre, spec, split, [q.eigenvector for q in pairs], R.sampler(ds.train, 3),
            d["n_batches"])
        R.reports["corr_counts"] = write_table(
            out / "corr_counts.tsv",
            [{"index": i + 1, "eigenvalue": q.eigenvalue, "residual": q.residual,
              "converged": q.converged, "count": int(c)} for i, (q, c) in enumerate(zip(pairs, counts))])
        S["corr"] = {"counts": counts.tolist(), "mode_index": int(np.argmax(counts)) + 1,
                     "n_batches": d["n_batches"]}

    if "xi-hist" in enabled:
        S["xi_star"] = {}
        for scope, data, off in (("train", ds.train, 1), ("test", ds.test, 2)):
            h, _ = fl.xi_star_histogram(p_pre, spec, split, R.sampler(data, off), d["n_batches"],
                                        ls_cfg)
            S["xi_star"][scope] = _hist_outputs(out, f"xi_star_{scope}", h, R.reports)
        S["xi_star"]["median_ratio_test_over_train"] = (
            S["xi_star"]["test"]["median"] / S["xi_star"]["train"]["median"])

    if "hessian-hist" in enabled:
        S["projected_hessian"] = {}
        for scope, data in (("train", ds.train), ("test", ds.test)):
            vals = {}
            for name, prm in (("pretrain", p_pre), ("posttrain", p_post)):
                v = fl.projected_hessian_values(prm, spec, split, R.sampler(data, 5), data,
                                                d["hessian_batches"])
                h = fl.Histogram.from_samples(v)
                _hist_outputs(out, f"projected_hessian_{name}_{scope}", h, R.reports)
                vals[name] = v
            S["projected_hessian"][scope] = _rank_test(vals["pretrain"], vals["posttrain"])

    if "perturbation" in enabled:
        n = d["n_batches"]
        sizes = {
            "pof": np.array([r["delta_norm"] for r in post.step_logs]),
            "sam": fl.sam_perturbation_sizes(p_pre, spec, R.sampler(ds.train, 6, 256), n,
                                             cfg["pretrain"]["rho"]),
            "sgd": fl.sgd_update_sizes(p_pre, spec, split, R.sampler(ds.train, 7, 256), n,
                                       pre.metrics[-1]["lr"]),
        }
        write_table(out / "perturbation_sizes.tsv",
                    [{"method": m, "size": float(s)} for m, v in sizes.items() for s in v],
                    ["method", "size"])
        R.reports["perturbation_sizes"] = out / "perturbation_sizes.tsv"
        S["perturbation"] = {}
        for m, v in sizes.items():
            if v.size:
                h = fl.perturbation_size_histogram(v)
                R.reports[f"perturbation_{m}"] = write_table(out / f"perturbation_{m}.tsv", h.rows())
                S["perturbation"][m] = h.summary()

    if "effective-loss" in enabled:
        rows = []
        smp = R.sampler(ds.train, 8, cfg["posttrain"]["weak_batch_size"])
        for i in range(d["effective_batches"]):
            e = fl.effective_loss(p_pre, spec, split, smp.next_batch(), ds.train, 2.0, ls_cfg)
            rows.append({"batch": i, **{k: getattr(e, k) for k in e.__dataclass_fields__},
                         "total_xi": e.total_xi, "total_ratio": e.total_ratio,
                         "relative_gap": e.relative_gap})
        R.reports["effective_loss"] = write_table(out / "effective_loss.tsv", rows)
        gaps = [r["relative_gap"] for r in rows if r["ratio_form_valid"]]
        S["effective_loss"] = {"median_relative_gap": float(np.median(gaps)) if gaps else math.nan,
                               "n_invalid": sum(not r["ratio_form_valid"] for r in rows)}

    if "compare" in enabled:
        rows = compare_checkpoints(ck_pre, ck_post, ds, d["hessian_batches"], d["batch_size"],
                                   R.seeds["diagnostics"] + 9, names=("pretrain", "posttrain"))
        R.reports["comparison"] = write_table(out / "comparison.tsv", rows)
