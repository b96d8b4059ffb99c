"""Optional PNG figures rendered from the tables a run or diagnostic wrote.

Figures are derived artifacts: every number they show is already in a
``.tsv`` next to them.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .tables import column, read_table  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _hist_axes(ax, path: Path, label: str, log: bool = False):
    rows = read_table(path)
    lo, hi, c = column(rows, "bin_lo"), column(rows, "bin_hi"), column(rows, "count")
    ax.stairs(c / max(c.sum(), 1), np.append(lo, hi[-1]), label=label)
    if log:
        ax.set_xscale("log")


def histogram_figure(paths: dict[str, Path], out: Path, xlabel: str, log: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, p in paths.items():
        _hist_axes(ax, p, label, log)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction")
    ax.legend()
    return _save(fig, out)


def slice_figure(paths: dict[str, Path], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, p in paths.items():
        rows = read_table(p)
        ax.plot(column(rows, "s"), column(rows, "loss"), marker=".", label=label)
    ax.set_xlabel("s along v1")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, out)


def delta_l_figure(paths: dict[str, Path], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(paths), 1)
    for j, (label, p) in enumerate(paths.items()):
        rows = read_table(p)
        x = np.arange(len(rows))
        ax.bar(x + j * width, column(rows, "delta_l"), width, label=label)
        ax.set_xticks(x + 0.4 - width / 2, [r["layer_id"] for r in rows])
    ax.set_ylabel("Delta L")
    ax.legend()
    return _save(fig, out)


def counts_figure(path: Path, out: Path) -> Path:
    rows = read_table(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(column(rows, "index"), column(rows, "count"))
    ax.set_xlabel("eigenvector index i")
    ax.set_ylabel("count of argmax |v_i . g_B|")
    return _save(fig, out)


def metrics_figure(path: Path, out: Path) -> Path:
    rows = read_table(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(1, len(rows) + 1)
    for key in ("train_error", "test_error"):
        ax.plot(x, column(rows, key), label=key)
    ax.set_xlabel("epoch (pre-training then post-training)")
    ax.legend()
    return _save(fig, out)


def perturbation_figure(path: Path, out: Path) -> Path:
    rows = read_table(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sizes = column(rows, "size")
    methods = [r["method"] for r in rows]
    pos = sizes[sizes > 0]
    bins = np.geomspace(pos.min() / 1.5, pos.max() * 1.5, 40)
    for m in dict.fromkeys(methods):
        v = np.array([s for s, mm in zip(sizes, methods) if mm == m and s > 0])
        ax.hist(v, bins=bins, histtype="step", label=m, weights=np.full(len(v), 1 / len(v)))
    ax.set_xscale("log")
    ax.set_xlabel("perturbation / update size")
    ax.set_ylabel("fraction")
    ax.legend()
    return _save(fig, out)


def render_run(run_dir) -> list[Path]:
    """Render every figure whose source tables exist in ``run_dir``."""
    run_dir = Path(run_dir)
    d, f = run_dir / "diagnostics", run_dir / "figures"
    made = [metrics_figure(run_dir / "metrics.tsv", f / "metrics.png")]
    pairs = {"pretrain": "pre-trained", "posttrain": "after PoF"}
    if (d / "delta_l_pretrain.tsv").exists():
        made.append(delta_l_figure({v: d / f"delta_l_{k}.tsv" for k, v in pairs.items()},
                                   f / "delta_l.png"))
    if (d / "slice_pretrain.tsv").exists():
        made.append(slice_figure({v: d / f"slice_{k}.tsv" for k, v in pairs.items()},
                                 f / "slice.png"))
    if (d / "corr_counts.tsv").exists():
        made.append(counts_figure(d / "corr_counts.tsv", f / "corr_counts.png"))
    if (d / "xi_star_train.tsv").exists():
        made.append(histogram_figure({s: d / f"xi_star_{s}.tsv" for s in ("train", "test")},
                                     f / "xi_star.png", "xi*"))
    for scope in ("train", "test"):
        if (d / f"projected_hessian_pretrain_{scope}.tsv").exists():
            made.append(histogram_figure(
                {v: d / f"projected_hessian_{k}_{scope}.tsv" for k, v in pairs.items()},
                f / f"projected_hessian_{scope}.png", "u^T H u"))
    if (d / "perturbation_sizes.tsv").exists():
        made.append(perturbation_figure(d / "perturbation_sizes.tsv", f / "perturbation.png"))
    return made
