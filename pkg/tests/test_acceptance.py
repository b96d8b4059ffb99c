"""End-to-end acceptance checks, one per criterion, each printing a PASS/FAIL line.

The experiment criteria share two invocations of ``poflab run`` on
``recipes/default.cfg`` and one on ``recipes/small_sample.cfg``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import fd_hessian, linear_quadratic_setup, random_batch
from poflab.cli import main
from poflab.data import BatchSampler, ToyDatasetSpec, generate
from poflab.flatness import HessianBlock, block_eigenpairs
from poflab.harness import ExperimentConfig
from poflab.linesearch import line_search, line_search_xi
from poflab.nn import ClassifierRestriction, MlpSpec, forward_loss, grad, init_params
from poflab.optim import GammaSchedule, PofConfig, PofState, SgdConfig, pof_step, sgd_step
from poflab.tables import read_table

RECIPES = Path(__file__).resolve().parents[1] / "recipes"
SWEEP_SEEDS = range(10)


def report(capsys, cid, name, ok, detail):
    with capsys.disabled():
        print(f"\n[A{cid:02d}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")


def _cli_run(config, out, *extra):
    t0 = time.perf_counter()
    code = main(["run", "--config", str(config), "--out", str(out), *extra])
    assert code == 0, f"poflab run exited with {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    secs = [_cli_run(RECIPES / "default.cfg", root / f"run{i}") for i in range(2)]
    return root / "run0", root / "run1", secs


def _summary(run_dir):
    return json.loads((run_dir / "diagnostics" / "summary.json").read_text())


# 1 -------------------------------------------------------------------------

def _fd_check_layer(params, spec, batch, layer, n_coords, rng, step=1e-5, floor=1e-6):
    g = grad(params, spec, batch).values
    idx = rng.choice(params.indices([layer]), size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        e = np.zeros(len(params))
        e[i] = step
        num = (forward_loss(params.with_values(params.values + e), spec, batch)
               - forward_loss(params.with_values(params.values - e), spec, batch)) / (2 * step)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), floor))
    return worst


def test_a01_gradient_check(capsys):
    t0 = time.perf_counter()
    worst, combos = 0.0, 0
    rng = np.random.default_rng(2024)
    for activation in ("relu", "tanh"):
        for loss in ("softmax-cross-entropy", "squared-error"):
            spec = MlpSpec((6, 16, 12, 8), activation, loss)
            p = init_params(spec, rng=combos)
            p = p.with_values(p.values + 0.1 * rng.normal(size=len(p)))
            b = random_batch(spec, 16, combos)
            for layer in spec.layer_ids:
                worst = max(worst, _fd_check_layer(p, spec, b, layer, 100, rng))
                combos += 1
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 10
    report(capsys, 1, "finite-difference gradient check", ok,
           f"max rel err {worst:.2e} over {combos} layer/loss/activation combos x 100 coords "
           f"(< 1e-4), {secs:.1f} s (< 10 s)")
    assert ok


# 2 -------------------------------------------------------------------------

def test_a02_line_search_quadratics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 21))
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        a = (q * rng.uniform(0.05, 5.0, size=n)) @ q.T
        ts, t = rng.normal(size=n), rng.normal(size=n)
        g = a @ (t - ts)
        res = line_search(lambda x: 0.5 * (x - ts) @ a @ (x - ts), t, g)
        xi = np.linalg.norm(g) ** 3 / (g @ a @ g)
        worst = max(worst, abs(res.xi_star - xi) / xi)
    secs = time.perf_counter() - t0
    ok = worst < 1e-3 and secs < 10
    report(capsys, 2, "line search on random PD quadratics", ok,
           f"max rel err {worst:.2e} over 100 instances, dim <= 20 (< 1e-3), {secs:.2f} s (< 10 s)")
    assert ok


# 3 -------------------------------------------------------------------------

def test_a03_gamma_zero_is_sgd(capsys):
    ds = generate(ToyDatasetSpec(n_train=300, n_test=50, seed=11))
    spec = MlpSpec((2, 16, 16, 4))
    split = spec.default_split()
    worst = 0.0
    for seed in range(5):
        p0 = init_params(spec, split, seed)
        cfg = PofConfig(gamma=GammaSchedule.fixed(0.0), base=SgdConfig(lr=0.05), batch_size=32)
        p, state = p0, PofState(np.random.default_rng(seed))
        ref, ref_state = p0, None
        sb, sbt = BatchSampler(ds.train, 32, seed), BatchSampler(ds.train, 32, 100 + seed)
        fixed = BatchSampler(ds.train, 32, 100 + seed)
        for _ in range(5):
            p, state, _ = pof_step(p, spec, split, sb, sbt, cfg, state)
            ref, ref_state, _ = sgd_step(ref, spec, fixed.next_batch(), cfg.base, ref_state,
                                         wrt="phi", split=split)
            worst = max(worst, float(np.max(np.abs(p.values - ref.values))))
    ok = worst <= 1e-12
    report(capsys, 3, "gamma = 0 PoF step equals an SGD phi-step", ok,
           f"max |diff| {worst:.1e} over 5 seeds x 5 steps with momentum (<= 1e-12)")
    assert ok


# 4 -------------------------------------------------------------------------

def test_a04_quadratic_mirror_invariance(capsys):
    worst = 0.0
    for seed in range(50):
        spec, split, p, b = linear_quadratic_setup(n=8, seed=seed)
        r = ClassifierRestriction(p, spec, split, b)
        res = line_search_xi(p, spec, b, split)
        l0 = r.loss(r.theta0)
        lm = r.loss(r.theta0 - 2 * res.xi_star * res.direction)
        worst = max(worst, abs(lm - l0))
    ok = worst <= 1e-6
    report(capsys, 4, "batch loss invariant at the mirror point", ok,
           f"max |L(theta0 - 2 xi* u) - L(theta0)| {worst:.1e} over 50 exact quadratics (<= 1e-6)")
    assert ok


# 5 -------------------------------------------------------------------------

def test_a05_eigensolver_vs_dense_hessian(capsys):
    t0 = time.perf_counter()
    worst, n_nets = 0.0, 0
    for activation in ("relu", "tanh"):
        for loss in ("softmax-cross-entropy", "squared-error"):
            spec = MlpSpec((2, 8, 6, 4), activation, loss)  # 28 classifier parameters
            split = spec.default_split()
            p = init_params(spec, split, n_nets)
            b = random_batch(spec, 64, n_nets)
            hb = HessianBlock(p, spec, b, split.classifier_block_ids)
            assert hb.dim <= 30
            ref = np.sort(np.linalg.eigvalsh(fd_hessian(hb.loss, hb.x0)))[::-1][:3]
            got = [q.eigenvalue for q in block_eigenpairs(
                p, spec, b, split.classifier_block_ids, 3, max_iter=5000)]
            worst = max(worst, float(np.max(np.abs(np.array(got) - ref) / np.abs(ref))))
            n_nets += 1
    secs = time.perf_counter() - t0
    ok = worst < 1e-3 and secs < 60
    report(capsys, 5, "top-3 block eigenvalues vs dense finite-difference Hessian", ok,
           f"max rel err {worst:.2e} on {n_nets} networks (< 1e-3), {secs:.1f} s (< 60 s)")
    assert ok


# 6 -------------------------------------------------------------------------

def test_a06_gradient_eigvec_correlation(default_runs, capsys):
    run, _, secs = default_runs
    rows = read_table(run / "diagnostics" / "corr_counts.tsv")
    counts = [int(r["count"]) for r in rows]
    mode = int(np.argmax(counts)) + 1
    ok = sum(counts) >= 200 and mode == 1 and secs[0] < 300
    report(capsys, 6, "batch gradients align most often with v1", ok,
           f"counts {counts} over {sum(counts)} batches, mode at index {mode}; "
           f"full run {secs[0]:.0f} s (< 300 s)")
    assert ok


# 7 -------------------------------------------------------------------------

def test_a07_xi_star_test_above_train(default_runs, capsys):
    run = default_runs[0]
    med = {s: float(np.median([r["value"] for r in read_table(
        run / "diagnostics" / f"xi_star_{s}.samples.tsv")])) for s in ("train", "test")}
    ratio = med["test"] / med["train"]
    ok = med["test"] > med["train"]
    report(capsys, 7, "median xi* larger on test batches", ok,
           f"median train {med['train']:.4f}, test {med['test']:.4f}, ratio {ratio:.3f}")
    assert ok


# 8 -------------------------------------------------------------------------

def test_a08_projected_hessian_decreases(default_runs, capsys):
    run = default_runs[0]
    cfg = ExperimentConfig.load(run / "config.yaml")
    assert cfg["posttrain"]["epochs"] >= 10 and cfg["diagnostics"]["hessian_batches"] >= 400
    ph = _summary(run)["projected_hessian"]
    ok = all(ph[s]["median_after"] < ph[s]["median_before"] and ph[s]["p_value"] < 0.05
             for s in ("train", "test"))
    detail = "; ".join(f"{s}: ratio {ph[s]['ratio']:.3f}, p {ph[s]['p_value']:.1e}"
                       for s in ("train", "test"))
    report(capsys, 8, "median projected Hessian drops after PoF", ok,
           f"{detail} (400 batches, {cfg['posttrain']['epochs']} PoF epochs)")
    assert ok


# 9 -------------------------------------------------------------------------

def _small_sample_outcome(run_dir):
    d = run_dir / "diagnostics"
    final = read_table(d / "delta_l_pretrain.tsv")[-1]["layer_id"]
    dl = {k: {r["layer_id"]: r["delta_l"] for r in read_table(d / f"delta_l_{k}.tsv")}[final]
          for k in ("pretrain", "posttrain")}
    sl = {k: np.array([[r["s"], r["loss"]] for r in read_table(d / f"slice_{k}.tsv")])
          for k in ("pretrain", "posttrain")}
    s = sl["pretrain"][:, 0]
    assert np.array_equal(s, sl["posttrain"][:, 0]) and np.allclose(s, -s[::-1])
    mid = len(s) // 2
    # matched |s|: mean of the +s and -s values on the shared symmetric grid
    sym = {k: 0.5 * (v[mid:, 1] + v[mid::-1, 1]) for k, v in sl.items()}
    frac = float(np.mean(sym["posttrain"] <= sym["pretrain"]))
    return dl, frac


def test_a09_final_layer_flatness(tmp_path, capsys):
    t0 = time.perf_counter()
    _cli_run(RECIPES / "small_sample.cfg", tmp_path / "small")
    secs = time.perf_counter() - t0
    dl, frac = _small_sample_outcome(tmp_path / "small")
    ok = dl["posttrain"] < dl["pretrain"] and frac >= 0.8 and secs < 900
    passes = []
    for seed in SWEEP_SEEDS:
        if seed == 0:
            passes.append(ok)
            continue
        _cli_run(RECIPES / "small_sample.cfg", tmp_path / f"sweep{seed}", "--seed", str(seed))
        d, f = _small_sample_outcome(tmp_path / f"sweep{seed}")
        passes.append(d["posttrain"] < d["pretrain"] and f >= 0.8)
    report(capsys, 9, "final-layer Delta L and train-loss slice after PoF vs SGD", ok,
           f"Delta L SGD {dl['pretrain']:.3e} -> PoF {dl['posttrain']:.3e}; slice at/below "
           f"SGD on {frac:.0%} of |s| (>= 80%); {secs:.1f} s. Informational: criterion holds "
           f"on {sum(passes)}/{len(passes)} seeds of the same recipe")
    assert ok


# 10 ------------------------------------------------------------------------

def test_a10_perturbation_ordering(default_runs, capsys):
    run = default_runs[0]
    t0 = time.perf_counter()
    rows = read_table(run / "diagnostics" / "perturbation_sizes.tsv")
    med = {m: float(np.median([r["size"] for r in rows if r["method"] == m]))
           for m in ("pof", "sam", "sgd")}
    secs = time.perf_counter() - t0
    ok = med["pof"] > med["sam"] > med["sgd"] and secs < 1
    report(capsys, 10, "median perturbation size PoF > SAM > SGD update", ok,
           f"PoF {med['pof']:.3e}, SAM {med['sam']:.3e}, SGD {med['sgd']:.3e}; "
           f"read from logs in {secs * 1e3:.0f} ms (< 1 s)")
    assert ok


# 11 ------------------------------------------------------------------------

def test_a11_determinism(default_runs, capsys):
    a, b, _ = default_runs
    files = ["metrics.tsv", "pof_steps.tsv", "checkpoints/pretrain.ckpt",
             "checkpoints/posttrain.ckpt", "data/train.csv", "data/test.csv"]
    files += [str(p.relative_to(a)) for p in sorted((a / "diagnostics").glob("*.tsv"))]
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]

    def strip(s):
        return {k: v for k, v in s.items() if not k.startswith("timing")}

    if strip(_summary(a)) != strip(_summary(b)):
        differ.append("diagnostics/summary.json (non-timing fields)")
    ok = not differ
    report(capsys, 11, "two identical run invocations", ok,
           f"{len(files) + 1} artifacts compared byte for byte, "
           f"{'all identical' if ok else 'differ: ' + ', '.join(differ)}")
    assert ok


# 12 ------------------------------------------------------------------------

def test_a12_wall_clock_ordering(default_runs, capsys):
    rows = read_table(default_runs[0] / "timing.tsv")
    med = {m: float(np.median([r["seconds"] for r in rows if r["phase"] == f"timing-{m}"]))
           for m in ("sgd", "pof", "sam")}
    ordered = med["sgd"] < med["pof"] < med["sam"]
    with capsys.disabled():
        print(f"\n[A12] {'PASS' if ordered else 'INFO'}  per-epoch wall clock SGD < PoF < SAM "
              f"(informational, never fails): SGD {med['sgd'] * 1e3:.1f} ms, "
              f"PoF {med['pof'] * 1e3:.1f} ms, SAM {med['sam'] * 1e3:.1f} ms; "
              f"ordering {'holds' if ordered else 'violated on this machine'}")
