"""SGD (Nesterov), first-order SAM and PoF trainers."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import BatchSampler, ToyDataset
from .linesearch import LineSearchConfig, LineSearchResult, line_search_xi
from .nn import (Batch, MlpSpec, loss_and_error, loss_and_grad,
                 perturbed_loss_and_grad_phi)
from .params import ModelSplit, ParamVector

log = logging.getLogger(__name__)

RECIPES = ("sgd", "sam", "pof")


class OptimError(RuntimeError):
    """A training step failed; carries the epoch/iteration where it happened."""

    def __init__(self, message: str, epoch: int | None = None, iteration: int | None = None):
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch {epoch}")
        if iteration is not None:
            ctx.append(f"iteration {iteration}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)
        self.epoch = epoch
        self.iteration = iteration


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    # (epoch, multiplier): from that epoch on the learning rate is multiplied
    # by the factor, cumulatively
    lr_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule",
                           tuple((int(e), float(m)) for e, m in self.lr_schedule))
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, mult in self.lr_schedule:
            if epoch >= start:
                lr *= mult
        return lr


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    base: SgdConfig = SgdConfig()

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


@dataclass(frozen=True)
class GammaSchedule:
    """Expansion factor: ``fixed`` (a), ``uniform`` on [a, b] or ``linear-growth`` a -> b."""

    kind: str = "uniform"
    a: float = 0.0
    b: float = 2.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "linear-growth"):
            raise ValueError(f"unknown gamma mode {self.kind!r}")
        if self.a < 0 or self.b < 0:
            raise ValueError("gamma bounds must be non-negative")
        if self.kind == "uniform" and self.a > self.b:
            raise ValueError(f"uniform gamma needs low <= high, got [{self.a}, {self.b}]")

    @classmethod
    def fixed(cls, gamma: float) -> "GammaSchedule":
        return cls("fixed", gamma, gamma)

    def sample(self, rng: np.random.Generator, progress: float = 0.0) -> float:
        if self.kind == "fixed":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        progress = min(max(progress, 0.0), 1.0)
        return float(self.a + (self.b - self.a) * progress)


@dataclass(frozen=True)
class PofConfig:
    gamma: GammaSchedule = GammaSchedule()
    base: SgdConfig = SgdConfig(lr=3e-5)
    linesearch: LineSearchConfig = LineSearchConfig()
    weak_batch_size: int = 32
    batch_size: int = 256
    drift_correction: bool = False
    reject_asymmetric: bool = False
    max_redraws: int = 8

    def __post_init__(self):
        if self.weak_batch_size < 1 or self.batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_redraws < 0:
            raise ValueError("max_redraws must be non-negative")
        self.linesearch.validate()


@dataclass
class SgdState:
    buf: np.ndarray | None = None
    step: int = 0


@dataclass
class PofState:
    rng: np.random.Generator
    sgd: SgdState = field(default_factory=SgdState)
    classifier_sgd: SgdState = field(default_factory=SgdState)
    step: int = 0
    total_steps: int | None = None


@dataclass(frozen=True)
class PofStepLog:
    iter: int
    xi_star: float
    gamma: float
    delta_norm: float
    loss_zero: float
    loss_star: float
    asymmetric: bool
    redraws: int
    saturated: bool
    loss_perturbed: float

    FIELDS = ("iter", "xi_star", "gamma", "delta_norm", "loss_zero", "loss_star",
              "asymmetric", "redraws", "saturated", "loss_perturbed")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _apply_update(params: ParamVector, g: np.ndarray, state: SgdState, cfg: SgdConfig,
                  lr: float, mask: np.ndarray | None) -> tuple[ParamVector, SgdState, np.ndarray]:
    """Nesterov/heavy-ball update with L2 weight decay, restricted to ``mask``."""
    w = params.values
    d = g if cfg.weight_decay == 0 else g + cfg.weight_decay * w
    if mask is not None:
        d = np.where(mask, d, 0.0)
    if cfg.momentum > 0:
        buf = d.copy() if state.buf is None else cfg.momentum * state.buf + d
        step = d + cfg.momentum * buf if cfg.nesterov else buf
    else:
        buf, step = state.buf, d
    delta = lr * step
    new = w - delta
    if mask is not None:
        new = np.where(mask, new, w)
    if not np.all(np.isfinite(new)):
        raise OptimError("non-finite parameters after update", iteration=state.step)
    return params.with_values(new), SgdState(buf, state.step + 1), delta


def _classifier_mask(params: ParamVector, spec: MlpSpec, split: ModelSplit | None) -> np.ndarray:
    # the last layer stands in for the classifier when no split is given
    return params.mask(split.classifier_block_ids if split else spec.layer_ids[-1:])


def _check_grad(g: np.ndarray, state: SgdState) -> None:
    if not np.all(np.isfinite(g)):
        raise OptimError("non-finite gradient", iteration=state.step)


def sgd_step(params: ParamVector, spec: MlpSpec, batch: Batch, cfg: SgdConfig,
             state: SgdState | None = None, lr: float | None = None, wrt="all",
             split: ModelSplit | None = None) -> tuple[ParamVector, SgdState, dict]:
    state = state or SgdState()
    if wrt != "all" and isinstance(wrt, str):
        split = split or spec.default_split()
    loss, g = loss_and_grad(params, spec, batch, wrt, split)
    _check_grad(g.values, state)
    mask = None if wrt == "all" else params.mask(split.select(wrt) if isinstance(wrt, str) else wrt)
    new, state, delta = _apply_update(params, g.values, state, cfg,
                                      cfg.lr if lr is None else lr, mask)
    theta = _classifier_mask(params, spec, split)
    info = {"loss": loss, "update_norm": float(np.linalg.norm(delta)),
            "update_norm_theta": float(np.linalg.norm(delta[theta]))}
    return new, state, info


def sam_step(params: ParamVector, spec: MlpSpec, batch: Batch, cfg: SamConfig,
             state: SgdState | None = None, lr: float | None = None,
             split: ModelSplit | None = None) -> tuple[ParamVector, SgdState, dict]:
    """First-order SAM: descend with the gradient taken at ``w + rho * g/|g|``."""
    state = state or SgdState()
    loss, g = loss_and_grad(params, spec, batch)
    _check_grad(g.values, state)
    gnorm = float(np.linalg.norm(g.values))
    if gnorm == 0.0:
        log.info("SAM step %d: zero gradient, skipping perturbation", state.step)
        eps = np.zeros_like(g.values)
        g_adv = g.values
    else:
        eps = (cfg.rho / gnorm) * g.values
        g_adv = loss_and_grad(params.with_values(params.values + eps), spec, batch)[1].values
        _check_grad(g_adv, state)
    new, state, _ = _apply_update(params, g_adv, state, cfg.base,
                                  cfg.base.lr if lr is None else lr, None)
    theta = _classifier_mask(params, spec, split)
    info = {"loss": loss, "perturbation_norm": float(np.linalg.norm(eps)),
            "perturbation_norm_theta": float(np.linalg.norm(eps[theta]))}
    return new, state, info


def pof_step(params: ParamVector, spec: MlpSpec, split: ModelSplit,
             sampler_b: BatchSampler, sampler_btilde: BatchSampler, cfg: PofConfig,
             state: PofState, lr: float | None = None
             ) -> tuple[ParamVector, PofState, PofStepLog]:
    """One PoF iteration: classifier held at theta0, feature extractor updated.

    1. draw B and line-search xi* along the normalized classifier gradient
       (redrawing asymmetric batches when ``cfg.reject_asymmetric``);
    2. sample gamma and perturb the classifier by ``-gamma * xi* * u``;
    3. draw B~ and take an SGD step on phi at the perturbed classifier.
    """
    redraws = 0
    while True:
        ls: LineSearchResult = line_search_xi(
            params, spec, sampler_b.next_batch(), split, cfg.linesearch)
        if not ls.loss_at_star <= ls.loss_at_zero:
            raise OptimError("line search increased the batch loss", iteration=state.step)
        if not (cfg.reject_asymmetric and ls.asymmetric):
            break
        redraws += 1
        if redraws > cfg.max_redraws:
            raise OptimError(f"{redraws} consecutive asymmetric batches", iteration=state.step)

    progress = state.step / state.total_steps if state.total_steps else 0.0
    gamma = cfg.gamma.sample(state.rng, progress)
    theta_idx = params.indices(split.classifier_block_ids)
    delta = np.zeros_like(params.values)
    delta[theta_idx] = (-gamma * ls.xi_star) * ls.direction

    loss_pert, g_phi = perturbed_loss_and_grad_phi(
        params, spec, sampler_btilde.next_batch(), delta, split)
    _check_grad(g_phi.values, state.sgd)
    lr = cfg.base.lr if lr is None else lr
    new, sgd_state, _ = _apply_update(params, g_phi.values, state.sgd, cfg.base, lr,
                                      params.mask(split.feature_block_ids))
    clf_state = state.classifier_sgd
    if cfg.drift_correction:
        new, clf_state, _ = sgd_step(new, spec, sampler_btilde.next_batch(), cfg.base,
                                     clf_state, lr, "theta", split)

    entry = PofStepLog(
        iter=state.step, xi_star=ls.xi_star, gamma=gamma,
        delta_norm=float(np.linalg.norm(delta)), loss_zero=ls.loss_at_zero,
        loss_star=ls.loss_at_star, asymmetric=ls.asymmetric, redraws=redraws,
        saturated=ls.saturated, loss_perturbed=loss_pert)
    state = replace(state, sgd=sgd_state, classifier_sgd=clf_state, step=state.step + 1)
    return new, state, entry


@dataclass
class TrainResult:
    params: ParamVector
    metrics: list[dict]
    step_logs: list[dict]
    epoch_seconds: list[float]


def evaluate(params: ParamVector, spec: MlpSpec, data: ToyDataset) -> dict:
    out = {}
    for scope, batch in (("train", data.train), ("test", data.test)):
        out[f"{scope}_loss"], out[f"{scope}_error"] = loss_and_error(params, spec, batch)
    return out


def train(recipe: str, params: ParamVector, spec: MlpSpec, split: ModelSplit,
          data: ToyDataset, epochs: int, cfg, seed: int = 0, batch_size: int = 256,
          start_epoch: int = 0,
          on_epoch: Callable[[int, ParamVector, dict], None] | None = None) -> TrainResult:
    """Run ``epochs`` epochs of ``recipe`` (sgd | sam | pof) from ``params``.

    ``cfg`` is an :class:`SgdConfig`, :class:`SamConfig` or :class:`PofConfig`
    to match the recipe. For SGD and SAM an epoch is one shuffled pass in
    batches of ``batch_size``; for PoF it is ``ceil(n_train / cfg.batch_size)``
    iterations with independent i.i.d. draws for B and B~.
    Epoch numbers continue from ``start_epoch`` so learning-rate schedules
    line up across pre- and post-training.
    """
    if recipe not in RECIPES:
        raise ValueError(f"recipe must be one of {RECIPES}, got {recipe!r}")
    split.validate(spec.layer_ids)
    ss = np.random.SeedSequence(seed)
    s_batch, s_weak, s_gamma = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    base = cfg if isinstance(cfg, SgdConfig) else cfg.base
    metrics, logs, seconds = [], [], []

    if recipe == "pof":
        sampler_b = BatchSampler(data.train, cfg.weak_batch_size, s_weak)
        sampler_bt = BatchSampler(data.train, cfg.batch_size, s_batch)
        iters = -(-len(data.train) // cfg.batch_size)
        state = PofState(rng=np.random.default_rng(s_gamma), total_steps=iters * epochs)
    else:
        sampler = BatchSampler(data.train, batch_size, s_batch, mode="shuffle-epoch")
        state = SgdState()

    for k in range(epochs):
        epoch = start_epoch + k
        lr = base.lr_at(epoch)
        t0 = time.perf_counter()
        extra: dict = {}
        try:
            if recipe == "pof":
                entries = []
                for _ in range(iters):
                    params, state, entry = pof_step(params, spec, split, sampler_b, sampler_bt,
                                                    cfg, state, lr)
                    entries.append(entry)
                logs.extend(e.as_row() for e in entries)
                xi = np.array([e.xi_star for e in entries])
                extra = {"mean_xi_star": float(xi.mean()),
                         "mean_gamma": float(np.mean([e.gamma for e in entries])),
                         "n_asymmetric": sum(e.asymmetric for e in entries),
                         "n_saturated": sum(e.saturated for e in entries)}
            else:
                for batch in sampler.epoch():
                    it = state.step
                    if recipe == "sgd":
                        params, state, info = sgd_step(params, spec, batch, cfg, state, lr,
                                                       split=split)
                    else:
                        params, state, info = sam_step(params, spec, batch, cfg, state, lr,
                                                       split=split)
                    logs.append({"iter": it, **info})
        except OptimError as exc:
            raise OptimError(str(exc), epoch=epoch + 1) from exc
        seconds.append(time.perf_counter() - t0)
        row = {"epoch": epoch + 1, "lr": lr, **evaluate(params, spec, data), **extra}
        if not all(math.isfinite(v) for v in row.values()):
            raise OptimError("non-finite metrics", epoch=epoch + 1)
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(epoch + 1, params, row)
    return TrainResult(params, metrics, logs, seconds)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def sgd_config_from_dict(d: dict) -> SgdConfig:
    d = dict(d)
    d["lr_schedule"] = tuple(tuple(x) for x in d.get("lr_schedule", ()))
    return SgdConfig(**d)


def sam_config_from_dict(d: dict) -> SamConfig:
    return SamConfig(rho=d.get("rho", 0.05), base=sgd_config_from_dict(d.get("base", {})))


def pof_config_from_dict(d: dict) -> PofConfig:
    d = dict(d)
    kw = {}
    if "gamma" in d:
        kw["gamma"] = GammaSchedule(**d.pop("gamma"))
    if "base" in d:
        kw["base"] = sgd_config_from_dict(d.pop("base"))
    if "linesearch" in d:
        kw["linesearch"] = LineSearchConfig(**d.pop("linesearch"))
    return PofConfig(**kw, **d)


def make_config(recipe: str, d: dict | None = None):
    d = d or {}
    if recipe == "sgd":
        return sgd_config_from_dict(d)
    if recipe == "sam":
        return sam_config_from_dict(d)
    if recipe == "pof":
        return pof_config_from_dict(d)
    raise ValueError(f"recipe must be one of {RECIPES}, got {recipe!r}")


def mean_metric(rows: Sequence[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows]))
