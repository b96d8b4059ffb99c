"""1-D search for the mini-batch loss minimum along the normalized negative gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .nn import Batch, ClassifierRestriction, MlpSpec
from .params import ModelSplit, ParamVector

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class LineSearchError(ValueError):
    pass


@dataclass(frozen=True)
class LineSearchConfig:
    xi_max: float = 10.0
    coarse_points: int = 32
    refine: str = "parabolic"          # or "golden-section"
    refine_tol: float = 1e-7
    asymmetry_ratio: float = 0.5
    # the geometric grid runs from xi_max / grid_span up to xi_max
    grid_span: float = 1e5
    # gradients shorter than this count as zero (the batch is already minimized)
    min_grad_norm: float = 1e-12

    def validate(self) -> None:
        if not self.xi_max > 0:
            raise ValueError("xi_max must be positive")
        if self.coarse_points < 8:
            raise ValueError("coarse_points must be >= 8")
        if self.refine not in ("parabolic", "golden-section"):
            raise ValueError(f"unknown refine method {self.refine!r}")
        if not self.refine_tol > 0:
            raise ValueError("refine_tol must be positive")
        if not 0 < self.asymmetry_ratio < 1:
            raise ValueError("asymmetry_ratio must lie in (0, 1)")
        if not self.grid_span > 1:
            raise ValueError("grid_span must exceed 1")
        if self.min_grad_norm < 0:
            raise ValueError("min_grad_norm must be non-negative")

    def grid(self) -> np.ndarray:
        return np.concatenate(
            [[0.0], np.geomspace(self.xi_max / self.grid_span, self.xi_max, self.coarse_points)])


@dataclass(frozen=True)
class LineSearchResult:
    xi_star: float
    direction: np.ndarray
    loss_at_zero: float
    loss_at_star: float
    loss_at_mirror: float
    asymmetric: bool
    saturated: bool
    grad_norm: float
    n_evals: int


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float):
    c, d = b - _INV_PHI * (b - a), a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    n = 2
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        n += 1
    return (c, fc, n) if fc <= fd else (d, fd, n)


def minimize_along(f: Callable[[float], float], cfg: LineSearchConfig):
    """Minimize ``f`` over ``[0, xi_max]``: geometric grid, bracket, refine.

    Returns ``(xi, f(xi), f(0), saturated, n_evals)``.
    """
    grid = cfg.grid()
    many = getattr(f, "many", None)
    vals = many(grid) if many is not None else np.array([f(x) for x in grid])
    i = int(np.argmin(vals))
    n = len(grid)
    if i == len(grid) - 1:
        return float(grid[i]), float(vals[i]), float(vals[0]), True, n
    lo, hi = grid[max(i - 1, 0)], grid[i + 1]
    tol = cfg.refine_tol * hi
    if cfg.refine == "parabolic":
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": tol})
        x, fx, n = float(res.x), float(res.fun), n + int(res.nfev)
    else:
        x, fx, k = golden_section(f, lo, hi, tol)
        n += k
    if not fx <= vals[i]:
        x, fx = float(grid[i]), float(vals[i])
    return x, fx, float(vals[0]), False, n


def _search_along(along: Callable[[float], float], u: np.ndarray, gnorm: float,
                  cfg: LineSearchConfig) -> LineSearchResult:
    xi, fxi, f0, saturated, n = minimize_along(along, cfg)
    mirror = along(2.0 * xi)
    return LineSearchResult(
        xi_star=xi, direction=u, loss_at_zero=f0, loss_at_star=fxi, loss_at_mirror=mirror,
        asymmetric=bool(mirror < cfg.asymmetry_ratio * f0), saturated=saturated,
        grad_norm=gnorm, n_evals=n + 1)


def _unit(grad: np.ndarray, cfg: LineSearchConfig) -> tuple[np.ndarray, float]:
    gnorm = float(np.linalg.norm(grad))
    if not gnorm > cfg.min_grad_norm or not math.isfinite(gnorm):
        raise LineSearchError(f"cannot search along a gradient of norm {gnorm}")
    return grad / gnorm, gnorm


def line_search(loss_fn: Callable[[np.ndarray], float], theta0: np.ndarray,
                grad: np.ndarray, cfg: LineSearchConfig = LineSearchConfig()) -> LineSearchResult:
    """Search ``loss_fn(theta0 - xi * g/|g|)`` over ``xi >= 0``."""
    cfg.validate()
    u, gnorm = _unit(grad, cfg)

    def along(xi: float) -> float:
        return loss_fn(theta0 - xi * u) if xi != 0.0 else loss_fn(theta0)

    return _search_along(along, u, gnorm, cfg)


def line_search_xi(params: ParamVector, spec: MlpSpec, batch: Batch, split: ModelSplit,
                   cfg: LineSearchConfig = LineSearchConfig()) -> LineSearchResult:
    """Distance to the batch-loss minimum along the normalized negative classifier gradient.

    Only the classifier blocks move; the feature extractor output is computed
    once and reused for every evaluation.
    """
    cfg.validate()
    r = ClassifierRestriction(params, spec, split, batch)
    _, g = r.loss_and_grad(r.theta0)
    u, gnorm = _unit(g, cfg)
    return _search_along(r.along(u), u, gnorm, cfg)
