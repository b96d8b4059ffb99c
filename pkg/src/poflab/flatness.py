"""Loss-landscape diagnostics in parameter-block subspaces.

Hessian-vector products are central differences of exact gradients; the
top eigenpairs of a block come from power iteration with explicit
orthogonalization against the pairs already found.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .data import BatchSampler
from .linesearch import LineSearchConfig, LineSearchResult, line_search_xi
from .nn import Batch, ClassifierRestriction, MlpSpec, forward_loss, loss_and_grad
from .params import LayoutError, ModelSplit, ParamVector


class DiagnosticError(RuntimeError):
    pass


def fd_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, v: np.ndarray,
           h: float | None = None) -> np.ndarray:
    """Central-difference Hessian-vector product of ``grad_fn`` at ``x``.

    The step is taken along ``v/|v|`` with size ``1e-4 * (1 + max|x|)`` and
    the result rescaled by ``|v|``.
    """
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(x)
    if h is None:
        h = 1e-4 * (1.0 + float(np.max(np.abs(x))))
    u = v / nv
    hv = nv * (grad_fn(x + h * u) - grad_fn(x - h * u)) / (2.0 * h)
    if not np.all(np.isfinite(hv)):
        raise DiagnosticError("non-finite Hessian-vector product")
    return hv


class HessianBlock:
    """Loss, gradient and Hessian-vector products restricted to some layers.

    ``block_ids`` is one layer id or a list of them; all other parameters stay
    at ``params``. When the block is a suffix of the network the feature
    activations below it are cached.
    """

    def __init__(self, params: ParamVector, spec: MlpSpec, data: Batch,
                 block_ids: str | Sequence[str]):
        ids = (block_ids,) if isinstance(block_ids, str) else tuple(block_ids)
        for lid in ids:
            params.block(lid)
        self.params, self.spec, self.data, self.block_ids = params, spec, data, ids
        self._idx = params.indices(ids)
        self.x0 = params.values[self._idx].copy()
        layer_ids = spec.layer_ids
        k = len(ids)
        self._restriction = None
        if ids == layer_ids[len(layer_ids) - k:] and k < len(layer_ids):
            split = ModelSplit(layer_ids[:-k], ids)
            self._restriction = ClassifierRestriction(params, spec, split, data)

    @property
    def dim(self) -> int:
        return self._idx.size

    def _full(self, x: np.ndarray) -> ParamVector:
        values = self.params.values.copy()
        values[self._idx] = x
        return self.params.with_values(values)

    def loss(self, x: np.ndarray) -> float:
        if self._restriction is not None:
            return self._restriction.loss(x)
        return forward_loss(self._full(x), self.spec, self.data)

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self._restriction is not None:
            return self._restriction.loss_and_grad(x)[1]
        g = loss_and_grad(self._full(x), self.spec, self.data, self.block_ids)[1]
        return g.values[self._idx]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise LayoutError(f"vector of shape {v.shape} does not live in a block of size {self.dim}")
        return fd_hvp(self.grad, self.x0, v)

    def dense(self) -> np.ndarray:
        """Symmetrized matrix assembled column by column from HVPs."""
        h = np.column_stack([self.matvec(e) for e in np.eye(self.dim)])
        return 0.5 * (h + h.T)


def hvp(params: ParamVector, spec: MlpSpec, data: Batch, block: str | Sequence[str],
        v: np.ndarray) -> np.ndarray:
    return HessianBlock(params, spec, data, block).matvec(v)


@dataclass(frozen=True)
class EigenPair:
    eigenvalue: float
    eigenvector: np.ndarray
    residual: float
    converged: bool
    iterations: int


def top_k_eigenpairs(matvec: Callable[[np.ndarray], np.ndarray], dim: int, k: int,
                     max_iter: int = 500, eig_tol: float = 1e-8, residual_tol: float = 1e-6,
                     seed: int = 0) -> list[EigenPair]:
    """Power iteration with deflation by orthogonalization.

    Iteration stops once the Rayleigh quotient changes by less than
    ``eig_tol`` (relative) and the deflated residual is below
    ``residual_tol * |lambda|``. A final Rayleigh-Ritz step over the k
    vectors gives the returned pairs; ``converged`` compares their true
    residual with ``residual_tol * |lambda|`` and ``iterations`` is the largest
    per-vector count. Results are sorted by descending eigenvalue.
    """
    if not 1 <= k <= dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    rng = np.random.default_rng(seed)
    basis: list[np.ndarray] = []
    pairs: list[EigenPair] = []

    def orth(x: np.ndarray) -> np.ndarray:
        for _ in range(2):
            for b in basis:
                x = x - (b @ x) * b
        return x

    iters = []
    for _ in range(k):
        v = orth(rng.standard_normal(dim))
        v /= np.linalg.norm(v)
        lam_prev = math.inf
        it = 0
        for it in range(1, max_iter + 1):
            w = orth(matvec(v))
            lam = float(v @ w)
            resid = float(np.linalg.norm(w - lam * v))
            nw = float(np.linalg.norm(w))
            if nw == 0.0:
                break
            small_change = abs(lam - lam_prev) <= eig_tol * abs(lam)
            if small_change and resid <= residual_tol * abs(lam):
                break
            lam_prev = lam
            v = w / nw
        basis.append(v)
        iters.append(it)

    # Rayleigh-Ritz on the deflation basis removes what each early pair leaked
    # into the later ones; residuals are then those of the undeflated operator
    V = np.vstack(basis)
    HV = np.vstack([matvec(b) for b in basis])
    T = V @ HV.T
    lams, Q = np.linalg.eigh(0.5 * (T + T.T))
    for j in np.argsort(-lams):
        v, hv, lam = Q[:, j] @ V, Q[:, j] @ HV, float(lams[j])
        resid = float(np.linalg.norm(hv - lam * v))
        ok = resid <= residual_tol * max(abs(lam), 1e-12)
        pairs.append(EigenPair(lam, v, resid, ok, max(iters)))
    return pairs


def block_eigenpairs(params: ParamVector, spec: MlpSpec, data: Batch,
                     block: str | Sequence[str], k: int, **kw) -> list[EigenPair]:
    hb = HessianBlock(params, spec, data, block)
    return top_k_eigenpairs(hb.matvec, hb.dim, k, **kw)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    samples: np.ndarray
    log_bins: bool = False
    flags: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, bins: int = 30, log_bins: bool = False,
                     value_range: tuple[float, float] | None = None, **flags) -> "Histogram":
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            return cls(np.array([0.0, 1.0]), np.zeros(1, dtype=np.int64), x, log_bins, flags)
        lo, hi = value_range if value_range else (float(x.min()), float(x.max()))
        if log_bins:
            if lo <= 0:
                raise DiagnosticError("log-spaced bins need positive samples")
            # a range of a few ulps would give non-increasing edges
            if hi <= lo * (1 + 1e-9):
                lo, hi = lo / 1.5, hi * 1.5
            edges = np.geomspace(lo, hi, bins + 1)
        else:
            if hi - lo <= 1e-9 * max(abs(lo), abs(hi)):
                lo, hi = lo - 0.5 * (abs(lo) or 1.0), hi + 0.5 * (abs(hi) or 1.0)
            edges = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(np.clip(x, lo, hi), edges)
        return cls(edges, counts.astype(np.int64), x, log_bins, flags)

    @property
    def n(self) -> int:
        return int(self.samples.size)

    def median(self) -> float:
        if self.n == 0:
            raise DiagnosticError("summary of an empty histogram")
        return float(np.median(self.samples))

    def peak(self) -> float:
        if self.n == 0:
            raise DiagnosticError("summary of an empty histogram")
        i = int(np.argmax(self.counts))
        lo, hi = self.edges[i], self.edges[i + 1]
        return float(math.sqrt(lo * hi) if self.log_bins else 0.5 * (lo + hi))

    def summary(self) -> dict:
        return {"n": self.n, "median": self.median(), "peak": self.peak(),
                "mean": float(np.mean(self.samples)), **self.flags}

    def rows(self) -> list[dict]:
        return [{"bin_lo": float(self.edges[i]), "bin_hi": float(self.edges[i + 1]),
                 "count": int(self.counts[i])} for i in range(len(self.counts))]


@dataclass(frozen=True)
class LayerDeltaL:
    layer_id: str
    lambda_max: float
    delta_l: float
    s_at_min: float
    s_scale: float
    reliable: bool


@dataclass
class DeltaLReport:
    layers: list[LayerDeltaL]
    method: str = "test loss along +/-v1 of the train Hessian block"

    def by_layer(self) -> dict[str, LayerDeltaL]:
        return {r.layer_id: r for r in self.layers}

    def rows(self) -> list[dict]:
        return [dict(vars(r)) for r in self.layers]


def scan_grid(s_scale: float, n_points: int = 41, width: float = 3.0) -> np.ndarray:
    return np.linspace(-width * s_scale, width * s_scale, n_points)


def landscape_slice(params: ParamVector, spec: MlpSpec, data: Batch,
                    block: str | Sequence[str], direction: np.ndarray,
                    s_values: np.ndarray) -> np.ndarray:
    """``(s, loss)`` rows for ``loss(x0 + s * d/|d|)`` inside one block."""
    d = np.asarray(direction, dtype=np.float64)
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        raise DiagnosticError("slice direction is zero")
    hb = HessianBlock(params, spec, data, block)
    d = d / nd
    s_values = np.asarray(s_values, dtype=np.float64)
    losses = [forward_loss(params, spec, data) if s == 0.0 else hb.loss(hb.x0 + s * d)
              for s in s_values]
    return np.column_stack([s_values, losses])


def _refine_scan_min(table: np.ndarray, hb: HessianBlock, v: np.ndarray) -> tuple[float, float]:
    """Polish the grid minimum of a slice with bounded Brent inside its bracket."""
    j = int(np.argmin(table[:, 1]))
    s_best, l_best = float(table[j, 0]), float(table[j, 1])
    if 0 < j < len(table) - 1:
        res = minimize_scalar(lambda s: hb.loss(hb.x0 + s * v),
                              bounds=(table[j - 1, 0], table[j + 1, 0]), method="bounded",
                              options={"xatol": 1e-6 * (table[-1, 0] - table[0, 0])})
        if res.fun < l_best:
            s_best, l_best = float(res.x), float(res.fun)
    return s_best, l_best


def delta_l_scan(params: ParamVector, spec: MlpSpec, train: Batch, test: Batch,
                 layer_ids: Sequence[str] | None = None, n_points: int = 41,
                 s_scale: float | dict | None = None, seed: int = 0,
                 **eig_kw) -> DeltaLReport:
    """Per layer: test-loss increment above its 1-D minimum along v1 of the train Hessian.

    The scan covers ``s`` in ``[-3 s_scale, 3 s_scale]`` and the grid minimum is
    refined inside its bracket; by default
    ``s_scale = sqrt(2 L_test / lambda_1)``, the distance at which the
    curvature alone would double the test loss.
    """
    layer_ids = tuple(layer_ids or spec.layer_ids)
    l0 = forward_loss(params, spec, test)
    out = []
    for lid in layer_ids:
        (pair,) = block_eigenpairs(params, spec, train, lid, 1, seed=seed, **eig_kw)
        lam = pair.eigenvalue
        if isinstance(s_scale, dict):
            sc = float(s_scale[lid])
        elif s_scale is not None:
            sc = float(s_scale)
        else:
            sc = math.sqrt(2.0 * max(l0, 1e-12) / lam) if lam > 0 else 1.0
        table = landscape_slice(params, spec, test, lid, pair.eigenvector,
                                scan_grid(sc, n_points))
        s_min, l_min = _refine_scan_min(table, HessianBlock(params, spec, test, lid),
                                        pair.eigenvector)
        out.append(LayerDeltaL(lid, lam, float(l0 - l_min), s_min, sc,
                               pair.converged and lam > 0))
    return DeltaLReport(out)


def _theta_grad(params, spec, split, batch) -> np.ndarray:
    r = ClassifierRestriction(params, spec, split, batch)
    return r.loss_and_grad(r.theta0)[1]


def grad_eigvec_correlation_counts(params: ParamVector, spec: MlpSpec, split: ModelSplit,
                                   eigvecs: Sequence[np.ndarray], sampler: BatchSampler,
                                   n_batches: int) -> np.ndarray:
    """Count, over batches, which eigenvector has the largest |v_i . g_B|."""
    v = np.vstack(eigvecs)
    counts = np.zeros(len(v), dtype=np.int64)
    for _ in range(n_batches):
        counts[int(np.argmax(np.abs(v @ _theta_grad(params, spec, split, sampler.next_batch()))))] += 1
    return counts


def xi_star_histogram(params: ParamVector, spec: MlpSpec, split: ModelSplit,
                      sampler: BatchSampler, n_batches: int,
                      cfg: LineSearchConfig = LineSearchConfig(),
                      bins: int = 30) -> tuple[Histogram, list[LineSearchResult]]:
    results = [line_search_xi(params, spec, sampler.next_batch(), split, cfg)
               for _ in range(n_batches)]
    hist = Histogram.from_samples(
        [r.xi_star for r in results], bins,
        n_asymmetric=sum(r.asymmetric for r in results),
        n_saturated=sum(r.saturated for r in results))
    return hist, results


def projected_hessian_values(params: ParamVector, spec: MlpSpec, split: ModelSplit,
                             sampler: BatchSampler, scope_data: Batch,
                             n_batches: int = 400) -> np.ndarray:
    """``u^T H u`` for unit classifier gradients u of batches drawn by ``sampler``.

    H is the classifier-block Hessian of the whole ``scope_data`` set; for a
    test-scope estimate both the batches and ``scope_data`` come from the
    test split.
    """
    hb = HessianBlock(params, spec, scope_data, split.classifier_block_ids)
    out = np.empty(n_batches)
    for i in range(n_batches):
        g = _theta_grad(params, spec, split, sampler.next_batch())
        u = g / np.linalg.norm(g)
        out[i] = u @ hb.matvec(u)
    return out


def projected_hessian_histogram(params, spec, split, sampler, scope_data,
                                n_batches: int = 400, bins: int = 30) -> Histogram:
    return Histogram.from_samples(
        projected_hessian_values(params, spec, split, sampler, scope_data, n_batches), bins)


def perturbation_size_histogram(sizes: Sequence[float], bins: int = 30) -> Histogram:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise DiagnosticError("no perturbation sizes logged")
    return Histogram.from_samples(sizes, bins, log_bins=True)


def sgd_update_sizes(params, spec, split, sampler, n_batches: int, lr: float) -> np.ndarray:
    """``|lr * dL_B/dtheta|`` for plain SGD steps in the classifier block."""
    return np.array([lr * np.linalg.norm(_theta_grad(params, spec, split, sampler.next_batch()))
                     for _ in range(n_batches)])


def sam_perturbation_sizes(params, spec, sampler, n_batches: int, rho: float) -> np.ndarray:
    """Norm of the SAM ascent step ``rho * g/|g|`` over all blocks."""
    out = np.empty(n_batches)
    for i in range(n_batches):
        g = loss_and_grad(params, spec, sampler.next_batch())[1].values
        out[i] = np.linalg.norm((rho / np.linalg.norm(g)) * g)
    return out


def pof_perturbation_sizes(params, spec, split, sampler, n_batches: int, gamma: float = 2.0,
                           cfg: LineSearchConfig = LineSearchConfig()) -> np.ndarray:
    out = np.empty(n_batches)
    for i in range(n_batches):
        r = line_search_xi(params, spec, sampler.next_batch(), split, cfg)
        out[i] = np.linalg.norm(-gamma * r.xi_star * r.direction)
    return out


@dataclass(frozen=True)
class EffectiveLoss:
    xi_star: float
    gamma: float
    loss_d: float
    loss_b: float
    proj_hessian_d: float
    proj_hessian_b: float
    second_term_xi: float
    second_term_ratio: float
    ratio_form_valid: bool

    @property
    def total_xi(self) -> float:
        return self.loss_d + self.second_term_xi

    @property
    def total_ratio(self) -> float:
        return self.loss_d + self.second_term_ratio

    @property
    def relative_gap(self) -> float:
        denom = max(abs(self.total_xi), abs(self.total_ratio), 1e-300)
        return abs(self.total_xi - self.total_ratio) / denom


def effective_loss(params: ParamVector, spec: MlpSpec, split: ModelSplit, batch: Batch,
                   data: Batch, gamma: float,
                   cfg: LineSearchConfig = LineSearchConfig()) -> EffectiveLoss:
    """Curvature-aware loss ``L_D + (gamma xi*)^2/2 u^T H_D u`` and its batch-ratio form.

    The ratio form ``L_D + gamma^2 L_B (u^T H_D u)/(u^T H_B u)`` uses the batch
    loss at theta0; it is flagged invalid when ``u^T H_B u <= 0``.
    """
    ls = line_search_xi(params, spec, batch, split, cfg)
    u = ls.direction
    theta = split.classifier_block_ids
    hd = HessianBlock(params, spec, data, theta)
    hb = HessianBlock(params, spec, batch, theta)
    ph_d = float(u @ hd.matvec(u))
    ph_b = float(u @ hb.matvec(u))
    loss_d = hd.loss(hd.x0)
    second_xi = 0.5 * gamma**2 * ls.xi_star**2 * ph_d
    valid = ph_b > 0
    second_ratio = gamma**2 * ls.loss_at_zero * ph_d / ph_b if valid else math.nan
    return EffectiveLoss(ls.xi_star, gamma, loss_d, ls.loss_at_zero, ph_d, ph_b,
                         second_xi, second_ratio, valid)
