"""Dense MLP with hand-written backprop over a flat :class:`ParamVector`.

Every layer is stored as one block of shape ``(fan_in + 1, fan_out)``: the
first ``fan_in`` rows are the weight matrix and the last row is the bias.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .params import Block, LayoutError, ModelSplit, ParamVector, make_layout

ACTIVATIONS = ("relu", "tanh")
LOSSES = ("softmax-cross-entropy", "squared-error")


class ShapeError(LayoutError):
    """Dimension mismatch between parameters, spec and data."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message if block is None else f"[{block}] {message}")
        self.block = block


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    loss_kind: str = "softmax-cross-entropy"
    # init names: "he-normal", "normal:<sigma>", "zeros"
    weight_init: Mapping[str, str] = field(
        default_factory=lambda: {"feature": "he-normal", "classifier": "normal:0.1"})

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "weight_init", dict(self.weight_init))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least one weight layer (two widths)")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"loss_kind must be one of {LOSSES}, got {self.loss_kind!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(f"dense{i}" for i in range(self.n_layers))

    def layout(self) -> tuple[Block, ...]:
        w = self.layer_widths
        return make_layout([(lid, (w[i] + 1, w[i + 1])) for i, lid in enumerate(self.layer_ids)])

    def default_split(self, n_classifier: int = 1) -> ModelSplit:
        return ModelSplit.suffix(self.layer_ids, n_classifier)

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "loss_kind": self.loss_kind, "weight_init": dict(self.weight_init)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        kw = dict(d)
        kw["layer_widths"] = tuple(kw["layer_widths"])
        return cls(**kw)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        t = np.asarray(self.targets)
        object.__setattr__(self, "targets", t if t.dtype.kind in "iu" else t.astype(np.float64))
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.targets) != len(self.inputs):
            raise ShapeError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if len(self.inputs) < 1:
            raise ShapeError("a batch needs at least one sample")

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        return Batch(np.concatenate([b.inputs for b in batches]),
                     np.concatenate([b.targets for b in batches]))


def _parse_init(name: str):
    if name == "he-normal":
        return lambda rng, fan_in, shape: rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if name.startswith("normal:"):
        sigma = float(name.split(":", 1)[1])
        return lambda rng, fan_in, shape: rng.normal(0.0, sigma, size=shape)
    if name == "zeros":
        return lambda rng, fan_in, shape: np.zeros(shape)
    raise ValueError(f"unknown init {name!r}")


def init_params(spec: MlpSpec, split: ModelSplit | None = None,
                rng: np.random.Generator | int = 0) -> ParamVector:
    """He-normal feature weights, N(0, 0.1^2) classifier weights, zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if split is not None:
        split.validate(spec.layer_ids)
        classifier = split.classifier_block_ids
    else:
        classifier = spec.layer_ids[-1:]
    layout = spec.layout()
    views = {}
    for b in layout:
        kind = "classifier" if b.layer_id in classifier else "feature"
        draw = _parse_init(spec.weight_init[kind])
        fan_in = b.shape[0] - 1
        w = np.zeros(b.shape)
        w[:-1] = draw(rng, fan_in, (fan_in, b.shape[1]))
        views[b.layer_id] = w
    return ParamVector.from_views(views, layout)


def check_compatible(params: ParamVector, spec: MlpSpec, batch: Batch | None = None) -> None:
    layout = spec.layout()
    if params.layer_ids != spec.layer_ids:
        raise ShapeError(f"parameter blocks {params.layer_ids} do not match spec {spec.layer_ids}")
    for expected, got in zip(layout, params.layout):
        if expected.shape != got.shape:
            raise ShapeError(f"expected shape {expected.shape}, got {got.shape}", got.layer_id)
    if batch is None:
        return
    if batch.inputs.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch input dim {batch.inputs.shape[1]} != fan-in {spec.input_dim}",
            spec.layer_ids[0])
    t = batch.targets
    if t.ndim == 1:
        if t.dtype.kind not in "iu":
            raise ShapeError("1-D targets must be integer class labels", spec.layer_ids[-1])
        if t.min() < 0 or t.max() >= spec.output_dim:
            raise ShapeError(
                f"labels outside [0, {spec.output_dim})", spec.layer_ids[-1])
    elif t.ndim != 2 or t.shape[1] != spec.output_dim or spec.loss_kind != "squared-error":
        raise ShapeError(
            f"targets of shape {t.shape} incompatible with output width {spec.output_dim} "
            f"and loss {spec.loss_kind}", spec.layer_ids[-1])


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _dense(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum without BLAS: each output row is reduced in the same order whatever
    # the batch size, which keeps per-sample losses bit-stable under permutation
    # and duplication (BLAS switches kernels with the number of rows)
    return np.einsum("ij,jk->ik", a, w[:-1], optimize=False) + w[-1]


def _sample_losses(kind: str, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if kind == "softmax-cross-entropy":
        # z may carry leading axes, e.g. a stack of logits along a line
        zmax = z.max(axis=-1, keepdims=True)
        lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
        return lse - z[..., np.arange(z.shape[-2]), targets]
    t = _onehot(targets, z.shape[-1]) if targets.ndim == 1 else targets
    r = z - t
    return 0.5 * np.einsum("...ij,...ij->...i", r, r)


def _loss_grad_z(kind: str, z: np.ndarray, targets: np.ndarray) -> np.ndarray:
    n = len(z)
    if kind == "softmax-cross-entropy":
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        return p / n
    t = _onehot(targets, z.shape[1]) if targets.ndim == 1 else targets
    return (z - t) / n


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mean_loss(sample_losses: np.ndarray) -> float:
    """Correctly rounded mean, so it is exactly invariant to sample order and duplication.

    Repeated ``fsum`` calls peel the exact sum into a short expansion of
    non-overlapping floats; the final division is done in integers.
    """
    x = sample_losses
    n = len(x)
    terms: list[float] = []
    s = math.fsum(x)
    while s != 0.0 and math.isfinite(s):
        terms.append(s)
        s = math.fsum(itertools.chain(x, (-t for t in terms)))
    if len(terms) <= 1 or not math.isfinite(s):
        return (terms[0] if terms else s) / n
    num, den = 0, 1
    for t in terms:
        a, b = t.as_integer_ratio()
        num, den = num * b + a * den, den * b
    return num / (den * n)


def _forward(weights: Sequence[np.ndarray], spec: MlpSpec, x: np.ndarray, start: int = 0):
    """Forward pass from layer ``start``; returns (inputs-to-each-layer, pre-activations)."""
    acts, pre = [x], []
    a = x
    last = spec.n_layers - 1
    for i, w in enumerate(weights, start=start):
        z = _dense(a, w)
        pre.append(z)
        a = z if i == last else _act(spec.activation, z)
        acts.append(a)
    return acts, pre


def logits(params: ParamVector, spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    weights = [params.view(lid) for lid in spec.layer_ids]
    return _forward(weights, spec, np.asarray(inputs, dtype=np.float64))[1][-1]


def sample_losses(params: ParamVector, spec: MlpSpec, batch: Batch) -> np.ndarray:
    check_compatible(params, spec, batch)
    return _sample_losses(spec.loss_kind, logits(params, spec, batch.inputs), batch.targets)


def forward_loss(params: ParamVector, spec: MlpSpec, batch: Batch) -> float:
    """Mean sample-wise loss over ``batch``."""
    return mean_loss(sample_losses(params, spec, batch))


def _errors(z: np.ndarray, targets: np.ndarray) -> float:
    t = targets if targets.ndim == 1 else targets.argmax(axis=1)
    return float(np.mean(z.argmax(axis=1) != t))


def error_rate(params: ParamVector, spec: MlpSpec, batch: Batch) -> float:
    return _errors(logits(params, spec, batch.inputs), batch.targets)


def loss_and_error(params: ParamVector, spec: MlpSpec, batch: Batch) -> tuple[float, float]:
    """Mean loss and misclassification rate from a single forward pass."""
    check_compatible(params, spec, batch)
    z = logits(params, spec, batch.inputs)
    return mean_loss(_sample_losses(spec.loss_kind, z, batch.targets)), _errors(z, batch.targets)


def _selected(wrt, spec: MlpSpec, split: ModelSplit | None) -> tuple[str, ...]:
    if wrt == "all":
        return spec.layer_ids
    if isinstance(wrt, str):
        split = split or spec.default_split()
        return split.select(wrt)
    return tuple(wrt)


def loss_and_grad(params: ParamVector, spec: MlpSpec, batch: Batch, wrt="all",
                  split: ModelSplit | None = None) -> tuple[float, ParamVector]:
    """Mean loss and its exact gradient; blocks outside ``wrt`` are zero.

    ``wrt`` is ``"all"``, ``"phi"``, ``"theta"`` (resolved through ``split``)
    or an explicit sequence of layer ids.
    """
    check_compatible(params, spec, batch)
    selected = set(_selected(wrt, spec, split))
    ids = spec.layer_ids
    weights = [params.view(lid) for lid in ids]
    acts, pre = _forward(weights, spec, batch.inputs)
    loss = mean_loss(_sample_losses(spec.loss_kind, pre[-1], batch.targets))

    g = np.zeros_like(params.values)
    lowest = min((ids.index(s) for s in selected), default=len(ids))
    dz = _loss_grad_z(spec.loss_kind, pre[-1], batch.targets)
    for i in range(len(ids) - 1, lowest - 1, -1):
        if ids[i] in selected:
            gw = g[params.block_slice(ids[i])].reshape(weights[i].shape)
            gw[:-1] = acts[i].T @ dz
            gw[-1] = dz.sum(axis=0)
        if i > lowest:
            da = dz @ weights[i][:-1].T
            dz = da * _act_grad(spec.activation, pre[i - 1], acts[i])
    return loss, params.with_values(g)


def grad(params: ParamVector, spec: MlpSpec, batch: Batch, wrt="all",
         split: ModelSplit | None = None) -> ParamVector:
    return loss_and_grad(params, spec, batch, wrt, split)[1]


def perturbed_loss_and_grad_phi(params: ParamVector, spec: MlpSpec, batch: Batch,
                                delta_theta: np.ndarray,
                                split: ModelSplit | None = None) -> tuple[float, ParamVector]:
    """Loss and feature-extractor gradient at ``(phi, theta0 + delta_theta)``.

    ``delta_theta`` is a full-length vector that must be zero outside the
    classifier blocks. It is a constant here: nothing is differentiated
    through it.
    """
    split = split or spec.default_split()
    delta_theta = np.asarray(delta_theta, dtype=np.float64)
    if delta_theta.shape != params.values.shape:
        raise ShapeError(
            f"delta_theta has shape {delta_theta.shape}, expected {params.values.shape}")
    phi_mask = params.mask(split.feature_block_ids)
    if np.any(delta_theta[phi_mask] != 0.0):
        bad = [lid for lid in split.feature_block_ids
               if np.any(delta_theta[params.block_slice(lid)] != 0.0)]
        raise ShapeError("delta_theta touches feature-extractor blocks", bad[0])
    shifted = params.with_values(params.values + delta_theta)
    return loss_and_grad(shifted, spec, batch, "phi", split)


class ClassifierRestriction:
    """Batch loss as a function of the classifier blocks only.

    Feature-extractor outputs are computed once; each evaluation then runs
    only the classifier layers. Used by line searches and probes that move
    theta with phi held fixed.
    """

    def __init__(self, params: ParamVector, spec: MlpSpec, split: ModelSplit, batch: Batch):
        check_compatible(params, spec, batch)
        split.validate(spec.layer_ids)
        self.spec = spec
        self.batch = batch
        self.params = params
        ids = spec.layer_ids
        self._start = len(split.feature_block_ids)
        self._theta_idx = params.indices(split.classifier_block_ids)
        self._theta_blocks = [params.block(lid) for lid in split.classifier_block_ids]
        feature_weights = [params.view(lid) for lid in ids[:self._start]]
        acts, _ = _forward(feature_weights, spec, batch.inputs)
        self.features = acts[-1]
        self.theta0 = params.values[self._theta_idx].copy()

    def _weights(self, theta: np.ndarray) -> list[np.ndarray]:
        out, off = [], 0
        for b in self._theta_blocks:
            out.append(theta[off:off + b.length].reshape(b.shape))
            off += b.length
        return out

    def sample_losses(self, theta: np.ndarray) -> np.ndarray:
        _, pre = _forward(self._weights(theta), self.spec, self.features, self._start)
        return _sample_losses(self.spec.loss_kind, pre[-1], self.batch.targets)

    def loss(self, theta: np.ndarray) -> float:
        return mean_loss(self.sample_losses(theta))

    def along(self, direction: np.ndarray):
        """``f(xi) = loss(theta0 - xi * direction)``.

        With a single classifier layer the logits are affine in ``xi``, so both
        products with the cached features are formed once.
        """
        if len(self._theta_blocks) > 1:
            return lambda xi: self.loss(self.theta0 - xi * direction)
        w0 = self._weights(self.theta0)[0]
        dw = direction.reshape(w0.shape)
        z0 = _dense(self.features, w0)
        dz = _dense(self.features, dw)
        kind, targets = self.spec.loss_kind, self.batch.targets

        def f(xi: float) -> float:
            z = z0 if xi == 0.0 else z0 - xi * dz
            return mean_loss(_sample_losses(kind, z, targets))

        def many(xis: np.ndarray) -> np.ndarray:
            xis = np.asarray(xis, dtype=np.float64)
            z = z0[None] - xis[:, None, None] * dz[None]
            z[xis == 0.0] = z0
            return np.array([mean_loss(row) for row in _sample_losses(kind, z, targets)])

        f.many = many
        return f

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        weights = self._weights(theta)
        acts, pre = _forward(weights, self.spec, self.features, self._start)
        loss = mean_loss(_sample_losses(self.spec.loss_kind, pre[-1], self.batch.targets))
        dz = _loss_grad_z(self.spec.loss_kind, pre[-1], self.batch.targets)
        grads = []
        for j in range(len(weights) - 1, -1, -1):
            gw = np.empty_like(weights[j])
            gw[:-1] = acts[j].T @ dz
            gw[-1] = dz.sum(axis=0)
            grads.append(gw.ravel())
            if j > 0:
                dz = (dz @ weights[j][:-1].T) * _act_grad(
                    self.spec.activation, pre[j - 1], acts[j])
        return loss, np.concatenate(grads[::-1])
