"""Differentiable objectives for hybrid bag/instance regression.

Low-level functions take model outputs (Tensors or arrays) and return
scalar Tensors; ``float(...)`` gives the value. Target rows in a batch are
laid out bag by bag, so a bag is the contiguous slice
``offsets[j]:offsets[j+1]``.

Alignment terms fold the output bias into the embedding by appending a
constant-1 coordinate, which keeps ``h = r_h . phi`` exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import ConfigurationError, Model

METHODS = ("BL-WFA", "PL-WFA", "AF", "LR", "AF-DANN", "LR-DANN", "DMFA", "Bagged-Target")
BCE_CLAMP = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    method: str = "BL-WFA"
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_d: float = 1.0
    w_r: float = 0.0
    adaptive: bool = True  # rescale the alignment/domain term by kappa

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if len(self.lambdas) != 3:
            raise ConfigurationError("lambdas must have three entries")
        for v in (*self.lambdas, self.lambda_d, self.w_r):
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weights must be finite and >= 0, got {v}")


@dataclass
class BatchView:
    """Source rows plus complete target bags for one optimisation step."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    offsets: np.ndarray
    bag_labels: np.ndarray
    source_cat: np.ndarray | None = None
    target_cat: np.ndarray | None = None
    target_idx: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, source: Dataset | None, source_idx, target: Dataset, bags) -> "BatchView":
        if len(bags) == 0:
            raise LossError("a batch needs at least one bag")
        members = np.concatenate([b.indices for b in bags])
        offsets = np.concatenate([[0], np.cumsum([len(b) for b in bags])])
        if source is None:
            sx = np.zeros((0, target.dim))
            sy = np.zeros(0)
            sc = np.zeros((0, target.categorical.shape[1]), dtype=np.int64)
        else:
            source_idx = np.asarray(source_idx, dtype=np.int64)
            sx, sy, sc = source.features[source_idx], source.labels[source_idx], source.categorical[source_idx]
        return cls(
            source_x=sx,
            source_y=sy,
            target_x=target.features[members],
            offsets=offsets,
            bag_labels=np.array([b.label for b in bags]),
            source_cat=sc,
            target_cat=target.categorical[members],
            target_idx=members,
        )

    @property
    def n_source(self) -> int:
        return len(self.source_y)

    @property
    def n_bags(self) -> int:
        return len(self.bag_labels)


@dataclass
class Outputs:
    pred_s: Tensor
    phi_s: Tensor
    pred_t: Tensor
    phi_t: Tensor


def model_outputs(model: Model, batch: BatchView) -> Outputs:
    """One forward pass over source and target rows, split back by domain."""
    ns = batch.n_source
    x = np.vstack([batch.source_x, batch.target_x])
    cat = None
    if model.embeddings:
        cat = np.vstack([batch.source_cat, batch.target_cat])
    pred, phi = model.forward(x, cat)
    s, t = slice(0, ns), slice(ns, None)
    return Outputs(pred[s], phi[s], pred[t], phi[t])


# --------------------------------------------------------------------------
# basic losses


def instance_mse(predictions, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    predictions = ad.as_tensor(predictions)
    if predictions.shape != labels.shape:
        raise LossError(f"prediction/label length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise LossError("instance_mse of an empty sample")
    return ad.mean(ad.square(predictions - labels))


def _check_bags(offsets, bag_labels, n_rows):
    offsets = np.asarray(offsets, dtype=np.int64)
    if len(offsets) < 2:
        raise LossError("empty bag set")
    if offsets[0] != 0 or offsets[-1] != n_rows or np.any(np.diff(offsets) <= 0):
        raise LossError("offsets must partition the target rows into nonempty bags")
    if len(bag_labels) != len(offsets) - 1:
        raise LossError("one bag label per bag required")
    return offsets


def bag_mse(predictions, offsets, bag_labels) -> Tensor:
    """Mean over bags of (mean member prediction - bag label)^2."""
    predictions = ad.as_tensor(predictions)
    offsets = _check_bags(offsets, bag_labels, predictions.shape[0])
    return ad.mean(ad.square(ad.segment_mean(predictions, offsets) - np.asarray(bag_labels, dtype=np.float64)))


def offsets_from_sizes(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def _fold(phi, fold_bias):
    phi = ad.as_tensor(phi)
    return ad.append_ones(phi) if fold_bias else phi


def _alignment_gap(phi_s, source_labels, phi_t, offsets, bag_labels, fold_bias) -> Tensor:
    """(1/m) sum_j y_Bj mean_{x in B_j} phi(x) - mean_i l_i phi(z_i)."""
    source_labels = np.asarray(source_labels, dtype=np.float64)
    if source_labels.size == 0:
        raise LossError("alignment needs at least one source instance")
    phi_t = _fold(phi_t, fold_bias)
    phi_s = _fold(phi_s, fold_bias)
    offsets = _check_bags(offsets, bag_labels, phi_t.shape[0])
    y_b = np.asarray(bag_labels, dtype=np.float64)[:, None]
    target_side = ad.mean(ad.segment_mean(phi_t, offsets) * y_b, axis=0)
    source_side = ad.mean(phi_s * source_labels[:, None], axis=0)
    return target_side - source_side


def xi_sq(phi_s, source_labels, phi_t, offsets, bag_labels, fold_bias=True) -> Tensor:
    """Squared covariate-shift alignment loss, ``4 * ||gap||^2``."""
    gap = _alignment_gap(phi_s, source_labels, phi_t, offsets, bag_labels, fold_bias)
    return 4.0 * ad.sum_(ad.square(gap))


def xi(phi_s, source_labels, phi_t, offsets, bag_labels, fold_bias=True) -> Tensor:
    """Covariate-shift alignment loss ``2 * ||gap||_2`` (value use; see :func:`xi_sq` for training)."""
    return ad.sqrt(xi_sq(phi_s, source_labels, phi_t, offsets, bag_labels, fold_bias))


def pseudo_labels(predictions, offsets, bag_labels) -> np.ndarray:
    """Shift each bag's predictions by a common constant so their mean is the bag label.

    This is the Euclidean projection of the prediction vector onto
    ``{v : mean(v over bag) = y_B}`` for every bag.
    """
    predictions = np.asarray(ad.as_tensor(predictions).value, dtype=np.float64)
    offsets = _check_bags(offsets, bag_labels, predictions.shape[0])
    sizes = np.diff(offsets)
    means = np.add.reduceat(predictions, offsets[:-1]) / sizes
    return predictions + np.repeat(np.asarray(bag_labels, dtype=np.float64) - means, sizes)


def broadcast_labels(offsets, bag_labels) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    return np.repeat(np.asarray(bag_labels, dtype=np.float64), np.diff(offsets))


def psi_sq(phi_s, source_labels, phi_t, target_pseudo, fold_bias=True) -> Tensor:
    """Squared pseudo-label weighted alignment ``||mean(y^ phi(x)) - mean(l phi(z))||^2``.

    With equal source and target counts ``n`` this is the ``1/n``-scaled
    norm of the difference of label-weighted sums. ``target_pseudo`` is
    treated as constant.
    """
    source_labels = np.asarray(source_labels, dtype=np.float64)
    target_pseudo = np.asarray(target_pseudo, dtype=np.float64)
    if source_labels.size == 0 or target_pseudo.size == 0:
        raise LossError("psi needs source and target rows")
    phi_t = _fold(phi_t, fold_bias)
    phi_s = _fold(phi_s, fold_bias)
    gap = ad.mean(phi_t * target_pseudo[:, None], axis=0) - ad.mean(phi_s * source_labels[:, None], axis=0)
    return ad.sum_(ad.square(gap))


def psi(phi_s, source_labels, phi_t, target_pseudo, fold_bias=True) -> Tensor:
    return ad.sqrt(psi_sq(phi_s, source_labels, phi_t, target_pseudo, fold_bias))


def kappa(bag_loss_value, align_value) -> float:
    """Stop-gradient scale matching an alignment term to the bag loss (0 when degenerate)."""
    bag_loss_value, align_value = float(bag_loss_value), float(align_value)
    if not align_value > 0:
        return 0.0
    return bag_loss_value / align_value


def lemma1_terms(target_labels, source_labels, target_pred, source_pred) -> tuple[float, float]:
    """Return ``(lambda', R)`` for aligned samples of equal size."""
    y = np.asarray(target_labels, dtype=np.float64)
    l = np.asarray(source_labels, dtype=np.float64)
    hx = np.asarray(ad.as_tensor(target_pred).value, dtype=np.float64)
    hz = np.asarray(ad.as_tensor(source_pred).value, dtype=np.float64)
    if not (len(y) == len(l) == len(hx) == len(hz)) or len(y) == 0:
        raise LossError("lemma terms need aligned, nonempty source and target samples")
    return abs(float(np.mean(y**2 - l**2))), abs(float(np.mean(hx**2 - hz**2)))


def r_term(pred_t, pred_s) -> Tensor:
    """Differentiable ``|mean h(x)^2 - mean h(z)^2|``."""
    return ad.abs_(ad.mean(ad.square(pred_t)) - ad.mean(ad.square(pred_s)))


def domain_bce(domain_predictions, domain_labels) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = ad.clip(ad.as_tensor(domain_predictions), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(domain_labels, dtype=np.float64)
    if p.shape != y.shape or y.size == 0:
        raise LossError("domain predictions and labels must be nonempty and aligned")
    return ad.mean(-(y * ad.log(p)) - (1.0 - y) * ad.log(1.0 - p))


def mean_feature_gap_sq(phi_s, phi_t) -> Tensor:
    """``||mean phi(target) - mean phi(source)||^2``."""
    gap = ad.mean(ad.as_tensor(phi_t), axis=0) - ad.mean(ad.as_tensor(phi_s), axis=0)
    return ad.sum_(ad.square(gap))


# --------------------------------------------------------------------------
# method objectives on a batch


def bagcsi(out: Outputs, batch: BatchView, spec: LossSpec, kappa_value: float | None = None):
    """``l1*bag_mse + l2*source_mse + (kappa*l3)*xi^2`` (+ optional ``w_r * R``).

    ``kappa_value`` overrides the adaptive scale; without it the scale is
    ``bag_mse / xi^2`` from this batch when ``spec.adaptive`` is set and 1
    otherwise. Returns ``(loss, parts)``.
    """
    l1, l2, l3 = spec.lambdas
    bag = bag_mse(out.pred_t, batch.offsets, batch.bag_labels)
    parts = {"bag_mse": float(bag)}
    loss = l1 * bag
    if l2 > 0 or batch.n_source:
        src = instance_mse(out.pred_s, batch.source_y)
        parts["source_mse"] = float(src)
        loss = loss + l2 * src
    if l3 > 0:
        align = xi_sq(out.phi_s, batch.source_y, out.phi_t, batch.offsets, batch.bag_labels)
        k = _resolve_kappa(spec, kappa_value, parts["bag_mse"], float(align))
        parts.update(xi_sq=float(align), kappa=k)
        loss = loss + (k * l3) * align
    return _add_r(loss, parts, out, spec)


def plwfa(out: Outputs, batch: BatchView, spec: LossSpec, pseudo: np.ndarray | None = None,
          kappa_value: float | None = None):
    """BagCSI with the alignment term replaced by ``psi^2`` on projected pseudo-labels."""
    l1, l2, l3 = spec.lambdas
    bag = bag_mse(out.pred_t, batch.offsets, batch.bag_labels)
    src = instance_mse(out.pred_s, batch.source_y)
    parts = {"bag_mse": float(bag), "source_mse": float(src)}
    loss = l1 * bag + l2 * src
    if l3 > 0:
        if pseudo is None:
            pseudo = pseudo_labels(out.pred_t.value, batch.offsets, batch.bag_labels)
        align = psi_sq(out.phi_s, batch.source_y, out.phi_t, pseudo)
        k = _resolve_kappa(spec, kappa_value, parts["bag_mse"], float(align))
        parts.update(psi_sq=float(align), kappa=k)
        loss = loss + (k * l3) * align
    return _add_r(loss, parts, out, spec)


def lr_loss(out: Outputs, batch: BatchView):
    bag = bag_mse(out.pred_t, batch.offsets, batch.bag_labels)
    src = instance_mse(out.pred_s, batch.source_y)
    return bag + src, {"bag_mse": float(bag), "source_mse": float(src)}


def af_bag_loss(model: Model, batch: BatchView) -> Tensor:
    """Mean over bags of (y_B - h(mean input of bag))^2; inputs averaged after embedding."""
    offsets = _check_bags(batch.offsets, batch.bag_labels, batch.target_x.shape[0])
    rep = model.input_representation(batch.target_x, batch.target_cat if model.embeddings else None)
    pred, _ = model.forward_from_representation(ad.segment_mean(rep, offsets))
    return ad.mean(ad.square(pred - batch.bag_labels))


def af_loss(model: Model, batch: BatchView, pred_s=None):
    """AF bag term plus source MSE; ``pred_s`` avoids a second source forward pass."""
    if pred_s is None:
        pred_s, _ = model.forward(batch.source_x, batch.source_cat if model.embeddings else None)
    bag = af_bag_loss(model, batch)
    src = instance_mse(pred_s, batch.source_y)
    return bag + src, {"bag_mse": float(bag), "source_mse": float(src)}


def bagged_target_loss(out: Outputs, batch: BatchView):
    bag = bag_mse(out.pred_t, batch.offsets, batch.bag_labels)
    return bag, {"bag_mse": float(bag)}


def dmfa_loss(out: Outputs, batch: BatchView, spec: LossSpec, kappa_value: float | None = None):
    """LR loss plus ``lambda_d * ||mean phi_T - mean phi_S||^2``."""
    loss, parts = lr_loss(out, batch)
    penalty = mean_feature_gap_sq(out.phi_s, out.phi_t)
    k = _resolve_kappa(spec, kappa_value, parts["bag_mse"], float(penalty))
    parts.update(mean_gap_sq=float(penalty), kappa=k)
    return loss + (k * spec.lambda_d) * penalty, parts


def domain_loss(model: Model, out: Outputs) -> Tensor:
    """BCE of the domain head; source rows labelled 1, target bag members 0."""
    phi = ad.concat([out.phi_s, out.phi_t], axis=0)
    labels = np.concatenate([np.ones(out.phi_s.shape[0]), np.zeros(out.phi_t.shape[0])])
    return domain_bce(model.domain_probability(phi), labels)


def dann_task_loss(model: Model, out: Outputs, batch: BatchView, base: str):
    if base == "AF":
        return af_loss(model, batch, out.pred_s)
    if base == "LR":
        return lr_loss(out, batch)
    raise ConfigurationError(f"DANN base must be 'AF' or 'LR', got {base!r}")


def dann_phase1(model: Model, out: Outputs, batch: BatchView, spec: LossSpec, base: str,
                kappa_value: float | None = None):
    """Task loss minus the weighted domain loss (differentiated w.r.t. the body)."""
    task, parts = dann_task_loss(model, out, batch, base)
    dom = domain_loss(model, out)
    k = _resolve_kappa(spec, kappa_value, parts["bag_mse"], float(dom))
    parts.update(domain_bce=float(dom), kappa=k)
    return task - (k * spec.lambda_d) * dom, parts


def dann_phase2(model: Model, out: Outputs):
    """Domain loss (differentiated w.r.t. the domain head only)."""
    dom = domain_loss(model, out)
    return dom, {"domain_bce": float(dom)}


def _resolve_kappa(spec: LossSpec, kappa_value, bag_value, align_value) -> float:
    if kappa_value is not None:
        return float(kappa_value)
    return kappa(bag_value, align_value) if spec.adaptive else 1.0


def _add_r(loss, parts, out: Outputs, spec: LossSpec):
    if spec.w_r > 0 and out.pred_s.shape[0] and out.pred_t.shape[0]:
        r = r_term(out.pred_t, out.pred_s)
        parts["r_term"] = float(r)
        loss = loss + spec.w_r * r
    return loss, parts
