"""The four refinement objectives and their primal + dual sum.

Laplacian smoothness, row sparsity, confidence-weighted anchor guidance,
and the denoising tie to the previous iterate. Every term is evaluated on
both the primal view (the refined matrix over the source graph) and the
dual view (its transpose over the target graph); the training objective is
the sum of all eight enabled components.

Each loss accepts either a Tensor (returning a scalar Tensor on the tape)
or a plain array (returning a float) so the same code serves training and
verification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .correspondence import AnchorSet
from .errors import ShapeError
from .geometry import GeoGraph

logger = logging.getLogger(__name__)

TERMS = ("laplacian", "sparsity", "anchor", "denoise")


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the four objectives.

    ``anchor_scale`` multiplies the anchor term beyond its built-in C^2
    confidence weighting. An all-zero configuration is permitted (it makes
    refinement a no-op) but logged, since it drives nothing.
    """

    laplacian: float = 1.0
    sparsity: float = 0.1
    anchor_scale: float = 1.0
    denoise: float = 10.0

    def __post_init__(self):
        for name in ("laplacian", "sparsity", "anchor_scale", "denoise"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ShapeError(f"loss weight {name} must be finite and >= 0")
        if all(getattr(self, n) == 0 for n in
               ("laplacian", "sparsity", "anchor_scale", "denoise")):
            logger.warning("all loss weights are zero; nothing drives refinement")


@dataclass
class LossReport:
    """Per-term values for both views plus their total.

    ``primal`` and ``dual`` map term name -> value; the total always equals
    the sum of the eight components.
    """

    primal: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)
    total: float = 0.0

    CSV_HEADER = ("laplacian_primal,sparsity_primal,anchor_primal,denoise_primal,"
                  "laplacian_dual,sparsity_dual,anchor_dual,denoise_dual,total")

    def components(self):
        return [self.primal[t] for t in TERMS] + [self.dual[t] for t in TERMS]

    def csv_row(self) -> str:
        vals = self.components() + [self.total]
        return ",".join(f"{v:.17g}" for v in vals)


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _value(x):
    return x if _is_tensor(x) else ad.constant(np.asarray(x, dtype=np.float64))


def laplacian_loss(p, graph: GeoGraph, weight: float = 1.0):
    """weight * sum over edges of w_ij ||row_i - row_j||^2.

    Identical to weight * trace(P^T L P) for the graph Laplacian L = D - A;
    the edge-sum form is what runs (it is cheaper and differentiable with
    plain gathers).
    """
    pt = _value(p)
    if pt.shape[0] != graph.n:
        raise ShapeError(f"matrix has {pt.shape[0]} rows, graph has {graph.n} nodes")
    if len(graph.edges) == 0:
        return pt.sum() * 0.0 if _is_tensor(p) else 0.0
    diff = ad.gather_rows(pt, graph.edges[:, 0]) - ad.gather_rows(pt, graph.edges[:, 1])
    if np.all(graph.weights == 1.0):
        out = ad.sum_squares(diff) * weight
    else:
        w_full = np.repeat(graph.weights[:, None], pt.shape[1], axis=1)
        out = (diff * diff * ad.constant(w_full)).sum() * weight
    return out if _is_tensor(p) else out.item()


def laplacian_quadratic(p, lap: np.ndarray) -> float:
    """trace(P^T L P) evaluated directly; the verification-side twin."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.trace(p.T @ lap @ p))


def sparsity_loss(p, weight: float = 1.0):
    """weight * sum of absolute entries (L1 over all rows)."""
    pt = _value(p)
    out = ad.l1(pt) * weight
    return out if _is_tensor(p) else out.item()


def anchor_loss(p_star, anchors: AnchorSet | None, scale: float = 1.0):
    """Confidence-squared-weighted cross-entropy of anchor rows.

    Each anchor row of the refined matrix is treated as unnormalized
    logits; the penalty is C^2 * (logsumexp(row) - row[label]), summed.
    The log-sum-exp is computed with a max shift.
    """
    pt = _value(p_star)
    if anchors is None or len(anchors) == 0:
        return pt.sum() * 0.0 if _is_tensor(p_star) else 0.0
    m = pt.shape[1]
    if anchors.labels.size and (anchors.labels.min() < 0 or anchors.labels.max() >= m):
        raise IndexError(f"anchor label out of range for {m} targets")
    rows = ad.gather_rows(pt, anchors.indices)
    lse = ad.logsumexp(rows)
    picked = ad.take_per_row(rows, anchors.labels)
    weights = ad.constant(scale * np.square(anchors.confidences))
    out = ((lse - picked) * weights).sum()
    return out if _is_tensor(p_star) else out.item()


def denoise_loss(p_star, p_prev, weight: float = 1.0):
    """weight * squared Frobenius distance to the previous iterate."""
    pt = _value(p_star)
    prev = p_prev if _is_tensor(p_prev) else ad.constant(np.asarray(p_prev, float))
    if pt.shape != prev.shape:
        raise ShapeError(f"shape mismatch {pt.shape} vs {prev.shape}")
    out = ad.sum_squares(pt - prev) * weight
    return out if _is_tensor(p_star) else out.item()


def total_loss(p_star_primal, p_star_dual, p_prev, source_graph: GeoGraph,
               target_graph: GeoGraph, anchors_primal: AnchorSet | None,
               anchors_dual: AnchorSet | None, weights: LossWeights,
               enabled=frozenset(TERMS)):
    """All enabled terms on both views, summed into one objective.

    ``p_star_dual`` must be the transpose of ``p_star_primal`` (as a tape
    tensor, so gradients flow through both views); ``p_prev`` is the
    iteration input, held constant. Returns ``(total, LossReport)`` where
    ``total`` is a Tensor when the views are Tensors, else a float.
    """
    enabled = frozenset(enabled)
    unknown = enabled - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    tensor_mode = _is_tensor(p_star_primal)
    prev = np.asarray(p_prev, dtype=np.float64)

    def view_terms(view, graph, anchors, prev_view):
        vals = {}
        vals["laplacian"] = (laplacian_loss(view, graph, weights.laplacian)
                             if "laplacian" in enabled else None)
        vals["sparsity"] = (sparsity_loss(view, weights.sparsity)
                            if "sparsity" in enabled else None)
        vals["anchor"] = (anchor_loss(view, anchors, weights.anchor_scale)
                          if "anchor" in enabled else None)
        vals["denoise"] = (denoise_loss(view, prev_view, weights.denoise)
                           if "denoise" in enabled else None)
        return vals

    primal_vals = view_terms(p_star_primal, source_graph, anchors_primal, prev)
    dual_vals = view_terms(p_star_dual, target_graph, anchors_dual, prev.T)

    report = LossReport()
    total = None
    for tag, vals in (("primal", primal_vals), ("dual", dual_vals)):
        out = report.primal if tag == "primal" else report.dual
        for term in TERMS:
            v = vals[term]
            if v is None:
                out[term] = 0.0
                continue
            out[term] = v.item() if tensor_mode else float(v)
            if tensor_mode:
                total = v if total is None else total + v
    if tensor_mode and total is None:
        total = p_star_primal.sum() * 0.0
    # the report total is the exact float sum of its own components
    report.total = float(sum(report.components()))
    return total if tensor_mode else report.total, report
