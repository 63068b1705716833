"""Correspondence quality: normalized geodesic error and the ablation harness.

The error of a predicted map is, per source vertex, the graph-geodesic
distance on the target between the predicted and true targets, divided by
the square root of the target's surface area. Both the per-vertex sum and
the mean are reported; the headline MGE is the mean scaled by 100 (a pure
reporting convention, applied consistently; all comparisons in this package
are internal). Geodesics are graph shortest paths along edge lengths, not
exact polyhedral geodesics, which the output metadata records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .correspondence import SoftCorrespondence, mle_map
from .errors import DisconnectedError, ShapeError
from .geometry import GeoGraph, Shape, geodesic_distances, surface_area
from .refine import RefineConfig, config_with_terms, refine

logger = logging.getLogger(__name__)

MGE_SCALE = 100.0


@dataclass
class ErrorSummary:
    """Per-vertex normalized geodesic errors and their aggregates."""

    per_vertex: np.ndarray
    mean_error: float      # mean of per_vertex (raw normalized units)
    sum_error: float       # plain sum over source vertices
    mge: float             # 100 * mean_error, the headline number
    area: float
    metadata: dict = field(default_factory=dict)


def _distance_rows(graph: GeoGraph, sources, cache: dict | None):
    rows = {}
    for s in sources:
        s = int(s)
        if cache is not None and s in cache:
            rows[s] = cache[s]
            continue
        d = geodesic_distances(graph, s)
        if cache is not None:
            cache[s] = d
        rows[s] = d
    return rows


def geodesic_error(pred, gt, target_shape: Shape, target_graph: GeoGraph,
                   cache: dict | None = None) -> ErrorSummary:
    """Normalized geodesic error of a predicted map against ground truth.

    ``pred`` and ``gt`` are equal-length target-index arrays. Distances run
    on the target graph; the normalizer is sqrt(area) with triangle area
    when the target has faces and the bounding-box-diagonal fallback (noted
    in metadata) otherwise. A GT/prediction pair in different components is
    an error naming the offending source vertices. ``cache`` optionally
    memoizes Dijkstra rows across calls sharing a target graph.
    """
    pred = np.asarray(pred, dtype=np.intp)
    gt = np.asarray(gt, dtype=np.intp)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ShapeError(f"map length mismatch: {pred.shape} vs {gt.shape}")
    m = target_graph.n
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.min() < 0 or arr.max() >= m:
            raise IndexError(f"{name} map target out of range [0, {m})")

    if target_shape.has_faces:
        area = surface_area(target_shape)
        area_source = "triangle_mesh"
    else:
        area = target_shape.bbox_diagonal()
        area_source = "bbox_diagonal"
        logger.warning("target has no faces; using bounding-box diagonal "
                       "as the area substitute")
    norm = np.sqrt(area)

    rows = _distance_rows(target_graph, np.unique(gt), cache)
    dist = np.array([rows[int(g)][p] for g, p in zip(gt, pred)])
    bad = np.flatnonzero(~np.isfinite(dist))
    if bad.size:
        raise DisconnectedError(
            f"{bad.size} source vertices map across disconnected target "
            f"components (first few: {bad[:8].tolist()})", vertices=bad.tolist())

    errors = dist / norm
    mean_error = float(errors.mean())
    return ErrorSummary(
        per_vertex=errors,
        mean_error=mean_error,
        sum_error=float(errors.sum()),
        mge=MGE_SCALE * mean_error,
        area=float(area),
        metadata={"geodesic": "graph_dijkstra", "area_source": area_source,
                  "mge_scale": MGE_SCALE},
    )


def error_curve(summary: ErrorSummary, thresholds):
    """Fraction of vertices with error <= t for each ascending threshold."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ShapeError("thresholds must be sorted ascending")
    n = summary.per_vertex.size
    return [(t, float((summary.per_vertex <= t).sum()) / n) for t in thresholds]


def mge_of(corr: SoftCorrespondence, gt, target_shape: Shape,
           target_graph: GeoGraph, cache: dict | None = None) -> float:
    """Headline MGE of a soft matrix's argmax map."""
    return geodesic_error(mle_map(corr), gt, target_shape, target_graph,
                          cache=cache).mge


INITIATOR_ONLY = "initiator"


@dataclass
class AblationContext:
    """Everything the ablation grid needs for one shape pair.

    ``p0_for_seed`` maps a seed to that seed's initial correspondence (the
    initiator is refinement-independent, so one initial matrix serves every
    loss subset at that seed).
    """

    source_shape: Shape
    target_shape: Shape
    source_graph: GeoGraph
    target_graph: GeoGraph
    gt: np.ndarray
    p0_for_seed: callable
    base_config: RefineConfig


def subset_label(subset) -> str:
    if subset == INITIATOR_ONLY:
        return INITIATOR_ONLY
    return "+".join(sorted(subset)) if subset else INITIATOR_ONLY


def ablation_run(context: AblationContext, loss_subsets, seeds):
    """MGE per loss subset, summarized over seeds.

    ``loss_subsets`` holds term sets (or the string ``"initiator"`` for the
    unrefined baseline); duplicates are dropped with a warning. Returns rows
    ``(label, n_seeds, mge_mean, mge_median, per_seed)``.
    """
    seen = []
    for subset in loss_subsets:
        key = subset if subset == INITIATOR_ONLY else frozenset(subset)
        if key in seen:
            logger.warning("duplicate loss subset %s dropped", subset_label(subset))
            continue
        seen.append(key)

    cache: dict = {}
    rows = []
    for key in seen:
        per_seed = []
        for seed in seeds:
            p0 = context.p0_for_seed(seed)
            if key == INITIATOR_ONLY:
                final = p0
            else:
                cfg = replace(config_with_terms(context.base_config, key),
                              seed=seed)
                trace = refine(p0, context.source_shape, context.target_shape,
                               context.source_graph, context.target_graph, cfg)
                final = trace.matrices[-1]
            per_seed.append(mge_of(final, context.gt, context.target_shape,
                                   context.target_graph, cache=cache))
        rows.append((subset_label(key), len(per_seed),
                     float(np.mean(per_seed)), float(np.median(per_seed)),
                     per_seed))
        logger.info("ablation %s: mean %.3f median %.3f",
                    rows[-1][0], rows[-1][2], rows[-1][3])
    return rows
