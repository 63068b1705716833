"""Iterative refinement of a soft correspondence matrix.

Each iteration anchors the most confident matches of its input matrix,
instantiates a fresh dual-graph block (weights are never shared across
iterations), trains it for a fixed number of inner steps against the
four-loss objective, and hands the refined matrix to the next iteration.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .correspondence import AnchorSet, SoftCorrespondence, default_anchor_count, select_anchors
from .dgat import Dg2nBlock, dg2n_forward, neighbor_table
from .errors import RefinementError, ShapeError
from .geometry import GeoGraph, Shape
from .losses import TERMS, LossWeights, total_loss
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    """Knobs of the refinement loop; defaults are the desk-scale setup."""

    iterations: int = 5
    inner_steps: int = 200
    n_layers: int = 2              # DGAT layers per block (residual stack depth)
    k_neighbors: int = 8           # 8 suits mesh graphs; 10 for kNN graphs
    fusion: str = "mean"
    weights: LossWeights = field(default_factory=LossWeights)
    enabled: frozenset = frozenset(TERMS)
    anchor_fraction: float = 0.05
    lr: float = 1e-2
    dnn1_hidden: int = 32
    dnn2_hidden: int = 16
    layer_norm: bool = True
    freeze_anchors: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ShapeError("iterations must be >= 1")
        if self.inner_steps < 1:
            raise ShapeError("inner_steps must be >= 1")
        if self.n_layers < 1 or self.k_neighbors < 1:
            raise ShapeError("n_layers and k_neighbors must be >= 1")
        if not 0 < self.anchor_fraction <= 1:
            raise ShapeError("anchor_fraction must lie in (0, 1]")
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(TERMS)
        if unknown:
            raise ShapeError(f"unknown loss terms: {sorted(unknown)}")


@dataclass
class IterationResult:
    corr: SoftCorrespondence
    reports: list
    elapsed: float   # wall time, informational only; excluded from artifacts


@dataclass
class RefineTrace:
    iterations: list = field(default_factory=list)

    @property
    def matrices(self):
        return [it.corr for it in self.iterations]

    def __len__(self):
        return len(self.iterations)


def _pick_anchors(p: SoftCorrespondence, source_shape: Shape, target_shape: Shape,
                  fraction: float, rng: np.random.Generator):
    """Anchor sets for both views from one input matrix."""
    k_src = default_anchor_count(p.source_n, fraction)
    k_tgt = default_anchor_count(p.target_m, fraction)
    primal = select_anchors(p, source_shape, k_src,
                            int(rng.integers(p.source_n)))
    dual = select_anchors(p.transposed(), target_shape, k_tgt,
                          int(rng.integers(p.target_m)))
    return primal, dual


def refine_once(p: SoftCorrespondence, source_shape: Shape, target_shape: Shape,
                source_graph: GeoGraph, target_graph: GeoGraph,
                config: RefineConfig, rng_seed: int,
                anchors: tuple[AnchorSet, AnchorSet] | None = None):
    """One refinement iteration: fresh weights, fixed inner-step training.

    Anchors default to the confident matches of this iteration's own input.
    Returns ``(p_star, reports)`` where ``p_star`` is the forward output of
    the final inner step and ``reports`` one LossReport per step.
    """
    if p.source_n != source_graph.n or p.target_m != target_graph.n:
        raise ShapeError("matrix dimensions do not match the graphs")
    rng = np.random.default_rng(rng_seed)
    if anchors is None:
        anchors_primal, anchors_dual = _pick_anchors(
            p, source_shape, target_shape, config.anchor_fraction, rng)
    else:
        anchors_primal, anchors_dual = anchors

    block = Dg2nBlock(p.source_n, p.target_m, config.k_neighbors,
                      config.n_layers, rng, config.dnn1_hidden,
                      config.dnn2_hidden, config.layer_norm, config.fusion)
    primal_table = neighbor_table(source_graph, config.k_neighbors)
    dual_table = neighbor_table(target_graph, config.k_neighbors)
    opt = ad.Adam(block.params(), lr=config.lr)
    p_const = ad.constant(p.matrix)

    reports = []
    last_out = None
    # the inner matrices are small; BLAS threading costs more than it buys
    with threadpool_limits(limits=1):
        for step in range(config.inner_steps):
            out = dg2n_forward(p_const, primal_table, dual_table, block)
            total, report = total_loss(out, out.T, p.matrix, source_graph,
                                       target_graph, anchors_primal,
                                       anchors_dual, config.weights,
                                       config.enabled)
            if not np.isfinite(report.total):
                raise RefinementError(
                    f"loss diverged (non-finite) at inner step {step}")
            reports.append(report)
            last_out = out.data
            total.backward()
            opt.step()
    return SoftCorrespondence(last_out), reports


def refine(p0: SoftCorrespondence, source_shape: Shape, target_shape: Shape,
           source_graph: GeoGraph, target_graph: GeoGraph,
           config: RefineConfig) -> RefineTrace:
    """Chain ``config.iterations`` refinement passes from ``p0``.

    Each iteration refines the previous output. With ``freeze_anchors`` the
    anchor sets are taken once from ``p0``; otherwise they are re-selected
    from each iteration's input, so labels refresh as confidence grows.
    """
    trace = RefineTrace()
    frozen = None
    if config.freeze_anchors:
        rng = np.random.default_rng(derive_seed(config.seed, "anchors"))
        frozen = _pick_anchors(p0, source_shape, target_shape,
                               config.anchor_fraction, rng)
    current = p0
    for it in range(config.iterations):
        t0 = time.perf_counter()
        current, reports = refine_once(
            current, source_shape, target_shape, source_graph, target_graph,
            config, derive_seed(config.seed, f"iteration{it}"), anchors=frozen)
        elapsed = time.perf_counter() - t0
        logger.info("iteration %d/%d: total loss %.6g -> %.6g (%.2fs)",
                    it + 1, config.iterations, reports[0].total,
                    reports[-1].total, elapsed)
        trace.iterations.append(IterationResult(current, reports, elapsed))
    return trace


def config_with_terms(config: RefineConfig, enabled) -> RefineConfig:
    """Copy of a config with a different enabled-loss subset."""
    return replace(config, enabled=frozenset(enabled))
