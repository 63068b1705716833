"""All-to-all correspondence initiator.

A small edge-convolution descriptor network is trained on a single shape
against randomly deformed copies of itself. Because the deformed copy keeps
the vertex order, the true map is the identity, so the matching loss is
simply ||P - I||_F^2 on the cosine-similarity matrix between the original
and deformed descriptors. The trained descriptors then produce the initial
soft correspondence between two different shapes. Deliberately a weak
learner: the refinement stage is what cleans it up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor
from .correspondence import SoftCorrespondence
from .errors import ShapeError, TrainingError
from .geometry import (DEFAULT_MAX_ROTATION, GeoGraph, Shape, augment,
                       knn_graph, mesh_graph, random_augment_params)
from .netio import load_params, save_params

logger = logging.getLogger(__name__)

COSINE_FLOOR = 1e-12


@dataclass
class AugmentConfig:
    """Distribution of the per-epoch training deformations.

    ``max_angle`` caps the rotation angle; ``None`` means uniform over
    SO(3) (do not use that on rotation-symmetric shapes, whose symmetry
    orbits become indistinguishable).
    """

    rotate: bool = True
    max_angle: float | None = DEFAULT_MAX_ROTATION
    scale_range: tuple = (0.8, 1.25)
    jitter_fraction: float = 0.005
    translate_range: float = 0.0


@dataclass
class InitiatorConfig:
    """Descriptor net and training hyperparameters."""

    widths: tuple = (32, 32, 64)   # per-layer output feature dims, input is 3
    epochs: int = 300
    lr: float = 1e-3
    knn_k: int = 10                # graph for point clouds (meshes use faces)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or self.widths[-1] < 2:
            raise ShapeError("descriptor dimension must be at least 2")
        if any(w < 1 for w in self.widths):
            raise ShapeError("layer widths must be positive")


class EdgeConvLayer:
    """One edge convolution: max over neighbors of an MLP on (f_i, f_j - f_i).

    The MLP is Linear(2*d_in -> d_out) + relu + Linear(d_out -> d_out);
    aggregation is an elementwise max over each vertex's neighborhood.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.w1 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / (2 * d_in)),
                                          size=(2 * d_in, d_out)))
        self.b1 = ad.parameter(np.zeros(d_out))
        self.w2 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / d_out),
                                          size=(d_out, d_out)))
        self.b2 = ad.parameter(np.zeros(d_out))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, feats: Tensor, src, nbr, starts, n: int) -> Tensor:
        # Linear on the concatenated (f_i, f_j - f_i) splits into two row
        # blocks of w1, so per-edge work reduces to two gathers of per-node
        # products: f_i @ Wa + (f_j - f_i) @ Wb = f_i @ (Wa - Wb) + f_j @ Wb.
        wa = ad.gather_rows(self.w1, np.arange(self.d_in))
        wb = ad.gather_rows(self.w1, np.arange(self.d_in, 2 * self.d_in))
        self_part = feats @ (wa - wb)
        nbr_part = feats @ wb
        pre = ad.add_bias(ad.gather_rows(self_part, src)
                          + ad.gather_rows(nbr_part, nbr), self.b1)
        hidden = ad.relu(pre)
        per_edge = ad.add_bias(hidden @ self.w2, self.b2)
        return ad.segment_max(per_edge, starts, n)


class DescriptorNet:
    """Stack of edge-convolution layers mapping coordinates to descriptors."""

    def __init__(self, config: InitiatorConfig, rng: np.random.Generator):
        self.config = config
        self.layers = []
        d_in = 3
        for d_out in config.widths:
            self.layers.append(EdgeConvLayer(d_in, d_out, rng))
            d_in = d_out

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, coords: Tensor, edge_arrays) -> Tensor:
        src, nbr, starts, n = edge_arrays
        feats = coords
        for layer in self.layers:
            feats = layer.forward(feats, src, nbr, starts, n)
        return feats

    def save(self, path) -> None:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.w1"] = layer.w1.data
            params[f"layer{i}.b1"] = layer.b1.data
            params[f"layer{i}.w2"] = layer.w2.data
            params[f"layer{i}.b2"] = layer.b2.data
        save_params(path, "descriptor_net",
                    {"widths": list(self.config.widths)}, params)

    @classmethod
    def load(cls, path) -> "DescriptorNet":
        kind, config, params = load_params(path)
        if kind != "descriptor_net":
            raise ShapeError(f"{path}: expected a descriptor_net blob, got {kind!r}")
        net = cls(InitiatorConfig(widths=tuple(config["widths"])),
                  np.random.default_rng(0))
        for i, layer in enumerate(net.layers):
            layer.w1 = ad.parameter(params[f"layer{i}.w1"])
            layer.b1 = ad.parameter(params[f"layer{i}.b1"])
            layer.w2 = ad.parameter(params[f"layer{i}.w2"])
            layer.b2 = ad.parameter(params[f"layer{i}.b2"])
        return net


def edge_arrays(graph: GeoGraph):
    """Directed edge arrays grouped by center node, neighbor-sorted.

    Isolated vertices fall back to a self-edge (so their difference feature
    is zero); the fallback is logged.
    """
    src, nbr, starts = [], [], []
    isolated = 0
    for i in range(graph.n):
        starts.append(len(src))
        js = graph.neighbors(i)
        if not js:
            isolated += 1
            js = [i]
        src.extend([i] * len(js))
        nbr.extend(js)
    if isolated:
        logger.warning("%d isolated vertices aggregate over themselves", isolated)
    return (np.array(src, dtype=np.intp), np.array(nbr, dtype=np.intp),
            np.array(starts, dtype=np.intp), graph.n)


def build_graph(shape: Shape, knn_k: int = 10) -> GeoGraph:
    """Mesh graph when faces exist, otherwise a symmetrized kNN graph."""
    if shape.has_faces:
        return mesh_graph(shape)
    return knn_graph(shape, min(knn_k, shape.n - 1))


def descriptors(shape: Shape, graph: GeoGraph, net: DescriptorNet) -> np.ndarray:
    """Per-vertex descriptor matrix H (N x d) for a shape under ``net``."""
    feats = net.forward(ad.constant(shape.vertices), edge_arrays(graph))
    return feats.data


def cosine_matrix(hx, hy) -> SoftCorrespondence:
    """Cosine similarity between two descriptor sets, rows vs rows.

    Norms are floored at 1e-12; rows that hit the floor (dead descriptors)
    are counted and logged.
    """
    hx = np.asarray(hx, dtype=np.float64)
    hy = np.asarray(hy, dtype=np.float64)
    if hx.ndim != 2 or hy.ndim != 2 or hx.shape[1] != hy.shape[1]:
        raise ShapeError(f"descriptor dims differ: {hx.shape} vs {hy.shape}")
    dead = 0
    mats = []
    for h in (hx, hy):
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        dead += int((norms < COSINE_FLOOR).sum())
        mats.append(h / np.maximum(norms, COSINE_FLOOR))
    if dead:
        logger.warning("cosine_matrix: %d zero-norm descriptor rows floored", dead)
    return SoftCorrespondence(mats[0] @ mats[1].T)


def _cosine_t(hx: Tensor, hy: Tensor) -> Tensor:
    return ad.normalize_rows(hx, COSINE_FLOOR) @ ad.normalize_rows(hy, COSINE_FLOOR).T


def identity_loss(p):
    """||P - I||_F^2 for a square matrix; the self-pair training objective.

    Accepts a Tensor (returns a scalar Tensor on the tape) or an array /
    SoftCorrespondence (returns a float).
    """
    if isinstance(p, Tensor):
        n, m = p.shape
        if n != m:
            raise ShapeError(f"identity loss needs a square matrix, got {n}x{m}")
        return ad.sum_squares(p - ad.constant(np.eye(n)))
    mat = p.matrix if isinstance(p, SoftCorrespondence) else np.asarray(p, float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"identity loss needs a square matrix, got {mat.shape}")
    return float(np.sum((mat - np.eye(mat.shape[0])) ** 2))


def train_initiator(shape: Shape, aug_config: AugmentConfig | None = None,
                    train_config: InitiatorConfig | None = None,
                    rng_seed: int = 0):
    """Train the descriptor net on a shape against its own deformations.

    Each epoch draws a fresh deformation, matches the original against it,
    and minimizes the identity-map loss. Returns ``(net, loss_history)``.
    """
    aug_config = aug_config or AugmentConfig()
    train_config = train_config or InitiatorConfig()
    if train_config.epochs < 1:
        raise ShapeError("epochs must be >= 1")
    rng = np.random.default_rng(rng_seed)
    net = DescriptorNet(train_config, rng)
    opt = ad.Adam(net.params(), lr=train_config.lr)

    graph = build_graph(shape, train_config.knn_k)
    arrays = edge_arrays(graph)
    coords = ad.constant(shape.vertices)
    scale_range = aug_config.scale_range if aug_config.scale_range else (1.0, 1.0)

    history = []
    with threadpool_limits(limits=1):  # small matrices; threads cost more
        for epoch in range(train_config.epochs):
            params = random_augment_params(
                rng, shape, scale_range=scale_range,
                jitter_fraction=aug_config.jitter_fraction,
                translate_range=aug_config.translate_range,
                rotate=aug_config.rotate, max_angle=aug_config.max_angle)
            aug = augment(shape, params, rng_seed=int(rng.integers(2**31)))
            if shape.has_faces:
                aug_arrays = arrays  # mesh adjacency ignores vertex motion
            else:
                aug_arrays = edge_arrays(build_graph(aug, train_config.knn_k))

            hx = net.forward(coords, arrays)
            hy = net.forward(ad.constant(aug.vertices), aug_arrays)
            p = _cosine_t(hx, hy)
            loss = identity_loss(p)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}")
            history.append(value)
            loss.backward()
            opt.step()
    return net, history


def infer_initial(shape_x: Shape, shape_y: Shape, net: DescriptorNet,
                  knn_k: int = 10) -> SoftCorrespondence:
    """Initial soft correspondence: cosine matrix of the two descriptor sets."""
    hx = descriptors(shape_x, build_graph(shape_x, knn_k), net)
    hy = descriptors(shape_y, build_graph(shape_y, knn_k), net)
    return cosine_matrix(hx, hy)
