"""The two-phase per-edge / per-feature graph attention layer and the
dual-graph refinement block built from it.

Phase I runs an MLP on the stacked guiding vector (f_i | f_j | f_i - f_j)
of every (node, neighbor) pair; Phase II stacks the K per-neighbor outputs
feature-wise (an M x K matrix per node) and regresses each feature's
K-vector down to a scalar with a second, much smaller MLP. Because that
second MLP acts along the neighbor axis only, its parameter count does not
grow with the feature dimension.

The refinement block runs one such layer stack on the correspondence matrix
P over the source graph (primal) and another on P^T over the target graph
(dual), each layer residually (DGAT(P) + P), then fuses the two outputs
back into a single matrix.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .geometry import GeoGraph
from .netio import load_params, save_params


def neighbor_table(graph: GeoGraph, k: int, rng_seed=None) -> np.ndarray:
    """Fixed-width neighbor table: K nearest neighbors by edge length.

    Ties break toward the lower vertex index. Nodes with fewer than K
    neighbors are padded by repeating their own index (the difference
    feature of a self pair is zero). ``rng_seed`` is accepted for future
    sampling policies; the default nearest-K policy is deterministic.
    """
    if k < 1:
        raise ShapeError(f"neighbor table needs k >= 1, got {k}")
    table = np.empty((graph.n, k), dtype=np.intp)
    for i in range(graph.n):
        pairs = sorted(graph.neighbor_lengths(i), key=lambda jl: (jl[1], jl[0]))
        row = [j for j, _ in pairs[:k]]
        if len(row) < k:
            row.extend([i] * (k - len(row)))
        table[i] = row
    return table


class DgatLayer:
    """Parameters of one two-phase layer for feature dimension M.

    dnn1: Linear(3M -> hidden1) + relu [+ layer norm] + Linear(hidden1 -> M)
    dnn2: Linear(K -> hidden2) + relu + Linear(hidden2 -> 1)

    The final dnn2 stage is zero-initialized by default so a fresh layer is
    exactly the zero map and the surrounding residual starts at identity.
    """

    def __init__(self, m: int, k: int, rng: np.random.Generator,
                 hidden1: int = 64, hidden2: int = 16,
                 layer_norm: bool = True, zero_init_output: bool = True):
        self.m = int(m)
        self.k = int(k)
        self.hidden1 = int(hidden1)
        self.hidden2 = int(hidden2)
        self.layer_norm = bool(layer_norm)
        self.w1 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / (3 * m)),
                                          size=(3 * m, hidden1)))
        self.b1 = ad.parameter(np.zeros(hidden1))
        self.w2 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / hidden1),
                                          size=(hidden1, m)))
        self.b2 = ad.parameter(np.zeros(m))
        self.w3 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / k),
                                          size=(k, hidden2)))
        self.b3 = ad.parameter(np.zeros(hidden2))
        if zero_init_output:
            self.w4 = ad.parameter(np.zeros((hidden2, 1)))
        else:
            self.w4 = ad.parameter(rng.normal(0.0, np.sqrt(2.0 / hidden2),
                                              size=(hidden2, 1)))
        self.b4 = ad.parameter(np.zeros(1))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2,
                self.w3, self.b3, self.w4, self.b4]

    def dnn2_param_count(self) -> int:
        return self.w3.size + self.b3.size + self.w4.size + self.b4.size

    def param_arrays(self) -> dict:
        names = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
        return {n: getattr(self, n).data for n in names}

    def load_arrays(self, arrays: dict) -> None:
        for n, v in arrays.items():
            setattr(self, n, ad.parameter(v))


_LN_EPS = 1e-5


def _scatter_plan(idx: np.ndarray):
    """(order, starts, uniq) for a reduceat-based scatter-add of ``idx``."""
    if idx.size == 1 or np.all(np.diff(idx) >= 0):
        order, sidx = None, idx
    else:
        order = np.argsort(idx, kind="stable")
        sidx = idx[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sidx)) + 1])
    return order, starts, sidx[starts]


def _scatter_add(out: np.ndarray, g: np.ndarray, plan) -> None:
    order, starts, uniq = plan
    grouped = g if order is None else g[order]
    out[uniq] += np.add.reduceat(grouped, starts, axis=0)


def _phase1(self_part: Tensor, nbr_part: Tensor, src, nbr, layer: DgatLayer) -> Tensor:
    """Per-edge hidden MLP: gather + bias + relu [+ layer norm] + linear.

    One fused tape node; the per-edge intermediates are the hot path, so
    forward and backward run as single tight passes. Equivalent to the
    composition of gather_rows/add_bias/relu/layer_norm/matmul (the unit
    tests pin that equivalence).
    """
    b1, w2, b2 = layer.b1, layer.w2, layer.b2  # bind tensors at forward time
    use_ln = layer.layer_norm
    pre = np.take(self_part.data, src, axis=0)
    pre += np.take(nbr_part.data, nbr, axis=0)
    pre += b1.data
    mask = pre > 0
    h = np.maximum(pre, 0.0, out=pre)     # relu in place; `pre` not reused
    if use_ln:
        mu = h.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(h.var(axis=1, keepdims=True) + _LN_EPS)
        hn = h - mu
        hn *= inv
    else:
        hn = h
    out = hn @ w2.data
    out += b2.data
    nbr_plan = _scatter_plan(nbr)
    d = h.shape[1]

    def backward(g):
        if w2.requires_grad:
            w2._accum(hn.T @ g)
        if b2.requires_grad:
            b2._accum(g.sum(axis=0))
        gh = g @ w2.data.T
        if use_ln:
            gm = gh.mean(axis=1, keepdims=True)
            gx = np.einsum("ij,ij->i", gh, hn)[:, None]
            gx /= d
            gh -= gm
            gh -= hn * gx
            gh *= inv
        gh *= mask
        if b1.requires_grad:
            b1._accum(gh.sum(axis=0))
        if self_part.requires_grad:
            # src repeats each node K times contiguously: plain reshape-sum
            self_part._accum(
                gh.reshape(self_part.data.shape[0], -1, d).sum(axis=1))
        if nbr_part.requires_grad:
            gn = np.zeros_like(nbr_part.data)
            _scatter_add(gn, gh, nbr_plan)
            nbr_part._accum(gn)

    return Tensor._from_op(out, (self_part, nbr_part, b1, w2, b2), backward)


def _phase2(per_edge: Tensor, n: int, k: int, m: int, layer: DgatLayer) -> Tensor:
    """Per-feature neighbor regression: stack to (N*M, K) and apply dnn2.

    Fused for the same reason as :func:`_phase1`; the stacking transpose
    and both linear stages run in one node.
    """
    w3, b3, w4, b4 = layer.w3, layer.b3, layer.w4, layer.b4
    x = np.ascontiguousarray(
        per_edge.data.reshape(n, k, m).transpose(0, 2, 1)).reshape(n * m, k)
    pre = x @ w3.data
    pre += b3.data
    mask = pre > 0
    h2 = np.maximum(pre, 0.0, out=pre)
    out = h2 @ w4.data
    out += b4.data

    def backward(g):
        gflat = g.reshape(n * m, 1)
        if w4.requires_grad:
            w4._accum(h2.T @ gflat)
        if b4.requires_grad:
            b4._accum(gflat.sum(axis=0))
        gh2 = gflat @ w4.data.T
        gh2 *= mask
        if w3.requires_grad:
            w3._accum(x.T @ gh2)
        if b3.requires_grad:
            b3._accum(gh2.sum(axis=0))
        if per_edge.requires_grad:
            gx = gh2 @ w3.data.T
            per_edge._accum(np.ascontiguousarray(
                gx.reshape(n, m, k).transpose(0, 2, 1)).reshape(n * k, m))

    return Tensor._from_op(out.reshape(n, m), (per_edge, w3, b3, w4, b4), backward)


def dgat_forward(features: Tensor, table: np.ndarray, layer: DgatLayer) -> Tensor:
    """One two-phase pass over an N x M feature matrix (no residual).

    Phase I evaluates dnn1 on (f_i | f_j | f_i - f_j) for the K table
    neighbors of every node; the concatenated linear layer is computed as
    two per-node products gathered per edge, which is algebraically the
    same. Phase II stacks each node's K per-neighbor vectors feature-wise
    and regresses every feature's K-vector through dnn2.
    """
    n, m = features.shape
    if m != layer.m:
        raise ShapeError(f"feature width {m} does not match layer M={layer.m}")
    if table.shape != (n, layer.k):
        raise ShapeError(f"table shape {table.shape} does not match "
                         f"({n}, {layer.k})")
    k = layer.k
    # split W1 into its (f_i | f_j | f_i - f_j) row blocks:
    #   x @ W1 = f_i @ (Wa + Wc) + f_j @ (Wb - Wc)
    wa = ad.gather_rows(layer.w1, np.arange(m))
    wb = ad.gather_rows(layer.w1, np.arange(m, 2 * m))
    wc = ad.gather_rows(layer.w1, np.arange(2 * m, 3 * m))
    self_part = features @ (wa + wc)
    nbr_part = features @ (wb - wc)

    src = np.repeat(np.arange(n), k)
    per_edge = _phase1(self_part, nbr_part, src, table.ravel(), layer)
    return _phase2(per_edge, n, k, m, layer)


class Dg2nBlock:
    """Per-iteration weights: a primal layer stack and a dual layer stack."""

    def __init__(self, source_n: int, target_m: int, k_neighbors: int,
                 n_layers: int, rng: np.random.Generator,
                 hidden1: int = 64, hidden2: int = 16,
                 layer_norm: bool = True, fusion: str = "mean"):
        if fusion not in ("mean", "max"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.fusion = fusion
        self.primal = [DgatLayer(target_m, k_neighbors, rng, hidden1, hidden2,
                                 layer_norm) for _ in range(n_layers)]
        self.dual = [DgatLayer(source_n, k_neighbors, rng, hidden1, hidden2,
                               layer_norm) for _ in range(n_layers)]

    def params(self):
        out = []
        for layer in self.primal + self.dual:
            out.extend(layer.params())
        return out

    def save(self, path) -> None:
        params = {}
        for tag, layers in (("primal", self.primal), ("dual", self.dual)):
            for i, layer in enumerate(layers):
                for name, arr in layer.param_arrays().items():
                    params[f"{tag}{i}.{name}"] = arr
        first = self.primal[0]
        config = {"source_n": self.dual[0].m, "target_m": first.m,
                  "k_neighbors": first.k, "n_layers": len(self.primal),
                  "hidden1": first.hidden1, "hidden2": first.hidden2,
                  "layer_norm": first.layer_norm, "fusion": self.fusion}
        save_params(path, "dg2n_block", config, params)

    @classmethod
    def load(cls, path) -> "Dg2nBlock":
        kind, config, params = load_params(path)
        if kind != "dg2n_block":
            raise ShapeError(f"{path}: expected a dg2n_block blob, got {kind!r}")
        block = cls(config["source_n"], config["target_m"], config["k_neighbors"],
                    config["n_layers"], np.random.default_rng(0),
                    config["hidden1"], config["hidden2"], config["layer_norm"],
                    config["fusion"])
        for tag, layers in (("primal", block.primal), ("dual", block.dual)):
            for i, layer in enumerate(layers):
                layer.load_arrays({name: params[f"{tag}{i}.{name}"]
                                   for name in layer.param_arrays()})
        return block


def fuse_t(primal_out: Tensor, dual_out: Tensor, mode: str) -> Tensor:
    """Differentiable counterpart of :func:`correspondence.fuse`."""
    dual_t = dual_out.T
    if mode == "mean":
        return (primal_out + dual_t) * 0.5
    if mode == "max":
        return ad.maximum(primal_out, dual_t)
    raise ValueError(f"unknown fusion mode {mode!r}")


def dg2n_forward(p: Tensor, primal_table: np.ndarray, dual_table: np.ndarray,
                 block: Dg2nBlock) -> Tensor:
    """Residual primal and dual stacks on P and P^T, fused back to N x M."""
    primal = p
    for layer in block.primal:
        primal = dgat_forward(primal, primal_table, layer) + primal
    dual = p.T
    for layer in block.dual:
        dual = dgat_forward(dual, dual_table, layer) + dual
    return fuse_t(primal, dual, block.fusion)
