"""The soft correspondence matrix and its derived objects.

An N x M matrix P of match scores between every source and target vertex.
Rows are the node features of the source-side (primal) graph, columns those
of the target-side (dual) graph. No row or column normalization is ever
applied. This module covers hard-map extraction, primal/dual fusion, anchor
selection, and the on-disk ``CORR`` binary format.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .geometry import Shape, fps

logger = logging.getLogger(__name__)

CORR_MAGIC = b"CORR"


class SoftCorrespondence:
    """Wrapper over the N x M match-score matrix P."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ShapeError(f"correspondence matrix must be 2-D, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ShapeError("correspondence matrix contains non-finite entries")
        self.matrix = m

    @property
    def source_n(self) -> int:
        return self.matrix.shape[0]

    @property
    def target_m(self) -> int:
        return self.matrix.shape[1]

    def transposed(self) -> "SoftCorrespondence":
        return SoftCorrespondence(self.matrix.T)

    def __repr__(self):
        return f"SoftCorrespondence({self.source_n}x{self.target_m})"


@dataclass(frozen=True)
class AnchorSet:
    """FPS-sampled source vertices with presumed labels and confidences."""

    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.intp))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.intp))
        object.__setattr__(self, "confidences",
                           np.asarray(self.confidences, dtype=np.float64))
        if len(set(self.indices.tolist())) != len(self.indices):
            raise ShapeError("anchor source indices must be distinct")
        if not np.all(np.isfinite(self.confidences)):
            raise ShapeError("anchor confidences must be finite")

    def __len__(self):
        return len(self.indices)


def mle_map(corr: SoftCorrespondence) -> np.ndarray:
    """Hard map by per-row argmax; ties break toward the lowest target index."""
    return np.argmax(corr.matrix, axis=1).astype(np.intp)


def fuse(primal_out, dual_out, mode: str = "mean") -> SoftCorrespondence:
    """Fuse the primal (N x M) and dual (M x N) outputs into one matrix.

    ``mean`` averages the primal output with the transposed dual output;
    ``max`` takes the elementwise maximum.
    """
    p = np.asarray(primal_out, dtype=np.float64)
    d = np.asarray(dual_out, dtype=np.float64)
    if p.ndim != 2 or d.ndim != 2 or d.T.shape != p.shape:
        raise ShapeError(f"fuse: incompatible shapes {p.shape} and {d.shape}")
    if mode == "mean":
        return SoftCorrespondence((p + d.T) * 0.5)
    if mode == "max":
        return SoftCorrespondence(np.maximum(p, d.T))
    raise ValueError(f"unknown fusion mode {mode!r}")


def select_anchors(corr: SoftCorrespondence, shape: Shape, k: int,
                   start_index: int = 0) -> AnchorSet:
    """FPS-sample k vertices and record their argmax labels and confidences.

    The confidence of an anchor is exactly its row's maximum entry. The
    ratio of each confidence to the mean row value 1/M is logged (confident
    rows tend to sit orders of magnitude above it) but never filtered on.
    """
    if shape.n != corr.source_n:
        raise ShapeError("shape vertex count must match the matrix rows")
    idx = fps(shape, k, start_index)
    rows = corr.matrix[idx]
    labels = np.argmax(rows, axis=1).astype(np.intp)
    conf = rows[np.arange(len(idx)), labels]
    if logger.isEnabledFor(logging.DEBUG):
        base = 1.0 / corr.target_m
        for i, c in zip(idx, conf):
            logger.debug("anchor %d: confidence %.3g (%.1fx the 1/M baseline)",
                         i, c, c / base if base else float("inf"))
    return AnchorSet(idx, labels, conf)


def default_anchor_count(n: int, fraction: float = 0.05) -> int:
    """ceil(fraction * n), clamped to [1, n]."""
    return max(1, min(n, int(np.ceil(fraction * n))))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_corr(corr: SoftCorrespondence, path) -> None:
    """Write the CORR binary format.

    Layout: magic ``CORR``, u32 N, u32 M (little-endian), then N*M
    little-endian float64 values row-major.
    """
    with open(path, "wb") as fh:
        fh.write(CORR_MAGIC)
        fh.write(struct.pack("<II", corr.source_n, corr.target_m))
        fh.write(np.ascontiguousarray(corr.matrix, dtype="<f8").tobytes())


def load_corr(path) -> SoftCorrespondence:
    """Read a CORR file; raises :class:`FormatError` on any mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: file too short for a CORR header")
    if blob[:4] != CORR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CORR_MAGIC!r}")
    n, m = struct.unpack("<II", blob[4:12])
    if n < 1 or m < 1:
        raise FormatError(f"{path}: invalid dimensions {n}x{m}")
    expected = 12 + 8 * n * m
    if len(blob) != expected:
        raise FormatError(f"{path}: payload holds {(len(blob) - 12) // 8} values, "
                          f"header claims {n * m} ({n}x{m})")
    mat = np.frombuffer(blob, dtype="<f8", offset=12).reshape(n, m)
    return SoftCorrespondence(np.array(mat, dtype=np.float64))


def save_vertex_map(targets, path) -> None:
    """Write a hard map as plain text, one 0-based target index per line."""
    targets = np.asarray(targets, dtype=np.intp)
    with open(path, "w") as fh:
        for t in targets:
            fh.write(f"{int(t)}\n")


def load_vertex_map(path) -> np.ndarray:
    """Read a plain-text hard map (one target index per line)."""
    out = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            try:
                out.append(int(text))
            except ValueError:
                raise FormatError(f"{path}:{ln}: not an integer index") from None
    if not out:
        raise FormatError(f"{path}: empty vertex map")
    arr = np.array(out, dtype=np.intp)
    if arr.min() < 0:
        raise FormatError(f"{path}: negative target index")
    return arr
