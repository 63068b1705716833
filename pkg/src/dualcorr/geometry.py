"""Shape ingestion and graph machinery.

Provides the mesh/point-cloud container (:class:`Shape`), the undirected
weighted graph derived from it (:class:`GeoGraph`), file readers and writers
(OFF / OBJ / XYZ in, OFF out), the graph Laplacian, farthest-point sampling,
Dijkstra geodesics, triangle surface area, and the random spatial
augmentation used to train the correspondence initiator.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


class Shape:
    """Vertex positions with optional triangle faces.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
    faces : array_like of int, shape (F, 3), optional
        Triangles; indices must lie in [0, N) and be pairwise distinct
        within a face.
    """

    def __init__(self, vertices, faces=None):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"vertices must be (N, 3), got {v.shape}")
        if v.shape[0] < 1:
            raise ShapeError("empty vertex set")
        if not np.all(np.isfinite(v)):
            raise ShapeError("non-finite vertex coordinates")
        self.vertices = v
        if faces is not None:
            f = np.asarray(faces, dtype=np.intp)
            if f.ndim != 2 or f.shape[1] != 3:
                raise ShapeError(f"faces must be (F, 3), got {f.shape}")
            if f.size:
                if f.min() < 0 or f.max() >= v.shape[0]:
                    raise IndexError("face index out of range")
                if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                          | (f[:, 0] == f[:, 2])):
                    raise ShapeError("degenerate face (repeated vertex index)")
            self.faces = f
        else:
            self.faces = None

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @property
    def has_faces(self) -> bool:
        return self.faces is not None

    def bbox_diagonal(self) -> float:
        """Length of the axis-aligned bounding-box diagonal."""
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def __repr__(self):
        nf = len(self.faces) if self.faces is not None else 0
        return f"Shape(n={self.n}, faces={nf})"


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def _content_lines(path):
    """Yield (1-based line number, stripped text) skipping blanks/comments."""
    with open(path, "r") as fh:
        for ln, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            yield ln, text


def load_shape(path, fmt: str | None = None) -> Shape:
    """Read a shape from an OFF, OBJ (v/f records) or XYZ file.

    ``fmt`` defaults to the lowercased file extension. Parsing is
    whitespace-tolerant and skips ``#`` comment lines; malformed content
    raises :class:`ParseError` with the offending line number.
    """
    path = str(path)
    if fmt is None:
        fmt = path.rsplit(".", 1)[-1].lower() if "." in path else ""
    fmt = fmt.lower()
    if fmt == "off":
        return _load_off(path)
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "xyz":
        return _load_xyz(path)
    raise ParseError(f"unknown shape format {fmt!r}", path=path)


def _load_off(path) -> Shape:
    lines = _content_lines(path)
    try:
        ln, header = next(lines)
    except StopIteration:
        raise ParseError("empty file", path=path) from None
    counts = None
    if header.upper().startswith("OFF"):
        rest = header[3:].split()
        if rest:
            counts = (ln, rest)
    else:
        raise ParseError("missing OFF header", path=path, line=ln)
    if counts is None:
        try:
            counts = next(lines)
        except StopIteration:
            raise ParseError("missing count line", path=path) from None
    ln, fields = counts[0], counts[1] if isinstance(counts[1], list) else counts[1].split()
    if len(fields) < 2:
        raise ParseError("count line needs at least nv and nf", path=path, line=ln)
    try:
        nv, nf = int(fields[0]), int(fields[1])
    except ValueError:
        raise ParseError("non-integer counts", path=path, line=ln) from None
    if nv < 1:
        raise ParseError("empty vertex set", path=path, line=ln)

    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        try:
            ln, text = next(lines)
        except StopIteration:
            raise ParseError(f"expected {nv} vertices, file ended", path=path) from None
        parts = text.split()
        if len(parts) < 3:
            raise ParseError("vertex line needs 3 coordinates", path=path, line=ln)
        try:
            verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            raise ParseError("non-numeric vertex coordinate", path=path, line=ln) from None

    faces = np.empty((nf, 3), dtype=np.intp)
    for i in range(nf):
        try:
            ln, text = next(lines)
        except StopIteration:
            raise ParseError(f"expected {nf} faces, file ended", path=path) from None
        parts = text.split()
        try:
            cnt = int(parts[0])
        except (ValueError, IndexError):
            raise ParseError("face line must start with a vertex count", path=path,
                             line=ln) from None
        if cnt != 3 or len(parts) < 4:
            raise ParseError("only triangle faces are supported", path=path, line=ln)
        try:
            tri = [int(parts[1]), int(parts[2]), int(parts[3])]
        except ValueError:
            raise ParseError("non-integer face index", path=path, line=ln) from None
        if min(tri) < 0 or max(tri) >= nv:
            raise IndexError(f"{path}:{ln}: face index out of range [0, {nv})")
        faces[i] = tri

    return Shape(verts, faces if nf > 0 else None)


def _load_obj(path) -> Shape:
    verts, faces = [], []
    for ln, text in _content_lines(path):
        parts = text.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError("v record needs 3 coordinates", path=path, line=ln)
            try:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError:
                raise ParseError("non-numeric vertex coordinate", path=path,
                                 line=ln) from None
        elif tag == "f":
            if len(parts) != 4:
                raise ParseError("only triangle f records are supported", path=path,
                                 line=ln)
            tri = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    idx = int(head)
                except ValueError:
                    raise ParseError("non-integer face index", path=path,
                                     line=ln) from None
                if idx < 1:
                    raise ParseError("face indices must be positive (1-based)",
                                     path=path, line=ln)
                tri.append(idx - 1)
            faces.append(tri)
        # other records (vn, vt, o, g, usemtl, ...) are ignored
    if not verts:
        raise ParseError("empty vertex set", path=path)
    nv = len(verts)
    for tri in faces:
        if max(tri) >= nv:
            raise IndexError(f"{path}: face index out of range [0, {nv})")
    return Shape(np.array(verts), np.array(faces, dtype=np.intp) if faces else None)


def _load_xyz(path) -> Shape:
    pts = []
    for ln, text in _content_lines(path):
        parts = text.split()
        if len(parts) < 3:
            raise ParseError("point line needs 3 coordinates", path=path, line=ln)
        try:
            pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError:
            raise ParseError("non-numeric coordinate", path=path, line=ln) from None
    if not pts:
        raise ParseError("empty vertex set", path=path)
    return Shape(np.array(pts))


def save_shape(shape: Shape, path) -> None:
    """Write a shape as OFF (faces section empty for point clouds)."""
    faces = shape.faces if shape.faces is not None else np.empty((0, 3), dtype=np.intp)
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{shape.n} {len(faces)} 0\n")
        for v in shape.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


class GeoGraph:
    """Undirected weighted graph over shape vertices.

    Edges are stored once with ``i < j``; ``weights`` are the graph weights
    (1.0 unless stated otherwise) and ``lengths`` the Euclidean edge lengths
    used for geodesics and neighbor ordering.
    """

    def __init__(self, n: int, edges, weights=None, lengths=None):
        self.n = int(n)
        e = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise IndexError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ShapeError("self-loops are not allowed")
            e = np.sort(e, axis=1)
            order = np.lexsort((e[:, 1], e[:, 0]))
            e = e[order]
            keep = np.ones(len(e), dtype=bool)
            keep[1:] = np.any(np.diff(e, axis=0) != 0, axis=1)
            if weights is not None or lengths is not None:
                w = None if weights is None else np.asarray(weights, float)[order]
                ln = None if lengths is None else np.asarray(lengths, float)[order]
            else:
                w = ln = None
            e = e[keep]
            weights = None if w is None else w[keep]
            lengths = None if ln is None else ln[keep]
        self.edges = e
        self.weights = (np.ones(len(e)) if weights is None
                        else np.asarray(weights, dtype=np.float64))
        if np.any(self.weights < 0):
            raise ShapeError("edge weights must be non-negative")
        self.lengths = (np.ones(len(e)) if lengths is None
                        else np.asarray(lengths, dtype=np.float64))
        if self.weights.shape != (len(e),) or self.lengths.shape != (len(e),):
            raise ShapeError("weights/lengths must match the edge count")

        self._adj = [[] for _ in range(self.n)]
        for eid, (i, j) in enumerate(self.edges):
            self._adj[i].append((int(j), eid))
            self._adj[j].append((int(i), eid))
        for lst in self._adj:
            lst.sort()

    def neighbors(self, i: int):
        """Sorted neighbor indices of node ``i``."""
        return [j for j, _ in self._adj[i]]

    def neighbor_lengths(self, i: int):
        """Pairs (neighbor, edge length) for node ``i``, neighbor-sorted."""
        return [(j, float(self.lengths[eid])) for j, eid in self._adj[i]]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    @property
    def component_count(self) -> int:
        seen = np.zeros(self.n, dtype=bool)
        count = 0
        for s in range(self.n):
            if seen[s]:
                continue
            count += 1
            stack = [s]
            seen[s] = True
            while stack:
                u = stack.pop()
                for v, _ in self._adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
        return count

    def __repr__(self):
        return f"GeoGraph(n={self.n}, edges={len(self.edges)})"


def mesh_graph(shape: Shape) -> GeoGraph:
    """Graph whose edges are the triangle sides, deduplicated, weight 1."""
    if shape.faces is None:
        raise ShapeError("mesh_graph requires faces; use knn_graph for point clouds")
    f = shape.faces
    raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    raw = np.sort(raw, axis=1)
    raw = np.unique(raw, axis=0)
    lengths = np.linalg.norm(shape.vertices[raw[:, 0]] - shape.vertices[raw[:, 1]],
                             axis=1)
    return GeoGraph(shape.n, raw, weights=np.ones(len(raw)), lengths=lengths)


def knn_graph(shape: Shape, k: int) -> GeoGraph:
    """Symmetrized k-nearest-neighbor graph (Euclidean, union of directions).

    Ties in distance break toward the lower vertex index. Weights are 1;
    lengths are the Euclidean distances.
    """
    n = shape.n
    if not 1 <= k < n:
        raise ShapeError(f"knn_graph: k={k} out of range [1, {n})")
    v = shape.vertices
    d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    # stable argsort on distance gives the lower-index tie-break for free
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    pairs = np.stack([src, nearest.ravel()], axis=1)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    lengths = np.linalg.norm(v[pairs[:, 0]] - v[pairs[:, 1]], axis=1)
    return GeoGraph(n, pairs, weights=np.ones(len(pairs)), lengths=lengths)


def laplacian(graph: GeoGraph) -> np.ndarray:
    """Dense graph Laplacian L = D - A with weighted degrees."""
    n = graph.n
    lap = np.zeros((n, n), dtype=np.float64)
    for (i, j), w in zip(graph.edges, graph.weights):
        lap[i, j] -= w
        lap[j, i] -= w
        lap[i, i] += w
        lap[j, j] += w
    return lap


def fps(shape: Shape, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy Euclidean farthest-point sampling.

    The first pick is ``start_index``; each subsequent pick maximizes the
    minimum distance to the points already selected, ties breaking toward
    the lower vertex index.
    """
    n = shape.n
    if not 1 <= k <= n:
        raise ShapeError(f"fps: k={k} out of range [1, {n}]")
    if not 0 <= start_index < n:
        raise IndexError(f"fps: start_index {start_index} out of range")
    v = shape.vertices
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = start_index
    mind = np.linalg.norm(v - v[start_index], axis=1)
    for t in range(1, k):
        nxt = int(np.argmax(mind))  # argmax returns the first (lowest) index on ties
        chosen[t] = nxt
        np.minimum(mind, np.linalg.norm(v - v[nxt], axis=1), out=mind)
    return chosen


def geodesic_distances(graph: GeoGraph, source: int) -> np.ndarray:
    """Dijkstra shortest-path lengths from ``source`` along edge lengths.

    Unreachable nodes get ``inf``.
    """
    n = graph.n
    if not 0 <= source < n:
        raise IndexError(f"source {source} out of range [0, {n})")
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for w, eid in graph._adj[u]:
            nd = d + graph.lengths[eid]
            if nd < dist[w]:
                dist[w] = nd
                heapq.heappush(heap, (nd, w))
    return dist


def surface_area(shape: Shape) -> float:
    """Total triangle area, 0.5 * ||(b-a) x (c-a)|| summed over faces."""
    if shape.faces is None:
        raise ShapeError("surface_area requires faces; point clouds use the "
                         "bounding-box diagonal fallback")
    v = shape.vertices
    f = shape.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return float(0.5 * np.linalg.norm(cross, axis=1).sum())


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    """A single spatial deformation: rotation . scale, translation, jitter."""

    rotation: np.ndarray
    scale: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jitter_std: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ShapeError("rotation must be 3x3")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ShapeError("rotation must be orthonormal to 1e-9")
        if self.scale.shape != (3,) or np.any(self.scale <= 0):
            raise ShapeError("scale must be 3 positive factors")
        if self.translation.shape != (3,):
            raise ShapeError("translation must be a 3-vector")
        if self.jitter_std < 0:
            raise ShapeError("jitter_std must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(np.eye(3), np.ones(3))


# Default rotation cap for augmentations. Unbounded rotations make highly
# symmetric shapes (the icosphere pairs especially) unlearnable for any
# descriptor: vertices in one symmetry orbit become indistinguishable.
DEFAULT_MAX_ROTATION = np.pi / 6


def random_rotation(rng: np.random.Generator,
                    max_angle: float | None = None) -> np.ndarray:
    """Random rotation matrix.

    With ``max_angle=None`` the rotation is uniform over SO(3) (via a random
    unit quaternion). Otherwise the axis is uniform on the sphere and the
    angle uniform in [0, max_angle].
    """
    if max_angle is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.0, max_angle)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(ang) * k + (1.0 - np.cos(ang)) * (k @ k)


def random_augment_params(rng: np.random.Generator, shape: Shape,
                          scale_range=(0.8, 1.25),
                          jitter_fraction: float = 0.005,
                          translate_range: float = 0.0,
                          rotate: bool = True,
                          max_angle: float | None = DEFAULT_MAX_ROTATION,
                          ) -> AugmentParams:
    """Draw augmentation parameters for one training epoch.

    Rotation axis uniform with angle up to ``max_angle`` (``None`` means
    uniform over all of SO(3)); per-axis scale uniform in ``scale_range``;
    jitter stddev is ``jitter_fraction`` of the bounding-box diagonal.
    """
    rot = random_rotation(rng, max_angle) if rotate else np.eye(3)
    scl = rng.uniform(scale_range[0], scale_range[1], size=3)
    trans = (rng.uniform(-translate_range, translate_range, size=3)
             if translate_range > 0 else np.zeros(3))
    return AugmentParams(rot, scl, trans, jitter_fraction * shape.bbox_diagonal())


def augment(shape: Shape, params: AugmentParams, rng_seed: int = 0) -> Shape:
    """Apply rotation.scale + translation + Gaussian jitter to the vertices.

    Faces and vertex order are unchanged, so the ground-truth map between
    the original and the augmented copy is the identity. Output is
    bit-identical for a fixed seed.
    """
    v = shape.vertices * params.scale  # scale first, then rotate
    v = v @ params.rotation.T + params.translation
    if params.jitter_std > 0:
        rng = np.random.default_rng(rng_seed)
        v = v + rng.normal(0.0, params.jitter_std, size=v.shape)
    return Shape(v, shape.faces)


def invert_augment(shape: Shape, params: AugmentParams) -> Shape:
    """Undo rotation/scale/translation (jitter is not invertible)."""
    v = (shape.vertices - params.translation) @ params.rotation
    v = v / params.scale
    return Shape(v, shape.faces)
