"""Synthetic shape pairs with known ground truth, for desk-scale runs.

Three generators: a subdivided icosphere paired with a deformed copy of
itself, a straight-vs-bent cylinder pair sharing one parameterization (so
the true map is the identity), and a deformed copy of an arbitrary loaded
shape. All pairs keep vertex order, so ground truth is always identity.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .geometry import (DEFAULT_MAX_ROTATION, AugmentParams, Shape, augment,
                       random_augment_params)


def icosphere(subdivisions: int = 2) -> Shape:
    """Unit icosphere: 12 vertices and 20 faces subdivided ``subdivisions``
    times (V = 10*4^s + 2, F = 20*4^s)."""
    if subdivisions < 0:
        raise ShapeError("subdivisions must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]

    for _ in range(subdivisions):
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = verts[a] + verts[b]
                p = p / np.linalg.norm(p)
                midpoint[key] = len(verts)
                verts.append(p)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    shape = Shape(np.array(verts), np.array(faces, dtype=np.intp))
    # closed genus-0 mesh: V - E + F = 2
    n_edges = 3 * len(faces) // 2
    if shape.n - n_edges + len(faces) != 2:
        raise ShapeError("icosphere generator produced a non-spherical mesh")
    return shape


def cylinder(rings: int = 16, segments: int = 10, radius: float = 0.25,
             length: float = 2.0, bend_angle: float = 0.0) -> Shape:
    """Open tube along z, optionally bent around the y axis.

    The straight and bent versions share the (ring, segment) vertex
    ordering, so the identity map is the exact correspondence between a
    ``bend_angle=0`` cylinder and any bent one of the same resolution.
    """
    if rings < 2 or segments < 3:
        raise ShapeError("need rings >= 2 and segments >= 3")
    if radius <= 0 or length <= 0:
        raise ShapeError("radius and length must be positive")
    verts = np.empty((rings * segments, 3))
    y_axis = np.array([0.0, 1.0, 0.0])
    for r in range(rings):
        t = r / (rings - 1)
        for s in range(segments):
            a = 2.0 * np.pi * s / segments
            x, y = radius * np.cos(a), radius * np.sin(a)
            if abs(bend_angle) < 1e-12:
                center = np.array([0.0, 0.0, t * length])
                frame_x = np.array([1.0, 0.0, 0.0])
            else:
                rho = length / bend_angle        # arc radius of the spine
                alpha = t * bend_angle
                center = np.array([rho * (1 - np.cos(alpha)), 0.0,
                                   rho * np.sin(alpha)])
                # section plane stays perpendicular to the spine tangent
                frame_x = np.array([np.cos(alpha), 0.0, -np.sin(alpha)])
            verts[r * segments + s] = center + x * frame_x + y * y_axis
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces += [(a, b, d), (a, d, c)]
    return Shape(verts, np.array(faces, dtype=np.intp))


def noisy_copy(source: Shape, params: AugmentParams, rng_seed: int = 0) -> Shape:
    """Deformed copy of a shape; vertex order, and thus the GT map, unchanged."""
    return augment(source, params, rng_seed=rng_seed)


def make_pair(kind: str, seed: int = 7, *, subdivisions: int = 2,
              bend_angle: float = 0.6, rings: int = 16, segments: int = 10,
              source: Shape | None = None,
              jitter_fraction: float = 0.005, rotate: bool = True,
              max_angle: float | None = DEFAULT_MAX_ROTATION,
              scale_range=(1.0, 1.0), translate_range: float = 0.0):
    """Build (source, target, gt) for one of the three generator kinds.

    ``icosphere``: subdivided sphere vs its deformed copy. ``bent-cylinder``:
    straight tube vs bent tube. ``noisy-copy``: a caller-provided shape vs
    its deformed copy. Ground truth is the identity map in all cases.
    """
    rng = np.random.default_rng(seed)
    if kind == "icosphere":
        src = icosphere(subdivisions)
    elif kind == "bent-cylinder":
        src = cylinder(rings, segments, bend_angle=0.0)
        tgt = cylinder(rings, segments, bend_angle=bend_angle)
        return src, tgt, np.arange(src.n, dtype=np.intp)
    elif kind == "noisy-copy":
        if source is None:
            raise ShapeError("noisy-copy needs a source shape")
        src = source
    else:
        raise ShapeError(f"unknown pair kind {kind!r}")
    params = random_augment_params(rng, src, scale_range=scale_range,
                                   jitter_fraction=jitter_fraction,
                                   translate_range=translate_range,
                                   rotate=rotate, max_angle=max_angle)
    tgt = noisy_copy(src, params, rng_seed=int(rng.integers(2**31)))
    return src, tgt, np.arange(src.n, dtype=np.intp)
