"""Procedural template meshes used by the desk-scale experiments."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .graph import Mesh


def icosahedron(radius: float = 1.0) -> Mesh:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    v *= radius / np.linalg.norm(v[0])
    return Mesh(v, f)


def icosphere(subdivisions: int, radius: float = 1.0) -> Mesh:
    """Loop-style midpoint subdivision of the icosahedron, projected to the sphere.

    Vertex counts are ``10 * 4**s + 2``: 12, 42, 162, 642, 2562, ...
    """
    base = icosahedron(1.0)
    verts = [tuple(p) for p in base.vertices]
    faces = [tuple(f) for f in base.faces]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.asarray(verts) * radius, np.asarray(faces))


def fibonacci_sphere(n: int, radius: float = 1.0) -> Mesh:
    """Sphere mesh with exactly ``n`` near-uniform vertices.

    Points follow the golden-angle spiral; the triangulation is their convex
    hull, with every face oriented outward.
    """
    if n < 4:
        raise ValueError("a closed sphere mesh needs at least 4 vertices")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    normals = np.cross(pts[faces[:, 1]] - pts[faces[:, 0]], pts[faces[:, 2]] - pts[faces[:, 0]])
    flip = np.einsum("ij,ij->i", normals, pts[faces].mean(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    # canonical face order so the mesh does not depend on qhull's output order
    faces = _rotate_min_first(faces)
    faces = faces[np.lexsort(faces.T[::-1])]
    return Mesh(pts * radius, faces)


def _rotate_min_first(faces: np.ndarray) -> np.ndarray:
    out = faces.copy()
    k = np.argmin(faces, axis=1)
    for shift in (1, 2):
        sel = k == shift
        out[sel] = np.roll(faces[sel], -shift, axis=1)
    return out
