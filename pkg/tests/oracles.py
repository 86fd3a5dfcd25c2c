"""Independent reference computations used by the unit and acceptance suites."""

import numpy as np


def lattice_on_triangle(tri, k):
    """Barycentric lattice with k segments per edge; includes vertices and edge points."""
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    u, v = i[keep] / k, j[keep] / k
    w = 1.0 - u - v
    return w[:, None] * tri[0] + u[:, None] * tri[1] + v[:, None] * tri[2]


def dense_triangle_distance(x, tri, k=1413):
    """min over ~10^6 lattice points of the triangle; never below the exact distance."""
    pts = lattice_on_triangle(np.asarray(tri, dtype=np.float64), k)
    return float(np.sqrt(((pts - x) ** 2).sum(1).min()))


def random_triangle(rng, min_area=1e-3):
    while True:
        tri = rng.random((3, 3))
        if 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) > min_area:
            return tri
