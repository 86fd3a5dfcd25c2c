"""Distance-to-face, coverage, circle fits and the KS statistic."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

BRUTE_FORCE_MAX_FACES = 20_000
_CHUNK = 256


@dataclass
class Mesh:
    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3) vertex indices
    dropped: int = 0       # zero-area faces removed at load

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        self.areas = triangle_areas(self.triangles)

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def __len__(self) -> int:
        return len(self.faces)


def triangle_areas(tri: np.ndarray) -> np.ndarray:
    tri = np.asarray(tri, dtype=np.float64)
    return 0.5 * np.linalg.norm(np.cross(tri[..., 1, :] - tri[..., 0, :], tri[..., 2, :] - tri[..., 0, :]), axis=-1)


def closest_points(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p; all arguments broadcast over leading axes.

    Voronoi-region classification of the closed triangle (vertex, edge, interior).
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + v_in[..., None] * ab + w_in[..., None] * ac
        # edge bc
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(m[..., None], b + w_bc[..., None] * (c - b), out)
        # edge ac
        w_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + w_ac[..., None] * ac, out)
        # edge ab
        v_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + v_ab[..., None] * ab, out)
    # vertex regions take precedence
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def point_to_triangle(x, tri) -> float:
    """Euclidean distance from a 3-vector to a closed, non-degenerate triangle (3, 3)."""
    x = np.asarray(x, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    if x.shape != (3,) or tri.shape != (3, 3):
        raise ValueError("expected a 3-vector and a (3, 3) triangle")
    if triangle_areas(tri) <= 0:
        raise ValueError("degenerate triangle")
    q = closest_points(x, tri[0], tri[1], tri[2])
    return float(np.linalg.norm(x - q))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PCGAN_THREADS", "1")))
    except ValueError:
        return 1


def _brute_nearest(points: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]

    def chunk(lo: int) -> tuple[np.ndarray, np.ndarray]:
        p = points[lo:lo + _CHUNK, None, :]
        d2 = ((p - closest_points(p, a, b, c)) ** 2).sum(-1)
        idx = np.argmin(d2, axis=1)
        return np.sqrt(d2[np.arange(len(idx)), idx]), idx

    starts = range(0, len(points), _CHUNK)
    nthreads = _threads()
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


class AABBTree:
    """Bounding-volume hierarchy over triangles for exact nearest-face queries."""

    LEAF = 8

    def __init__(self, tri: np.ndarray):
        self.tri = tri
        lo, hi = tri.min(axis=1), tri.max(axis=1)
        cen = tri.mean(axis=1)
        self.nodes: list[tuple] = []    # (lo, hi, left, right, face_idx or None)
        self._build(np.arange(len(tri)), lo, hi, cen)

    def _build(self, idx, lo, hi, cen) -> int:
        box_lo, box_hi = lo[idx].min(0), hi[idx].max(0)
        me = len(self.nodes)
        self.nodes.append(None)
        if len(idx) <= self.LEAF:
            self.nodes[me] = (box_lo, box_hi, -1, -1, idx)
            return me
        axis = int(np.argmax(box_hi - box_lo))
        order = idx[np.argsort(cen[idx, axis], kind="stable")]
        half = len(order) // 2
        left = self._build(order[:half], lo, hi, cen)
        right = self._build(order[half:], lo, hi, cen)
        self.nodes[me] = (box_lo, box_hi, left, right, None)
        return me

    @staticmethod
    def _box_dist2(p, lo, hi) -> float:
        d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        return float(d @ d)

    def nearest(self, p: np.ndarray) -> tuple[float, int]:
        best_d2, best_j = np.inf, -1
        stack = [0]
        while stack:
            lo, hi, left, right, faces = self.nodes[stack.pop()]
            if self._box_dist2(p, lo, hi) > best_d2:
                continue
            if faces is not None:
                t = self.tri[faces]
                q = closest_points(p, t[:, 0], t[:, 1], t[:, 2])
                d2 = ((q - p) ** 2).sum(-1)
                for j, dj in zip(faces, d2):
                    if dj < best_d2 or (dj == best_d2 and j < best_j):
                        best_d2, best_j = float(dj), int(j)
                continue
            dl = self._box_dist2(p, *self.nodes[left][:2])
            dr = self._box_dist2(p, *self.nodes[right][:2])
            # visit the closer child first
            stack.extend((left, right) if dl > dr else (right, left))
        return float(np.sqrt(best_d2)), best_j


def nearest_faces(points, mesh: Mesh, brute_force_max: int = BRUTE_FORCE_MAX_FACES):
    """Per point: distance to and index of the nearest face (ties go to the lowest index)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got {points.shape}")
    if len(points) == 0 or len(mesh) == 0:
        raise ValueError("empty point cloud or mesh")
    tri = mesh.triangles
    if len(tri) <= brute_force_max:
        return _brute_nearest(points, tri)
    tree = AABBTree(tri)
    res = [tree.nearest(p) for p in points]
    return np.array([r[0] for r in res]), np.array([r[1] for r in res], dtype=np.int64)


def d2f(points, mesh: Mesh, **kw) -> float:
    dist, _ = nearest_faces(points, mesh, **kw)
    return float(np.mean(dist))


def coverage(points, mesh: Mesh, threshold: float = np.inf, **kw) -> float:
    """Fraction of faces that are the nearest face of some point within ``threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive (use inf to disable)")
    dist, idx = nearest_faces(points, mesh, **kw)
    covered = np.zeros(len(mesh), dtype=bool)
    covered[idx[dist <= threshold]] = True
    return float(covered.sum() / len(mesh))


@dataclass
class CircleFit:
    center: np.ndarray
    radius: float
    residual: float


def fit_circle(points) -> CircleFit:
    """Algebraic (Kasa) least-squares circle fit."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (n, 2) points, got {pts.shape}")
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a circle")
    # solve in centred coordinates for conditioning
    mu = pts.mean(axis=0)
    p = pts - mu
    scale = np.sqrt((p ** 2).sum(1).mean())
    if scale == 0:
        raise ValueError("all points coincide")
    p = p / scale
    A = np.column_stack([2 * p, np.ones(len(p))])
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise ValueError("points are collinear; circle undefined")
    rhs = (p ** 2).sum(1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    center = sol[:2]
    r2 = sol[2] + center @ center
    if r2 <= 0:
        raise ValueError("degenerate circle fit")
    radius = np.sqrt(r2)
    resid = np.sqrt(np.mean((np.linalg.norm(p - center, axis=1) - radius) ** 2))
    return CircleFit(center * scale + mu, float(radius * scale), float(resid * scale))


def uniform_cdf(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def ks_statistic(samples, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """sup_x |F_n(x) - F(x)| for a continuous reference CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = len(x)
    if n == 0:
        raise ValueError("no samples")
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n), 0.0))
