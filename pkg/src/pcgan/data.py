"""Circle benchmark synthesis, OFF meshes, surface sampling and point-cloud I/O."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import Mesh, triangle_areas

log = logging.getLogger(__name__)

BINARY_MAGIC = b"PCGB"
BINARY_VERSION = 1
ROTATION_ANGLES = tuple(k * np.pi / 8 for k in range(8))


class DataError(ValueError):
    pass


@dataclass
class CircleDatasetConfig:
    m: int = 10_000
    n: int = 100
    means: tuple = ((16.0, 16.0), (16.0, -16.0), (-16.0, 16.0), (-16.0, -16.0))
    center_var: float = 16.0
    radius_range: tuple[float, float] = (1.6, 6.4)
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise DataError("need at least one cloud")
        if self.n < 3:
            raise DataError("need at least 3 points per circle")
        lo, hi = self.radius_range
        if not 0 < lo < hi:
            raise DataError(f"invalid radius range {self.radius_range}")
        if not self.center_var > 0:
            raise DataError("center variance must be positive")


@dataclass
class Circle:
    points: np.ndarray
    center: np.ndarray
    radius: float


def gen_circle(config: CircleDatasetConfig, index: int) -> Circle:
    rng = np.random.default_rng((config.seed, index))
    means = np.asarray(config.means, dtype=np.float64)
    mode = rng.integers(len(means))
    center = means[mode] + np.sqrt(config.center_var) * rng.standard_normal(2)
    radius = rng.uniform(*config.radius_range)
    theta = rng.uniform(0.0, 2 * np.pi, size=config.n)
    pts = center + radius * np.column_stack([np.cos(theta), np.sin(theta)])
    return Circle(pts, center, float(radius))


def gen_circles(config: CircleDatasetConfig) -> list[Circle]:
    """Each cloud uses its own generator seeded by (seed, index)."""
    return [gen_circle(config, i) for i in range(config.m)]


def quadrant(center) -> int:
    """0..3 for (+,+), (+,-), (-,+), (-,-)."""
    x, y = center
    return (0 if y >= 0 else 1) if x >= 0 else (2 if y >= 0 else 3)


# meshes

def load_mesh(path) -> Mesh:
    """Parse an OFF file. Polygons are fan-triangulated; zero-area triangles are dropped."""
    path = Path(path)
    lines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body))
    if not lines:
        raise DataError(f"{path}: empty file")
    lineno, head = lines[0]
    if not head.startswith("OFF"):
        raise DataError(f"{path}:{lineno}: missing OFF header")
    rest = head[3:].strip()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise DataError(f"{path}: missing counts line")
        lineno, rest = lines[1]
        pos = 2
    try:
        counts = [int(t) for t in rest.split()]
        nv, nf = counts[0], counts[1]
    except (ValueError, IndexError):
        raise DataError(f"{path}:{lineno}: malformed counts line {rest!r}") from None
    if nv < 0 or nf < 0:
        raise DataError(f"{path}:{lineno}: negative counts")
    if len(lines) < pos + nv + nf:
        raise DataError(f"{path}: expected {nv} vertices and {nf} faces, file is truncated")
    verts = np.empty((nv, 3))
    for k in range(nv):
        lineno, body = lines[pos + k]
        try:
            verts[k] = [float(t) for t in body.split()[:3]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed vertex {body!r}") from None
    pos += nv
    tris, owner = [], []
    for k in range(nf):
        lineno, body = lines[pos + k]
        try:
            tok = [int(t) for t in body.split()]
            cnt, idx = tok[0], tok[1:]
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: malformed face {body!r}") from None
        if cnt < 3 or len(idx) < cnt:
            raise DataError(f"{path}:{lineno}: face declares {cnt} vertices but lists {len(idx)}")
        idx = idx[:cnt]
        bad = [i for i in idx if not 0 <= i < nv]
        if bad:
            raise DataError(f"{path}:{lineno}: face references vertex {bad[0]} outside [0, {nv})")
        for j in range(1, cnt - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
            owner.append(lineno)
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    areas = triangle_areas(verts[faces]) if len(faces) else np.zeros(0)
    keep = areas > 0
    dropped = int((~keep).sum())
    if dropped:
        log.warning("%s: dropped %d zero-area faces", path, dropped)
    return Mesh(verts, faces[keep], dropped=dropped)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator, return_faces: bool = False):
    """Area-weighted face choice, then a uniform point inside the chosen triangle."""
    if n < 1:
        raise DataError("need n >= 1 samples")
    total = mesh.total_area
    if not total > 0:
        raise DataError("mesh has zero surface area")
    face = rng.choice(len(mesh), size=n, p=mesh.areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return (pts, face) if return_faces else pts


# preprocessing

@dataclass
class PreprocessConfig:
    samples: int = 10_000
    angles: tuple = ROTATION_ANGLES

    def __post_init__(self):
        if self.samples < 1:
            raise DataError("samples must be >= 1")
        if any(not 0 <= a < np.pi for a in self.angles):
            raise DataError("augmentation angles must lie in [0, pi)")


@dataclass
class Normalization:
    offset: np.ndarray
    scale: float

    def apply(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.offset) / self.scale

    def invert(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + self.offset

    def to_json(self) -> dict:
        return {"offset": [float(v) for v in self.offset], "scale": float(self.scale)}

    @classmethod
    def from_json(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["offset"], dtype=np.float64), float(d["scale"]))


def fit_normalization(points) -> Normalization:
    """Zero mean per axis, unit variance over all coordinates jointly."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1])
    if len(pts) < 2:
        raise DataError("need at least 2 points to normalize")
    offset = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - offset) ** 2).mean()))
    if scale == 0:
        raise DataError("all points identical; variance is zero")
    return Normalization(offset, scale)


def normalize(points) -> tuple[np.ndarray, Normalization]:
    norm = fit_normalization(points)
    return norm.apply(points), norm


def rotate_xy(points, angle: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim < 1 or pts.shape[-1] != 3:
        raise DataError("rotation augmentation applies to 3D clouds only")
    c, s = np.cos(angle), np.sin(angle)
    out = pts.copy()
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
    return out


# files

def save_cloud(path, points, binary: bool | None = None) -> None:
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError(f"cloud must be (n, d), got {pts.shape}")
    if binary is None:
        binary = path.suffix == ".pcb"
    if binary:
        header = BINARY_MAGIC + struct.pack("<III", BINARY_VERSION, *pts.shape)
        path.write_bytes(header + pts.astype("<f8").tobytes())
    else:
        path.write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in pts))


def load_cloud(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    if raw.startswith(BINARY_MAGIC):
        version, n, d = struct.unpack("<III", raw[4:16])
        if version != BINARY_VERSION:
            raise DataError(f"{path}: unsupported binary version {version}")
        body = raw[16:]
        if len(body) != 8 * n * d:
            raise DataError(f"{path}: expected {n}x{d} doubles")
        return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    rows = []
    for lineno, line in enumerate(raw.decode().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(t) for t in line.split()])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed coordinates {line!r}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DataError(f"{path}:{lineno}: inconsistent dimension")
    if not rows:
        raise DataError(f"{path}: empty point cloud")
    return np.array(rows, dtype=np.float64)


@dataclass
class ManifestItem:
    path: Path
    label: str = ""
    extra: dict = field(default_factory=dict)


def write_manifest(path, items: list[dict]) -> None:
    Path(path).write_text(json.dumps(items, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestItem]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: cannot read manifest ({e})") from None
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{path}: manifest must be a non-empty JSON list")
    items = []
    for k, e in enumerate(entries):
        if not isinstance(e, dict) or "path" not in e:
            raise DataError(f"{path}: entry {k} lacks a 'path'")
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        if not p.exists():
            raise DataError(f"{path}: entry {k} points to missing file {p}")
        extra = {key: v for key, v in e.items() if key not in ("path", "label")}
        if "mesh" in extra and not Path(extra["mesh"]).is_absolute():
            extra["mesh"] = str(path.parent / extra["mesh"])
        items.append(ManifestItem(p, str(e.get("label", "")), extra))
    return items


def write_circle_dataset(out_dir, config: CircleDatasetConfig, binary: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pcb" if binary else ".txt"
    width = len(str(config.m - 1))
    entries = []
    for i in range(config.m):
        c = gen_circle(config, i)
        name = f"circle_{i:0{width}d}{ext}"
        save_cloud(out / name, c.points, binary)
        entries.append({"path": name, "label": f"q{quadrant(c.center)}",
                        "center": [float(v) for v in c.center], "radius": c.radius})
    manifest = out / "manifest.json"
    write_manifest(manifest, entries)
    return manifest


def write_mesh_dataset(out_dir, meshes: list, config: PreprocessConfig, seed: int,
                       labels: list[str] | None = None, binary: bool = True) -> Path:
    """Sample, normalize and (optionally) rotate every mesh; one cloud file per mesh and angle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, mesh_path in enumerate(meshes):
        mesh = load_mesh(mesh_path)
        rng = np.random.default_rng((seed, k))
        pts, norm = normalize(sample_surface(mesh, config.samples, rng))
        for a_idx, angle in enumerate(config.angles):
            name = f"{Path(mesh_path).stem}_r{a_idx}{'.pcb' if binary else '.txt'}"
            save_cloud(out / name, rotate_xy(pts, angle), binary)
            entries.append({"path": name, "label": labels[k] if labels else "",
                            "mesh": str(Path(mesh_path).resolve()), "angle": angle,
                            "normalization": norm.to_json()})
    manifest = out / "manifest.json"
    write_manifest(manifest, entries)
    return manifest
