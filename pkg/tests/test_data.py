import numpy as np
import pytest

from pcgan.data import (CircleDatasetConfig, DataError, PreprocessConfig, fit_normalization, gen_circle,
                        gen_circles, load_cloud, load_mesh, normalize, quadrant, read_manifest, rotate_xy,
                        sample_surface, save_cloud, write_circle_dataset, write_manifest, write_mesh_dataset)
from pcgan.metrics import Mesh, d2f, fit_circle

SQUARE_OFF = """OFF
4 1 0
0 0 0
1 0 0
1 1 0
0 1 0
4 0 1 2 3
"""


def write(tmp_path, text, name="m.off"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_off(tmp_path):
    mesh = load_mesh(write(tmp_path, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert len(mesh) == 1 and mesh.total_area == pytest.approx(0.5)


def test_unit_square_area(tmp_path):
    mesh = load_mesh(write(tmp_path, SQUARE_OFF))
    assert len(mesh) == 2
    assert mesh.total_area == pytest.approx(1.0, abs=1e-15)


def test_header_joined_with_counts(tmp_path):
    mesh = load_mesh(write(tmp_path, "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert len(mesh) == 1


def test_zero_area_faces_dropped(tmp_path):
    text = "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n2 0 0\n3 0 1 2\n3 0 1 3\n"
    mesh = load_mesh(write(tmp_path, text))
    assert len(mesh) == 1 and mesh.dropped == 1


@pytest.mark.parametrize("text, match", [
    ("PLY\n", ":1: missing OFF header"),
    ("OFF\nx y z\n", ":2: malformed counts"),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", ":6: face references vertex 7"),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n", "truncated"),
    ("OFF\n3 1 0\n0 0 0\n1 a 0\n0 1 0\n3 0 1 2\n", ":4: malformed vertex"),
])
def test_off_errors_name_the_line(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        load_mesh(write(tmp_path, text))


def test_sample_surface_single_triangle():
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    pts = sample_surface(Mesh(tri, [[0, 1, 2]]), 2000, np.random.default_rng(0))
    assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
    assert np.all(pts.sum(1) <= 1 + 1e-12) and np.all(pts[:, 2] == 0)


def test_sample_surface_face_frequencies():
    # areas 9 : 1 (legs 3 and 1), so face 0 should be chosen 90% of the time
    v = np.array([[0.0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]])
    mesh = Mesh(v, [[0, 1, 2], [3, 4, 5]])
    _, faces = sample_surface(mesh, 100_000, np.random.default_rng(1), return_faces=True)
    assert abs(np.mean(faces == 0) - 0.9) < 0.02


def test_sample_surface_on_mesh_and_reproducible(tmp_path):
    mesh = load_mesh(write(tmp_path, SQUARE_OFF))
    a = sample_surface(mesh, 1000, np.random.default_rng(2))
    b = sample_surface(mesh, 1000, np.random.default_rng(2))
    assert np.array_equal(a, b)
    assert d2f(np.c_[a[:, :2], a[:, 2]], mesh) < 1e-9


def test_sample_surface_errors():
    flat = Mesh(np.zeros((3, 3)), np.zeros((0, 3)))
    with pytest.raises(DataError):
        sample_surface(flat, 10, np.random.default_rng(0))


def test_normalize_two_points():
    out, norm = normalize([[0.0, 0, 0], [2, 0, 0]])
    np.testing.assert_allclose(norm.offset, [1, 0, 0])
    # deviations (+-1, 0, 0): mean square over six coordinates is 1/3
    assert norm.scale == pytest.approx(np.sqrt(1 / 3))
    np.testing.assert_allclose(out, [[-np.sqrt(3), 0, 0], [np.sqrt(3), 0, 0]])
    assert (out ** 2).mean() == pytest.approx(1.0)


def test_normalize_round_trip_and_errors():
    rng = np.random.default_rng(3)
    x = rng.normal(5, 3, (100, 3))
    out, norm = normalize(x)
    assert np.all(np.abs(out.mean(0)) <= 1e-9)
    np.testing.assert_allclose(norm.invert(out), x, atol=1e-9)
    with pytest.raises(DataError):
        fit_normalization(np.ones((5, 3)))
    with pytest.raises(DataError):
        fit_normalization(np.ones((1, 3)))


def test_rotation_group():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(rotate_xy(x, 0.0), x)
    np.testing.assert_allclose(rotate_xy([[1.0, 0, 2]], np.pi / 2), [[0, 1, 2]], atol=1e-15)
    np.testing.assert_allclose(rotate_xy(rotate_xy(x, np.pi / 8), np.pi / 8), rotate_xy(x, np.pi / 4), atol=1e-12)
    y = rotate_xy(x, 0.7)
    np.testing.assert_array_equal(y[:, 2], x[:, 2])
    d = lambda p: np.linalg.norm(p[:, None] - p[None], axis=-1)
    np.testing.assert_allclose(d(y), d(x), atol=1e-12)
    with pytest.raises(DataError):
        rotate_xy(np.zeros((3, 2)), 0.1)


def test_rotation_preserves_mesh_distance():
    rng = np.random.default_rng(5)
    v = rng.random((30, 3))
    mesh = Mesh(v, np.arange(30).reshape(10, 3))
    pts = rng.random((40, 3))
    turned = Mesh(rotate_xy(v, 1.1), mesh.faces)
    assert d2f(rotate_xy(pts, 1.1), turned) == pytest.approx(d2f(pts, mesh), abs=1e-9)


def test_preprocess_config():
    assert PreprocessConfig().samples == 10_000
    assert len(PreprocessConfig().angles) == 8
    with pytest.raises(DataError):
        PreprocessConfig(samples=0)
    with pytest.raises(DataError):
        PreprocessConfig(angles=(np.pi,))


def test_circles_ground_truth():
    cfg = CircleDatasetConfig(m=200, n=50, seed=1)
    for c in gen_circles(cfg):
        assert 1.6 <= c.radius <= 6.4
        fit = fit_circle(c.points)
        assert fit.radius == pytest.approx(c.radius, abs=1e-9)
        np.testing.assert_allclose(fit.center, c.center, atol=1e-9)
    assert np.array_equal(gen_circle(cfg, 7).points, gen_circles(cfg)[7].points)


def test_circle_mixture_statistics():
    cfg = CircleDatasetConfig(m=10_000, n=3, seed=2)
    centers = np.array([c.center for c in gen_circles(cfg)])
    assert np.all(np.abs(centers.mean(0)) < 0.5)
    counts = np.bincount([quadrant(c) for c in centers], minlength=4) / len(centers)
    assert np.all(np.abs(counts - 0.25) < 0.02)


@pytest.mark.parametrize("kwargs", [dict(m=0), dict(n=2), dict(radius_range=(3.0, 1.0)),
                                    dict(radius_range=(0.0, 1.0)), dict(center_var=0.0)])
def test_circle_config_errors(kwargs):
    with pytest.raises(DataError):
        CircleDatasetConfig(**kwargs)


@pytest.mark.parametrize("binary", [False, True])
def test_cloud_round_trip(tmp_path, binary):
    x = np.random.default_rng(6).normal(size=(17, 3)) * 1e3
    path = tmp_path / ("c.pcb" if binary else "c.txt")
    save_cloud(path, x)
    assert np.array_equal(load_cloud(path), x)


def test_cloud_errors(tmp_path):
    with pytest.raises(DataError):
        load_cloud(tmp_path / "missing.txt")
    with pytest.raises(DataError, match=":2:"):
        load_cloud(write(tmp_path, "1 2\n1 x\n", "bad.txt"))
    with pytest.raises(DataError, match="inconsistent"):
        load_cloud(write(tmp_path, "1 2\n1 2 3\n", "bad2.txt"))


def test_manifests(tmp_path):
    manifest = write_circle_dataset(tmp_path / "circles", CircleDatasetConfig(m=5, n=10, seed=3))
    items = read_manifest(manifest)
    assert len(items) == 5 and all(i.path.exists() for i in items)
    assert items[0].label.startswith("q") and "radius" in items[0].extra
    write_manifest(tmp_path / "bad.json", [{"path": "nope.txt"}])
    with pytest.raises(DataError, match="missing file"):
        read_manifest(tmp_path / "bad.json")
    (tmp_path / "empty.json").write_text("[]")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "empty.json")


def test_mesh_dataset(tmp_path):
    mesh_path = write(tmp_path, SQUARE_OFF.replace("1 1 0", "1 1 1"))
    manifest = write_mesh_dataset(tmp_path / "out", [mesh_path], PreprocessConfig(samples=200), seed=0)
    items = read_manifest(manifest)
    assert len(items) == 8
    pts = load_cloud(items[0].path)
    assert pts.shape == (200, 3)
    assert np.all(np.abs(pts.mean(0)) < 1e-9) and (pts ** 2).mean() == pytest.approx(1.0)
