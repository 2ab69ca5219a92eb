import numpy as np
import pytest

from avatarfit.headmodel import generate_procedural_template, rotvec_to_matrix
from avatarfit.mesh import Region, TriMesh
from avatarfit.metrics import (
    MetricReport,
    hausdorff_one_sided,
    hausdorff_stats,
    normal_angular_error,
    photometric_scores,
    point_triangle_distances,
    sample_surface,
)
import torch

from conftest import make_icosahedron


def square_mesh(z=0.0, size=1.0, shift=0.0):
    verts = np.array([
        [shift, shift, z], [shift + size, shift, z],
        [shift + size, shift + size, z], [shift, shift + size, z],
    ])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(verts, faces)


# --------------------------------------------------------- point-to-triangle


def test_point_triangle_distance_basics():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2]])
    pts = np.array([
        [0.25, 0.25, 0.5],   # above interior -> plane distance
        [2.0, 0.0, 0.0],     # beyond vertex b -> distance to b
        [0.5, -1.0, 0.0],    # below edge ab -> distance to edge
    ])
    d = point_triangle_distances(pts, verts, faces)
    assert d[0] == pytest.approx(0.5, abs=1e-12)
    assert d[1] == pytest.approx(1.0, abs=1e-12)
    assert d[2] == pytest.approx(1.0, abs=1e-12)


def test_point_triangle_matches_dense_oracle():
    mesh = make_icosahedron()
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3)) * 1.5
    d = point_triangle_distances(pts, mesh.vertices, mesh.faces)
    # oracle: dense barycentric sampling of every face
    gg = np.linspace(0, 1, 60)
    bary = np.array([[u, v, 1 - u - v] for u in gg for v in gg if u + v <= 1])
    dense = np.einsum("bc,fcx->fbx", bary, mesh.vertices[mesh.faces]).reshape(-1, 3)
    for k in range(30):
        ref = np.linalg.norm(dense - pts[k], axis=1).min()
        assert d[k] <= ref + 1e-12
        assert abs(d[k] - ref) < 2e-2  # dense grid resolution bound


# ------------------------------------------------------------------ sampling


def test_sample_surface_on_surface_and_deterministic():
    mesh = make_icosahedron()
    a = sample_surface(mesh, samples_per_face=5, seed=3)
    b = sample_surface(mesh, samples_per_face=5, seed=3)
    assert np.array_equal(a, b)
    d = point_triangle_distances(a, mesh.vertices, mesh.faces)
    assert d.max() < 1e-12


# ----------------------------------------------------------------- hausdorff


def test_hausdorff_self_zero():
    mesh = make_icosahedron()
    assert hausdorff_one_sided(mesh, mesh) == pytest.approx(0.0, abs=1e-9)


def test_hausdorff_parallel_squares():
    pred = square_mesh(z=0.002)
    gt = square_mesh(z=0.0)
    val = hausdorff_one_sided(pred, gt)
    assert val == pytest.approx(2.0, abs=1e-9)


def test_hausdorff_uniform_offset_monotonicity():
    # small prediction plane above a large GT plane: every sample's closest
    # point is the perpendicular foot, so +d offset adds exactly d
    gt = square_mesh(z=0.0, size=10.0, shift=-5.0)
    pred1 = square_mesh(z=0.001)
    pred2 = square_mesh(z=0.004)
    v1 = hausdorff_one_sided(pred1, gt)
    v2 = hausdorff_one_sided(pred2, gt)
    assert v2 - v1 == pytest.approx(3.0, abs=1e-9)


def test_hausdorff_asymmetry_spike():
    plane = square_mesh(z=0.0)
    spiked_verts = np.array([
        [0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0.2],
    ])
    spiked_faces = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    spiked = TriMesh(spiked_verts, spiked_faces)
    ab = hausdorff_one_sided(spiked, plane, seed=1)
    ba = hausdorff_one_sided(plane, spiked, seed=1)
    assert ab > ba  # spike samples are far from the plane, not vice versa


def test_hausdorff_matches_brute_force_sampling():
    rng = np.random.default_rng(4)
    pred = make_icosahedron()
    gt_verts = make_icosahedron().vertices * 1.1 + rng.normal(scale=0.01, size=(12, 3))
    gt = TriMesh(gt_verts, make_icosahedron().faces)
    val = hausdorff_one_sided(pred, gt, samples_per_face=40, seed=0)
    # independent dense sampling with a different seed
    pts = sample_surface(pred, samples_per_face=200, seed=99)
    ref = point_triangle_distances(pts, gt.vertices, gt.faces).mean() * 1000
    assert abs(val - ref) / ref < 0.01


def test_hausdorff_face_region_filter():
    model = generate_procedural_template(seed=0, resolution=500)
    mesh = model.template
    stats_full = hausdorff_stats(mesh, mesh, region="full")
    stats_face = hausdorff_stats(mesh, mesh, region="face")
    assert stats_face["n_samples"] < stats_full["n_samples"]
    assert stats_face["mean_mm"] == pytest.approx(0.0, abs=1e-9)


def test_hausdorff_rejects_empty_face_region():
    plane = square_mesh()  # default region labels are not facial
    region = np.full(4, int(Region.SCALP), dtype=np.int64)
    plane = TriMesh(plane.vertices, plane.faces, plane.uv, region)
    with pytest.raises(ValueError, match="face region"):
        hausdorff_stats(plane, plane, region="face")


def test_hausdorff_reports_max():
    plane = square_mesh(z=0.001)
    gt = square_mesh(z=0.0)
    stats = hausdorff_stats(plane, gt)
    assert stats["max_mm"] == pytest.approx(1.0, abs=1e-9)
    assert stats["max_mm"] >= stats["mean_mm"] - 1e-12


# ------------------------------------------------------------- normal error


def test_normal_error_identical():
    rng = np.random.default_rng(5)
    n = rng.normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    mask = np.ones((8, 8), dtype=bool)
    # arccos loses half the float precision near 1, hence the loose bound
    assert normal_angular_error(n, n, mask) == pytest.approx(0.0, abs=1e-5)


def test_normal_error_antipodal():
    n = np.zeros((4, 4, 3))
    n[:, :, 2] = 1.0
    mask = np.ones((4, 4), dtype=bool)
    assert normal_angular_error(-n, n, mask) == pytest.approx(180.0, abs=1e-9)


def test_normal_error_ten_degrees():
    rng = np.random.default_rng(6)
    n = rng.normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    R = rotvec_to_matrix(torch.tensor([0.0, 0.0, np.deg2rad(10.0)],
                                      dtype=torch.float64)).numpy()
    # rotate each normal 10 degrees about an axis orthogonal to it so the
    # angle between original and rotated is exactly 10 degrees
    out = np.empty_like(n)
    for y in range(8):
        for x in range(8):
            v = n[y, x]
            axis = np.cross(v, [0.12, -0.57, 0.81])
            axis /= np.linalg.norm(axis)
            rv = torch.tensor(axis * np.deg2rad(10.0), dtype=torch.float64)
            out[y, x] = rotvec_to_matrix(rv).numpy() @ v
    mask = np.ones((8, 8), dtype=bool)
    assert normal_angular_error(out, n, mask) == pytest.approx(10.0, abs=1e-6)


def test_normal_error_empty_mask():
    with pytest.raises(ValueError, match="empty mask"):
        normal_angular_error(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)),
                             np.zeros((2, 2), dtype=bool))


# ------------------------------------------------------------- photometrics


def test_photometric_identical():
    img = np.random.default_rng(7).uniform(size=(8, 8, 3))
    mask = np.ones((8, 8), dtype=bool)
    scores = photometric_scores(img, img, mask)
    assert scores["l1"] == 0.0
    assert scores["psnr"] == 99.0


def test_photometric_uniform_offset():
    img = np.full((8, 8, 3), 0.4)
    scores = photometric_scores(img, img + 0.1, np.ones((8, 8), dtype=bool))
    assert scores["l1"] == pytest.approx(0.1, abs=1e-12)
    assert scores["psnr"] == pytest.approx(20.0, abs=1e-9)


def test_photometric_matches_loop_oracle():
    rng = np.random.default_rng(8)
    a = rng.uniform(size=(6, 6, 3))
    b = rng.uniform(size=(6, 6, 3))
    mask = rng.uniform(size=(6, 6)) > 0.4
    scores = photometric_scores(a, b, mask)
    acc, acc2, n = 0.0, 0.0, 0
    for y in range(6):
        for x in range(6):
            if mask[y, x]:
                for c in range(3):
                    acc += abs(b[y, x, c] - a[y, x, c])
                    acc2 += (b[y, x, c] - a[y, x, c]) ** 2
                    n += 1
    assert abs(scores["l1"] - acc / n) < 1e-12
    assert abs(scores["psnr"] - 10 * np.log10(1.0 / (acc2 / n))) < 1e-9


# -------------------------------------------------------------- MetricReport


def test_metric_report_averages_and_roundtrip():
    rep = MetricReport(subject="s0", split="val")
    vals = [1.0, 2.0, 4.0]
    for v in vals:
        rep.add("normal_deg", v)
    rep.add("hausdorff_full_mm", 2.5)
    avg = rep.averages()
    assert abs(avg["normal_deg"] - np.mean(vals)) < 1e-12
    back = MetricReport.from_json(rep.to_json())
    assert back.per_frame == rep.per_frame
    assert back.subject == "s0" and back.split == "val"
