import numpy as np
import pytest
import torch

from avatarfit.headmodel import (
    HeadModel,
    HeadParams,
    N_JOINTS,
    N_LANDMARKS,
    embed_landmarks,
    eval_rest_shape,
    generate_procedural_template,
    limit_joints,
    lip_distances,
    posed_vertices,
    rotvec_to_matrix,
    skin_pose,
    generate_procedural_template as gen,
)
from avatarfit.mesh import Region
from conftest import central_diff_grad, rel_err


@pytest.fixture(scope="module")
def model():
    return generate_procedural_template(seed=0, resolution=600)


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_zero_coefficients_give_template(model):
    rest = eval_rest_shape(model, torch.zeros(model.n_shape, dtype=torch.float64),
                           torch.zeros(model.n_expr, dtype=torch.float64))
    assert np.allclose(rest.numpy(), model.template.vertices)


def test_one_hot_beta_adds_first_basis(model):
    beta = torch.zeros(model.n_shape, dtype=torch.float64)
    beta[0] = 1.0
    rest = eval_rest_shape(model, beta, torch.zeros(model.n_expr, dtype=torch.float64))
    assert np.allclose(rest.numpy(), model.template.vertices + model.shape_basis[0])


def test_rest_shape_matches_double_loop(model):
    rng = np.random.default_rng(2)
    beta = rng.normal(size=model.n_shape)
    psi = rng.normal(size=model.n_expr)
    rest = eval_rest_shape(model, t64(beta), t64(psi)).numpy()
    expected = model.template.vertices.copy()
    for s in range(model.n_shape):
        expected = expected + beta[s] * model.shape_basis[s]
    for e in range(model.n_expr):
        expected = expected + psi[e] * model.expr_basis[e]
    assert np.allclose(rest, expected, atol=1e-12)


def test_rest_shape_dimension_mismatch(model):
    with pytest.raises(ValueError, match="shape coefficients"):
        eval_rest_shape(model, torch.zeros(3, dtype=torch.float64),
                        torch.zeros(model.n_expr, dtype=torch.float64))


def test_limit_joints_zero(model):
    angles = limit_joints(model, torch.zeros(N_JOINTS, 3, dtype=torch.float64))
    assert np.allclose(angles.numpy(), 0.0)


def test_limit_joints_asymptote(model):
    big = limit_joints(model, torch.full((N_JOINTS, 3), 50.0, dtype=torch.float64))
    assert np.all(big.numpy() <= model.joint_limits + 1e-12)
    assert np.allclose(big.numpy(), model.joint_limits, atol=1e-9)


def test_limit_joints_tanh_value():
    model = gen(seed=1, resolution=400)
    model.joint_limits[0, 0] = 0.5
    angle = limit_joints(model, torch.tensor([[1.0, 0, 0]] + [[0, 0, 0]] * 3, dtype=torch.float64))
    assert float(angle[0, 0]) == pytest.approx(0.5 * np.tanh(1.0))
    assert float(angle[0, 0]) == pytest.approx(0.380797, abs=1e-6)


def test_limit_joints_never_leave_bounds(model):
    rng = np.random.default_rng(0)
    for _ in range(20):
        phi = t64(rng.normal(scale=4.0, size=(N_JOINTS, 3)))
        angles = limit_joints(model, phi).numpy()
        inside = (np.abs(angles) < model.joint_limits) | (model.joint_limits == 0)
        assert inside.all()


def test_skin_pose_identity(model):
    rest = t64(model.template.vertices)
    posed = skin_pose(model, rest, torch.zeros(N_JOINTS, 3, dtype=torch.float64),
                      torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert np.allclose(posed.numpy(), model.template.vertices, atol=1e-15)


def test_skin_pose_global_rigid(model):
    rng = np.random.default_rng(4)
    rvec = rng.normal(size=3)
    tvec = rng.normal(size=3)
    rest = t64(model.template.vertices)
    posed = skin_pose(model, rest, torch.zeros(N_JOINTS, 3, dtype=torch.float64),
                      t64(rvec), t64(tvec))
    R = rotvec_to_matrix(t64(rvec)).numpy()
    assert np.allclose(posed.numpy(), model.template.vertices @ R.T + tvec, atol=1e-12)


def test_skin_pose_single_joint_toy_rig():
    model = gen(seed=3, resolution=400)
    # toy: vertex 0 fully on neck, vertex 1 fully on an unrotated joint;
    # parents detached so the unrotated joint is independent of the neck
    model.joint_parents[:] = -1
    w = model.skin_weights
    w[:] = 0.0
    w[0, 0] = 1.0
    w[1:, 1] = 1.0
    rest = t64(model.template.vertices)
    angle = 30 * np.pi / 180
    # neck rotates about x by `angle`; raw value chosen through the limiter
    raw = np.arctanh(angle / model.joint_limits[0, 0])
    phi = torch.zeros(N_JOINTS, 3, dtype=torch.float64)
    phi[0, 0] = raw
    posed = skin_pose(model, rest, phi, torch.zeros(3, dtype=torch.float64),
                      torch.zeros(3, dtype=torch.float64))
    pivot = model.joint_pivots[0]
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    expected0 = R @ (model.template.vertices[0] - pivot) + pivot
    assert np.allclose(posed.numpy()[0], expected0, atol=1e-12)
    assert np.allclose(posed.numpy()[1], model.template.vertices[1], atol=1e-12)


def test_rigid_equivariance(model):
    rng = np.random.default_rng(7)
    rvec, tvec = rng.normal(size=3), rng.normal(size=3)
    rest = t64(model.template.vertices)
    zero3 = torch.zeros(3, dtype=torch.float64)
    a = skin_pose(model, rest, torch.zeros(N_JOINTS, 3, dtype=torch.float64), t64(rvec), t64(tvec))
    b = skin_pose(model, rest, torch.zeros(N_JOINTS, 3, dtype=torch.float64), zero3, zero3)
    R = rotvec_to_matrix(t64(rvec)).numpy()
    assert np.allclose(a.numpy(), b.numpy() @ R.T + tvec, atol=1e-12)


def test_rest_shape_jacobian_constant(model):
    # exact linearity: finite-difference Jacobian column is beta-independent
    rng = np.random.default_rng(9)
    psi = t64(np.zeros(model.n_expr))
    col = []
    for trial in range(2):
        beta = t64(rng.normal(size=model.n_shape))
        eps = 1e-4
        bp, bm = beta.clone(), beta.clone()
        bp[1] += eps
        bm[1] -= eps
        col.append((eval_rest_shape(model, bp, psi) - eval_rest_shape(model, bm, psi)).numpy() / (2 * eps))
    assert np.allclose(col[0], col[1], atol=1e-10)


def test_full_chain_gradient(model):
    rng = np.random.default_rng(11)
    w = rng.normal(size=(model.template.n_vertices, 3))
    beta0 = rng.normal(size=model.n_shape) * 0.1
    psi0 = rng.normal(size=model.n_expr) * 0.1
    phi0 = rng.normal(size=(N_JOINTS, 3)) * 0.3
    rot0, trans0 = rng.normal(size=3) * 0.2, rng.normal(size=3) * 0.05

    def scalar_at(vec):
        beta, psi, phi, rot, trans = np.split(
            vec, np.cumsum([model.n_shape, model.n_expr, N_JOINTS * 3, 3])
        )
        params = HeadParams(t64(beta), t64(psi), t64(phi.reshape(N_JOINTS, 3)),
                            t64(rot), t64(trans))
        return float((posed_vertices(model, params) * t64(w)).sum())

    packed = np.concatenate([beta0, psi0, phi0.ravel(), rot0, trans0])
    params = HeadParams(
        t64(beta0).requires_grad_(True), t64(psi0).requires_grad_(True),
        t64(phi0).requires_grad_(True), t64(rot0).requires_grad_(True),
        t64(trans0).requires_grad_(True),
    )
    loss = (posed_vertices(model, params) * t64(w)).sum()
    loss.backward()
    analytic = np.concatenate([
        params.beta.grad.numpy(), params.psi.grad.numpy(),
        params.phi_raw.grad.numpy().ravel(), params.global_rot.grad.numpy(),
        params.global_trans.grad.numpy(),
    ])
    fd = central_diff_grad(scalar_at, packed, step=1e-6)
    assert rel_err(analytic, fd) <= 1e-4


def test_generator_determinism():
    a = gen(seed=5, resolution=500)
    b = gen(seed=5, resolution=500)
    assert np.array_equal(a.template.vertices, b.template.vertices)
    assert np.array_equal(a.shape_basis, b.shape_basis)
    assert np.array_equal(a.skin_weights, b.skin_weights)


def test_generator_rejects_tiny_resolution():
    with pytest.raises(ValueError, match="resolution"):
        gen(seed=0, resolution=100)


def test_basis_gram_identity(model):
    for basis in (model.shape_basis, model.expr_basis):
        flat = basis.reshape(len(basis), -1)
        gram = flat @ flat.T
        assert np.abs(gram - np.eye(len(basis))).max() < 1e-10


def test_skin_weight_rows_sum_to_one(model):
    # brute-force row sums
    for row in model.skin_weights:
        assert abs(sum(float(x) for x in row) - 1.0) < 1e-12
        assert min(row) >= 0.0


def test_all_regions_present(model):
    present = set(model.template.region.tolist())
    assert present == {int(r) for r in Region}


def test_embed_landmarks_corner_and_centroid(model):
    verts = t64(model.template.vertices)
    m = generate_procedural_template(seed=0, resolution=600)
    m.landmark_faces = np.array([0, 1], dtype=np.int64)
    m.landmark_bary = np.array([[1.0, 0, 0], [1 / 3, 1 / 3, 1 / 3]])
    pts = embed_landmarks(m, verts).numpy()
    f0, f1 = m.template.faces[0], m.template.faces[1]
    assert np.allclose(pts[0], m.template.vertices[f0[0]], atol=1e-15)
    assert np.allclose(pts[1], m.template.vertices[f1].mean(axis=0), atol=1e-14)


def test_embed_landmarks_matches_naive(model):
    verts = t64(model.template.vertices)
    pts = embed_landmarks(model, verts).numpy()
    for i in range(N_LANDMARKS):
        tri = model.template.faces[model.landmark_faces[i]]
        ref = sum(model.landmark_bary[i, c] * model.template.vertices[tri[c]] for c in range(3))
        assert np.allclose(pts[i], ref, atol=1e-14)


def test_jaw_open_increases_lip_distance(model):
    rest = lip_distances(model, t64(model.template.vertices)).numpy()
    params = HeadParams.neutral(model)
    params.phi_raw[1, 0] = 1.5
    opened = lip_distances(model, posed_vertices(model, params)).numpy()
    assert (opened > rest + 1e-6).any()
    # brute-force distance oracle
    posed = posed_vertices(model, params).numpy()
    for k, (a, b) in enumerate(model.lip_pairs):
        assert abs(opened[k] - np.linalg.norm(posed[a] - posed[b])) < 1e-14


def test_archive_roundtrip(tmp_path, model):
    model.save(str(tmp_path / "model"))
    back = HeadModel.load(str(tmp_path / "model"))
    assert np.allclose(back.template.vertices, model.template.vertices)
    assert np.array_equal(back.template.region, model.template.region)
    assert np.array_equal(back.shape_basis, model.shape_basis)
    assert np.array_equal(back.lip_pairs, model.lip_pairs)
