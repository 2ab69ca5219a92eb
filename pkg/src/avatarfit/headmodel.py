"""Parametric head template: linear shape/expression blendshapes plus linear
blend skinning over 4 joints (neck, jaw, two eyes) with tanh-limited
rotations, a landmark embedding, and a procedural template generator.

All evaluation functions are differentiable torch code; the model itself is
an immutable bundle of numpy constants.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import arrayio
from .mesh import Region, TriMesh, laplace_beltrami, load_obj, save_obj

JOINT_NAMES = ("neck", "jaw", "eye_left", "eye_right")
N_JOINTS = 4
N_LANDMARKS = 72  # 70 facial + 2 iris

# landmark indices of the (upper, lower) lid points per eye; see the
# landmark layout in _landmark_directions: eyes occupy slots 32-37 and 38-43
LID_LANDMARKS = ((34, 36), (40, 42))
IRIS_LANDMARKS = (70, 71)


def rotvec_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues rotation for axis-angle vectors, shape (..., 3) -> (..., 3, 3).

    Stable and differentiable at zero rotation (Taylor branches)."""
    a2 = (r * r).sum(-1)
    a = torch.sqrt(a2 + 1e-40)
    small = a < 1e-8
    sinc = torch.where(small, 1.0 - a2 / 6.0, torch.sin(a) / a)
    cosc = torch.where(small, 0.5 - a2 / 24.0, (1.0 - torch.cos(a)) / (a2 + 1e-40))
    zeros = torch.zeros_like(a)
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]
    K = torch.stack(
        [
            torch.stack([zeros, -rz, ry], -1),
            torch.stack([rz, zeros, -rx], -1),
            torch.stack([-ry, rx, zeros], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=r.dtype).expand(K.shape)
    return eye + sinc[..., None, None] * K + cosc[..., None, None] * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse of rotvec_to_matrix for plain numpy matrices."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis = axis / (2.0 * np.sin(angle))
    return axis * angle


@dataclass
class HeadModel:
    """Rest-pose template with blendshape bases, skinning rig and landmarks."""

    template: TriMesh
    shape_basis: np.ndarray  # (S, V, 3), rows orthonormal over 3V
    expr_basis: np.ndarray  # (E, V, 3)
    joint_pivots: np.ndarray  # (4, 3) rest positions
    joint_parents: np.ndarray  # (4,) index into joints, -1 = root
    skin_weights: np.ndarray  # (V, 4), rows sum to 1
    joint_limits: np.ndarray  # (4, 3) radians, symmetric per-axis bounds
    landmark_faces: np.ndarray  # (L,) face indices
    landmark_bary: np.ndarray  # (L, 3)
    lip_pairs: np.ndarray  # (10, 2) vertex index pairs on the inner lips
    mouth_uv_box: np.ndarray  # (4,) umin, vmin, umax, vmax

    def __post_init__(self):
        V = self.template.n_vertices
        if self.shape_basis.shape[1:] != (V, 3):
            raise ValueError("shape basis vertex count mismatch with template")
        if self.expr_basis.shape[1:] != (V, 3):
            raise ValueError("expression basis vertex count mismatch with template")
        w = self.skin_weights
        if w.shape != (V, N_JOINTS):
            raise ValueError("skin weights must be (V, 4)")
        if w.min() < -1e-12 or np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("skin weights must be non-negative and sum to 1")
        if self.landmark_bary.min() < -1e-12 or np.abs(self.landmark_bary.sum(1) - 1).max() > 1e-9:
            raise ValueError("landmark barycentrics must be convex")

    @property
    def n_shape(self) -> int:
        return len(self.shape_basis)

    @property
    def n_expr(self) -> int:
        return len(self.expr_basis)

    def template_coords_normalized(self) -> np.ndarray:
        """Template vertex positions mapped to [-1, 1]^3 (network input)."""
        v = self.template.vertices
        lo, hi = v.min(axis=0), v.max(axis=0)
        return 2.0 * (v - lo) / np.maximum(hi - lo, 1e-12) - 1.0

    # -- archive ----------------------------------------------------------
    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        save_obj(os.path.join(directory, "template.obj"), self.template)
        arrayio.save_arrays(
            directory,
            {
                "shape_basis": self.shape_basis,
                "expr_basis": self.expr_basis,
                "joint_pivots": self.joint_pivots,
                "joint_parents": self.joint_parents.astype(np.int64),
                "skin_weights": self.skin_weights,
                "joint_limits": self.joint_limits,
                "landmark_faces": self.landmark_faces.astype(np.int64),
                "landmark_bary": self.landmark_bary,
                "lip_pairs": self.lip_pairs.astype(np.int64),
                "mouth_uv_box": self.mouth_uv_box,
            },
        )

    @classmethod
    def load(cls, directory: str) -> "HeadModel":
        template = load_obj(os.path.join(directory, "template.obj"))
        a = arrayio.load_arrays(directory)
        return cls(template=template, **{k: a[k] for k in a})


@dataclass
class HeadParams:
    """Per-frame parameter bundle; tensors so energies can differentiate."""

    beta: torch.Tensor
    psi: torch.Tensor
    phi_raw: torch.Tensor  # (4, 3) pre-tanh joint rotations
    global_rot: torch.Tensor  # (3,) axis-angle
    global_trans: torch.Tensor  # (3,)
    camera: object = None

    @classmethod
    def neutral(cls, model: HeadModel, camera=None) -> "HeadParams":
        return cls(
            beta=torch.zeros(model.n_shape, dtype=torch.float64),
            psi=torch.zeros(model.n_expr, dtype=torch.float64),
            phi_raw=torch.zeros(N_JOINTS, 3, dtype=torch.float64),
            global_rot=torch.zeros(3, dtype=torch.float64),
            global_trans=torch.zeros(3, dtype=torch.float64),
            camera=camera,
        )


def eval_rest_shape(model: HeadModel, beta: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
    """template + sum(beta_s * S_s) + sum(psi_e * E_e); linear in both."""
    if beta.shape != (model.n_shape,):
        raise ValueError(f"shape coefficients: expected {model.n_shape}, got {tuple(beta.shape)}")
    if psi.shape != (model.n_expr,):
        raise ValueError(f"expression coefficients: expected {model.n_expr}, got {tuple(psi.shape)}")
    base = torch.as_tensor(model.template.vertices)
    S = torch.as_tensor(model.shape_basis)
    E = torch.as_tensor(model.expr_basis)
    return base + torch.einsum("s,svc->vc", beta, S) + torch.einsum("e,evc->vc", psi, E)


def limit_joints(model: HeadModel, phi_raw: torch.Tensor) -> torch.Tensor:
    """Squash raw rotations: angle = limit * tanh(phi_raw), per axis.

    Smooth, zero at zero, and strictly inside (-limit, limit) for finite
    inputs. Axes with limit 0 are pinned at 0."""
    limit = torch.as_tensor(model.joint_limits)
    return limit * torch.tanh(phi_raw)


def _joint_world_transforms(model: HeadModel, angles: torch.Tensor):
    """Compose joint rotations down the parent chain about rest pivots.

    Returns (R_world (4,3,3), t_world (4,3)) with x -> R x + t."""
    pivots = torch.as_tensor(model.joint_pivots)
    R_local = rotvec_to_matrix(angles)
    Rs, ts = [], []
    for j in range(N_JOINTS):
        R = R_local[j]
        t = pivots[j] - R_local[j] @ pivots[j]
        parent = int(model.joint_parents[j])
        if parent >= 0:
            Rp, tp = Rs[parent], ts[parent]
            R, t = Rp @ R, Rp @ t + tp
        Rs.append(R)
        ts.append(t)
    return torch.stack(Rs), torch.stack(ts)


def skin_pose(
    model: HeadModel,
    rest_vertices: torch.Tensor,
    phi_raw: torch.Tensor,
    global_rot: torch.Tensor,
    global_trans: torch.Tensor,
) -> torch.Tensor:
    """Linear blend skinning followed by the global rigid transform."""
    if rest_vertices.shape[0] != model.skin_weights.shape[0]:
        raise ValueError("rest vertices do not match skinning weights")
    angles = limit_joints(model, phi_raw)
    Rw, tw = _joint_world_transforms(model, angles)
    W = torch.as_tensor(model.skin_weights)  # (V, 4)
    per_joint = torch.einsum("jab,vb->jva", Rw, rest_vertices) + tw[:, None, :]
    blended = torch.einsum("vj,jva->va", W, per_joint)
    Rg = rotvec_to_matrix(global_rot)
    return blended @ Rg.T + global_trans


def posed_vertices(model: HeadModel, params: HeadParams, offsets: torch.Tensor | None = None):
    """Full chain: blendshapes (+ optional per-vertex offsets) then skinning."""
    rest = eval_rest_shape(model, params.beta, params.psi)
    if offsets is not None:
        rest = rest + offsets
    return skin_pose(model, rest, params.phi_raw, params.global_rot, params.global_trans)


def embed_landmarks(model: HeadModel, vertices: torch.Tensor) -> torch.Tensor:
    """Barycentric interpolation of the landmark embedding, (L, 3)."""
    faces = torch.as_tensor(model.template.faces[model.landmark_faces])
    bary = torch.as_tensor(model.landmark_bary)
    corners = vertices[faces]  # (L, 3, 3)
    return torch.einsum("lc,lca->la", bary, corners)


def lip_distances(model: HeadModel, vertices: torch.Tensor) -> torch.Tensor:
    """Euclidean distances of the 10 declared inner-lip vertex pairs."""
    if len(model.lip_pairs) == 0:
        raise ValueError("model declares no inner-lip vertex pairs")
    pairs = torch.as_tensor(model.lip_pairs)
    return torch.linalg.norm(vertices[pairs[:, 0]] - vertices[pairs[:, 1]], dim=1)


def neck_pose(model: HeadModel, phi_raw: torch.Tensor) -> torch.Tensor:
    """Effective (post-limit) rotation vector of the neck joint."""
    return limit_joints(model, phi_raw)[JOINT_NAMES.index("neck")]


# ---------------------------------------------------------------------------
# Procedural template generation

_EYE_DIRS = np.array([[0.36, 0.30, 0.88], [-0.36, 0.30, 0.88]])
_NOSE_DIR = np.array([0.0, -0.22, 1.0])
_MOUTH_DIR = np.array([0.0, -0.52, 0.86])
_EAR_DIRS = np.array([[1.0, -0.05, 0.02], [-1.0, -0.05, 0.02]])


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _landmark_directions() -> np.ndarray:
    """70 facial landmark directions plus 2 iris directions (unit vectors).

    Laid out as jaw contour, brows, nose, eyes (with fixed upper/lower lid
    slots), mouth outline and cheek/forehead fill points."""
    dirs = []

    def ang(azim, elev):
        # azimuth about y (0 = straight ahead), elevation above horizontal
        return _unit(
            [np.sin(azim) * np.cos(elev), np.sin(elev), np.cos(azim) * np.cos(elev)]
        )

    # 0-14: jaw contour, ear to ear through the chin
    for t in np.linspace(-1.0, 1.0, 15):
        dirs.append(ang(1.15 * t, -0.55 - 0.25 * (1 - t * t)))
    # 15-24: eyebrows, right then left
    for side in (1, -1):
        for t in np.linspace(-0.5, 0.5, 5):
            dirs.append(ang(side * 0.38 + 0.28 * t, 0.52))
    # 25-31: nose bridge (4) + base (3)
    for t in np.linspace(0.35, -0.1, 4):
        dirs.append(ang(0.0, t))
    for t in (-0.12, 0.0, 0.12):
        dirs.append(ang(t, -0.2))
    # 32-43: eyes, right then left; slots 2/4 of each eye are upper/lower lid
    eye_elev, eye_az = 0.31, 0.39
    for side in (1, -1):
        center_az = side * eye_az
        for k, (da, de) in enumerate(
            [(-0.13, 0.0), (-0.06, 0.07), (0.06, 0.07), (0.13, 0.0), (0.06, -0.07), (-0.06, -0.07)]
        ):
            dirs.append(ang(center_az + da, eye_elev + de))
    # 44-59: mouth outline
    for t in np.linspace(0, 2 * np.pi, 16, endpoint=False):
        dirs.append(ang(0.28 * np.cos(t), -0.58 + 0.12 * np.sin(t)))
    # 60-69: cheek and forehead fill
    for side in (1, -1):
        for elev in (-0.25, 0.05, 0.35):
            dirs.append(ang(side * 0.75, elev))
    for t in np.linspace(-0.45, 0.45, 4):
        dirs.append(ang(t, 0.78))
    # 70-71: iris points at the eye centers
    for side in (1, -1):
        dirs.append(ang(side * eye_az, eye_elev))
    out = np.array(dirs)
    assert len(out) == N_LANDMARKS
    return out


def _sphere_grid(n_lat: int, n_lon: int):
    """Lat-long sphere: poles plus (n_lat-1) x n_lon ring vertices.

    Returns (directions (V,3), faces (F,3), theta (V,), phi (V,))."""
    thetas = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phis = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    verts = [(0.0, 0.0)]  # top pole: theta 0
    for th in thetas:
        for ph in phis:
            verts.append((th, ph))
    verts.append((np.pi, 0.0))  # bottom pole
    theta = np.array([v[0] for v in verts])
    phi = np.array([v[1] for v in verts])
    dirs = np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)], axis=1
    )
    faces = []
    bottom = len(verts) - 1

    def ring(i, j):
        return 1 + i * n_lon + (j % n_lon)

    for j in range(n_lon):  # top cap
        faces.append([0, ring(0, j), ring(0, j + 1)])
    for i in range(len(thetas) - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    for j in range(n_lon):  # bottom cap
        faces.append([bottom, ring(len(thetas) - 1, j + 1), ring(len(thetas) - 1, j)])
    return dirs, np.array(faces, dtype=np.int64), theta, phi


def _grid_uv(faces, theta, phi):
    """Per-face-corner uv from spherical coordinates; the seam (phi = pi)
    and the poles are repaired per corner."""
    u = (phi + np.pi) / (2 * np.pi)
    v = theta / np.pi
    uv = np.stack([u[faces], v[faces]], axis=2)
    for f in range(len(faces)):
        us = uv[f, :, 0]
        if us.max() - us.min() > 0.5:  # seam face: lift small-u corners by 1
            us = np.where(us < 0.5, us + 1.0, us)
            uv[f, :, 0] = np.minimum(us, 1.0)
        for c in range(3):
            if theta[faces[f, c]] in (0.0, np.pi):  # pole corner
                others = [k for k in range(3) if k != c]
                uv[f, c, 0] = uv[f, others, 0].mean()
    return np.clip(uv, 0.0, 1.0)


def _head_surface(dirs, theta):
    """Deformed ellipsoid with nose/ear bumps and a neck cylinder."""
    radii = np.array([0.078, 0.098, 0.083])
    bump = np.zeros(len(dirs))
    ang_nose = np.arccos(np.clip(dirs @ _unit(_NOSE_DIR), -1, 1))
    bump += 0.022 * np.exp(-((ang_nose / 0.20) ** 2))
    for d in _EAR_DIRS:
        ang = np.arccos(np.clip(dirs @ _unit(d), -1, 1))
        bump += 0.016 * np.exp(-((ang / 0.22) ** 2))
    pos = dirs * radii + dirs * bump[:, None]

    # neck: blend lower vertices toward a cylinder extended downward
    t = _smoothstep(theta, 2.15, np.pi)
    horiz = np.stack([dirs[:, 0], np.zeros(len(dirs)), dirs[:, 2]], axis=1)
    hn = np.linalg.norm(horiz, axis=1, keepdims=True)
    horiz = horiz / np.maximum(hn, 1e-9)
    neck_target = horiz * 0.042 + np.array([0, -0.085, -0.012]) - np.array(
        [0, 0.055, 0]
    ) * ((theta - 2.15) / (np.pi - 2.15)).clip(0, 1)[:, None]
    return pos * (1 - t[:, None]) + neck_target * t[:, None]


def _assign_regions(dirs, theta):
    region = np.full(len(dirs), int(Region.FACE), dtype=np.int64)
    ang_to = lambda d: np.arccos(np.clip(dirs @ _unit(d), -1, 1))
    scalp = (theta < 0.75) | ((dirs[:, 2] < -0.25) & (theta < 2.0))
    region[scalp] = int(Region.SCALP)
    forehead = (ang_to([0, 0.55, 0.84]) < 0.42) & ~scalp
    region[forehead] = int(Region.FOREHEAD)
    region[ang_to(_NOSE_DIR) < 0.16] = int(Region.NOSE)
    for d in _EYE_DIRS:
        region[ang_to(d) < 0.27] = int(Region.EYE_SURROUNDING)
    for d in _EYE_DIRS:
        region[ang_to(d) < 0.12] = int(Region.EYEBALLS)
    for d in _EAR_DIRS:
        region[ang_to(d) < 0.30] = int(Region.EARS)
    region[theta > 2.30] = int(Region.NECK)
    region[theta > 2.75] = int(Region.LOWER_NECK)

    # guarantee all nine labels exist at coarse resolutions
    targets = {
        Region.EYEBALLS: _EYE_DIRS[0],
        Region.EYE_SURROUNDING: _EYE_DIRS[0] + [0.05, 0.1, 0],
        Region.NOSE: _NOSE_DIR,
        Region.EARS: _EAR_DIRS[0],
        Region.FOREHEAD: [0, 0.55, 0.84],
        Region.SCALP: [0, 1, 0],
        Region.NECK: [0, -0.9, 0.3],
        Region.LOWER_NECK: [0, -1, 0],
        Region.FACE: _MOUTH_DIR,
    }
    for label, d in targets.items():
        if not (region == int(label)).any():
            region[np.argmin(ang_to(d))] = int(label)
    return region


def _pick_lip_pairs(dirs, region) -> np.ndarray:
    """10 vertex pairs across the mouth line (upper lip vs lower lip)."""
    pairs = []
    face_mask = region == int(Region.FACE)
    for az in np.linspace(-0.22, 0.22, 10):
        up = _unit([np.sin(az) * 0.86, -0.44, np.cos(az) * 0.86])
        dn = _unit([np.sin(az) * 0.86, -0.62, np.cos(az) * 0.86])
        cand = np.where(face_mask)[0]
        iu = cand[np.argmax(dirs[cand] @ up)]
        idn = cand[np.argmax(dirs[cand] @ dn)]
        pairs.append((int(iu), int(idn)))
    return np.array(pairs, dtype=np.int64)


def _band_limited_basis(mesh: TriMesh, n: int, window: np.ndarray, rng) -> np.ndarray:
    """Smooth random per-vertex 3D fields, windowed, then orthonormalized."""
    V = mesh.n_vertices
    fields = rng.normal(size=(n, V, 3))
    for _ in range(12):
        for k in range(n):
            fields[k] += 0.6 * laplace_beltrami(mesh, fields[k])
    fields *= window[None, :, None]
    flat = fields.reshape(n, -1).T  # (3V, n)
    q, _ = np.linalg.qr(flat)
    return np.ascontiguousarray(q.T.reshape(n, V, 3))


def _nearest_surface_embedding(mesh: TriMesh, dirs, targets):
    """Ray-cast landmark embedding: intersect the ray from the head centre
    along each target direction with the surface and keep the exact
    barycentric hit, so meshes of different resolution place a landmark at
    the same anatomical point.  Falls back to the nearest vertex when a ray
    misses (degenerate geometry)."""
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    faces_out, bary_out = [], []
    eps = 1e-12
    for d in targets:
        d = _unit(d)
        # Moeller-Trumbore over all faces at once
        pvec = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = (e1 * pvec).sum(axis=1)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -v0
        u = (tvec * pvec).sum(axis=1) * inv
        qvec = np.cross(tvec, e1)
        v = (np.broadcast_to(d, e1.shape) * qvec).sum(axis=1) * inv
        t = (e2 * qvec).sum(axis=1) * inv
        tol = 1e-9
        hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol) & (t > eps)
        if hit.any():
            # outermost intersection = the visible surface point
            f = int(np.nonzero(hit)[0][np.argmax(t[hit])])
            b = np.array([1.0 - u[f] - v[f], u[f], v[f]])
            b = np.clip(b, 0.0, None)
            b /= b.sum()
        else:
            vidx = int(np.argmax(dirs @ d))
            hits = np.nonzero((mesh.faces == vidx).any(axis=1))[0]
            f = int(hits[0])
            corner = int(np.nonzero(mesh.faces[f] == vidx)[0][0])
            b = np.zeros(3)
            b[corner] = 1.0
        faces_out.append(f)
        bary_out.append(b)
    return np.array(faces_out, dtype=np.int64), np.array(bary_out)


def generate_procedural_template(
    seed: int, resolution: int = 700, n_shape: int = 16, n_expr: int = 8
) -> HeadModel:
    """Deterministic head-like closed mesh with rig, bases and landmarks.

    ``resolution`` is the approximate vertex count (>= 300)."""
    if resolution < 300:
        raise ValueError("resolution too small: need >= 300 vertices")
    rng = np.random.default_rng(seed)
    n_lon = max(12, int(round(np.sqrt(resolution * 2))))
    n_lat = max(10, int(round(resolution / n_lon)) + 1)
    dirs, faces, theta, phi = _sphere_grid(n_lat, n_lon)
    verts = _head_surface(dirs, theta)
    region = _assign_regions(dirs, theta)
    uv = _grid_uv(faces, theta, phi)
    mesh = TriMesh(verts, faces, uv, region)

    # blendshape bases: shape over the whole head (minus eyeballs), expression
    # localized to the facial regions
    not_eye = (region != int(Region.EYEBALLS)).astype(np.float64)
    shape_window = not_eye * (1.0 - _smoothstep(theta, 2.3, np.pi))
    expr_labels = {int(Region.FACE), int(Region.NOSE), int(Region.EYE_SURROUNDING),
                   int(Region.FOREHEAD)}
    expr_window = np.array([1.0 if r in expr_labels else 0.0 for r in region])
    shape_basis = _band_limited_basis(mesh, n_shape, shape_window, rng)
    expr_basis = _band_limited_basis(mesh, n_expr, expr_window, rng)

    # rig
    eye_pivots = _unit(_EYE_DIRS) * np.array([0.070, 0.088, 0.075])
    joint_pivots = np.array(
        [[0.0, -0.060, -0.010], [0.0, -0.038, 0.012], eye_pivots[1], eye_pivots[0]]
    )
    # joints: neck is the root; jaw and eyes hang off the neck
    joint_parents = np.array([-1, 0, 0, 0], dtype=np.int64)
    # neck free on all axes, jaw pitch only, eyes yaw/pitch only
    joint_limits = np.array(
        [[0.6, 0.6, 0.6], [0.5, 0.0, 0.0], [0.4, 0.4, 0.0], [0.4, 0.4, 0.0]]
    )

    # skinning: eyeballs follow their eye joint, the lower face follows the
    # jaw with a smooth falloff, everything else is rigid to the neck
    V = mesh.n_vertices
    w = np.zeros((V, N_JOINTS))
    left_eye = (region == int(Region.EYEBALLS)) & (dirs[:, 0] < 0)
    right_eye = (region == int(Region.EYEBALLS)) & (dirs[:, 0] >= 0)
    w[left_eye, 2] = 1.0
    w[right_eye, 3] = 1.0
    mouth_y = -0.40
    jaw_zone = _smoothstep(-dirs[:, 1], -mouth_y - 0.06, -mouth_y + 0.22) * _smoothstep(
        dirs[:, 2], 0.05, 0.45
    ) * (theta < 2.3)
    w[:, 1] = 0.9 * jaw_zone * (w[:, 2] + w[:, 3] == 0)
    w[:, 0] = 1.0 - w.sum(axis=1)

    lm_faces, lm_bary = _nearest_surface_embedding(mesh, dirs, _landmark_directions())
    lip_pairs = _pick_lip_pairs(dirs, region)

    # mouth uv box from the lip-pair vertices (front of head, away from seam)
    lip_verts = np.unique(lip_pairs)
    lip_uv = []
    for f in range(mesh.n_faces):
        for c in range(3):
            if mesh.faces[f, c] in lip_verts:
                lip_uv.append(mesh.uv[f, c])
    lip_uv = np.array(lip_uv)
    pad = 0.01
    mouth_uv_box = np.array(
        [lip_uv[:, 0].min() - pad, lip_uv[:, 1].min() - pad,
         lip_uv[:, 0].max() + pad, lip_uv[:, 1].max() + pad]
    )

    return HeadModel(
        template=mesh,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        joint_pivots=joint_pivots,
        joint_parents=joint_parents,
        skin_weights=w,
        joint_limits=joint_limits,
        landmark_faces=lm_faces,
        landmark_bary=lm_bary,
        lip_pairs=lip_pairs,
        mouth_uv_box=mouth_uv_box,
    )
