"""Software perspective rasterizer with differentiable attribute and
silhouette paths.

Visibility (which face covers which pixel) is resolved once with numpy under
no_grad; barycentrics, depths and the soft silhouette are then recomputed in
torch for exactly the covered/candidate pixels so gradients reach the vertex
positions. Which-face-wins is never differentiated.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from . import arrayio
from .headmodel import HeadModel, HeadParams, embed_landmarks
from .mesh import TriMesh, vertex_normals

NEAR_PLANE = 0.01
BACKGROUND = 0.0


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
    transform (x_cam = R x_world + t)."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = NEAR_PLANE

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def world_to_cam(self, points: torch.Tensor) -> torch.Tensor:
        R = torch.as_tensor(self.R)
        t = torch.as_tensor(self.t)
        return points @ R.T + t

    def as_dict(self) -> dict:
        d = {"focal": self.focal, "cx": self.cx, "cy": self.cy,
             "width": self.width, "height": self.height, "near": self.near}
        for i in range(3):
            for j in range(3):
                d[f"R{i}{j}"] = float(self.R[i, j])
            d[f"t{i}"] = float(self.t[i])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        R = np.array([[d[f"R{i}{j}"] for j in range(3)] for i in range(3)])
        t = np.array([d[f"t{i}"] for i in range(3)])
        return cls(focal=float(d["focal"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]), R=R, t=t,
                   near=float(d.get("near", NEAR_PLANE)))


def default_camera(size: int = 128, distance: float = 0.45,
                   focal_ratio: float = 2.2) -> Camera:
    """Camera on the +z axis looking down -z toward the origin."""
    R = np.diag([1.0, -1.0, -1.0])  # flip so +y in world is up in the image
    t = np.array([0.0, 0.0, distance])
    return Camera(focal=focal_ratio * size, cx=size / 2, cy=size / 2,
                  width=size, height=size, R=R, t=t)


def project(camera: Camera, points: torch.Tensor):
    """Perspective projection: returns (uv (N,2), depth (N,), clipped (N,)).

    u = f*x/z + cx, v = f*y/z + cy on camera-space coordinates. Points at or
    behind the near plane are flagged and projected with z clamped so the
    output stays finite."""
    cam = camera.world_to_cam(points)
    z = cam[:, 2]
    clipped = z <= camera.near
    z_safe = z.clamp(min=camera.near)
    u = camera.focal * cam[:, 0] / z_safe + camera.cx
    v = camera.focal * cam[:, 1] / z_safe + camera.cy
    return torch.stack([u, v], dim=1), z, clipped


@dataclass
class RenderBuffers:
    """Per-pixel rasterization outputs; tensors keep autodiff graphs."""

    width: int
    height: int
    face_id: np.ndarray  # (H, W) int64, -1 = background
    bary: torch.Tensor  # (H, W, 3) perspective-correct, zero off-surface
    depth: torch.Tensor  # (H, W), 0 off-surface
    coverage: torch.Tensor  # (H, W) in [0, 1]
    uv: torch.Tensor | None = None  # (H, W, 2)
    rgb: torch.Tensor | None = None  # (H, W, 3) in [0, 1]
    normal: torch.Tensor | None = None  # (H, W, 3) camera-space
    semantic: torch.Tensor | None = None  # (H, W, 4)

    @property
    def hit_mask(self) -> np.ndarray:
        return self.face_id >= 0

    def detach_arrays(self) -> dict[str, np.ndarray]:
        out = {"face_id": self.face_id,
               "bary": self.bary.detach().numpy(),
               "depth": self.depth.detach().numpy(),
               "coverage": self.coverage.detach().numpy()}
        for name in ("uv", "rgb", "normal", "semantic"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val.detach().numpy()
        return out

    def save(self, directory: str):
        arrayio.save_arrays(directory, self.detach_arrays())

    def save_pngs(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        if self.rgb is not None:
            write_png(os.path.join(directory, "rgb.png"), self.rgb)
        if self.normal is not None:
            n01 = (self.normal + 1.0) * 0.5
            write_png(os.path.join(directory, "normal.png"), n01)
        if self.semantic is not None:
            palette = torch.tensor([[0.8, 0.6, 0.5], [0.2, 0.4, 0.9],
                                    [0.9, 0.8, 0.2], [0.3, 0.2, 0.1]],
                                   dtype=torch.float64)
            arg = torch.as_tensor(self.semantic.detach().numpy().argmax(axis=2))
            img = palette[arg] * self.coverage.detach()[..., None]
            write_png(os.path.join(directory, "semantic.png"), img)


def quantize_to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str, img: torch.Tensor):
    Image.fromarray(quantize_to_uint8(img)).save(path)


def read_png(path: str) -> np.ndarray:
    """PNG -> float64 array in [0, 1]."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def _face_candidates(uv_np, z_np, faces, width, height, pad, near):
    """Per-face candidate pixel lists from padded screen bounding boxes.

    Returns (cand_face, cand_px, cand_py) int arrays; faces with a clipped
    vertex or an out-of-frame bbox contribute nothing."""
    tri = uv_np[faces]  # (F, 3, 2)
    ok = (z_np[faces] > near).all(axis=1)
    x0 = np.maximum(np.floor(tri[:, :, 0].min(axis=1) - pad - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(tri[:, :, 0].max(axis=1) + pad - 0.5), width - 1).astype(np.int64)
    y0 = np.maximum(np.floor(tri[:, :, 1].min(axis=1) - pad - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(tri[:, :, 1].max(axis=1) + pad - 0.5), height - 1).astype(np.int64)
    nx = np.where(ok, np.maximum(x1 - x0 + 1, 0), 0)
    ny = np.where(ok, np.maximum(y1 - y0 + 1, 0), 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    cand_face = np.repeat(np.arange(len(faces)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[cand_face]
    w = np.maximum(nx[cand_face], 1)
    cand_px = x0[cand_face] + local % w
    cand_py = y0[cand_face] + local // w
    return cand_face, cand_px, cand_py


def _edge_functions(tri, px, py):
    """Signed edge cross products w0, w1, w2 and twice-area for point
    (px, py); works on numpy arrays or torch tensors alike."""
    ax, ay = tri[..., 0, 0], tri[..., 0, 1]
    bx, by = tri[..., 1, 0], tri[..., 1, 1]
    cx, cy = tri[..., 2, 0], tri[..., 2, 1]
    w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return w0, w1, w2, area


def rasterize(camera: Camera, vertices: torch.Tensor, faces: np.ndarray,
              mode: str = "hard", temperature: float = 1.0,
              top_k: int = 4) -> RenderBuffers:
    """Z-buffered rasterization at pixel centers (x+0.5, y+0.5).

    hard: nearest-face hit per pixel, coverage 1 where hit. soft: coverage is
    additionally the probabilistic union of sigmoid(signed screen distance /
    temperature) over the top_k most-interior candidate faces per pixel, so
    silhouettes are differentiable w.r.t. vertices."""
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown rasterization mode {mode!r}")
    H, W = camera.height, camera.width
    faces = np.asarray(faces, dtype=np.int64)
    uv, z, _ = project(camera, vertices)
    uv_np = uv.detach().numpy()
    z_np = z.detach().numpy()

    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = torch.zeros(H, W, 3, dtype=torch.float64)
    depth = torch.zeros(H, W, dtype=torch.float64)

    cf, cx_, cy_ = _face_candidates(uv_np, z_np, faces, W, H, 0.0, camera.near)
    if len(cf):
        px = cx_ + 0.5
        py = cy_ + 0.5
        tri = uv_np[faces[cf]]
        w0, w1, w2, area = _edge_functions(tri, px, py)
        inside = (((w0 >= 0) & (w1 >= 0) & (w2 >= 0))
                  | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))) & (area != 0)
        cf, cx_, cy_ = cf[inside], cx_[inside], cy_[inside]
        w0, w1, w2 = w0[inside], w1[inside], w2[inside]
    if len(cf):
        s = w0 + w1 + w2
        zf = z_np[faces[cf]]
        inv = (w0 / s) / zf[:, 0] + (w1 / s) / zf[:, 1] + (w2 / s) / zf[:, 2]
        cd = 1.0 / inv
        pix = cy_ * W + cx_
        order = np.lexsort((cf, cd, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        win = order[first]
        face_id[cy_[win], cx_[win]] = cf[win]

        # differentiable barycentrics/depth for the winning pixels only
        wf = faces[cf[win]]
        tri_t = uv[torch.as_tensor(wf)]
        px_t = torch.as_tensor(cx_[win] + 0.5)
        py_t = torch.as_tensor(cy_[win] + 0.5)
        tw0, tw1, tw2, _ = _edge_functions(tri_t, px_t, py_t)
        ts = tw0 + tw1 + tw2
        zt = z[torch.as_tensor(wf)]
        a0 = (tw0 / ts) / zt[:, 0]
        a1 = (tw1 / ts) / zt[:, 1]
        a2 = (tw2 / ts) / zt[:, 2]
        inv_t = a0 + a1 + a2
        d_t = 1.0 / inv_t
        b = torch.stack([a0, a1, a2], dim=1) * d_t[:, None]
        rows = torch.as_tensor(cy_[win])
        cols = torch.as_tensor(cx_[win])
        bary = bary.index_put((rows, cols), b)
        depth = depth.index_put((rows, cols), d_t)

    if mode == "hard":
        coverage = torch.as_tensor((face_id >= 0).astype(np.float64))
    else:
        coverage = _soft_coverage(camera, uv, uv_np, z_np, faces,
                                  temperature, top_k)
    return RenderBuffers(width=W, height=H, face_id=face_id, bary=bary,
                         depth=depth, coverage=coverage)


def _signed_distance_np(tri, px, py):
    """Signed screen distance of points to triangles: positive inside,
    negative outside, zero on the border. tri: (N,3,2), px/py: (N,)."""
    w0, w1, w2, area = _edge_functions(tri, px, py)
    inside = (((w0 >= 0) & (w1 >= 0) & (w2 >= 0))
              | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))) & (area != 0)
    dmin = None
    for e in range(3):
        a = tri[:, e]
        b = tri[:, (e + 1) % 3]
        d = _point_segment_dist(a, b, px, py)
        dmin = d if dmin is None else np.minimum(dmin, d)
    return np.where(inside, dmin, -dmin)


def _point_segment_dist(a, b, px, py):
    ex = b[..., 0] - a[..., 0]
    ey = b[..., 1] - a[..., 1]
    qx = px - a[..., 0]
    qy = py - a[..., 1]
    tt = (qx * ex + qy * ey) / (ex * ex + ey * ey + 1e-300)
    if isinstance(tt, torch.Tensor):
        tt = tt.clamp(0.0, 1.0)
        return torch.sqrt((qx - tt * ex) ** 2 + (qy - tt * ey) ** 2 + 1e-300)
    tt = np.clip(tt, 0.0, 1.0)
    return np.sqrt((qx - tt * ex) ** 2 + (qy - tt * ey) ** 2)


def _signed_distance_torch(tri, px, py, inside):
    dmin = None
    for e in range(3):
        a = tri[:, e]
        b = tri[:, (e + 1) % 3]
        d = _point_segment_dist(a, b, px, py)
        dmin = d if dmin is None else torch.minimum(dmin, d)
    sign = torch.where(inside, 1.0, -1.0)
    return sign * dmin


def _soft_coverage(camera, uv, uv_np, z_np, faces, temperature, top_k):
    """Probabilistic union of per-face silhouette sigmoids over the top_k
    most-interior candidates per pixel; face selection is non-differentiable,
    the distances are torch."""
    H, W = camera.height, camera.width
    pad = 4.0 * temperature + 1.0
    cf, cx_, cy_ = _face_candidates(uv_np, z_np, faces, W, H, pad, camera.near)
    coverage = torch.zeros(H, W, dtype=torch.float64)
    if not len(cf):
        return coverage
    px = cx_ + 0.5
    py = cy_ + 0.5
    tri = uv_np[faces[cf]]
    d_np = _signed_distance_np(tri, px, py)
    pix = cy_ * W + cx_
    # keep the top_k largest signed distances per pixel
    order = np.lexsort((-d_np, pix))
    pix_sorted = pix[order]
    newpix = np.ones(len(order), dtype=bool)
    newpix[1:] = pix_sorted[1:] != pix_sorted[:-1]
    rank = np.arange(len(order)) - np.maximum.accumulate(np.where(newpix, np.arange(len(order)), 0))
    keep = order[rank < top_k]
    cf_k, cx_k, cy_k = cf[keep], cx_[keep], cy_[keep]

    tri_t = uv[torch.as_tensor(faces[cf_k])]
    px_t = torch.as_tensor(cx_k + 0.5)
    py_t = torch.as_tensor(cy_k + 0.5)
    w0, w1, w2, area = _edge_functions(uv_np[faces[cf_k]], cx_k + 0.5, cy_k + 0.5)
    inside = torch.as_tensor(
        (((w0 >= 0) & (w1 >= 0) & (w2 >= 0))
         | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))) & (area != 0))
    d_t = _signed_distance_torch(tri_t, px_t, py_t, inside)
    prob = torch.sigmoid(d_t / temperature)
    one_minus = torch.ones(H * W, dtype=torch.float64)
    pix_k = torch.as_tensor(cy_k * W + cx_k)
    # each pixel holds at most one candidate per rank slot, so the union
    # 1 - prod(1 - p) is a scatter-multiply per slot
    rank_k = rank[rank < top_k]
    for k in range(top_k):
        sel = torch.as_tensor(rank_k == k)
        if not bool(sel.any()):
            break
        slot = torch.ones(H * W, dtype=torch.float64).index_put(
            (pix_k[sel],), 1.0 - prob[sel])
        one_minus = one_minus * slot
    return (1.0 - one_minus).reshape(H, W)


def shade(buffers: RenderBuffers, camera: Camera, model: HeadModel,
          posed: torch.Tensor, texture=None, params: HeadParams | None = None,
          patch_size: int = 7, background: float = BACKGROUND) -> RenderBuffers:
    """Fill rgb/normal/semantic/uv channels for the covered pixels.

    ``model`` may be a HeadModel or a bare TriMesh (mouth conditioning then
    requires the former). ``texture`` is either a TextureField (full
    dynamic-texture path: mouth conditioning plus normal patches) or a plain
    callable ``f(canonical, uv, normal_cam) -> rgb in [0,1]``; None renders
    mid-gray. Normals are rendered first so the texture can read local
    patches; camera-facing surfaces map to normal (0, 0, 1)."""
    H, W = buffers.height, buffers.width
    mesh: TriMesh = getattr(model, "template", model)
    mask = buffers.hit_mask
    rows, cols = np.nonzero(mask)
    buffers.rgb = torch.full((H, W, 3), background, dtype=torch.float64)
    buffers.normal = torch.zeros(H, W, 3, dtype=torch.float64)
    buffers.semantic = torch.zeros(H, W, 4, dtype=torch.float64)
    buffers.uv = torch.zeros(H, W, 2, dtype=torch.float64)
    if len(rows) == 0:
        return buffers
    fid = buffers.face_id[rows, cols]
    corners = torch.as_tensor(mesh.faces[fid])  # (P, 3)
    b = buffers.bary[torch.as_tensor(rows), torch.as_tensor(cols)]  # (P, 3)

    # geometry attributes; view-space normals have +z toward the camera
    vn = vertex_normals(mesh, posed)  # (V, 3) world
    R = torch.as_tensor(camera.R)
    flip = torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64)
    n_interp = (torch.einsum("pc,pca->pa", b, vn[corners]) @ R.T) * flip
    n_unit = n_interp / torch.linalg.norm(n_interp, dim=1, keepdim=True).clamp(min=1e-12)
    rws, cls_ = torch.as_tensor(rows), torch.as_tensor(cols)
    buffers.normal = buffers.normal.index_put((rws, cls_), n_unit)

    uv_face = torch.as_tensor(mesh.uv[fid])  # (P, 3, 2)
    uv_pix = torch.einsum("pc,pcu->pu", b, uv_face)
    buffers.uv = buffers.uv.index_put((rws, cls_), uv_pix)

    onehot = torch.as_tensor(mesh.semantic_onehot())  # (V, 4)
    sem = torch.einsum("pc,pck->pk", b, onehot[corners])
    buffers.semantic = buffers.semantic.index_put((rws, cls_), sem)
    buffers.semantic = buffers.semantic * buffers.coverage[..., None]

    vmin = mesh.vertices.min(axis=0)
    vmax = mesh.vertices.max(axis=0)
    coords = torch.as_tensor(
        2.0 * (mesh.vertices - vmin) / np.maximum(vmax - vmin, 1e-12) - 1.0)
    canonical = torch.einsum("pc,pca->pa", b, coords[corners])

    if texture is None:
        rgb01 = torch.full((len(rows), 3), 0.5, dtype=torch.float64)
    elif callable(texture) and not hasattr(texture, "color"):
        rgb01 = texture(canonical, uv_pix, n_unit)
    else:
        half = patch_size // 2
        nbuf = buffers.normal.permute(2, 0, 1)[None]  # (1, 3, H, W)
        unfolded = torch.nn.functional.unfold(nbuf, patch_size, padding=half)
        flat = rws * W + cls_
        patches = unfolded[0, :, flat].T.reshape(len(rows), 3, patch_size, patch_size)
        cond = None
        if params is not None and hasattr(model, "lip_pairs"):
            from .fields import mouth_features
            cond = mouth_features(model, params, posed)
        rgb01 = (texture.color(canonical, uv_pix, cond, patches) + 1.0) * 0.5

    fg = torch.zeros(H, W, 3, dtype=torch.float64).index_put((rws, cls_), rgb01)
    hit = torch.as_tensor(mask.astype(np.float64))[..., None]
    cov = buffers.coverage[..., None] * hit
    buffers.rgb = cov * fg + (1.0 - cov) * background
    return buffers


def render(camera: Camera, model: HeadModel, posed: torch.Tensor,
           texture=None, params: HeadParams | None = None, mode: str = "hard",
           temperature: float = 1.0, background: float = BACKGROUND) -> RenderBuffers:
    """rasterize + shade in one call."""
    mesh = getattr(model, "template", model)
    buffers = rasterize(camera, posed, mesh.faces, mode=mode,
                        temperature=temperature)
    return shade(buffers, camera, model, posed, texture=texture, params=params,
                 background=background)


def project_landmarks(camera: Camera, model: HeadModel, posed: torch.Tensor):
    """Project the barycentric landmark embedding; returns (uv (L,2),
    valid (L,) bool). Clipped landmarks are flagged with a warning and must
    be excluded from landmark losses."""
    pts = embed_landmarks(model, posed)
    uv, _, clipped = project(camera, pts)
    if bool(clipped.any()):
        warnings.warn(f"{int(clipped.sum())} landmarks clipped by the near plane")
    return uv, ~clipped
