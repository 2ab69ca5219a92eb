import numpy as np
import pytest
import torch

from avatarfit.mesh import TriMesh


def rel_err(a, b, eps=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), eps)
    return float(np.max(np.abs(a - b) / denom))


def make_grid_mesh(nx=5, ny=5, jitter=0.0, seed=0, scale=1.0):
    """Triangulated planar grid in z=0, optionally jittered in z."""
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1) * scale
    if jitter:
        verts += rng.normal(scale=jitter, size=verts.shape)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    uv = np.zeros((len(faces), 3, 2))
    for f, tri in enumerate(faces):
        for c, v in enumerate(tri):
            uv[f, c] = (v // ny) / max(nx - 1, 1), (v % ny) / max(ny - 1, 1)
    return TriMesh(verts, np.array(faces), uv)


def make_icosahedron():
    phi = (1 + 5**0.5) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return TriMesh(verts / np.linalg.norm(verts[0]), faces)


def central_diff_grad(fn, x0, step=1e-6):
    """Central finite differences of a scalar function of a flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        xp = flat.copy(); xp[i] += step
        xm = flat.copy(); xm[i] -= step
        g[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * step)
    return grad


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
