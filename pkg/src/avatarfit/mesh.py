"""Triangle mesh container, topology edits and differential operators.

Vertex positions are in model units (1 unit = 1 m). The differential
operators (:func:`laplace_beltrami`, :func:`vertex_normals`,
:func:`edge_stats`) accept torch tensors and are differentiable; mesh
connectivity itself is plain numpy and immutable by convention.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch

DEGENERATE_AREA = 1e-12


class Region(IntEnum):
    EYEBALLS = 0
    EYE_SURROUNDING = 1
    FOREHEAD = 2
    FACE = 3
    EARS = 4
    SCALP = 5
    NECK = 6
    LOWER_NECK = 7
    NOSE = 8


class SemanticClass(IntEnum):
    SKIN_NECK = 0
    EYES = 1
    EARS = 2
    HAIR = 3


# every region maps to exactly one of the four rendered classes
REGION_TO_SEMANTIC = {
    Region.EYEBALLS: SemanticClass.EYES,
    Region.EYE_SURROUNDING: SemanticClass.SKIN_NECK,
    Region.FOREHEAD: SemanticClass.SKIN_NECK,
    Region.FACE: SemanticClass.SKIN_NECK,
    Region.EARS: SemanticClass.EARS,
    Region.SCALP: SemanticClass.HAIR,
    Region.NECK: SemanticClass.SKIN_NECK,
    Region.LOWER_NECK: SemanticClass.SKIN_NECK,
    Region.NOSE: SemanticClass.SKIN_NECK,
}

N_SEMANTIC_CLASSES = 4


class TopologyError(ValueError):
    pass


@dataclass
class TriMesh:
    """Indexed triangle mesh with per-vertex region labels and per-corner uv.

    vertices: (V, 3) float64; faces: (F, 3) int64; uv: (F, 3, 2) in [0,1];
    region: (V,) int64 with values from :class:`Region`.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None
    region: np.ndarray | None = None
    _edges: np.ndarray | None = field(default=None, repr=False, compare=False)
    _adj: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv is None:
            self.uv = np.zeros((len(self.faces), 3, 2))
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
        if self.region is None:
            self.region = np.full(len(self.vertices), int(Region.FACE), dtype=np.int64)
        self.region = np.asarray(self.region, dtype=np.int64).reshape(-1)
        self._validate()

    def _validate(self):
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise TopologyError("face index out of range")
        if len(self.faces) and self.faces.min() < 0:
            raise TopologyError("negative face index")
        same = (
            (self.faces[:, 0] == self.faces[:, 1])
            | (self.faces[:, 1] == self.faces[:, 2])
            | (self.faces[:, 0] == self.faces[:, 2])
        )
        if same.any():
            raise TopologyError(f"degenerate face(s): {np.nonzero(same)[0][:5].tolist()}")
        if len(self.uv) != len(self.faces):
            raise ValueError("uv must be per-face-corner, shape (F, 3, 2)")
        if len(self.region) != len(self.vertices):
            raise ValueError("region labels must be per-vertex")
        if self.uv.size and (self.uv.min() < -1e-9 or self.uv.max() > 1 + 1e-9):
            raise ValueError("uv coordinates must lie in [0,1]^2")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def edge_list(self) -> np.ndarray:
        """(E, 2) unique undirected edges, each exactly once, sorted."""
        if self._edges is None:
            e = np.concatenate(
                [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
            )
            e = np.sort(e, axis=1)
            self._edges = np.unique(e, axis=0)
        return self._edges

    def edge_face_counts(self) -> np.ndarray:
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """1-ring neighborhoods in CSR layout: (neighbor indices, offsets)."""
        if self._adj is None:
            edges = self.edge_list
            both = np.concatenate([edges, edges[:, ::-1]])
            order = np.lexsort((both[:, 1], both[:, 0]))
            both = both[order]
            counts = np.bincount(both[:, 0], minlength=self.n_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._adj = (both[:, 1].copy(), offsets.astype(np.int64))
        return self._adj

    def isolated_vertices(self) -> np.ndarray:
        _, offsets = self.adjacency()
        return np.nonzero(np.diff(offsets) == 0)[0]

    def semantic_onehot(self) -> np.ndarray:
        """(V, 4) one-hot rendering-class encoding of the region labels."""
        cls = np.array([int(REGION_TO_SEMANTIC[Region(r)]) for r in self.region])
        out = np.zeros((self.n_vertices, N_SEMANTIC_CLASSES))
        out[np.arange(self.n_vertices), cls] = 1.0
        return out


def subdivide4(mesh: TriMesh) -> TriMesh:
    """Four-way subdivision: each face splits into 4 via edge midpoints.

    A midpoint vertex takes the region label of its parent edge's endpoint
    with the lower vertex index. uv is interpolated per face corner, so uv
    seams are preserved.
    """
    if (mesh.edge_face_counts() > 2).any():
        raise TopologyError("non-manifold edge shared by more than 2 faces")
    edges = mesh.edge_list
    v0 = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid])
    mid_region = mesh.region[np.minimum(edges[:, 0], edges[:, 1])]
    region = np.concatenate([mesh.region, mid_region])

    edge_index = {(int(a), int(b)): v0 + i for i, (a, b) in enumerate(edges)}

    def mid_of(a: int, b: int) -> int:
        return edge_index[(a, b) if a < b else (b, a)]

    faces = []
    uvs = []
    for f, (a, b, c) in enumerate(mesh.faces):
        a, b, c = int(a), int(b), int(c)
        mab, mbc, mca = mid_of(a, b), mid_of(b, c), mid_of(c, a)
        ua, ub, uc = mesh.uv[f]
        uab, ubc, uca = 0.5 * (ua + ub), 0.5 * (ub + uc), 0.5 * (uc + ua)
        faces += [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]]
        uvs += [[ua, uab, uca], [uab, ub, ubc], [uca, ubc, uc], [uab, ubc, uca]]
    return TriMesh(vertices, np.array(faces), np.array(uvs), region)


def close_boundary_loop(mesh: TriMesh, loop: np.ndarray) -> TriMesh:
    """Close an open boundary loop fan-style from its centroid.

    ``loop`` lists vertex indices in order around the hole. A new centroid
    vertex is appended; it inherits the label of the lowest-index loop
    vertex. New faces carry the uv of their loop corners, centroid uv is
    the loop uv mean (looked up from any face touching each loop vertex).
    """
    loop = np.asarray(loop, dtype=np.int64)
    if len(loop) < 3:
        raise TopologyError("boundary loop needs at least 3 vertices")
    centroid = mesh.vertices[loop].mean(axis=0)
    cidx = mesh.n_vertices
    vertices = np.concatenate([mesh.vertices, centroid[None]])
    region = np.concatenate([mesh.region, mesh.region[loop.min()][None]])

    # per-vertex uv lookup (first corner occurrence wins)
    vert_uv = np.zeros((mesh.n_vertices + 1, 2))
    seen = np.zeros(mesh.n_vertices + 1, dtype=bool)
    for f in range(mesh.n_faces):
        for c in range(3):
            v = mesh.faces[f, c]
            if not seen[v]:
                vert_uv[v] = mesh.uv[f, c]
                seen[v] = True
    vert_uv[cidx] = vert_uv[loop].mean(axis=0)

    new_faces = []
    new_uv = []
    for i in range(len(loop)):
        a, b = int(loop[i]), int(loop[(i + 1) % len(loop)])
        new_faces.append([a, b, cidx])
        new_uv.append([vert_uv[a], vert_uv[b], vert_uv[cidx]])
    faces = np.concatenate([mesh.faces, np.array(new_faces)])
    uv = np.concatenate([mesh.uv, np.array(new_uv)])
    return TriMesh(vertices, faces, uv, region)


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def laplace_beltrami(mesh: TriMesh, values) -> torch.Tensor | np.ndarray:
    """Uniform (umbrella) 1-ring Laplacian of a per-vertex field.

    lap(v_i) = mean_{j in N(i)} (x_j - x_i). Isolated vertices contribute
    zero and raise a warning; query mesh.isolated_vertices() for the list.
    """
    x, was_numpy = _as_tensor(values)
    if x.shape[0] != mesh.n_vertices:
        raise ValueError("field must be per-vertex")
    neigh, offsets = mesh.adjacency()
    iso = mesh.isolated_vertices()
    if len(iso):
        warnings.warn(f"isolated vertices contribute zero Laplacian: {iso.tolist()}")
    src = torch.as_tensor(neigh)
    counts = torch.as_tensor(np.maximum(np.diff(offsets), 1).astype(np.float64))
    owner = torch.as_tensor(np.repeat(np.arange(mesh.n_vertices), np.diff(offsets)))
    acc = torch.zeros_like(x)
    acc.index_add_(0, owner, x[src])
    shape = (-1,) + (1,) * (x.dim() - 1)
    deg = torch.as_tensor(np.diff(offsets).astype(np.float64)).reshape(shape)
    out = acc / counts.reshape(shape) - x * (deg > 0).to(x.dtype)
    return out.numpy() if was_numpy else out


def face_normals(mesh: TriMesh, vertices) -> torch.Tensor:
    """Unnormalized face normals (length = 2*area) for given positions."""
    v, _ = _as_tensor(vertices)
    f = torch.as_tensor(mesh.faces)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    return torch.linalg.cross(e1, e2)


def vertex_normals(mesh: TriMesh, vertices=None) -> torch.Tensor | np.ndarray:
    """Area-weighted average of incident face normals, normalized.

    Zero-area faces are skipped with a warning; a vertex whose accumulated
    normal vanishes falls back to +z.
    """
    vin = mesh.vertices if vertices is None else vertices
    v, was_numpy = _as_tensor(vin)
    fn = face_normals(mesh, v)
    with torch.no_grad():
        areas = 0.5 * torch.linalg.norm(fn, dim=1)
        bad = areas < DEGENERATE_AREA
    if bad.any():
        warnings.warn(f"skipping {int(bad.sum())} zero-area face(s) in normal accumulation")
        fn = fn * (~bad).to(fn.dtype)[:, None]
    f = torch.as_tensor(mesh.faces)
    acc = torch.zeros_like(v)
    for c in range(3):
        acc.index_add_(0, f[:, c], fn)
    norm = torch.linalg.norm(acc, dim=1, keepdim=True)
    fallback = torch.tensor([0.0, 0.0, 1.0], dtype=acc.dtype).expand_as(acc)
    ok = (norm > 1e-20)
    out = torch.where(ok, acc / torch.where(ok, norm, torch.ones_like(norm)), fallback)
    return out.numpy() if was_numpy else out


def edge_stats(mesh: TriMesh, vertices=None, region_filter=None):
    """Lengths of edges whose both endpoints carry a selected label.

    Returns (per-edge lengths, mean length). region_filter is an iterable
    of Region labels; None selects every edge.
    """
    vin = mesh.vertices if vertices is None else vertices
    v, was_numpy = _as_tensor(vin)
    edges = mesh.edge_list
    if region_filter is not None:
        labels = {int(r) for r in region_filter}
        keep = np.array(
            [mesh.region[a] in labels and mesh.region[b] in labels for a, b in edges]
        )
        edges = edges[keep]
        if len(edges) == 0:
            raise ValueError(f"region filter {sorted(labels)} selects no edges")
    e = torch.as_tensor(edges)
    lengths = torch.linalg.norm(v[e[:, 0]] - v[e[:, 1]], dim=1)
    mean = lengths.mean()
    if was_numpy:
        return lengths.numpy(), float(mean)
    return lengths, mean


def total_area(mesh: TriMesh, vertices=None) -> float:
    vin = mesh.vertices if vertices is None else vertices
    v, _ = _as_tensor(vin)
    return float(0.5 * torch.linalg.norm(face_normals(mesh, v), dim=1).sum())


# ---------------------------------------------------------------------------
# Wavefront OBJ import/export with region sidecar

def save_obj(path: str, mesh: TriMesh) -> None:
    """Write v/vt/f records; region labels go to ``<path>.regions`` as one
    ``vertex_index label`` pair per line."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in range(mesh.n_faces):
            for c in range(3):
                u = mesh.uv[f, c]
                fh.write(f"vt {u[0]:.17g} {u[1]:.17g}\n")
        for f in range(mesh.n_faces):
            a, b, c = mesh.faces[f] + 1
            t = 3 * f + 1
            fh.write(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}\n")
    with open(path + ".regions", "w") as fh:
        for i, r in enumerate(mesh.region):
            fh.write(f"{i} {Region(r).name.lower()}\n")


def load_obj(path: str) -> TriMesh:
    vertices, vts, faces, uv_idx = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                vts.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = [], []
                for token in parts[1:4]:
                    fields = token.split("/")
                    vi.append(int(fields[0]) - 1)
                    ti.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else -1)
                faces.append(vi)
                uv_idx.append(ti)
    vertices = np.array(vertices)
    faces = np.array(faces, dtype=np.int64)
    if vts and all(t >= 0 for row in uv_idx for t in row):
        vts = np.array(vts)
        uv = vts[np.array(uv_idx)]
    else:
        uv = None
    region = None
    sidecar = path + ".regions"
    if os.path.isfile(sidecar):
        region = np.zeros(len(vertices), dtype=np.int64)
        with open(sidecar) as fh:
            for line in fh:
                idx, name = line.split()
                region[int(idx)] = int(Region[name.upper()])
    return TriMesh(vertices, faces, uv, region)
