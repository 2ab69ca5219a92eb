"""Geometry and photometric evaluation metrics.

All geometry metrics work in model units internally and report millimeters
(x1000). The one-sided mesh distance samples the prediction surface and
measures exact point-to-triangle distances to the ground-truth mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mesh import Region, TriMesh

PSNR_CAP = 99.0

# labels counted as the facial region for the face-only mesh metric
FACE_REGIONS = (Region.FACE, Region.NOSE, Region.EYE_SURROUNDING,
                Region.FOREHEAD, Region.EYEBALLS)


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriMesh, vertices: np.ndarray | None = None,
                   samples_per_face: int = 10, seed: int = 0,
                   face_mask: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted random surface samples, ~samples_per_face per face on
    average; uniform within each face via the sqrt trick."""
    v = mesh.vertices if vertices is None else np.asarray(vertices)
    faces = mesh.faces if face_mask is None else mesh.faces[face_mask]
    if len(faces) == 0:
        raise ValueError("surface sampling: no faces selected")
    areas = _face_areas(v, faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("surface sampling: degenerate selection (zero area)")
    rng = np.random.default_rng(seed)
    n = samples_per_face * len(faces)
    pick = rng.choice(len(faces), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    tri = v[faces[pick]]
    return (w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1]
            + w2[:, None] * tri[:, 2])


def point_triangle_distances(points: np.ndarray, vertices: np.ndarray,
                             faces: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact distance from each point to the nearest mesh triangle."""
    tri = vertices[faces]  # (F, 3, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e0 = b - a
    e1 = c - a
    n = np.cross(e0, e1)
    nn = (n * n).sum(1)
    out = np.empty(len(points))
    for lo in range(0, len(points), chunk):
        p = points[lo:lo + chunk]  # (P, 3)
        d = p[:, None, :] - a[None, :, :]  # (P, F, 3)
        # barycentric coordinates of the plane projection
        d00 = (e0 * e0).sum(1)
        d01 = (e0 * e1).sum(1)
        d11 = (e1 * e1).sum(1)
        denom = d00 * d11 - d01 * d01
        dp0 = np.einsum("pfa,fa->pf", d, e0)
        dp1 = np.einsum("pfa,fa->pf", d, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            sv = (d11 * dp0 - d01 * dp1) / denom
            tv = (d00 * dp1 - d01 * dp0) / denom
        inside = (sv >= 0) & (tv >= 0) & (sv + tv <= 1) & (denom > 0)
        plane_dist = np.abs(np.einsum("pfa,fa->pf", d, n)) / np.sqrt(
            np.maximum(nn, 1e-300))
        seg = np.minimum(
            _seg_dist(p, a, b),
            np.minimum(_seg_dist(p, b, c), _seg_dist(p, c, a)))
        dist = np.where(inside, plane_dist, seg)
        out[lo:lo + chunk] = dist.min(axis=1)
    return out


def _seg_dist(p, a, b):
    """Distance of points (P,3) to segments (F,3)-(F,3) -> (P, F)."""
    e = b - a  # (F, 3)
    ee = (e * e).sum(1)
    q = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pfa,fa->pf", q, e) / np.maximum(ee, 1e-300), 0.0, 1.0)
    closest = q - t[..., None] * e[None, :, :]
    return np.sqrt((closest * closest).sum(-1))


def hausdorff_one_sided(pred: TriMesh, gt: TriMesh, region: str = "full",
                        pred_vertices: np.ndarray | None = None,
                        gt_vertices: np.ndarray | None = None,
                        samples_per_face: int = 10, seed: int = 0) -> float:
    """Mean sampled prediction-to-ground-truth surface distance in mm."""
    return hausdorff_stats(pred, gt, region, pred_vertices, gt_vertices,
                           samples_per_face, seed)["mean_mm"]


def hausdorff_stats(pred: TriMesh, gt: TriMesh, region: str = "full",
                    pred_vertices: np.ndarray | None = None,
                    gt_vertices: np.ndarray | None = None,
                    samples_per_face: int = 10, seed: int = 0) -> dict:
    """Mean and max one-sided surface distance (prediction -> GT) in mm.

    region "face" restricts sample origins to faces whose vertices all carry
    facial labels."""
    if region not in ("full", "face"):
        raise ValueError(f"unknown region {region!r}")
    face_mask = None
    if region == "face":
        labels = {int(r) for r in FACE_REGIONS}
        vert_is_face = np.isin(pred.region, list(labels))
        face_mask = vert_is_face[pred.faces].all(axis=1)
        if not face_mask.any():
            raise ValueError("face region selects no faces on the prediction mesh")
    pts = sample_surface(pred, pred_vertices, samples_per_face, seed, face_mask)
    gv = gt.vertices if gt_vertices is None else np.asarray(gt_vertices)
    d = point_triangle_distances(pts, gv, gt.faces)
    return {"mean_mm": float(d.mean() * 1000.0),
            "max_mm": float(d.max() * 1000.0),
            "n_samples": len(pts)}


def normal_angular_error(pred: np.ndarray, gt: np.ndarray,
                         mask: np.ndarray) -> float:
    """Mean per-pixel angle between unit normal maps, in degrees."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("normal error: empty mask")
    p = np.asarray(pred)[m]
    g = np.asarray(gt)[m]
    dots = (p * g).sum(axis=1)
    # atan2 of the cross-product norm is well conditioned near 0 and pi,
    # where arccos of the dot product loses precision
    crosses = np.linalg.norm(np.cross(p, g), axis=1)
    ang = np.degrees(np.arctan2(crosses, dots))
    return float(ang.mean())


def photometric_scores(target: np.ndarray, predicted: np.ndarray,
                       mask: np.ndarray) -> dict:
    """Masked mean absolute error and PSNR (dB, capped at 99)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("photometric scores: empty mask")
    diff = np.asarray(predicted)[m] - np.asarray(target)[m]
    l1 = float(np.abs(diff).mean())
    mse = float((diff * diff).mean())
    psnr = PSNR_CAP if mse <= 10 ** (-PSNR_CAP / 10) else min(
        PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))
    return {"l1": l1, "psnr": psnr}


@dataclass
class MetricReport:
    """Per-frame metric values and their averages for one subject/split."""

    subject: str
    split: str
    per_frame: dict = field(default_factory=dict)  # name -> list of floats

    def add(self, name: str, value: float):
        self.per_frame.setdefault(name, []).append(float(value))

    def averages(self) -> dict:
        return {name: float(np.mean(vals)) if vals else float("nan")
                for name, vals in self.per_frame.items()}

    def to_json(self) -> str:
        return json.dumps({
            "subject": self.subject,
            "split": self.split,
            "averages": self.averages(),
            "per_frame": self.per_frame,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(subject=d["subject"], split=d["split"],
                   per_frame=d["per_frame"])
