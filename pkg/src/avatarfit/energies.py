"""Energy terms of the fitting objective and their weighted assembly.

All terms take/return float64 torch tensors so gradients flow to whatever
produced the inputs (parameters, network weights, rendered buffers). Image
terms are means over contributing pixels so weights transfer across
resolutions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
import torch

from .mesh import Region, TriMesh, edge_stats, laplace_beltrami

STAGE_GEOMETRY = "geometry_init"
STAGE_JOINT = "joint"

# per-region regularization weight columns (geometry stage, joint stage)
_PAPER_LAPL = {
    Region.EYEBALLS: (0.0, 0.0),
    Region.EYE_SURROUNDING: (5.0, 10.0),
    Region.FOREHEAD: (0.05, 0.1),
    Region.FACE: (0.05, 0.1),
    Region.EARS: (25.0, 50.0),
    Region.SCALP: (0.05, 0.1),
    Region.NECK: (0.1, 0.2),
    Region.LOWER_NECK: (0.25, 0.5),
    Region.NOSE: (2.50e-02, 5.00e-02),
}
_PAPER_EDGE = {r: ((10.0, 10.0) if r == Region.SCALP else (0.0, 0.0))
               for r in Region}
_PAPER_FLAME = (1.0e-03, 1.0e-03)
_PAPER_SURFACE = (1.0e-04, 1.0e-04)


def _default_lapl():
    return {r: _PAPER_LAPL[r][1] for r in Region}


def _default_edge():
    return {r: _PAPER_EDGE[r][1] for r in Region}


@dataclass
class EnergyWeights:
    """All scalar and per-region weights of the joint objective."""

    stage: str = STAGE_JOINT
    w_lmk: float = 1.0
    w_lid: float = 1.0
    w_normal: float = 0.1
    w_semantic: float = 0.5
    w_phot: float = 1.0
    w_perc: float = 0.05
    w_reg_geom: float = 1.0
    w_reg_flame: float = _PAPER_FLAME[1]
    w_beta: float = 1.0
    w_theta: float = 1.0
    w_psi: float = 1.0
    w_reg_surface: float = _PAPER_SURFACE[1]
    w_reg_lapl: dict = field(default_factory=_default_lapl)
    w_reg_edge: dict = field(default_factory=_default_edge)

    def __post_init__(self):
        if self.stage not in (STAGE_GEOMETRY, STAGE_JOINT):
            raise ValueError(f"unknown stage {self.stage!r}")
        for f in dc_fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (int, float)) and val < 0:
                raise ValueError(f"negative weight {f.name}")
            if isinstance(val, dict):
                if set(val) != set(Region):
                    raise ValueError(f"{f.name} must cover all regions")
                if any(v < 0 for v in val.values()):
                    raise ValueError(f"negative weight in {f.name}")

    @classmethod
    def paper(cls, stage: str = STAGE_JOINT) -> "EnergyWeights":
        col = 0 if stage == STAGE_GEOMETRY else 1
        return cls(
            stage=stage,
            w_reg_flame=_PAPER_FLAME[col],
            w_reg_surface=_PAPER_SURFACE[col],
            w_reg_lapl={r: _PAPER_LAPL[r][col] for r in Region},
            w_reg_edge={r: _PAPER_EDGE[r][col] for r in Region},
        )

    def lapl_vertex_weights(self, region_labels: np.ndarray) -> torch.Tensor:
        w = np.zeros(len(region_labels))
        for r, val in self.w_reg_lapl.items():
            w[region_labels == int(r)] = val
        return torch.as_tensor(w)

    # -- plain-text config -------------------------------------------------
    def to_config(self) -> dict:
        cfg = {"stage": self.stage}
        for f in dc_fields(self):
            val = getattr(self, f.name)
            if isinstance(val, dict):
                for r in Region:
                    cfg[f"{f.name}.{r.name.lower()}"] = float(val[r])
            elif f.name != "stage":
                cfg[f.name] = float(val)
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "EnergyWeights":
        kwargs = {"stage": cfg["stage"]}
        for f in dc_fields(cls):
            if f.name == "stage":
                continue
            if f.name in ("w_reg_lapl", "w_reg_edge"):
                kwargs[f.name] = {
                    r: float(cfg[f"{f.name}.{r.name.lower()}"]) for r in Region
                }
            elif f.name in cfg:
                kwargs[f.name] = float(cfg[f.name])
        return cls(**kwargs)


# --------------------------------------------------------------------- terms


def e_lmk(detected: torch.Tensor, lid_targets, projected: torch.Tensor,
          lid_predicted, w_lid: float, image_size, valid=None) -> torch.Tensor:
    """L1 landmark energy in image-size-normalized coordinates plus the
    lid-distance term: sum_i |l_i - lhat_i|_1 + w_lid * sum |d - dhat|_1."""
    if detected.shape != projected.shape:
        raise ValueError("landmark count mismatch between detection and projection")
    size = torch.tensor([float(image_size[0]), float(image_size[1])])
    diff = (detected - projected) / size
    if valid is not None:
        diff = diff[torch.as_tensor(np.asarray(valid, dtype=bool))]
    total = diff.abs().sum()
    if w_lid:
        lt = torch.as_tensor(lid_targets) if not torch.is_tensor(lid_targets) else lid_targets
        lp = torch.as_tensor(lid_predicted) if not torch.is_tensor(lid_predicted) else lid_predicted
        total = total + w_lid * (lt - lp).abs().sum()
    return total


def image_laplacian(img: torch.Tensor) -> torch.Tensor:
    """Discrete 4-neighbor Laplacian per channel; boundary pixels use zero
    padding. img: (H, W, C) -> (H, W, C)."""
    p = torch.nn.functional.pad(img.permute(2, 0, 1)[None], (1, 1, 1, 1))
    c = p[:, :, 1:-1, 1:-1]
    lap = 4.0 * c - p[:, :, :-2, 1:-1] - p[:, :, 2:, 1:-1] \
        - p[:, :, 1:-1, :-2] - p[:, :, 1:-1, 2:]
    return lap[0].permute(1, 2, 0)


def e_normal(target: torch.Tensor, predicted: torch.Tensor,
             mask) -> torch.Tensor:
    """L1 between image-space Laplacians of the normal maps, averaged over
    masked pixels (channel-summed per pixel)."""
    if target.shape != predicted.shape:
        raise ValueError("normal map resolution mismatch")
    m = torch.as_tensor(np.asarray(mask, dtype=bool))
    n = int(m.sum())
    if n == 0:
        warnings.warn("e_normal: empty mask, returning 0")
        return torch.zeros((), dtype=torch.float64)
    diff = image_laplacian(predicted) - image_laplacian(target)
    return diff.abs().sum(dim=2)[m].sum() / n


def e_semantic(target: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """Soft symmetric difference of class maps: sum_k mean_px of
    S_k (1 - Shat_k) + (1 - S_k) Shat_k; equals xor on binary maps."""
    s, p = target, predicted
    per_class = (s * (1 - p) + (1 - s) * p).mean(dim=(0, 1))
    return per_class.sum()


def e_reg_flame(beta: torch.Tensor, psi: torch.Tensor, theta: torch.Tensor,
                w_beta=1.0, w_theta=1.0, w_psi=1.0) -> torch.Tensor:
    """Squared-norm prior toward the average face; theta are the effective
    (post-limit) joint angles."""
    return (w_beta * (beta * beta).sum() + w_theta * (theta * theta).sum()
            + w_psi * (psi * psi).sum())


def e_reg_lapl(mesh: TriMesh, vertices: torch.Tensor,
               vertices_flame: torch.Tensor,
               vertex_weights: torch.Tensor) -> torch.Tensor:
    """|W o (lapl(V) - lapl(V_flame))|_1 summed over vertices."""
    d = laplace_beltrami(mesh, vertices) - laplace_beltrami(mesh, vertices_flame)
    return (vertex_weights[:, None] * d).abs().sum()


def e_reg_surface(offsets_i: torch.Tensor, offsets_j: torch.Tensor) -> torch.Tensor:
    """Pairwise pose-consistency: L1 over all vertex offsets."""
    return (offsets_i - offsets_j).abs().sum()


def e_reg_edge(mesh: TriMesh, vertices: torch.Tensor,
               region: Region = Region.SCALP) -> torch.Tensor:
    """Hinge on over-stretched edges: sum of (e_i - mean) where
    e_i > 1.5 * mean, over the given region's edges."""
    lengths, mean = edge_stats(mesh, vertices, region_filter=[int(region)])
    over = lengths > 1.5 * mean
    return torch.where(over, lengths - mean, torch.zeros((), dtype=torch.float64)).sum()


def e_phot(target: torch.Tensor, predicted: torch.Tensor,
           target_mask, coverage: torch.Tensor) -> torch.Tensor:
    """L1 color difference averaged over the silhouette intersection
    V = S and (coverage >= 0.5); channel-summed per pixel."""
    s = np.asarray(target_mask, dtype=bool)
    shat = coverage.detach().numpy() >= 0.5
    inter = torch.as_tensor(s & shat)
    n = int(inter.sum())
    if n == 0:
        return torch.zeros((), dtype=torch.float64)
    return (predicted - target).abs().sum(dim=2)[inter].sum() / n


def _downsample2(img: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling of (H, W, C); odd tails are dropped."""
    H, W, _ = img.shape
    img = img[: H - H % 2, : W - W % 2]
    return (img[0::2, 0::2] + img[0::2, 1::2]
            + img[1::2, 0::2] + img[1::2, 1::2]) / 4.0


def _gradient_mag(img: torch.Tensor) -> torch.Tensor:
    gx = torch.zeros_like(img)
    gy = torch.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return torch.sqrt(gx * gx + gy * gy + 1e-24)


def e_perc_proxy(target: torch.Tensor, predicted: torch.Tensor,
                 mask, levels: int = 3) -> torch.Tensor:
    """Perceptual stand-in: masked gradient-magnitude L1 plus Gram-matrix
    distance over a 3-level image pyramid. Zero when the images agree on the
    mask at every scale."""
    m = torch.as_tensor(np.asarray(mask, dtype=np.float64))[..., None]
    total = torch.zeros((), dtype=torch.float64)
    t, p = target, predicted
    for _ in range(levels):
        n = m.sum().clamp(min=1.0)
        grad = ((_gradient_mag(p) - _gradient_mag(t)).abs() * m).sum() / n
        tm = (t * m).reshape(-1, 3)
        pm = (p * m).reshape(-1, 3)
        gram_t = tm.T @ tm / n
        gram_p = pm.T @ pm / n
        total = total + grad + (gram_p - gram_t).abs().sum()
        if min(t.shape[0], t.shape[1]) < 4:
            break
        t, p, m = _downsample2(t), _downsample2(p), _downsample2(m)
    return total


def weighted_edge_term(weights: "EnergyWeights", mesh: TriMesh,
                       vertices: torch.Tensor) -> torch.Tensor:
    """Sum of per-region edge hinges scaled by the region's table weight;
    zero-weight regions are skipped."""
    total = torch.zeros((), dtype=torch.float64)
    present = set(np.unique(mesh.region).tolist())
    for r, wr in weights.w_reg_edge.items():
        if wr > 0 and int(r) in present:
            total = total + wr * e_reg_edge(mesh, vertices, region=r)
    return total


# ------------------------------------------------------------------ assembly


GEOM_DATA_TERMS = ("e_lmk", "e_normal", "e_semantic")
REG_TERMS = ("e_reg_flame", "e_reg_lapl", "e_reg_surface", "e_reg_edge")
APP_TERMS = ("e_phot", "e_perc")


@dataclass
class EnergyReport:
    """Named term values, weighted contributions and their total."""

    stage: str
    terms: dict
    contributions: dict
    e_geom: float
    e_app: float
    e_reg_geom: float
    total: float
    frame_ids: tuple = ()
    step: int = -1

    def to_json_line(self) -> str:
        return json.dumps({
            "step": self.step, "stage": self.stage, "total": self.total,
            "e_geom": self.e_geom, "e_app": self.e_app,
            "e_reg_geom": self.e_reg_geom, "frames": list(self.frame_ids),
            "terms": self.terms, "contributions": self.contributions,
        })


def assemble(weights: EnergyWeights, terms: dict, frame_ids=(), step=-1):
    """Combine raw term tensors into (total tensor, EnergyReport).

    terms maps term names (e_lmk, e_normal, e_semantic, e_reg_flame,
    e_reg_lapl, e_reg_surface, e_reg_edge, e_phot, e_perc) to scalar
    tensors; missing terms count as zero. The per-region lapl/edge weights
    are expected to be applied inside the term values already when vertex
    weights were used; the scalar table weights are applied here."""
    zero = torch.zeros((), dtype=torch.float64)

    def get(name):
        val = terms.get(name, zero)
        return val if torch.is_tensor(val) else torch.as_tensor(float(val))

    def value(name):
        return float(get(name).detach())

    w = weights
    reg = (w.w_reg_flame * get("e_reg_flame") + get("e_reg_lapl")
           + w.w_reg_surface * get("e_reg_surface") + get("e_reg_edge"))
    geom = (w.w_lmk * get("e_lmk") + w.w_normal * get("e_normal")
            + w.w_semantic * get("e_semantic") + w.w_reg_geom * reg)
    app = w.w_phot * get("e_phot") + w.w_perc * get("e_perc")
    total = geom + app

    contributions = {
        "e_lmk": w.w_lmk * value("e_lmk"),
        "e_normal": w.w_normal * value("e_normal"),
        "e_semantic": w.w_semantic * value("e_semantic"),
        "e_reg_flame": w.w_reg_geom * w.w_reg_flame * value("e_reg_flame"),
        "e_reg_lapl": w.w_reg_geom * value("e_reg_lapl"),
        "e_reg_surface": w.w_reg_geom * w.w_reg_surface * value("e_reg_surface"),
        "e_reg_edge": w.w_reg_geom * value("e_reg_edge"),
        "e_phot": w.w_phot * value("e_phot"),
        "e_perc": w.w_perc * value("e_perc"),
    }
    report = EnergyReport(
        stage=w.stage,
        terms={k: value(k) for k in set(terms)},
        contributions=contributions,
        e_geom=float(geom.detach()), e_app=float(app.detach()),
        e_reg_geom=float(reg.detach()), total=float(total.detach()),
        frame_ids=tuple(frame_ids), step=step,
    )
    return total, report


class EnergyLog:
    """Appends one JSON object per optimization step to a log file."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "a")

    def write(self, report: EnergyReport):
        self._fh.write(report.to_json_line() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
