"""Coordinate networks: the pose-conditioned geometry refinement field and
the dynamic surface-color field.

Both are SIREN-style MLPs whose per-layer sinusoid frequencies and phase
shifts are produced by small mapping networks (FiLM conditioning). Weights
live in a ParamRegistry as named blocks so the optimizers and checkpoints
see them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import ParamRegistry
from .headmodel import HeadModel, HeadParams, _joint_world_transforms, limit_joints, lip_distances
from .mesh import Region

LEAKY_SLOPE = 0.2
N_MOUTH_FEATURES = 13  # 3 rotation + 10 lip distances


def _uniform(gen, shape, bound):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


def quat_from_rotvec(r: torch.Tensor) -> torch.Tensor:
    a2 = (r * r).sum(-1)
    a = torch.sqrt(a2 + 1e-40)
    small = a < 1e-8
    half = 0.5 * a
    w = torch.cos(half)
    s = torch.where(small, 0.5 - a2 / 48.0, torch.sin(half) / a)
    return torch.cat([w[..., None], r * s[..., None]], dim=-1)


def quat_mul(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    pw, px, py, pz = p.unbind(-1)
    qw, qx, qy, qz = q.unbind(-1)
    return torch.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        -1,
    )


def rotvec_from_quat(q: torch.Tensor) -> torch.Tensor:
    # hemisphere fix keeps the angle in [0, pi]
    q = torch.where(q[..., :1] < 0, -q, q)
    w = q[..., 0]
    vec = q[..., 1:]
    n2 = (vec * vec).sum(-1)
    n = torch.sqrt(n2 + 1e-40)
    small = n < 1e-8
    scale = torch.where(
        small, (2.0 / w.clamp(min=1e-12)) * (1.0 - n2 / (3.0 * w * w + 1e-40)),
        2.0 * torch.atan2(n, w) / n,
    )
    return vec * scale[..., None]


class MappingNet:
    """Fully connected conditioning network with leaky-ReLU activations.

    The output is split into per-FiLM-layer (frequency, phase) vectors;
    frequencies are offset by ``freq_base`` so a zero-initialized head
    starts at standard SIREN behavior."""

    def __init__(self, registry, prefix, cond_dim, film_widths, hidden=256,
                 n_hidden=3, freq_base=30.0, gen=None, texture_related=False):
        self.prefix = prefix
        self.film_widths = list(film_widths)
        self.freq_base = freq_base
        self.registry = registry
        total_out = 2 * sum(self.film_widths)
        dims = [cond_dim] + [hidden] * n_hidden + [total_out]
        self.n_layers = len(dims) - 1
        for i, (nin, nout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == self.n_layers - 1
            bound = 1e-2 if last else np.sqrt(2.0 / nin)
            registry.new(f"{prefix}.w{i}", _uniform(gen, (nout, nin), bound),
                         texture_related=texture_related)
            # hidden biases start slightly off zero so an all-zero conditioning
            # vector does not park every pre-activation on the leaky-ReLU kink
            bias = torch.zeros(nout, dtype=torch.float64) if last \
                else _uniform(gen, (nout,), 0.1)
            registry.new(f"{prefix}.b{i}", bias, texture_related=texture_related)

    def __call__(self, cond: torch.Tensor):
        """cond: (..., cond_dim) -> list of (freq, phase) pairs per layer."""
        h = cond
        for i in range(self.n_layers):
            h = h @ self.registry[f"{self.prefix}.w{i}"].values.T + \
                self.registry[f"{self.prefix}.b{i}"].values
            if i < self.n_layers - 1:
                h = torch.nn.functional.leaky_relu(h, LEAKY_SLOPE)
        out = []
        ofs = 0
        for w in self.film_widths:
            freq = self.freq_base + h[..., ofs:ofs + w]
            phase = h[..., ofs + w:ofs + 2 * w]
            out.append((freq, phase))
            ofs += 2 * w
        return out


class FilmSirenMlp:
    """Stack of linear layers with FiLM-modulated sinusoidal activations:
    layer l computes sin(freq_l * (W_l x + b_l) + phase_l)."""

    def __init__(self, registry, prefix, in_dim, widths, omega0=30.0, gen=None,
                 texture_related=False):
        self.prefix = prefix
        self.registry = registry
        self.widths = list(widths)
        dims = [in_dim] + self.widths
        for i, (nin, nout) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / nin if i == 0 else np.sqrt(6.0 / nin) / omega0
            registry.new(f"{prefix}.w{i}", _uniform(gen, (nout, nin), bound),
                         texture_related=texture_related)
            registry.new(f"{prefix}.b{i}", torch.zeros(nout, dtype=torch.float64),
                         texture_related=texture_related)

    def __call__(self, x: torch.Tensor, film) -> torch.Tensor:
        """film: list of (freq, phase) per layer, broadcastable to (..., width)."""
        h = x
        for i in range(len(self.widths)):
            h = h @ self.registry[f"{self.prefix}.w{i}"].values.T + \
                self.registry[f"{self.prefix}.b{i}"].values
            freq, phase = film[i]
            h = torch.sin(freq * h + phase)
        return h


def _linear(registry, name, nin, nout, gen, texture_related=False, bound=None):
    if bound is None:
        bound = np.sqrt(1.0 / nin)
    registry.new(f"{name}.w", _uniform(gen, (nout, nin), bound), texture_related=texture_related)
    registry.new(f"{name}.b", torch.zeros(nout, dtype=torch.float64), texture_related=texture_related)


def _apply_linear(registry, name, x):
    return x @ registry[f"{name}.w"].values.T + registry[f"{name}.b"].values


@dataclass
class GeometryFieldConfig:
    embed_dim: int = 32
    width: int = 128
    depth: int = 6
    mapping_hidden: int = 256
    mapping_layers: int = 3
    omega0: float = 30.0
    freq_base: float = 30.0
    offset_scale: float = 0.15  # max offset magnitude, model units
    blend_band: float = 0.03  # smooth falloff width of the body mask, meters

    @classmethod
    def desk(cls) -> "GeometryFieldConfig":
        return cls(width=64, mapping_hidden=64)


@dataclass
class TextureFieldConfig:
    grid_res: int = 256
    grid_channels: int = 64
    mouth_grid_res: int = 64
    width: int = 256
    last_width: int = 128
    depth: int = 8
    mapping_hidden: int = 256
    mapping_layers: int = 3
    encoder_channels: tuple = (128, 128, 32)
    dynamic_head_width: int = 128
    patch_size: int = 7
    omega0: float = 30.0
    freq_base: float = 30.0

    @classmethod
    def desk(cls) -> "TextureFieldConfig":
        return cls(grid_res=128, grid_channels=32, mouth_grid_res=32, width=64,
                   last_width=32, mapping_hidden=64, encoder_channels=(16, 16, 8),
                   dynamic_head_width=32)


def body_blend_mask(model: HeadModel, band: float = 0.03) -> np.ndarray:
    """Per-vertex fading body mask: 1 on neck/lower-neck, smoothstep to 0
    within ``band`` meters of the neck boundary."""
    region = model.template.region
    body = np.isin(region, [int(Region.NECK), int(Region.LOWER_NECK)])
    verts = model.template.vertices
    if body.all() or not body.any():
        return body.astype(np.float64)
    d = np.min(np.linalg.norm(verts[:, None, :] - verts[None, body, :], axis=2), axis=1)
    t = np.clip(1.0 - d / band, 0.0, 1.0)
    mask = t * t * (3 - 2 * t)
    mask[body] = 1.0
    return mask


class GeometryField:
    """Pose-dependent per-vertex offset network with a static/dynamic blend.

    Offsets are computed twice, conditioned on the neck pose and on zeros,
    and blended by the fading body-region mask so that pose only affects
    the neck area."""

    def __init__(self, model: HeadModel, registry: ParamRegistry,
                 config: GeometryFieldConfig | None = None, seed: int = 0,
                 prefix: str = "geom"):
        self.config = cfg = config or GeometryFieldConfig()
        self.registry = registry
        self.prefix = prefix
        gen = torch.Generator().manual_seed(seed)
        V = model.template.n_vertices
        registry.new(f"{prefix}.embed",
                     _uniform(gen, (V, cfg.embed_dim), 1.0 / cfg.embed_dim))
        widths = [cfg.width] * cfg.depth
        self.mlp = FilmSirenMlp(registry, f"{prefix}.mlp", 3 + cfg.embed_dim,
                                widths, omega0=cfg.omega0, gen=gen)
        _linear(registry, f"{prefix}.head", cfg.width, 3, gen,
                bound=np.sqrt(6.0 / cfg.width) / cfg.omega0)
        self.mapping = MappingNet(registry, f"{prefix}.map", 3, widths,
                                  hidden=cfg.mapping_hidden,
                                  n_hidden=cfg.mapping_layers,
                                  freq_base=cfg.freq_base, gen=gen)
        self.coords = torch.as_tensor(model.template_coords_normalized())
        self.blend = torch.as_tensor(body_blend_mask(model, cfg.blend_band))

    def block_names(self):
        return [n for n in self.registry.names() if n.startswith(self.prefix + ".")]

    def _raw_offsets(self, film) -> torch.Tensor:
        x = torch.cat([self.coords, self.registry[f"{self.prefix}.embed"].values], dim=1)
        h = self.mlp(x, film)
        out = _apply_linear(self.registry, f"{self.prefix}.head", h)
        return torch.tanh(out) * self.config.offset_scale

    def offsets(self, neck_pose: torch.Tensor) -> torch.Tensor:
        """(V, 3) offsets for the given 3-vector neck pose."""
        static = self._raw_offsets(self.mapping(torch.zeros(3, dtype=torch.float64)))
        dynamic = self._raw_offsets(self.mapping(neck_pose))
        b = self.blend[:, None]
        return b * dynamic + (1.0 - b) * static


def mouth_features(model: HeadModel, params: HeadParams,
                   posed: torch.Tensor) -> torch.Tensor:
    """13-vector conditioning: axis-angle of the composed global*neck
    rotation followed by the 10 inner-lip pair distances."""
    angles = limit_joints(model, params.phi_raw)
    Rw, _ = _joint_world_transforms(model, angles)
    neck_R = Rw[0]
    q = quat_mul(quat_from_rotvec(params.global_rot), quat_from_matrix(neck_R))
    rot = rotvec_from_quat(q)
    dists = lip_distances(model, posed)
    return torch.cat([rot, dists])


def quat_from_matrix(R: torch.Tensor) -> torch.Tensor:
    """Quaternion of a rotation matrix (w >= 0), differentiable near identity."""
    # trace-based extraction; head rotations stay far from the pi-angle branch
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    w = 0.5 * torch.sqrt((1.0 + tr).clamp(min=1e-12))
    x = (R[2, 1] - R[1, 2]) / (4 * w)
    y = (R[0, 2] - R[2, 0]) / (4 * w)
    z = (R[1, 0] - R[0, 1]) / (4 * w)
    return torch.stack([w, x, y, z])


class TextureField:
    """Dynamic surface color: uv-grid embeddings + FiLM SIREN MLP with a
    static head and a normal-encoder-conditioned dynamic head."""

    def __init__(self, model: HeadModel, registry: ParamRegistry,
                 config: TextureFieldConfig | None = None, seed: int = 0,
                 prefix: str = "tex"):
        self.config = cfg = config or TextureFieldConfig()
        self.registry = registry
        self.prefix = prefix
        self.mouth_uv_box = np.asarray(model.mouth_uv_box, dtype=np.float64)
        gen = torch.Generator().manual_seed(seed + 1)
        tex = dict(texture_related=True)
        registry.new(f"{prefix}.grid",
                     _uniform(gen, (cfg.grid_res, cfg.grid_res, cfg.grid_channels), 0.1),
                     **tex)
        registry.new(
            f"{prefix}.mouth_grid",
            _uniform(gen, (cfg.mouth_grid_res, cfg.mouth_grid_res, cfg.grid_channels), 0.1),
            **tex)
        widths = [cfg.width] * (cfg.depth - 1) + [cfg.last_width]
        self.mlp = FilmSirenMlp(registry, f"{prefix}.mlp", 3 + cfg.grid_channels,
                                widths, omega0=cfg.omega0, gen=gen, texture_related=True)
        enc = cfg.encoder_channels
        enc_in = (3,) + enc[:-1]
        for i, (cin, cout) in enumerate(zip(enc_in, enc)):
            bound = 1.0 / (cin * 9) if i == 0 else np.sqrt(6.0 / (cin * 9)) / cfg.omega0
            registry.new(f"{prefix}.enc.w{i}", _uniform(gen, (cout, cin, 3, 3), bound), **tex)
            registry.new(f"{prefix}.enc.b{i}", torch.zeros(cout, dtype=torch.float64), **tex)
        film_widths = widths + list(enc) + [cfg.dynamic_head_width]
        self.mapping = MappingNet(registry, f"{prefix}.map", N_MOUTH_FEATURES,
                                  film_widths, hidden=cfg.mapping_hidden,
                                  n_hidden=cfg.mapping_layers,
                                  freq_base=cfg.freq_base, gen=gen, texture_related=True)
        _linear(registry, f"{prefix}.head_static", cfg.last_width, 3, gen,
                texture_related=True)
        _linear(registry, f"{prefix}.head_dyn0", cfg.last_width + enc[-1],
                cfg.dynamic_head_width, gen, texture_related=True,
                bound=np.sqrt(6.0 / (cfg.last_width + enc[-1])) / cfg.omega0)
        _linear(registry, f"{prefix}.head_dyn1", cfg.dynamic_head_width, 3, gen,
                texture_related=True)

    def block_names(self):
        return [n for n in self.registry.names() if n.startswith(self.prefix + ".")]

    def mouth_mask(self, uv: torch.Tensor) -> torch.Tensor:
        """True where a surface uv lies in the declared inner-mouth box."""
        b = self.mouth_uv_box
        return ((uv[:, 0] >= b[0]) & (uv[:, 0] <= b[2])
                & (uv[:, 1] >= b[1]) & (uv[:, 1] <= b[3]))

    def _embedding(self, uv: torch.Tensor, mouth: torch.Tensor) -> torch.Tensor:
        main = sample_uv_grid(self.registry[f"{self.prefix}.grid"].values, uv)
        b = self.mouth_uv_box
        local = (uv - torch.tensor([b[0], b[1]])) / torch.tensor(
            [max(b[2] - b[0], 1e-9), max(b[3] - b[1], 1e-9)]
        )
        mouth_emb = sample_uv_grid(self.registry[f"{self.prefix}.mouth_grid"].values,
                                   local.clamp(0.0, 1.0))
        return torch.where(mouth[:, None], mouth_emb, main)

    def _film_per_pixel(self, mouth_cond: torch.Tensor, mouth: torch.Tensor):
        """Evaluate the mapping for the zero and mouth conditionings and pick
        per pixel; non-mouth pixels always see the zero conditioning."""
        zero = self.mapping(torch.zeros(N_MOUTH_FEATURES, dtype=torch.float64))
        if mouth_cond is None or not bool(mouth.any()):
            return [(f[None, :], p[None, :]) for f, p in zero]
        dyn = self.mapping(mouth_cond)
        sel = mouth[:, None]
        return [
            (torch.where(sel, fd[None, :], fz[None, :]),
             torch.where(sel, pd[None, :], pz[None, :]))
            for (fz, pz), (fd, pd) in zip(zero, dyn)
        ]

    def _encode_normals(self, patches: torch.Tensor, film) -> torch.Tensor:
        """patches: (B, 3, n, n) -> (B, C_last); valid convs shrink n to 1."""
        h = patches
        for i in range(len(self.config.encoder_channels)):
            w = self.registry[f"{self.prefix}.enc.w{i}"].values
            b = self.registry[f"{self.prefix}.enc.b{i}"].values
            h = torch.nn.functional.conv2d(h, w, b)
            freq, phase = film[i]
            h = torch.sin(freq[..., None, None] * h + phase[..., None, None])
        return h.mean(dim=(2, 3))

    def color(self, canonical: torch.Tensor, uv: torch.Tensor,
              mouth_cond: torch.Tensor | None, patches: torch.Tensor,
              return_parts: bool = False):
        """RGB in (-1, 1) per surface sample.

        canonical: (B, 3) template-space coordinates normalized to [-1,1];
        uv: (B, 2); mouth_cond: 13-vector or None; patches: (B, 3, n, n)."""
        mouth = self.mouth_mask(uv)
        film = self._film_per_pixel(mouth_cond, mouth)
        depth = self.config.depth
        n_enc = len(self.config.encoder_channels)
        x = torch.cat([canonical, self._embedding(uv, mouth)], dim=1)
        latent = self.mlp(x, film[:depth])
        static = _apply_linear(self.registry, f"{self.prefix}.head_static", latent)
        enc = self._encode_normals(patches, film[depth:depth + n_enc])
        h = torch.cat([latent, enc], dim=1)
        h = _apply_linear(self.registry, f"{self.prefix}.head_dyn0", h)
        freq, phase = film[depth + n_enc]
        h = torch.sin(freq * h + phase)
        dynamic = _apply_linear(self.registry, f"{self.prefix}.head_dyn1", h)
        rgb = torch.tanh(static + dynamic)
        if return_parts:
            return rgb, static, dynamic
        return rgb


def sample_uv_grid(grid: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of a (H, W, C) grid at uv in [0,1]^2; uv is clamped
    to the grid interior. Differentiable in both grid and uv."""
    H, W, _ = grid.shape
    x = (uv[:, 0] * (W - 1)).clamp(0.0, W - 1.0)
    y = (uv[:, 1] * (H - 1)).clamp(0.0, H - 1.0)
    x0 = x.detach().floor().long().clamp(0, W - 2)
    y0 = y.detach().floor().long().clamp(0, H - 2)
    fx = (x - x0.to(x.dtype))[:, None]
    fy = (y - y0.to(y.dtype))[:, None]
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    return ((1 - fy) * ((1 - fx) * g00 + fx * g01)
            + fy * ((1 - fx) * g10 + fx * g11))
