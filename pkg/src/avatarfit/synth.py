"""Procedural synthetic ground-truth subjects and dataset rendering.

A subject is a head model of deliberately different topology than the
fitting template, decorated with a ground-truth offset field (hair style +
pose-dependent neck component) and a procedural texture. Sequences are
rendered in hard mode with exact float targets for normals/semantics and
8-bit PNG for RGB.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import arrayio
from .headmodel import (
    HeadModel,
    HeadParams,
    N_LANDMARKS,
    generate_procedural_template,
    neck_pose,
    posed_vertices,
)
from .mesh import Region, TriMesh, load_obj, save_obj, vertex_normals
from .render import Camera, default_camera, project_landmarks, read_png, render, write_png

HAIR_STYLES = ("short_hair", "long_hair", "bun", "bald")
_HAIR_SCALE = {"bald": 0.0, "short_hair": 0.012, "long_hair": 0.035, "bun": 0.028}

# base colors per region label
_REGION_COLORS = {
    Region.EYEBALLS: (0.95, 0.95, 0.98),
    Region.EYE_SURROUNDING: (0.78, 0.60, 0.52),
    Region.FOREHEAD: (0.85, 0.68, 0.58),
    Region.FACE: (0.82, 0.64, 0.55),
    Region.EARS: (0.80, 0.60, 0.52),
    Region.SCALP: (0.28, 0.20, 0.12),
    Region.NECK: (0.80, 0.62, 0.53),
    Region.LOWER_NECK: (0.76, 0.58, 0.50),
    Region.NOSE: (0.84, 0.65, 0.55),
}


@dataclass
class SyntheticSubject:
    """Ground-truth head: model + offset field + texture + animation."""

    model: HeadModel
    style: str
    seed: int
    static_offsets: np.ndarray  # (V, 3)
    neck_gain: np.ndarray  # (V, 3, 3): offset response per neck-pose axis

    def offsets(self, pose: np.ndarray) -> np.ndarray:
        """Static + neck-pose-dependent ground-truth vertex offsets."""
        pose = np.asarray(pose, dtype=np.float64)
        return self.static_offsets + np.einsum("vca,a->vc", self.neck_gain, pose)

    def texture(self):
        """Procedural color function for the renderer: region base colors,
        band-limited noise and a view-dependent specular lobe."""
        region = self.model.template.region
        coords = self.model.template_coords_normalized()
        palette = np.array([_REGION_COLORS[Region(r)] for r in region])

        def tex(canonical: torch.Tensor, uv: torch.Tensor,
                normal: torch.Tensor) -> torch.Tensor:
            c = canonical.detach().numpy()
            # nearest template vertex supplies the region base color
            idx = np.argmin(
                ((c[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2), axis=1)
            base = palette[idx]
            bands = 0.12 * np.sin(7.3 * c[:, 0] + 11.1 * c[:, 1]) \
                * np.cos(5.7 * c[:, 2] + 2.0)
            rgb = base * (0.85 + bands[:, None])
            n = normal.detach().numpy()
            spec = 0.22 * np.clip(n[:, 2], 0.0, 1.0) ** 8
            rgb = np.clip(rgb + spec[:, None], 0.0, 1.0)
            return torch.as_tensor(rgb)

        return tex

    def track(self, n_frames: int, camera: Camera) -> list[HeadParams]:
        """Animation: sinusoidal yaw sweep to +/-45 degrees (both profiles),
        jaw open/close cycles and periodic eye blinks."""
        params = []
        for t in range(n_frames):
            s = t / max(n_frames - 1, 1)
            p = HeadParams.neutral(self.model, camera=camera)
            yaw = np.deg2rad(45.0) * np.sin(2 * np.pi * s)
            p.global_rot = torch.tensor([0.0, yaw, 0.0], dtype=torch.float64)
            # neck counter-motion and a slight nod
            p.phi_raw[0, 1] = 0.35 * np.sin(2 * np.pi * s + 0.7)
            p.phi_raw[0, 0] = 0.18 * np.sin(4 * np.pi * s)
            # jaw cycles
            p.phi_raw[1, 0] = 1.2 * max(0.0, np.sin(6 * np.pi * s))
            # blink: expression spike twice per sweep
            blink_phase = (s * 2.0) % 1.0
            p.psi[0] = 1.4 * np.exp(-((blink_phase - 0.5) / 0.08) ** 2)
            p.psi[1] = 0.3 * np.sin(2 * np.pi * s)
            params.append(p)
        return params

    def posed(self, params: HeadParams) -> torch.Tensor:
        pose = neck_pose(self.model, params.phi_raw).detach().numpy()
        off = torch.as_tensor(self.offsets(pose))
        return posed_vertices(self.model, params, offsets=off)


def _smooth_vertex_noise(mesh: TriMesh, rng, iterations=10):
    from .mesh import laplace_beltrami
    x = rng.normal(size=(mesh.n_vertices, 3))
    for _ in range(iterations):
        x = x + laplace_beltrami(mesh, x)
    return x


def generate_subject(seed: int, style: str = "short_hair",
                     resolution: int = 560) -> SyntheticSubject:
    """Deterministic ground-truth subject; hair style as scalp offsets."""
    if style not in HAIR_STYLES:
        raise ValueError(f"unknown hair style {style!r}")
    model = generate_procedural_template(seed=seed + 1000, resolution=resolution)
    mesh = model.template
    rng = np.random.default_rng(seed * 7919 + HAIR_STYLES.index(style))
    normals = vertex_normals(mesh)
    scalp = (mesh.region == int(Region.SCALP)).astype(np.float64)

    scale = _HAIR_SCALE[style]
    static = np.zeros((mesh.n_vertices, 3))
    if scale > 0:
        bump = np.abs(_smooth_vertex_noise(mesh, rng)[:, 0])
        bump = bump / max(bump.max(), 1e-9)
        hair = scale * (0.4 + 0.6 * bump)
        if style == "long_hair":
            # drape: push downward as well as outward
            static += scalp[:, None] * hair[:, None] * (
                0.7 * normals + 0.45 * np.array([0.0, -1.0, 0.0]))
        elif style == "bun":
            back = np.clip(-mesh.vertices[:, 2] * 8.0, 0.0, 1.0)
            static += (scalp * back)[:, None] * hair[:, None] * 1.4 * normals
        else:
            static += scalp[:, None] * hair[:, None] * normals
    # mild non-scalp shape deviation so the subject differs from any template;
    # kept off the scalp so "bald" means exactly zero scalp offsets
    smooth = _smooth_vertex_noise(mesh, rng)
    static += 0.004 * smooth * (1.0 - scalp)[:, None]

    # pose-dependent component concentrated on the neck
    neck = np.isin(mesh.region, [int(Region.NECK), int(Region.LOWER_NECK)])
    gain = np.zeros((mesh.n_vertices, 3, 3))
    gain[neck, :, 0] = 0.004 * normals[neck]
    gain[neck, :, 1] = 0.003 * np.cross(normals[neck], [0.0, 1.0, 0.0])
    return SyntheticSubject(model=model, style=style, seed=seed,
                            static_offsets=static, neck_gain=gain)


# ------------------------------------------------------------------- dataset


def hard_semantic(buffers) -> np.ndarray:
    """Binary ground-truth semantics: one-hot argmax class on covered pixels.

    Binary maps make the soft-xor semantic energy exactly zero between a
    stored target and an identical re-render, and the channels still sum to
    the (hard) coverage."""
    sem = buffers.semantic.detach().numpy()
    hit = buffers.face_id >= 0
    out = np.zeros_like(sem)
    cls = sem.argmax(axis=2)
    h, w = np.nonzero(hit)
    out[h, w, cls[h, w]] = 1.0
    return out


def render_sequence(subject: SyntheticSubject, out_dir: str, n_train: int = 20,
                    n_val: int = 10, resolution: int = 128) -> str:
    """Render train+val frames into the dataset directory layout."""
    os.makedirs(out_dir, exist_ok=True)
    camera = default_camera(size=resolution)
    n = n_train + n_val
    track = subject.track(n, camera)
    tex = subject.texture()
    subject.model.save(os.path.join(out_dir, "gt_model"))

    for i, params in enumerate(track):
        frame_dir = os.path.join(out_dir, "frames", f"{i:04d}")
        os.makedirs(frame_dir, exist_ok=True)
        posed = subject.posed(params)
        buf = render(camera, subject.model, posed, texture=tex)
        write_png(os.path.join(frame_dir, "rgb.png"), buf.rgb)
        arrayio.save_arrays(frame_dir, {
            "normal": buf.normal.detach().numpy(),
            "semantic": hard_semantic(buf),
        })
        uv, valid = project_landmarks(camera, subject.model, posed)
        uv = uv.detach().numpy()
        inside = ((uv[:, 0] >= 0) & (uv[:, 0] < resolution)
                  & (uv[:, 1] >= 0) & (uv[:, 1] < resolution))
        visible = valid.numpy() & inside
        with open(os.path.join(frame_dir, "landmarks.txt"), "w") as fh:
            for k in range(len(uv)):
                fh.write(f"{k} {float(uv[k, 0])!r} {float(uv[k, 1])!r} "
                         f"{int(visible[k])}\n")
        posed_mesh = TriMesh(posed.detach().numpy(), subject.model.template.faces,
                             subject.model.template.uv, subject.model.template.region)
        save_obj(os.path.join(frame_dir, "mesh.obj"), posed_mesh)
        arrayio.save_keyvalues(os.path.join(frame_dir, "params.txt"), {
            **{f"psi.{k}": float(params.psi[k]) for k in range(len(params.psi))},
            **{f"phi.{j}.{a}": float(params.phi_raw[j, a])
               for j in range(4) for a in range(3)},
            **{f"global_rot.{a}": float(params.global_rot[a]) for a in range(3)},
            **{f"global_trans.{a}": float(params.global_trans[a]) for a in range(3)},
        })

    arrayio.save_keyvalues(os.path.join(out_dir, "manifest.txt"), {
        "n_frames": n, "n_train": n_train, "n_val": n_val,
        "resolution": resolution, "style": subject.style, "seed": subject.seed,
        **{f"camera.{k}": v for k, v in camera.as_dict().items()},
    })
    return out_dir


class DatasetError(RuntimeError):
    pass


@dataclass
class Frame:
    index: int
    split: str
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    normal: np.ndarray  # (H, W, 3)
    semantic: np.ndarray  # (H, W, 4)
    landmarks: np.ndarray  # (L, 2)
    visible: np.ndarray  # (L,) bool
    mesh: TriMesh
    psi: np.ndarray
    phi_raw: np.ndarray
    global_rot: np.ndarray
    global_trans: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        """Foreground mask: pixels any semantic class covers."""
        return self.semantic.sum(axis=2) > 0.5

    def params(self, model: HeadModel, camera=None) -> HeadParams:
        p = HeadParams.neutral(model, camera=camera)
        np_ = min(len(p.psi), len(self.psi))
        p.psi[:np_] = torch.as_tensor(self.psi[:np_])
        p.phi_raw = torch.as_tensor(self.phi_raw.copy())
        p.global_rot = torch.as_tensor(self.global_rot.copy())
        p.global_trans = torch.as_tensor(self.global_trans.copy())
        return p


@dataclass
class Dataset:
    path: str
    camera: Camera
    resolution: int
    n_train: int
    n_val: int
    style: str
    seed: int
    frames: list

    @property
    def train_frames(self):
        return [f for f in self.frames if f.split == "train"]

    @property
    def val_frames(self):
        return [f for f in self.frames if f.split == "val"]

    def gt_model(self) -> HeadModel:
        return HeadModel.load(os.path.join(self.path, "gt_model"))


def parse_landmarks(path: str):
    uv = np.zeros((N_LANDMARKS, 2))
    visible = np.zeros(N_LANDMARKS, dtype=bool)
    seen = 0
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DatasetError(f"{path}: malformed landmark line {line!r}")
            k = int(parts[0])
            uv[k] = float(parts[1]), float(parts[2])
            visible[k] = bool(int(parts[3]))
            seen += 1
    if seen != N_LANDMARKS:
        raise DatasetError(f"{path}: expected {N_LANDMARKS} landmarks, got {seen}")
    return uv, visible


def load_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise DatasetError(f"missing dataset manifest at {manifest_path}")
    man = arrayio.load_keyvalues(manifest_path)
    n = int(man["n_frames"])
    n_train = int(man["n_train"])
    res = int(man["resolution"])
    camera = Camera.from_dict(
        {k[len("camera."):]: v for k, v in man.items() if k.startswith("camera.")})

    frames = []
    for i in range(n):
        frame_dir = os.path.join(path, "frames", f"{i:04d}")
        for fname in ("rgb.png", "normal.bin", "semantic.bin",
                      "landmarks.txt", "mesh.obj", "params.txt"):
            if not os.path.isfile(os.path.join(frame_dir, fname)):
                raise DatasetError(f"frame {i:04d}: missing {fname}")
        arrays = arrayio.load_arrays(frame_dir)
        for name, shape in (("normal", (res, res, 3)), ("semantic", (res, res, 4))):
            if arrays[name].shape != shape:
                raise DatasetError(
                    f"frame {i:04d}: channel {name} has shape "
                    f"{arrays[name].shape}, expected {shape}")
        rgb = read_png(os.path.join(frame_dir, "rgb.png"))
        if rgb.shape != (res, res, 3):
            raise DatasetError(f"frame {i:04d}: channel rgb has shape {rgb.shape}")
        uv, visible = parse_landmarks(os.path.join(frame_dir, "landmarks.txt"))
        mesh = load_obj(os.path.join(frame_dir, "mesh.obj"))
        pv = arrayio.load_keyvalues(os.path.join(frame_dir, "params.txt"))
        n_psi = 1 + max(int(k.split(".")[1]) for k in pv if k.startswith("psi."))
        frames.append(Frame(
            index=i,
            split="train" if i < n_train else "val",
            rgb=rgb,
            normal=arrays["normal"],
            semantic=arrays["semantic"],
            landmarks=uv,
            visible=visible,
            mesh=mesh,
            psi=np.array([pv[f"psi.{k}"] for k in range(n_psi)]),
            phi_raw=np.array([[pv[f"phi.{j}.{a}"] for a in range(3)]
                              for j in range(4)]),
            global_rot=np.array([pv[f"global_rot.{a}"] for a in range(3)]),
            global_trans=np.array([pv[f"global_trans.{a}"] for a in range(3)]),
        ))
    return Dataset(path=path, camera=camera, resolution=res, n_train=n_train,
                   n_val=int(man["n_val"]), style=str(man["style"]),
                   seed=int(man["seed"]), frames=frames)
