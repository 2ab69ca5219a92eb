"""Staged avatar optimization: coarse tracking, geometry, texture, joint.

The stages follow a strict freeze discipline: each stage marks exactly the
blocks it owns as trainable, frame-agnostic blocks step with Adam and
frame-specific blocks with SGD, and everything else stays bitwise untouched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields as dc_fields

import numpy as np
import torch

from . import arrayio
from .autodiff import (
    FRAME_AGNOSTIC,
    FRAME_SPECIFIC,
    AdamState,
    OptimError,
    ParamRegistry,
    ParamTape,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .energies import (
    STAGE_GEOMETRY,
    STAGE_JOINT,
    EnergyLog,
    EnergyWeights,
    assemble,
    e_lmk,
    e_normal,
    e_phot,
    e_perc_proxy,
    e_reg_flame,
    e_reg_lapl,
    e_semantic,
    weighted_edge_term,
)
from .fields import (
    GeometryField,
    GeometryFieldConfig,
    TextureField,
    TextureFieldConfig,
)
from .headmodel import (
    HeadModel,
    HeadParams,
    LID_LANDMARKS,
    eval_rest_shape,
    neck_pose,
    skin_pose,
)
from .render import Camera, project_landmarks, render

STAGE_ORDER = ("init", "coarse", "geometry", "texture", "joint")


@dataclass
class FitConfig:
    """Stage schedule, optimizer settings and presets.

    preset "paper" uses the published epoch counts; "desk" scales them down
    for CPU-sized runs on short sequences."""

    preset: str = "desk"
    seed: int = 0
    batch_size: int = 4
    coarse_steps: int = 60
    coarse_lr_agnostic: float = 2e-2
    coarse_lr_frame: float = 1e-2
    coarse_downsample: int = 4
    # soft-silhouette temperature (pixels, at the downsampled resolution)
    # used by the coarse stage so scale and depth get a real gradient
    coarse_temp: float = 1.5
    epochs_geometry: int = 12
    epochs_texture: int = 10
    epochs_joint: int = 12
    patience: int = 5
    lr_net: float = 1e-2
    # the geometry SIREN amplifies parameter noise into surface spikes, so it
    # gets a much smaller step than the texture network
    lr_geom: float = 1e-3
    # SGD step for frame-specific blocks during the network stages; the L1
    # landmark gradients are O(100) so this is a sub-millimeter refinement
    lr_frame: float = 1e-6
    # cap on the per-block gradient max-norm for frame-specific blocks; the
    # photometric term can spike through sliver screen-space triangles
    grad_clip: float = 1e3
    refit_lr: float = 1e-2
    weight_decay: float = 1e-4
    temp_start: float = 2.0  # soft-silhouette temperature, pixels
    temp_end: float = 0.75
    refit_steps: int = 150

    def __post_init__(self):
        if self.preset not in ("desk", "paper"):
            raise ValueError(f"unknown preset {self.preset!r}")
        for name in ("coarse_steps", "epochs_geometry", "epochs_texture",
                     "epochs_joint", "patience", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def paper(cls, **overrides) -> "FitConfig":
        return cls(preset="paper", epochs_geometry=150, epochs_texture=100,
                   epochs_joint=200, **overrides)

    def to_config(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_config(cls, cfg: dict) -> "FitConfig":
        known = {f.name for f in dc_fields(cls)}
        kwargs = {k: v for k, v in cfg.items() if k in known}
        return cls(**kwargs)

    def save(self, path: str):
        arrayio.save_keyvalues(path, self.to_config())

    @classmethod
    def load(cls, path: str) -> "FitConfig":
        return cls.from_config(arrayio.load_keyvalues(path))

    def field_configs(self):
        if self.preset == "desk":
            return GeometryFieldConfig.desk(), TextureFieldConfig.desk()
        return GeometryFieldConfig(), TextureFieldConfig()


def _frame_prefix(index: int) -> str:
    return f"frame{index:04d}"


class AvatarState:
    """All optimizable state of one avatar fit."""

    def __init__(self, model: HeadModel, dataset, config: FitConfig):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.registry = ParamRegistry()
        self.registry.new("beta", np.zeros(model.n_shape), group=FRAME_AGNOSTIC)
        cam = dataset.camera
        self.registry.new("camera", np.array([cam.focal, cam.cx, cam.cy]),
                          group=FRAME_AGNOSTIC)
        for f in dataset.frames:
            pre = _frame_prefix(f.index)
            self.registry.new(pre + ".psi", np.zeros(model.n_expr),
                              group=FRAME_SPECIFIC)
            self.registry.new(pre + ".phi", np.zeros((4, 3)),
                              group=FRAME_SPECIFIC)
            self.registry.new(pre + ".rot", np.zeros(3), group=FRAME_SPECIFIC)
            self.registry.new(pre + ".trans", np.zeros(3), group=FRAME_SPECIFIC)
        geom_cfg, tex_cfg = config.field_configs()
        self.geometry = GeometryField(model, self.registry, geom_cfg,
                                      seed=config.seed)
        self.texture = TextureField(model, self.registry, tex_cfg,
                                    seed=config.seed)
        self.adam = AdamState()
        self.stage = "init"
        self.step = 0
        self.epochs_done: dict[str, int] = {}

    # ------------------------------------------------------------- access

    def camera(self) -> Camera:
        focal, cx, cy = self.registry["camera"].detach_copy()
        base = self.dataset.camera
        return Camera(focal=float(focal), cx=float(cx), cy=float(cy),
                      width=base.width, height=base.height, R=base.R, t=base.t)

    def params(self, index: int) -> HeadParams:
        pre = _frame_prefix(index)
        return HeadParams(
            beta=self.registry["beta"].values,
            psi=self.registry[pre + ".psi"].values,
            phi_raw=self.registry[pre + ".phi"].values,
            global_rot=self.registry[pre + ".rot"].values,
            global_trans=self.registry[pre + ".trans"].values,
        )

    def posed(self, index: int, with_offsets: bool = True):
        """(posed vertices, rest vertices, offsets) for one frame."""
        p = self.params(index)
        rest = eval_rest_shape(self.model, p.beta, p.psi)
        if with_offsets:
            off = self.geometry.offsets(neck_pose(self.model, p.phi_raw))
        else:
            off = torch.zeros_like(rest)
        posed = skin_pose(self.model, rest + off, p.phi_raw, p.global_rot,
                          p.global_trans)
        return posed, rest, off

    def frame_blocks(self, index: int):
        return self.registry.select(prefix=_frame_prefix(index) + ".")

    def geometry_blocks(self):
        return self.registry.select(prefix="geom.")

    def texture_blocks(self):
        return self.registry.select(prefix="tex.")

    # ------------------------------------------------------------- freeze

    def set_trainable(self, names_or_blocks):
        """Exactly the given blocks become trainable; all others freeze."""
        chosen = set()
        for item in names_or_blocks:
            chosen.add(item if isinstance(item, str) else item.name)
        for b in self.registry:
            b.trainable = b.name in chosen

    # -------------------------------------------------------- persistence

    def save(self, directory: str):
        meta = {"stage": self.stage, "step": self.step}
        for name, count in self.epochs_done.items():
            meta[f"epochs_done.{name}"] = count
        meta.update({f"config.{k}": v
                     for k, v in self.config.to_config().items()})
        save_checkpoint(directory, self.registry, self.adam, extra=meta)

    @classmethod
    def load(cls, directory: str, model: HeadModel, dataset) -> "AvatarState":
        meta = arrayio.load_keyvalues(os.path.join(directory, "meta.txt"))
        config = FitConfig.from_config(
            {k[len("config."):]: v for k, v in meta.items()
             if k.startswith("config.")})
        state = cls(model, dataset, config)
        state.adam, _ = load_checkpoint(directory, state.registry)
        state.stage = str(meta.get("stage", "init"))
        state.step = int(meta.get("step", 0))
        state.epochs_done = {
            k[len("epochs_done."):]: int(v) for k, v in meta.items()
            if k.startswith("epochs_done.")}
        return state


# ----------------------------------------------------------------- energies


def _lid_targets(landmarks: np.ndarray) -> torch.Tensor:
    return torch.tensor([abs(float(landmarks[b, 1]) - float(landmarks[a, 1]))
                         for a, b in LID_LANDMARKS], dtype=torch.float64)


def _lid_predicted(uv: torch.Tensor) -> torch.Tensor:
    return torch.stack([(uv[b, 1] - uv[a, 1]).abs() for a, b in LID_LANDMARKS])


def frame_terms(state: AvatarState, frame, weights: EnergyWeights,
                mode: str = "hard", temperature: float = 1.0,
                with_app: bool = False, with_geom: bool = True,
                with_offsets: bool = True) -> dict:
    """Raw (unweighted) energy terms of one frame under the current state."""
    model = state.model
    cam = state.camera()
    p = state.params(frame.index)
    posed, rest, off = state.posed(frame.index, with_offsets=with_offsets)
    terms: dict = {}

    uv, valid = project_landmarks(cam, model, posed)
    detected_valid = torch.as_tensor(frame.visible) & valid
    terms["e_lmk"] = e_lmk(
        torch.as_tensor(frame.landmarks), _lid_targets(frame.landmarks), uv,
        _lid_predicted(uv), weights.w_lid, (cam.width, cam.height),
        valid=detected_valid)
    terms["e_reg_flame"] = e_reg_flame(
        p.beta, p.psi, p.phi_raw.reshape(-1),
        weights.w_beta, weights.w_theta, weights.w_psi)

    if with_geom or with_app:
        buf = render(cam, model, posed,
                     texture=state.texture if with_app else None,
                     params=p if with_app else None, mode=mode,
                     temperature=temperature)
        terms["e_semantic"] = e_semantic(torch.as_tensor(frame.semantic),
                                         buf.semantic)
        if with_geom:
            terms["e_normal"] = e_normal(torch.as_tensor(frame.normal),
                                         buf.normal, frame.mask)
            mesh = model.template
            terms["e_reg_lapl"] = e_reg_lapl(
                mesh, rest + off, rest,
                weights.lapl_vertex_weights(mesh.region))
            terms["e_reg_edge"] = weighted_edge_term(weights, mesh, rest + off)
        if with_app:
            target = torch.as_tensor(frame.rgb)
            terms["e_phot"] = e_phot(target, buf.rgb, frame.mask, buf.coverage)
            terms["e_perc"] = e_perc_proxy(target, buf.rgb, frame.mask)
    return terms


def _mean_terms(per_frame: list[dict]) -> dict:
    keys = set().union(*per_frame)
    out = {}
    for k in keys:
        vals = [t[k] for t in per_frame if k in t]
        out[k] = sum(vals) / len(vals)
    return out


# -------------------------------------------------------------- coarse init


def init_coarse_track(state: AvatarState, log: EnergyLog | None = None,
                      w_semantic: float | None = None) -> AvatarState:
    """Tracker-style alignment: E_lmk + E_semantic + E_reg,flame over the
    shared shape, per-frame pose/expression and camera intrinsics.

    The semantic term is rendered at reduced resolution for speed; after
    this stage the camera intrinsics are frozen for good."""
    cfg = state.config
    weights = EnergyWeights.paper(STAGE_GEOMETRY)
    if w_semantic is not None:
        weights.w_semantic = w_semantic
    trainable = ["beta", "camera"]
    for f in state.dataset.frames:
        trainable += [b.name for b in state.frame_blocks(f.index)]
    state.set_trainable(trainable)
    blocks = [state.registry[n] for n in trainable]
    agnostic = [b for b in blocks if b.group == FRAME_AGNOSTIC]
    specific = [b for b in blocks if b.group == FRAME_SPECIFIC]

    ds = max(int(cfg.coarse_downsample), 1)
    initial = None
    for step in range(cfg.coarse_steps):
        state.registry.zero_grad()
        per_frame = []
        for f in state.dataset.frames:
            terms = _coarse_frame_terms(state, f, weights, ds)
            per_frame.append(terms)
        total, report = assemble(weights, _mean_terms(per_frame),
                                 frame_ids=[f.index for f in state.dataset.frames],
                                 step=state.step)
        if initial is None:
            initial = report.total
        if not np.isfinite(report.total) or report.total > 10.0 * initial + 1e-12:
            raise OptimError(
                f"coarse tracking diverged at step {step}: "
                f"loss {report.total:.6g} vs initial {initial:.6g}")
        ParamTape(total, blocks).backward()
        # Adam throughout: the L1 landmark term has sign-like gradients that
        # plain SGD oscillates on near the optimum
        adam_step(agnostic, state.adam, lr=cfg.coarse_lr_agnostic)
        adam_step(specific, state.adam, lr=cfg.coarse_lr_frame)
        state.step += 1
        if log is not None:
            log.write(report)
    state.registry["camera"].trainable = False
    state.stage = "coarse"
    return state


def _coarse_frame_terms(state, frame, weights, ds):
    model = state.model
    p = state.params(frame.index)
    posed, _, _ = state.posed(frame.index, with_offsets=False)
    cam_block = state.registry["camera"].values
    base = state.dataset.camera
    # differentiable projection through the intrinsics block
    from .headmodel import embed_landmarks
    pts = base.world_to_cam(embed_landmarks(model, posed))
    z = pts[:, 2].clamp(min=base.near)
    uv = torch.stack([cam_block[0] * pts[:, 0] / z + cam_block[1],
                      cam_block[0] * pts[:, 1] / z + cam_block[2]], dim=1)
    valid = torch.as_tensor(frame.visible) & (pts[:, 2] > base.near)
    terms = {
        "e_lmk": e_lmk(torch.as_tensor(frame.landmarks),
                       _lid_targets(frame.landmarks), uv, _lid_predicted(uv),
                       weights.w_lid, (base.width, base.height), valid=valid),
        "e_reg_flame": e_reg_flame(p.beta, p.psi, p.phi_raw.reshape(-1),
                                   weights.w_beta, weights.w_theta,
                                   weights.w_psi),
    }
    if weights.w_semantic > 0:
        small = Camera(focal=state.camera().focal / ds,
                       cx=state.camera().cx / ds, cy=state.camera().cy / ds,
                       width=base.width // ds, height=base.height // ds,
                       R=base.R, t=base.t)
        # soft mode: hard coverage is a step function of the vertices, so
        # only the soft silhouette constrains global scale and depth
        buf = render(small, model, posed, mode="soft",
                     temperature=state.config.coarse_temp)
        target = _downsample_mean(torch.as_tensor(frame.semantic), ds)
        terms["e_semantic"] = e_semantic(target, buf.semantic)
    return terms


def _downsample_mean(img: torch.Tensor, k: int) -> torch.Tensor:
    if k <= 1:
        return img
    H, W, C = img.shape
    return img[: H - H % k, : W - W % k].reshape(H // k, k, W // k, k, C) \
        .mean(dim=(1, 3))


# ------------------------------------------------------------------- stages


def _epoch_batches(frame_indices, batch_size, seed, epoch):
    rng = np.random.default_rng(seed * 100003 + epoch)
    order = rng.permutation(len(frame_indices))
    idx = [frame_indices[i] for i in order]
    return [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]


def _surface_term(state: AvatarState, batch_ids, rng) -> torch.Tensor:
    """Pairwise pose-consistency between the offsets of two frames."""
    train = [f.index for f in state.dataset.train_frames]
    i = batch_ids[0]
    j = batch_ids[1] if len(batch_ids) > 1 else train[rng.integers(len(train))]
    off_i = state.geometry.offsets(
        neck_pose(state.model, state.params(i).phi_raw))
    off_j = state.geometry.offsets(
        neck_pose(state.model, state.params(j).phi_raw))
    from .energies import e_reg_surface
    return e_reg_surface(off_i, off_j)


def _clip_grads(blocks, cap: float):
    """Scale each block's gradient so its max-abs entry stays within cap."""
    if cap <= 0:
        return
    for b in blocks:
        g = float(b.grad.abs().max())
        if g > cap:
            b.grad *= cap / g


def _run_epochs(state: AvatarState, stage: str, weights: EnergyWeights,
                epochs: int, trainable, mode: str, temp_of_epoch,
                with_app: bool, with_geom: bool, log: EnergyLog | None,
                val_eval=None, patience: int = 0):
    cfg = state.config
    state.set_trainable(trainable)
    blocks = [b for b in state.registry if b.trainable]
    agnostic = [b for b in blocks if b.group == FRAME_AGNOSTIC]
    tex_blocks = [b for b in agnostic if b.texture_related]
    geom_blocks = [b for b in agnostic if not b.texture_related]
    specific = [b for b in blocks if b.group == FRAME_SPECIFIC]
    frame_ids = [f.index for f in state.dataset.train_frames]
    frames = {f.index: f for f in state.dataset.frames}
    start = state.epochs_done.get(stage, 0)
    snapshot = state.registry.state_arrays()
    best_val, bad_evals = np.inf, 0

    for epoch in range(start, start + epochs):
        temp = temp_of_epoch(epoch)
        rng = np.random.default_rng(cfg.seed * 7919 + epoch + 1)
        for batch in _epoch_batches(frame_ids, cfg.batch_size, cfg.seed, epoch):
            state.registry.zero_grad()
            per_frame = [frame_terms(state, frames[i], weights, mode=mode,
                                     temperature=temp, with_app=with_app,
                                     with_geom=with_geom) for i in batch]
            terms = _mean_terms(per_frame)
            if with_geom and weights.w_reg_surface > 0:
                terms["e_reg_surface"] = _surface_term(state, batch, rng)
            total, report = assemble(weights, terms, frame_ids=batch,
                                     step=state.step)
            if not np.isfinite(report.total):
                state.registry.load_state_arrays(snapshot)
                raise OptimError(
                    f"non-finite loss in stage {stage!r} at step "
                    f"{state.step}; restored last-good parameters")
            ParamTape(total, blocks).backward()
            try:
                adam_step(tex_blocks, state.adam, lr=cfg.lr_net,
                          weight_decay=cfg.weight_decay)
                adam_step(geom_blocks, state.adam, lr=cfg.lr_geom)
                _clip_grads(specific, cfg.grad_clip)
                sgd_step(specific, lr=cfg.lr_frame)
            except OptimError:
                state.registry.load_state_arrays(snapshot)
                raise
            state.step += 1
            if log is not None:
                log.write(report)
        snapshot = state.registry.state_arrays()
        state.epochs_done[stage] = epoch + 1
        if val_eval is not None:
            score = val_eval()
            if score < best_val - 1e-12:
                best_val, bad_evals = score, 0
            else:
                bad_evals += 1
                if bad_evals >= patience:
                    break
    state.stage = stage
    return state


def stage_geometry(state: AvatarState, log: EnergyLog | None = None,
                   epochs: int | None = None) -> AvatarState:
    """Optimize the geometry network, embeddings and FLAME params against
    the geometry objective with the geometry-stage weight column."""
    cfg = state.config
    n = cfg.epochs_geometry if epochs is None else epochs
    weights = EnergyWeights.paper(STAGE_GEOMETRY)
    trainable = ["beta"] + [b.name for b in state.geometry_blocks()]
    for f in state.dataset.train_frames:
        trainable += [b.name for b in state.frame_blocks(f.index)]

    def temp_of_epoch(epoch):
        total = max(cfg.epochs_geometry - 1, 1)
        a = min(epoch / total, 1.0)
        return cfg.temp_start + a * (cfg.temp_end - cfg.temp_start)

    return _run_epochs(state, "geometry", weights, n, trainable, mode="soft",
                       temp_of_epoch=temp_of_epoch, with_app=False,
                       with_geom=True, log=log)


def stage_texture(state: AvatarState, log: EnergyLog | None = None,
                  epochs: int | None = None) -> AvatarState:
    """Optimize only the texture blocks against the appearance objective;
    geometry and poses stay bitwise frozen."""
    cfg = state.config
    n = cfg.epochs_texture if epochs is None else epochs
    weights = EnergyWeights.paper(STAGE_JOINT)
    trainable = [b.name for b in state.texture_blocks()]
    return _run_epochs(state, "texture", weights, n, trainable, mode="hard",
                       temp_of_epoch=lambda e: cfg.temp_end, with_app=True,
                       with_geom=False, log=log)


def validation_perc_loss(state: AvatarState) -> float:
    """Proxy-perceptual loss over the validation frames at their tracked
    params; the early-stop criterion of the joint stage."""
    total = 0.0
    vals = state.dataset.val_frames
    if not vals:
        return 0.0
    with torch.no_grad():
        for f in vals:
            posed, _, _ = state.posed(f.index)
            buf = render(state.camera(), state.model, posed,
                         texture=state.texture, params=state.params(f.index))
            total += float(e_perc_proxy(torch.as_tensor(f.rgb), buf.rgb,
                                        f.mask))
    return total / len(vals)


def early_stop(history, patience: int) -> int | None:
    """Index after which training would stop: the first evaluation ending a
    run of `patience` consecutive non-improving scores; None if never."""
    best = np.inf
    bad = 0
    for i, score in enumerate(history):
        if score < best - 1e-12:
            best, bad = score, 0
        else:
            bad += 1
            if bad >= patience:
                return i
    return None


def stage_joint(state: AvatarState, log: EnergyLog | None = None,
                epochs: int | None = None) -> AvatarState:
    """Joint optimization of all geometry/texture/frame blocks with the
    joint weight column and validation early stopping."""
    cfg = state.config
    n = cfg.epochs_joint if epochs is None else epochs
    weights = EnergyWeights.paper(STAGE_JOINT)
    trainable = (["beta"] + [b.name for b in state.geometry_blocks()]
                 + [b.name for b in state.texture_blocks()])
    for f in state.dataset.train_frames:
        trainable += [b.name for b in state.frame_blocks(f.index)]
    return _run_epochs(state, "joint", weights, n, trainable, mode="hard",
                       temp_of_epoch=lambda e: cfg.temp_end, with_app=True,
                       with_geom=True, log=log,
                       val_eval=lambda: validation_perc_loss(state),
                       patience=cfg.patience)


# --------------------------------------------------------- refit / reenact


def refit_pose_expression(state: AvatarState, frame_indices,
                          steps: int | None = None,
                          log: EnergyLog | None = None) -> AvatarState:
    """Fit only per-frame pose/expression of the given frames; networks and
    shared shape stay bitwise frozen. Used for validation reconstruction."""
    cfg = state.config
    n = cfg.refit_steps if steps is None else steps
    weights = EnergyWeights.paper(STAGE_JOINT)
    frames = {f.index: f for f in state.dataset.frames}
    trainable = []
    for i in frame_indices:
        trainable += [b.name for b in state.frame_blocks(i)]
    state.set_trainable(trainable)
    blocks = [state.registry[name] for name in trainable]
    # fresh optimizer moments: the shared state was accumulated near the
    # training-frame optimum and misdirects the first steps from a new pose
    adam = AdamState()
    # first half: landmark alignment only -- image-space terms evaluated at a
    # far-off pose only contribute noise and can overpower the landmark pull
    n_warm = n // 2
    warm_total, warm_arrays = np.inf, None
    for step in range(n):
        state.registry.zero_grad()
        full = step >= n_warm
        per_frame = [frame_terms(state, frames[i], weights, mode="hard",
                                 with_app=full, with_geom=full)
                     for i in frame_indices]
        total, report = assemble(weights, _mean_terms(per_frame),
                                 frame_ids=tuple(frame_indices),
                                 step=state.step)
        if step == n_warm and full:
            # anchor: the full objective at the warm-phase result
            warm_total = report.total
            warm_arrays = {b.name: b.detach_copy() for b in blocks}
        ParamTape(total, blocks).backward()
        # refit starts far from the optimum (e.g. neutral pose) and the L1
        # terms have sign-like gradients, so Adam rather than plain SGD
        _clip_grads(blocks, cfg.grad_clip)
        adam_step(blocks, adam, lr=cfg.refit_lr)
        state.step += 1
        if log is not None:
            log.write(report)
    if warm_arrays is not None:
        # the hard-mode image terms carry no visibility gradients, so descent
        # can drift uphill once visibility flips at coarse resolutions; if
        # the full phase ended above its own starting energy, fall back to
        # the landmark-aligned warm result
        per_frame = [frame_terms(state, frames[i], weights, mode="hard",
                                 with_app=True, with_geom=True)
                     for i in frame_indices]
        _, final = assemble(weights, _mean_terms(per_frame),
                            frame_ids=tuple(frame_indices), step=state.step)
        if final.total > warm_total:
            for b in blocks:
                b.set_values(warm_arrays[b.name])
    return state


def reenact(state: AvatarState, driver_deltas, global_rot=None,
            global_trans=None, return_meshes: bool = False):
    """Render the avatar driven by (psi_delta, phi_delta) pairs added to the
    source's neutral pose. Returns one RenderBuffers per driver frame (and
    the posed vertex arrays when return_meshes is set)."""
    model = state.model
    out = []
    meshes = []
    with torch.no_grad():
        for psi_d, phi_d in driver_deltas:
            p = HeadParams.neutral(model)
            p.beta = state.registry["beta"].values.detach()
            p.psi = p.psi + torch.as_tensor(np.asarray(psi_d, dtype=np.float64))
            p.phi_raw = p.phi_raw + torch.as_tensor(
                np.asarray(phi_d, dtype=np.float64))
            if global_rot is not None:
                p.global_rot = torch.as_tensor(np.asarray(global_rot, float))
            if global_trans is not None:
                p.global_trans = torch.as_tensor(np.asarray(global_trans, float))
            rest = eval_rest_shape(model, p.beta, p.psi)
            off = state.geometry.offsets(neck_pose(model, p.phi_raw))
            posed = skin_pose(model, rest + off, p.phi_raw, p.global_rot,
                              p.global_trans)
            out.append(render(state.camera(), model, posed,
                              texture=state.texture, params=p))
            meshes.append(posed.detach().numpy())
    if return_meshes:
        return out, meshes
    return out


def fit(model: HeadModel, dataset, config: FitConfig,
        out_dir: str | None = None) -> AvatarState:
    """Full staged fit; writes checkpoints and energy logs when out_dir is
    given."""
    state = AvatarState(model, dataset, config)
    log = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log = EnergyLog(os.path.join(out_dir, "energies.jsonl"))
    try:
        init_coarse_track(state, log=log)
        if out_dir is not None:
            state.save(os.path.join(out_dir, "ckpt_coarse"))
        stage_geometry(state, log=log)
        stage_texture(state, log=log)
        stage_joint(state, log=log)
        if out_dir is not None:
            state.save(os.path.join(out_dir, "ckpt_final"))
    finally:
        if log is not None:
            log.close()
    return state
