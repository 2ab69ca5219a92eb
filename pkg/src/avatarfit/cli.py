"""Command line interface: synthesize, fit, refit, render, evaluate.

Every subcommand validates its inputs up front and exits nonzero with a
message on any failure, so a zero exit code always means the advertised
outputs were written completely.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import synth
from .headmodel import (
    HeadModel,
    eval_rest_shape,
    generate_procedural_template,
    neck_pose,
    skin_pose,
)
from .metrics import (
    MetricReport,
    hausdorff_stats,
    normal_angular_error,
    photometric_scores,
)
from .pipeline import (
    AvatarState,
    FitConfig,
    fit,
    refit_pose_expression,
)
from .render import render, write_png


class CliError(Exception):
    """User-facing failure; message printed to stderr, exit code 1."""


def _npy(x):
    return x.detach().numpy() if torch.is_tensor(x) else np.asarray(x)


def _require_dir(path: str, what: str) -> str:
    if not os.path.isdir(path):
        raise CliError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------- state loading


def _save_fit_outputs(out_dir: str, model: HeadModel):
    model.save(os.path.join(out_dir, "model"))


def _load_state(checkpoint: str, data: str):
    _require_dir(checkpoint, "checkpoint directory")
    ds = synth.load_dataset(data)
    model_dir = os.path.join(checkpoint, "model")
    ckpt_dir = os.path.join(checkpoint, "ckpt_final")
    if not os.path.isdir(ckpt_dir):
        ckpt_dir = checkpoint
        model_dir = os.path.join(os.path.dirname(checkpoint.rstrip("/")),
                                 "model")
    _require_dir(model_dir, "fitted model archive")
    model = HeadModel.load(model_dir)
    state = AvatarState.load(ckpt_dir, model, ds)
    return state, ds


# ---------------------------------------------------------------- subcommands


def cmd_synthesize(args) -> int:
    subject = synth.generate_subject(seed=args.seed, style=args.style,
                                     resolution=args.subject_resolution)
    synth.render_sequence(subject, args.out, n_train=args.train_frames,
                          n_val=args.val_frames, resolution=args.resolution)
    print(f"wrote {args.train_frames + args.val_frames} frames to {args.out}")
    return 0


def cmd_fit(args) -> int:
    ds = synth.load_dataset(_require_dir(args.data, "dataset"))
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise CliError(f"config file not found: {args.config}")
        config = FitConfig.load(args.config)
    else:
        config = FitConfig()
    if args.seed is not None:
        config.seed = args.seed
    model = generate_procedural_template(seed=args.template_seed,
                                         resolution=args.template_resolution)
    os.makedirs(args.out, exist_ok=True)
    _save_fit_outputs(args.out, model)
    config.save(os.path.join(args.out, "config.txt"))
    state = fit(model, ds, config, out_dir=args.out)
    print(f"fit complete after {state.step} steps; checkpoints in {args.out}")
    return 0


def cmd_refit(args) -> int:
    state, ds = _load_state(args.checkpoint, args.data)
    frames = ds.val_frames if args.split == "val" else ds.train_frames
    indices = [f.index for f in frames]
    refit_pose_expression(state, indices, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    state.save(os.path.join(args.out, "ckpt_refit"))
    report = MetricReport(subject=os.path.basename(args.data.rstrip("/")),
                          split=args.split)
    with torch.no_grad():
        for f in frames:
            posed, _, _ = state.posed(f.index)
            buf = render(state.camera(), state.model, posed,
                         texture=state.texture, params=state.params(f.index))
            report.add("l1", photometric_scores(f.rgb, _npy(buf.rgb),
                                                f.mask)["l1"])
    path = os.path.join(args.out, "refit_report.json")
    with open(path, "w") as fh:
        fh.write(report.to_json())
    print(f"refit {len(indices)} {args.split} frames; report in {path}")
    return 0


def _parse_range(spec: str) -> np.ndarray:
    """'a:b:s' -> inclusive arange in degrees; a bare number -> one value."""
    parts = spec.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        if len(parts) != 3:
            raise ValueError
        a, b, s = (float(p) for p in parts)
        if s <= 0 or b < a:
            raise ValueError
    except ValueError:
        raise CliError(f"bad range {spec!r}: expected 'start:stop:step'")
    return np.arange(a, b + 1e-9, s)


def cmd_render(args) -> int:
    state, ds = _load_state(args.checkpoint, args.data)
    yaws = _parse_range(args.yaw)
    pitches = _parse_range(args.pitch)
    os.makedirs(args.out, exist_ok=True)
    model = state.model
    with torch.no_grad():
        for f in ds.val_frames:
            p = state.params(f.index)
            rest = eval_rest_shape(model, p.beta.detach(), p.psi.detach())
            off = state.geometry.offsets(neck_pose(model, p.phi_raw.detach()))
            pose_dir = os.path.join(args.out, f"pose{f.index:04d}")
            os.makedirs(pose_dir, exist_ok=True)
            strip = []
            for pitch in pitches:
                for yaw in yaws:
                    rot = torch.tensor([np.deg2rad(pitch), np.deg2rad(yaw),
                                        0.0], dtype=torch.float64)
                    posed = skin_pose(model, rest + off, p.phi_raw.detach(),
                                      rot, p.global_trans.detach())
                    buf = render(state.camera(), model, posed,
                                 texture=state.texture, params=p)
                    name = f"yaw{yaw:+07.2f}_pitch{pitch:+07.2f}.png"
                    write_png(os.path.join(pose_dir, name), buf.rgb)
                    strip.append(_npy(buf.rgb))
            strip_img = torch.as_tensor(np.concatenate(strip, axis=1))
            write_png(os.path.join(args.out, f"strip{f.index:04d}.png"),
                      strip_img)
    n = len(yaws) * len(pitches)
    print(f"rendered {n} frames per validation pose into {args.out}")
    return 0


_TABLE_ROWS = (
    ("Normal: template", "normal_template", "deg"),
    ("Normal: ours", "normal_ours", "deg"),
    ("Hausdorff (face): template", "hausdorff_face_template", "mm"),
    ("Hausdorff (face): ours", "hausdorff_face_ours", "mm"),
    ("Hausdorff (full): template", "hausdorff_full_template", "mm"),
    ("Hausdorff (full): ours", "hausdorff_full_ours", "mm"),
)


def format_table(averages: dict) -> str:
    label_w = max(len(label) for label, _, _ in _TABLE_ROWS)
    lines = []
    for label, key, unit in _TABLE_ROWS:
        lines.append(f"{label:<{label_w}}  {averages[key]:>10.4f} {unit}")
    return "\n".join(lines)


def _evaluate_state(state: AvatarState, ds, frames, subject: str,
                    split: str) -> MetricReport:
    report = MetricReport(subject=subject, split=split)
    model = state.model
    cam = state.camera()
    with torch.no_grad():
        for f in frames:
            posed_t, _, _ = state.posed(f.index, with_offsets=False)
            posed_o, _, _ = state.posed(f.index, with_offsets=True)
            for tag, posed in (("template", posed_t), ("ours", posed_o)):
                buf = render(cam, model, posed, params=state.params(f.index))
                mask = f.mask & (_npy(buf.face_id) >= 0)
                report.add(f"normal_{tag}",
                           normal_angular_error(_npy(buf.normal), f.normal,
                                                mask))
                for region in ("face", "full"):
                    h = hausdorff_stats(model.template, f.mesh, region=region,
                                        pred_vertices=_npy(posed))
                    report.add(f"hausdorff_{region}_{tag}", h["mean_mm"])
            buf = render(cam, model, posed_o, texture=state.texture,
                         params=state.params(f.index))
            report.add("l1_ours", photometric_scores(f.rgb, _npy(buf.rgb),
                                                     f.mask)["l1"])
    return report


def _evaluate_gt(ds, frames, subject: str, split: str) -> MetricReport:
    """Self-check: the dataset's own ground truth scored against itself."""
    report = MetricReport(subject=subject, split=split)
    for f in frames:
        for tag in ("template", "ours"):
            report.add(f"normal_{tag}",
                       normal_angular_error(f.normal, f.normal, f.mask))
            for region in ("face", "full"):
                h = hausdorff_stats(f.mesh, f.mesh, region=region)
                # mesh vs itself: every sampled point lies on the surface
                report.add(f"hausdorff_{region}_{tag}", h["mean_mm"])
        report.add("l1_ours", photometric_scores(f.rgb, f.rgb, f.mask)["l1"])
    return report


def cmd_evaluate(args) -> int:
    ds = synth.load_dataset(_require_dir(args.data, "dataset"))
    subject = os.path.basename(args.data.rstrip("/"))
    frames = ds.val_frames if args.split == "val" else ds.train_frames
    if args.checkpoint is None:
        report = _evaluate_gt(ds, frames, subject, args.split)
    else:
        state, ds = _load_state(args.checkpoint, args.data)
        frames = ds.val_frames if args.split == "val" else ds.train_frames
        report = _evaluate_state(state, ds, frames, subject, args.split)
    table = format_table(report.averages())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatarfit",
        description="Neural head avatar fitting on synthetic sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=synth.HAIR_STYLES, default="short_hair")
    p.add_argument("--train-frames", type=int, default=20)
    p.add_argument("--val-frames", type=int, default=10)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--subject-resolution", type=int, default=560)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("fit", help="run the full staged fit")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--template-seed", type=int, default=42)
    p.add_argument("--template-resolution", type=int, default=700)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refit",
                       help="refit pose/expression of held-out frames")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_refit)

    p = sub.add_parser("render", help="novel-view sweeps per validation pose")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--yaw", default="-45:45:15")
    p.add_argument("--pitch", default="0")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate",
                       help="metric report (omit --checkpoint for the "
                            "ground-truth self-check)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _join_range_flags(argv):
    """Fold `--yaw -45:45:15` into `--yaw=-45:45:15` so argparse does not
    mistake the leading minus for a new option."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--yaw", "--pitch") and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(_join_range_flags(list(argv)))
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (synth.DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
