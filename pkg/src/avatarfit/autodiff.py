"""Named parameter blocks, reverse-mode gradients and the two optimizers.

Gradient recording is delegated to torch autograd in 64-bit precision; this
module owns the surface the rest of the code talks to: registries of named
blocks, a tape object binding a scalar root to those blocks, Adam/SGD steps
with the frame-agnostic/frame-specific split, and a finite-difference
verification harness.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import arrayio

FRAME_AGNOSTIC = "frame_agnostic"
FRAME_SPECIFIC = "frame_specific"


class OptimError(RuntimeError):
    pass


class ParamBlock:
    """One named dense parameter array with its gradient buffer."""

    def __init__(self, name, values, trainable=True, group=FRAME_AGNOSTIC,
                 texture_related=False):
        if group not in (FRAME_AGNOSTIC, FRAME_SPECIFIC):
            raise ValueError(f"unknown group {group!r}")
        self.name = name
        self.values = torch.as_tensor(
            np.asarray(values, dtype=np.float64)
        ).clone().requires_grad_(True)
        self.grad = torch.zeros_like(self.values)
        self.trainable = trainable
        self.group = group
        self.texture_related = texture_related

    @property
    def shape(self):
        return tuple(self.values.shape)

    def zero_grad(self):
        self.grad.zero_()

    def detach_copy(self) -> np.ndarray:
        return self.values.detach().numpy().copy()

    def set_values(self, values):
        with torch.no_grad():
            self.values.copy_(torch.as_tensor(np.asarray(values, dtype=np.float64)))

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.shape}, group={self.group})"


class ParamRegistry:
    """Ordered collection of uniquely named blocks."""

    def __init__(self):
        self._blocks: dict[str, ParamBlock] = {}

    def add(self, block: ParamBlock) -> ParamBlock:
        if block.name in self._blocks:
            raise ValueError(f"duplicate block name {block.name!r}")
        self._blocks[block.name] = block
        return block

    def new(self, name, values, **kwargs) -> ParamBlock:
        return self.add(ParamBlock(name, values, **kwargs))

    def __getitem__(self, name) -> ParamBlock:
        return self._blocks[name]

    def __contains__(self, name) -> bool:
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks.values())

    def __len__(self):
        return len(self._blocks)

    def names(self):
        return list(self._blocks)

    def select(self, group=None, trainable=None, prefix=None):
        out = []
        for b in self:
            if group is not None and b.group != group:
                continue
            if trainable is not None and b.trainable != trainable:
                continue
            if prefix is not None and not b.name.startswith(prefix):
                continue
            out.append(b)
        return out

    def zero_grad(self):
        for b in self:
            b.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {b.name: b.detach_copy() for b in self}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for b in self:
            if b.name not in arrays:
                raise KeyError(f"missing block {b.name!r} in checkpoint")
            b.set_values(arrays[b.name])


class ParamTape:
    """Binds a recorded scalar objective to the blocks it depends on."""

    def __init__(self, root: torch.Tensor, blocks):
        self.root = root
        self.blocks = list(blocks)

    def backward(self):
        backward(self)


def backward(tape: ParamTape):
    """Accumulate d(root)/d(block) into each block's grad buffer.

    Blocks are visited in registration order so accumulation is
    deterministic. Blocks the root does not depend on receive zero.
    """
    if tape.root.dim() != 0:
        raise ValueError("tape root must be a scalar")
    grads = torch.autograd.grad(
        tape.root, [b.values for b in tape.blocks], retain_graph=False,
        allow_unused=True,
    )
    for block, g in zip(tape.blocks, grads):
        if g is not None:
            block.grad.add_(g)


@dataclass
class AdamState:
    """First/second moment buffers per block name, plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"adam_step": np.array(float(self.step))}
        for name, t in self.m.items():
            out["adam_m." + name] = t.numpy().copy()
        for name, t in self.v.items():
            out["adam_v." + name] = t.numpy().copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(step=int(np.asarray(arrays.get("adam_step", 0)).item()))
        for key, arr in arrays.items():
            if key.startswith("adam_m."):
                state.m[key[len("adam_m."):]] = torch.as_tensor(arr.copy())
            elif key.startswith("adam_v."):
                state.v[key[len("adam_v."):]] = torch.as_tensor(arr.copy())
        return state


def adam_step(blocks, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999,
              eps=1e-8, weight_decay=0.0):
    """Standard Adam with bias correction; decoupled weight decay is applied
    only to blocks flagged texture_related."""
    blocks = [b for b in blocks if b.trainable]
    for b in blocks:
        if not torch.isfinite(b.grad).all():
            raise OptimError(f"non-finite gradient in block {b.name!r}; step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for b in blocks:
            m = state.m.setdefault(b.name, torch.zeros_like(b.values))
            v = state.v.setdefault(b.name, torch.zeros_like(b.values))
            m.mul_(beta1).add_(b.grad, alpha=1 - beta1)
            v.mul_(beta2).add_(b.grad * b.grad, alpha=1 - beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + eps)
            b.values.add_(update, alpha=-lr)
            if weight_decay and b.texture_related:
                b.values.mul_(1.0 - lr * weight_decay)


def sgd_step(blocks, lr):
    blocks = [b for b in blocks if b.trainable]
    for b in blocks:
        if not torch.isfinite(b.grad).all():
            raise OptimError(f"non-finite gradient in block {b.name!r}; step rejected")
    with torch.no_grad():
        for b in blocks:
            b.values.add_(b.grad, alpha=-lr)


def gradcheck(objective, blocks, step=1e-6, tolerance=1e-4, max_coords=24, seed=0):
    """Compare reverse-mode gradients against central differences.

    ``objective`` is a nullary callable returning a scalar tensor built from
    the current block values. Large blocks are subsampled. Returns a report
    dict: block name -> {"max_rel_err", "passed", "n_checked"}.
    """
    blocks = list(blocks)
    rng = np.random.default_rng(seed)
    for b in blocks:
        b.zero_grad()
    root = objective()
    ParamTape(root, blocks).backward()
    analytic = {b.name: b.grad.numpy().copy() for b in blocks}

    report = {}
    for b in blocks:
        n = int(np.prod(b.shape)) if b.shape else 1
        idx = np.arange(n)
        if n > max_coords:
            idx = rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        flat = b.values.detach().numpy().reshape(-1)
        for i in idx:
            orig = flat[i]
            with torch.no_grad():
                b.values.view(-1)[i] = orig + step
            fp = float(objective().detach())
            with torch.no_grad():
                b.values.view(-1)[i] = orig - step
            fm = float(objective().detach())
            with torch.no_grad():
                b.values.view(-1)[i] = orig
            fd = (fp - fm) / (2 * step)
            an = analytic[b.name].reshape(-1)[i]
            scale = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / scale)
        report[b.name] = {
            "max_rel_err": worst,
            "passed": worst <= tolerance,
            "n_checked": len(idx),
        }
    return report


def save_checkpoint(directory, registry: ParamRegistry, adam_state: AdamState | None = None,
                    extra: dict | None = None):
    arrays = registry.state_arrays()
    if adam_state is not None:
        arrays.update(adam_state.arrays())
    arrayio.save_arrays(directory, arrays)
    if extra:
        arrayio.save_keyvalues(os.path.join(directory, "meta.txt"), extra)


def load_checkpoint(directory, registry: ParamRegistry):
    arrays = arrayio.load_arrays(directory)
    registry.load_state_arrays(arrays)
    adam_state = AdamState.from_arrays(arrays)
    meta_path = os.path.join(directory, "meta.txt")
    meta = arrayio.load_keyvalues(meta_path) if os.path.isfile(meta_path) else {}
    return adam_state, meta
