"""3D rotary position embedding with task-dependent reference offsets.

The head dimension is split into ``d/2`` rotary pairs ``(x[2j], x[2j+1])``.
The first ``P_T`` pairs rotate with the frame index, the next ``P_H`` with
the row index, the last ``P_W`` with the column index. Within an axis that
owns ``P`` pairs, pair ``j`` uses frequency ``base ** (-j / P)``.

Reference tokens are placed on the target's coordinate frame with an integer
offset: temporal tasks sit to the right of the target (width offset
``w_tgt``), appearance tasks sit after it in time (frame offset ``f_tgt``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .latents import TaskSpec


def default_partition(head_dim: int) -> tuple[int, int, int]:
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    pairs = head_dim // 2
    third = pairs // 3
    return (pairs - 2 * third, third, third)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    pair_partition: tuple[int, int, int] | None = None  # (P_T, P_H, P_W)
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 or self.head_dim <= 0:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.pair_partition is None:
            object.__setattr__(self, "pair_partition", default_partition(self.head_dim))
        part = tuple(int(p) for p in self.pair_partition)
        if len(part) != 3 or min(part) < 0 or sum(part) != self.head_dim // 2:
            raise ValueError(
                f"pair partition {part} must be three non-negative counts summing to "
                f"head_dim/2 = {self.head_dim // 2}"
            )
        object.__setattr__(self, "pair_partition", part)

    def pair_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pair (axis index into (t, h, w), frequency) arrays, both length d/2."""
        axes, freqs = [], []
        for axis, count in enumerate(self.pair_partition):
            for j in range(count):
                axes.append(axis)
                freqs.append(self.base ** (-j / count))
        return np.array(axes, dtype=int), np.array(freqs, dtype=np.float64)


@dataclass(frozen=True)
class PositionBias:
    """Offsets ``(dT, dW, dH)`` in latent-grid units; note width comes before height."""

    delta: tuple[int, int, int] = (0, 0, 0)

    @property
    def frames(self) -> int:
        return self.delta[0]

    @property
    def width(self) -> int:
        return self.delta[1]

    @property
    def height(self) -> int:
        return self.delta[2]

    def as_list(self) -> list[int]:
        return [int(x) for x in self.delta]


TARGET_BIAS = PositionBias((0, 0, 0))


def task_bias(task, f_tgt: int, w_tgt: int) -> PositionBias:
    task = TaskSpec.parse(task)
    if task.is_appearance:
        return PositionBias((int(f_tgt), 0, 0))
    return PositionBias((0, int(w_tgt), 0))


def position_grid(f: int, h: int, w: int, bias: PositionBias = TARGET_BIAS) -> np.ndarray:
    """Integer ``(t, h, w)`` coordinates, one row per token, row-major over (frame, height, width)."""
    if min(f, h, w) < 1:
        raise ValueError(f"grid extents must be positive, got {(f, h, w)}")
    t_idx, h_idx, w_idx = np.meshgrid(np.arange(f), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([t_idx.ravel(), h_idx.ravel(), w_idx.ravel()], axis=1)
    return coords + np.array([bias.frames, bias.height, bias.width])


def placement_canvas_coords(task, tgt_grid, ref_grid) -> np.ndarray:
    """Reference coordinates obtained by literally laying both clips out on one canvas.

    Temporal tasks: a side-by-side canvas ``[target | reference]`` along width.
    Appearance tasks: a sequential canvas ``[target ; reference]`` along time.
    The reference tokens are then read back from their canvas cells. This is
    an independent route to the same coordinates :func:`task_bias` produces.
    """
    task = TaskSpec.parse(task)
    ft, ht, wt = tgt_grid
    fr, hr, wr = ref_grid
    if task.is_appearance:
        canvas = position_grid(ft + fr, max(ht, hr), max(wt, wr))
        keep = (canvas[:, 0] >= ft) & (canvas[:, 1] < hr) & (canvas[:, 2] < wr)
    else:
        canvas = position_grid(max(ft, fr), max(ht, hr), wt + wr)
        keep = (canvas[:, 0] < fr) & (canvas[:, 1] < hr) & (canvas[:, 2] >= wt)
    return canvas[keep]


def rope_angles(coords: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle per (token, pair), shape ``[tokens, d/2]``, in 64-bit."""
    axes, freqs = cfg.pair_tables()
    coords = np.asarray(coords, dtype=np.float64)
    return coords[:, axes] * freqs[None, :]


def rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate pairs ``(x[2j], x[2j+1])`` of ``x[tokens, heads, d]`` by ``angles[tokens, d/2]``."""
    x = np.asarray(x)
    cos = np.cos(angles).astype(x.dtype)[:, None, :]
    sin = np.sin(angles).astype(x.dtype)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: np.ndarray, coords: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected [tokens, heads, d], got shape {x.shape}")
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"head dim {x.shape[-1]} does not match rope config {cfg.head_dim}")
    coords = np.asarray(coords)
    if coords.shape != (x.shape[0], 3):
        raise ValueError(f"coords shape {coords.shape} does not match {x.shape[0]} tokens")
    return nx.check_finite(rotate_pairs(x, rope_angles(coords, cfg)), "apply_rope")
