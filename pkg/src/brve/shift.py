"""Spatial-temporal shift over a three-frame window.

Each feature ``(C, H, W)`` (or ``(N, C, H, W)``) is split into a kept half and
a shifted half.  The shifted halves rotate one position in time (forward or
backward), are cut into 24 channel slices, and each slice is translated by
one offset of :data:`SHIFT_KERNEL` with zero fill.  The fused output per
frame is ``concat(kept, spatially shifted, temporally shifted)``.

Offsets are ``(x, y)`` = (horizontal, vertical).  A positive ``x`` moves
content right: ``out[..., i, j] = in[..., i - y, j - x]``.
"""
from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

SHIFT_STEPS = (-8, -4, 0, 4, 8)
# row-major over the 5x5 grid (y outer, x inner), centre skipped
SHIFT_KERNEL: tuple[tuple[int, int], ...] = tuple(
    (x, y) for y in SHIFT_STEPS for x in SHIFT_STEPS if (x, y) != (0, 0)
)


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


# forward:  (A, B, C) -> (C, A, B); backward: (A, B, C) -> (B, C, A)
_PERM = {Direction.FORWARD: (2, 0, 1), Direction.BACKWARD: (1, 2, 0)}


def level_direction(level: int) -> Direction:
    return Direction.FORWARD if level % 2 == 0 else Direction.BACKWARD


def temporal_perm(direction: Direction | str) -> tuple[int, int, int]:
    """Source index for each output position of the cyclic shift."""
    return _PERM[Direction(direction)]


def split_half(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = f.shape[-3]
    if c % 2:
        raise ValueError(f"split_half: channel count {c} is odd")
    return f[..., : c // 2, :, :], f[..., c // 2 :, :, :]


def cyclic_temporal_shift(parts: Sequence[np.ndarray], direction: Direction | str) -> list[np.ndarray]:
    if len(parts) != 3:
        raise ValueError(f"cyclic_temporal_shift: expected 3 features, got {len(parts)}")
    return [parts[i] for i in temporal_perm(direction)]


def slice_sizes(channels: int, n_slices: int = len(SHIFT_KERNEL)) -> list[int]:
    """Equal slices; the remainder goes one channel each to the leading slices."""
    q, r = divmod(channels, n_slices)
    return [q + (1 if j < r else 0) for j in range(n_slices)]


def translate(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move content by (dx, dy) pixels over the last two axes, zero fill."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = a[..., src_y, src_x]
    return out


def spatial_shift(s: np.ndarray, kernel: Sequence[tuple[int, int]] = SHIFT_KERNEL) -> np.ndarray:
    out = np.empty_like(s)
    start = 0
    for (dx, dy), size in zip(kernel, slice_sizes(s.shape[-3], len(kernel))):
        sl = slice(start, start + size)
        out[..., sl, :, :] = translate(s[..., sl, :, :], dx, dy)
        start += size
    return out


def spatial_shift_adjoint(g: np.ndarray, kernel: Sequence[tuple[int, int]] = SHIFT_KERNEL) -> np.ndarray:
    return spatial_shift(g, [(-dx, -dy) for dx, dy in kernel])


def st_shift_window(
    window: Sequence[np.ndarray],
    direction: Direction | str,
    kernel: Sequence[tuple[int, int]] = SHIFT_KERNEL,
) -> list[np.ndarray]:
    """Fuse a ``(F_{t-1}, F_t, F_{t+1})`` window into three ``3C/2``-channel features."""
    if len(window) != 3:
        raise ValueError(f"st_shift_window: expected 3 features, got {len(window)}")
    shape = window[0].shape
    if any(f.shape != shape for f in window):
        raise ValueError(f"st_shift_window: mismatched shapes {[f.shape for f in window]}")
    kept, moving = zip(*(split_half(f) for f in window))
    shifted = cyclic_temporal_shift(moving, direction)
    return [
        np.concatenate([f, spatial_shift(s, kernel), s], axis=-3) for f, s in zip(kept, shifted)
    ]
