"""Dense and bit-packed tensors.

Dense tensors are plain numpy arrays in row-major order with channels
major within each frame: ``(C, H, W)`` for one frame, ``(N, C, H, W)`` for a
batch or a time stack.  Default precision is float32; float64 is used for
gradient checking.

A :class:`BitTensor` stores a {-1, +1} array packed into 64-bit words along
one axis (the channel axis for activations and weights).  Bit 1 means +1,
bit 0 means -1.  Lanes past the logical length in the last word are always
1 (+1), so an XNOR of two padded rows matches on every padding lane and the
count of those lanes is subtracted in :func:`signed_dot`.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple

import numpy as np

LANES = 64
PAD_BIT = 1

DTN_MAGIC = b"DTN1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def n_words(lanes: int) -> int:
    return (lanes + LANES - 1) // LANES


@dataclass(frozen=True)
class BitTensor:
    """Channel-packed 1-bit tensor.

    ``words`` has the logical shape with ``axis`` removed and a trailing word
    axis of length ``ceil(valid_lanes / 64)`` appended.
    """

    words: np.ndarray
    logical_shape: tuple[int, ...]
    axis: int
    valid_lanes: int

    @property
    def pad_lanes(self) -> int:
        return self.words.shape[-1] * LANES - self.valid_lanes


def pack(x: np.ndarray, axis: int = -3) -> BitTensor:
    """Pack a {-1, +1} array along ``axis`` into 64-lane words."""
    x = np.asarray(x)
    bad = np.argwhere((x != 1) & (x != -1))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ValueError(f"pack: element at index {idx} is {x[idx]!r}, expected -1 or +1")
    axis = axis % x.ndim
    lanes = x.shape[axis]
    bits = np.moveaxis(x > 0, axis, -1)
    pad = n_words(lanes) * LANES - lanes
    if pad:
        fill = np.full(bits.shape[:-1] + (pad,), bool(PAD_BIT))
        bits = np.concatenate([bits, fill], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitTensor(words, tuple(x.shape), axis, lanes)


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    raw = np.ascontiguousarray(b.words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., : b.valid_lanes]
    out = np.where(bits.astype(bool), 1, -1).astype(dtype)
    return np.moveaxis(out, -1, b.axis)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_popcount(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matching-bit count summed over the trailing word axis (broadcasting)."""
    return popcount(~(a ^ b)).sum(axis=-1, dtype=np.int64)


def signed_dot(a: np.ndarray | BitTensor, b: np.ndarray | BitTensor, n: int) -> np.ndarray:
    """Exact +-1 dot product of packed rows: ``2 * matches - n``.

    ``a`` and ``b`` are word arrays (or BitTensors) whose trailing axis holds
    ``ceil(n / 64)`` words; leading axes broadcast.
    """
    if isinstance(a, BitTensor):
        if a.valid_lanes != n:
            raise ValueError(f"signed_dot: operand a has {a.valid_lanes} lanes, expected {n}")
        a = a.words
    if isinstance(b, BitTensor):
        if b.valid_lanes != n:
            raise ValueError(f"signed_dot: operand b has {b.valid_lanes} lanes, expected {n}")
        b = b.words
    nw = n_words(n)
    if a.shape[-1] != nw or b.shape[-1] != nw:
        raise ValueError(
            f"signed_dot: {n} lanes need {nw} words, got {a.shape[-1]} and {b.shape[-1]}"
        )
    pad_matches = nw * LANES - n
    return 2 * (xnor_popcount(a, b) - pad_matches) - n


class ChannelStats(NamedTuple):
    mean_abs: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def channel_stats(a: np.ndarray) -> ChannelStats:
    """Per-channel mean |a|, mean and population std over the spatial axes.

    Works on ``(C, H, W)`` or ``(N, C, H, W)``; results have the shape of
    the input without its last two axes.
    """
    a = np.asarray(a)
    if a.ndim < 3 or a.shape[-1] * a.shape[-2] == 0:
        raise ValueError(f"channel_stats: need a non-empty spatial extent, got shape {a.shape}")
    mean = a.mean(axis=(-2, -1))
    std = np.sqrt(((a - mean[..., None, None]) ** 2).mean(axis=(-2, -1)))
    return ChannelStats(np.abs(a).mean(axis=(-2, -1)), mean, std)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: non-finite values")
    return x


# --- DTN1 files -------------------------------------------------------------


def write_dtn(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    f.write(DTN_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"DTN1: truncated while reading {what} ({len(buf)} of {n} bytes)")
    return buf


def read_dtn(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != DTN_MAGIC:
        raise ValueError(f"DTN1: bad magic {magic!r}, expected {DTN_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
    (code,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
    if code not in _CODE_DTYPES:
        raise ValueError(f"DTN1: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(f, count * dtype.itemsize, "elements")
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)


def dtn_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_dtn(buf, arr)
    return buf.getvalue()


def dtn_from_bytes(data: bytes) -> np.ndarray:
    return read_dtn(io.BytesIO(data))
