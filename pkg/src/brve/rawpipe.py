"""Raw-domain data path: Bayer packing, amplification, synthetic sequences, metrics."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import read_dtn, write_dtn

RSQ_MAGIC = b"RSQ1"
PSNR_INF = math.inf
SSIM_K1, SSIM_K2, SSIM_WIN = 0.01, 0.03, 7


@dataclass
class RawSequence:
    """Bayer frames ``(T, H, W)`` normalized to [0, 1]."""

    frames: np.ndarray
    pattern: str = "RGGB"
    black_level: int = 0
    white_level: int = 1023
    ratio: float = 1.0  # amplification r

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got {self.frames.shape}")
        t, h, w = self.frames.shape
        if h % 2 or w % 2:
            raise ValueError(f"Bayer frames need even dims, got {h}x{w}")
        if len(self.pattern) != 4:
            raise ValueError(f"pattern tag must have 4 characters, got {self.pattern!r}")

    def packed(self) -> np.ndarray:
        return pack_bayer(self.frames)


@dataclass(frozen=True)
class NoiseParams:
    gain: float = 1000.0  # photons per unit signal at full exposure
    sigma: float = 0.002  # read noise, signal units
    ratio: float = 0.1  # exposure darkening factor

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")


@dataclass(frozen=True)
class MotionSpec:
    """Moving objects with constant integer velocity in pixels/frame."""

    n_objects: int = 3
    velocity: tuple[int, int] | None = None  # fixed (vx, vy) for every object
    max_speed: int = 2
    camera: tuple[int, int] = (0, 0)


# --- Bayer ------------------------------------------------------------------


def pack_bayer(frame: np.ndarray) -> np.ndarray:
    """``(..., H, W)`` -> ``(..., 4, H/2, W/2)``: top-left, top-right, bottom-left, bottom-right."""
    h, w = frame.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"pack_bayer: dims must be even, got {h}x{w}")
    return np.stack(
        [frame[..., 0::2, 0::2], frame[..., 0::2, 1::2], frame[..., 1::2, 0::2], frame[..., 1::2, 1::2]],
        axis=-3,
    )


def unpack_bayer(packed: np.ndarray) -> np.ndarray:
    if packed.shape[-3] != 4:
        raise ValueError(f"unpack_bayer: expected 4 channels, got {packed.shape[-3]}")
    h, w = packed.shape[-2:]
    out = np.empty(packed.shape[:-3] + (2 * h, 2 * w), dtype=packed.dtype)
    out[..., 0::2, 0::2] = packed[..., 0, :, :]
    out[..., 0::2, 1::2] = packed[..., 1, :, :]
    out[..., 1::2, 0::2] = packed[..., 2, :, :]
    out[..., 1::2, 1::2] = packed[..., 3, :, :]
    return out


def amplify(x: np.ndarray, r: float) -> np.ndarray:
    """Linear brightening with saturation at 1."""
    if r < 1:
        raise ValueError(f"amplification ratio must be >= 1, got {r}")
    return np.clip(np.asarray(x) * r, 0.0, 1.0).astype(np.asarray(x).dtype)


def normalize(raw: np.ndarray, black: int, white: int) -> np.ndarray:
    return np.clip((raw.astype(np.float64) - black) / (white - black), 0.0, 1.0)


# --- synthetic scenes -------------------------------------------------------


def _scene_objects(rng: np.random.Generator, motion: MotionSpec, h: int, w: int):
    objs = []
    for _ in range(motion.n_objects):
        if motion.velocity is not None:
            v = motion.velocity
        else:
            v = tuple(int(c) for c in rng.integers(-motion.max_speed, motion.max_speed + 1, 2))
        objs.append(
            {
                "kind": "disk" if rng.random() < 0.5 else "rect",
                "cx": float(rng.uniform(0, w)),
                "cy": float(rng.uniform(0, h)),
                "size": float(rng.uniform(0.1, 0.3) * min(h, w)),
                "level": float(rng.uniform(0.05, 0.95)),
                "v": v,
            }
        )
    return objs


def object_mask(obj: dict, k: int, h: int, w: int) -> np.ndarray:
    """Boolean footprint of ``obj`` in frame ``k`` (integer translation per frame)."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx = obj["cx"] + obj["v"][0] * k
    cy = obj["cy"] + obj["v"][1] * k
    s = obj["size"] / 2
    if obj["kind"] == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= s * s
    return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)


def synth_clean(seed: int, t: int, h: int, w: int, motion: MotionSpec | None = None):
    """Clean Bayer sequence ``(T, H, W)`` and the object list used to draw it."""
    if h % 2 or w % 2 or t < 1:
        raise ValueError(f"synth: need T >= 1 and even H, W; got {t}, {h}, {w}")
    motion = motion or MotionSpec()
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy, g0 = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.3, 0.6)
    # per-site colour gains of the 2x2 mosaic
    cfa = rng.uniform(0.6, 1.0, 4)
    objs = _scene_objects(rng, motion, h, w)
    frames = np.empty((t, h, w))
    cam_x, cam_y = motion.camera
    for k in range(t):
        base = g0 + gx * (xx + cam_x * k / max(h, w)) + gy * (yy + cam_y * k / max(h, w))
        img = np.clip(base, 0.02, 0.98)
        for obj in objs:
            img = np.where(object_mask(obj, k, h, w), obj["level"], img)
        mosaic = img.copy()
        mosaic[0::2, 0::2] *= cfa[0]
        mosaic[0::2, 1::2] *= cfa[1]
        mosaic[1::2, 0::2] *= cfa[2]
        mosaic[1::2, 1::2] *= cfa[3]
        frames[k] = mosaic
    return frames, objs


def add_noise(clean: np.ndarray, noise: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Poisson-Gaussian capture of ``clean`` darkened by ``noise.ratio``."""
    photons = rng.poisson(clean * noise.ratio * noise.gain)
    noisy = photons / noise.gain + rng.normal(0.0, noise.sigma, clean.shape)
    return np.clip(noisy, 0.0, 1.0)


def synth_sequence(
    seed: int,
    t: int,
    h: int,
    w: int,
    motion: MotionSpec | None = None,
    noise: NoiseParams | None = None,
) -> tuple[RawSequence, RawSequence]:
    """Deterministic (noisy low-light, clean) Bayer pair.

    The noisy sequence carries ``ratio = 1 / noise.ratio`` as its
    amplification factor; it is not amplified here.
    """
    noise = noise or NoiseParams()
    clean, _ = synth_clean(seed, t, h, w, motion)
    rng = np.random.default_rng([seed, 1])
    noisy = add_noise(clean, noise, rng)
    return (
        RawSequence(noisy.astype(np.float32), ratio=1.0 / noise.ratio),
        RawSequence(clean.astype(np.float32), ratio=1.0),
    )


def training_pair(seed: int, t: int, patch: int, noise: NoiseParams | None = None, motion=None):
    """Packed, amplified ``(T, 4, patch/2, patch/2)`` input and clean target."""
    noisy, clean = synth_sequence(seed, t, patch, patch, motion, noise)
    return amplify(noisy.packed(), noisy.ratio), clean.packed()


# --- metrics ----------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    return PSNR_INF if mse == 0 else float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels of ``(4, H, W)`` (or ``(H, W)``) images in [0, 1].

    7x7 uniform window, K1 = 0.01, K2 = 0.03, population (co)variances,
    averaged over valid window positions.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    vals = []
    win = min(SSIM_WIN, a.shape[-1], a.shape[-2])
    r = win // 2
    for x, y in zip(a, b):
        f = lambda z: uniform_filter(z, size=win, mode="reflect")[r : z.shape[0] - r, r : z.shape[1] - r]
        mx, my = f(x), f(y)
        vx = f(x * x) - mx * mx
        vy = f(y * y) - my * my
        cov = f(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def sequence_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


def sequence_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([ssim(x, y) for x, y in zip(a, b)]))


# --- RSQ1 container ---------------------------------------------------------


def save_rsq(seq: RawSequence, path) -> None:
    """``RSQ1`` | u32 T, H, W | 4-byte pattern | u32 black, white | f64 r | DTN1 per frame."""
    t, h, w = seq.frames.shape
    buf = io.BytesIO()
    buf.write(RSQ_MAGIC)
    buf.write(struct.pack("<III", t, h, w))
    buf.write(seq.pattern.encode("ascii"))
    buf.write(struct.pack("<IId", seq.black_level, seq.white_level, seq.ratio))
    for frame in seq.frames:
        write_dtn(buf, frame)
    Path(path).write_bytes(buf.getvalue())


def load_rsq(path) -> RawSequence:
    f = io.BytesIO(Path(path).read_bytes())
    magic = f.read(4)
    if magic != RSQ_MAGIC:
        raise ValueError(f"{path}: not an RSQ1 file (magic {magic!r}, expected {RSQ_MAGIC!r})")
    head = f.read(12 + 4 + 16)
    if len(head) != 32:
        raise ValueError(f"{path}: truncated RSQ1 header")
    t, h, w = struct.unpack("<III", head[:12])
    pattern = head[12:16].decode("ascii")
    black, white, ratio = struct.unpack("<IId", head[16:])
    frames = [read_dtn(f) for _ in range(t)]
    if any(fr.shape != (h, w) for fr in frames):
        raise ValueError(f"{path}: frame shape does not match header {h}x{w}")
    return RawSequence(np.stack(frames), pattern, black, white, ratio)
