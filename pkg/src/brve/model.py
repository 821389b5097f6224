"""The three-stage BRVE network.

Stage 1 runs a binary U-Net on every packed frame, stage 2 runs a shift
binary U-Net over sliding three-frame windows with recurrent embeddings, and
stage 3 fuses both feature sets into the enhanced frame.  Only the first
convolution of stage 1 and the last convolution of stage 3 are full
precision (apart from the 1x1 projections inside fusion blocks).

Parameters live in one ordered ``name -> ndarray`` mapping.  The order is
fixed by :meth:`BrveModel.layer_specs` and is the order used in checkpoints.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .binkernels import BinaryConvLayer, DacaParams, FpConv, RPReluParams
from .shift import level_direction
from .tensor import read_dtn, write_dtn

CKPT_MAGIC = b"BRVE1"
CKPT_VERSION = 1
IN_CHANNELS = 4
WINDOW = 3
# Latent binary weights start small: S = mean|W| then keeps each binary
# branch quiet at init so the real-valued residual path carries the input.
BINARY_INIT_GAIN = 2e-4


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 32
    blocks_per_level: int = 2
    window: int = WINDOW
    stride: int = 1
    daca_k: int = 3
    amplification: float = 10.0
    use_daca: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.window != WINDOW:
            raise ValueError(f"window must be {WINDOW}, got {self.window}")
        if self.stride not in (1, 2, 3):
            raise ValueError(f"stride must be 1, 2 or 3, got {self.stride}")
        if self.levels < 1 or self.blocks_per_level < 0:
            raise ValueError("levels must be >= 1 and blocks_per_level >= 0")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even, got {self.base_channels}")
        if self.daca_k < 1 or self.daca_k % 2 == 0:
            raise ValueError(f"daca_k must be odd, got {self.daca_k}")
        if not self.amplification > 0:
            raise ValueError("amplification must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "fp" | "fuse" | "block"
    c_in: int
    c_out: int
    k: int
    level: int
    stage: int


@dataclass
class FlopsReport:
    ops_fp: int
    ops_bin: int
    params_fp: int
    params_bin: int
    frames: int
    per_layer: list = field(default_factory=list, repr=False)

    @property
    def ops_bin_equiv(self) -> float:
        return self.ops_bin / 64

    @property
    def total_flops(self) -> float:
        """Per-frame FLOPs: full-precision ops plus binary ops / 64."""
        return self.ops_fp + self.ops_bin / 64

    @property
    def total_params(self) -> float:
        return self.params_fp + self.params_bin / 32

    def as_dict(self) -> dict:
        return {
            "ops_fp": self.ops_fp,
            "ops_bin": self.ops_bin,
            "ops_bin_equiv": self.ops_bin_equiv,
            "total_flops": self.total_flops,
            "params_fp": self.params_fp,
            "params_bin": self.params_bin,
            "total_params": self.total_params,
            "frames": self.frames,
        }


def _unet_specs(cfg: ModelConfig, prefix: str, stage: int, in_ch: int, shift: bool) -> list[LayerSpec]:
    grow = 1.5 if shift else 1.0
    specs = []
    for lvl in range(cfg.levels):
        w = cfg.width(lvl)
        c_in = in_ch if lvl == 0 else cfg.width(lvl - 1)
        if shift or c_in != w:
            specs.append(LayerSpec(f"{prefix}.enc{lvl}.fuse", "fuse", int(c_in * grow), w, 3, lvl, stage))
        specs += [LayerSpec(f"{prefix}.enc{lvl}.b{i}", "block", w, w, 3, lvl, stage) for i in range(cfg.blocks_per_level)]
    for lvl in range(cfg.levels - 2, -1, -1):
        w = cfg.width(lvl)
        specs.append(LayerSpec(f"{prefix}.dec{lvl}.fuse", "fuse", int(cfg.width(lvl + 1) * grow), w, 3, lvl, stage))
        specs += [LayerSpec(f"{prefix}.dec{lvl}.b{i}", "block", w, w, 3, lvl, stage) for i in range(cfg.blocks_per_level)]
    return specs


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    c = cfg.base_channels
    return (
        [LayerSpec("s1.first", "fp", IN_CHANNELS, c, 3, 0, 1)]
        + _unet_specs(cfg, "s1", 1, c, shift=False)
        + _unet_specs(cfg, "s2", 2, c, shift=True)
        + _unet_specs(cfg, "s3", 3, 2 * c, shift=False)
        + [LayerSpec("s3.last", "fp", c, IN_CHANNELS, 3, 0, 3)]
    )


def _param_shapes(spec: LayerSpec, daca_k: int) -> dict[str, tuple]:
    n, ci, co, k = spec.name, spec.c_in, spec.c_out, spec.k
    if spec.kind == "fp":
        return {f"{n}.weight": (co, ci, k, k), f"{n}.bias": (co,)}
    shapes = {f"{n}.weight": (co, ci, k, k), f"{n}.alpha": (ci,)}
    if spec.kind == "block":
        shapes |= {f"{n}.daca_kernel": (1, 3, daca_k), f"{n}.daca_bias": ()}
    shapes |= {f"{n}.gamma": (co,), f"{n}.zeta": (co,), f"{n}.beta": (co,)}
    if spec.kind == "fuse":
        shapes |= {f"{n}.proj_weight": (co, ci, 1, 1), f"{n}.proj_bias": (co,)}
    return shapes


def n_windows(t: int, stride: int) -> int:
    return math.ceil(t / stride)


class BrveModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = self.param_shapes()
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params

    # --- construction -----------------------------------------------------

    def layer_specs(self) -> list[LayerSpec]:
        return layer_specs(self.config)

    def param_shapes(self) -> dict[str, tuple]:
        out: dict[str, tuple] = {}
        for spec in self.layer_specs():
            out |= _param_shapes(spec, self.config.daca_k)
        return out

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "BrveModel":
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        params: dict[str, np.ndarray] = {}
        for spec in layer_specs(config):
            for name, shape in _param_shapes(spec, config.daca_k).items():
                leaf = name.rsplit(".", 1)[1]
                if leaf == "weight":
                    fan_in = spec.c_in * spec.k * spec.k
                    gain = 1.0 if spec.kind == "fp" else BINARY_INIT_GAIN
                    v = rng.normal(0.0, math.sqrt(gain / fan_in), shape)
                    if spec.name == "s3.last":
                        v = np.zeros(shape)  # residual head starts as the identity
                elif leaf == "proj_weight":
                    v = rng.normal(0.0, math.sqrt(1.0 / spec.c_in), shape)
                elif leaf == "beta":
                    v = np.full(shape, RPReluParams.init(1).beta[0])
                else:
                    v = np.zeros(shape)
                params[name] = np.asarray(v, dtype=dtype)
        return cls(config, params)

    def with_config(self, **changes) -> "BrveModel":
        """Same parameters under a config that differs only in runtime fields."""
        cfg = replace(self.config, **changes)
        params = {k: v.astype(cfg.dtype) for k, v in self.params.items()}
        return BrveModel(cfg, params)

    def copy(self) -> "BrveModel":
        return BrveModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # --- views for inspection ---------------------------------------------

    def binary_layer(self, name: str) -> BinaryConvLayer:
        p = self.params
        daca = (
            DacaParams(p[f"{name}.daca_kernel"], float(p[f"{name}.daca_bias"]))
            if f"{name}.daca_kernel" in p
            else DacaParams.zeros(self.config.daca_k, p[f"{name}.weight"].dtype)
        )
        return BinaryConvLayer(
            p[f"{name}.weight"],
            p[f"{name}.alpha"],
            daca,
            RPReluParams(p[f"{name}.gamma"], p[f"{name}.zeta"], p[f"{name}.beta"]),
        )

    def projection(self, name: str) -> FpConv:
        return FpConv(self.params[f"{name}.proj_weight"], self.params[f"{name}.proj_bias"])

    def binary_layer_names(self) -> list[str]:
        return [s.name for s in self.layer_specs() if s.kind != "fp"]

    # --- forward ----------------------------------------------------------

    def check_frames(self, frames: np.ndarray) -> None:
        if frames.ndim != 4 or frames.shape[1] != IN_CHANNELS or frames.shape[0] < 1:
            raise ValueError(f"frames must be (T >= 1, 4, H, W), got {frames.shape}")
        m = 2 ** (self.config.levels - 1)
        if frames.shape[2] % m or frames.shape[3] % m:
            raise ValueError(f"spatial dims {frames.shape[2:]} must be divisible by {m}; pad the input")

    def variables(self, trainable: bool = False) -> dict[str, ag.Var]:
        return ag.Params((k, ag.Var(v, requires_grad=trainable)) for k, v in self.params.items())

    def forward(self, frames: np.ndarray, stride: int | None = None, backend: str = "dense") -> np.ndarray:
        """Enhance ``(T, 4, H, W)`` packed frames; returns the same shape."""
        with ag.no_grad(), ag.binary_backend(backend):
            out = forward_vars(self, self.variables(), frames, stride)
        return out.value

    def __call__(self, frames, stride=None, backend="dense"):
        return self.forward(frames, stride, backend)

    # --- accounting -------------------------------------------------------

    def count_flops(self, height: int = 128, width: int = 128, frames: int = 100, stride: int | None = None) -> FlopsReport:
        """Analytic op/parameter count; ``height``/``width`` are packed-frame sizes."""
        return count_flops(self, height, width, frames, stride)

    # --- checkpoints ------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path, config: ModelConfig | None = None) -> "BrveModel":
        return load_checkpoint(path, config)


# --- forward implementation ---------------------------------------------------


def _unet(cfg: ModelConfig, p: dict, x: ag.Var, prefix: str, shift: bool) -> ag.Var:
    names = {s.name for s in layer_specs(cfg) if s.name.startswith(prefix + ".")}
    skips = []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = ag.avg_pool2(h)
        if shift:
            h = ag.st_shift(h, level_direction(lvl))
        if f"{prefix}.enc{lvl}.fuse" in names:
            h = ag.binary_fusion_block(h, p, f"{prefix}.enc{lvl}.fuse")
        for i in range(cfg.blocks_per_level):
            h = ag.binary_conv_block(h, p, f"{prefix}.enc{lvl}.b{i}", cfg.use_daca)
        skips.append(h)
    for lvl in range(cfg.levels - 2, -1, -1):
        h = ag.bilinear_up2(h)
        if shift:
            h = ag.st_shift(h, level_direction(lvl))
        h = ag.binary_fusion_block(h, p, f"{prefix}.dec{lvl}.fuse")
        h = ag.add(h, skips[lvl])
        for i in range(cfg.blocks_per_level):
            h = ag.binary_conv_block(h, p, f"{prefix}.dec{lvl}.b{i}", cfg.use_daca)
    return h


def stage1(cfg, p, frames: ag.Var) -> ag.Var:
    h = ag.conv2d(frames, p["s1.first.weight"], p["s1.first.bias"], pad=1, tag="s1.first")
    return _unet(cfg, p, h, "s1", shift=False)


def shift_unet(cfg, p, window: ag.Var) -> ag.Var:
    """One stage-2 pass over a ``(3, C, H, W)`` window."""
    return _unet(cfg, p, window, "s2", shift=True)


def stage3(cfg, p, f1: ag.Var, f2: ag.Var) -> ag.Var:
    """Residual head: returns the correction added to the input frames."""
    h = _unet(cfg, p, ag.concat([f1, f2], axis=1), "s3", shift=False)
    return ag.conv2d(h, p["s3.last.weight"], p["s3.last.bias"], pad=1, tag="s3.last")


def schedule(t: int, stride: int) -> Iterator[tuple[list[int], list[int], list[int]]]:
    """Sliding-window plan.

    Yields ``(new_frames, emitted, carried)`` per window, all as 0-based frame
    indices.  Window ``j`` holds ``3 - stride`` carried embeddings followed by
    ``stride`` new frames (indices ``>= t`` are zero features).  The first
    ``stride`` outputs are emitted, the rest carried.  Indices outside
    ``[0, t)`` are warm-up/padding and are dropped by the caller.  After the
    last window the carried embeddings are flushed as outputs.
    """
    for j in range(n_windows(t, stride)):
        base = j * stride - (WINDOW - stride)
        new = list(range(j * stride, j * stride + stride))
        yield new, [base + i for i in range(stride)], [base + i for i in range(stride, WINDOW)]


def stage2(cfg, p, f1: ag.Var, stride: int) -> ag.Var:
    t = f1.shape[0]
    zero = ag.Var(np.zeros((1,) + f1.shape[1:], dtype=f1.value.dtype))
    carry = [zero] * (WINDOW - stride)
    emitted: dict[int, ag.Var] = {}
    carried_idx: list[int] = []
    for new, emit_idx, carried_idx in schedule(t, stride):
        fresh = [ag.take(f1, slice(f, f + 1)) if f < t else zero for f in new]
        out = shift_unet(cfg, p, ag.concat(carry + fresh, axis=0))
        for pos, f in enumerate(emit_idx):
            if 0 <= f < t:
                emitted[f] = ag.take(out, slice(pos, pos + 1))
        carry = [ag.take(out, slice(pos, pos + 1)) for pos in range(stride, WINDOW)]
    for c, f in zip(carry, carried_idx):
        if 0 <= f < t:
            emitted[f] = c
    return ag.concat([emitted[f] for f in range(t)], axis=0)


def forward_vars(model: BrveModel, p: dict, frames: np.ndarray, stride: int | None = None) -> ag.Var:
    cfg = model.config
    frames = np.asarray(frames, dtype=cfg.dtype)
    model.check_frames(frames)
    stride = cfg.stride if stride is None else stride
    if stride not in (1, 2, 3):
        raise ValueError(f"stride must be 1, 2 or 3, got {stride}")
    x = ag.Var(frames)
    f1 = stage1(cfg, p, x)
    f2 = stage2(cfg, p, f1, stride)
    return ag.add(x, stage3(cfg, p, f1, f2))


# --- FLOPs ------------------------------------------------------------------


def layer_ops(spec: LayerSpec, cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    """(fp MACs, binary MACs) of one layer on one ``h x w`` packed frame."""
    hw = (h >> spec.level) * (w >> spec.level)
    macs = spec.c_in * spec.c_out * spec.k * spec.k * hw
    if spec.kind == "fp":
        return macs, 0
    if spec.kind == "fuse":
        return spec.c_in * spec.c_out * hw, macs
    daca = 3 * cfg.daca_k * spec.c_out if cfg.use_daca else 0
    return daca, macs


def layer_params(spec: LayerSpec, cfg: ModelConfig) -> tuple[int, int]:
    """(full-precision params, binary params); S counts as full precision."""
    weights = spec.c_in * spec.c_out * spec.k * spec.k
    if spec.kind == "fp":
        return weights + spec.c_out, 0
    fp = spec.c_in + 4 * spec.c_out  # alpha, gamma, zeta, beta, S
    if spec.kind == "block":
        fp += 3 * cfg.daca_k + 1
    else:
        fp += spec.c_in * spec.c_out + spec.c_out
    return fp, weights


def count_flops(model_or_cfg, height: int, width: int, frames: int = 100, stride: int | None = None) -> FlopsReport:
    cfg = model_or_cfg.config if isinstance(model_or_cfg, BrveModel) else model_or_cfg
    stride = cfg.stride if stride is None else stride
    passes = {1: frames, 2: WINDOW * n_windows(frames, stride), 3: frames}
    ops_fp = ops_bin = p_fp = p_bin = 0
    per_layer = []
    for spec in layer_specs(cfg):
        f, b = layer_ops(spec, cfg, height, width)
        k = passes[spec.stage]
        ops_fp += f * k
        ops_bin += b * k
        pf, pb = layer_params(spec, cfg)
        p_fp += pf
        p_bin += pb
        per_layer.append((spec.name, f, b, pf, pb))
    # per-frame averages over the whole sequence
    return FlopsReport(ops_fp / frames, ops_bin / frames, p_fp, p_bin, frames, per_layer)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(model: BrveModel, path) -> None:
    """Write ``BRVE1`` | u16 version | sha256(config) | u32 len + config JSON |
    u32 count | per parameter: u16 len + name, DTN1 payload."""
    cfg_json = model.config.canonical().encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(model.config.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_dtn(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def _take(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path, config: ModelConfig | None = None) -> BrveModel:
    f = io.BytesIO(Path(path).read_bytes())
    magic = f.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise ValueError(f"not a BRVE checkpoint: magic {magic!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack("<H", _take(f, 2, "version"))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}, expected {CKPT_VERSION}")
    digest = _take(f, 32, "config digest")
    (n,) = struct.unpack("<I", _take(f, 4, "config length"))
    stored = ModelConfig.from_dict(json.loads(_take(f, n, "config")))
    if stored.digest() != digest:
        raise ValueError("checkpoint config does not match its stored digest")
    if config is not None and config.digest() != digest:
        raise ValueError("checkpoint config digest does not match the requested config")
    (count,) = struct.unpack("<I", _take(f, 4, "parameter count"))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _take(f, 2, "name length"))
        name = _take(f, ln, "name").decode()
        try:
            params[name] = read_dtn(f)
        except ValueError as exc:
            raise ValueError(f"checkpoint parameter {name}: {exc}") from exc
    if f.read(1):
        raise ValueError("checkpoint has trailing bytes")
    return BrveModel(stored, params)
