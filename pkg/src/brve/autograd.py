"""Minimal reverse-mode differentiation for the BRVE layers.

A :class:`Var` wraps a numpy array.  Ops record a closure that maps the
output gradient to input gradients; :func:`backward` replays them in reverse
topological order.  Only the ops the model needs are provided, each with a
hand-written vector-Jacobian product.

Binarization uses a straight-through estimator.  The surrogate derivative is
pluggable (:func:`surrogate`); the default is the clipped identity
``1{|x| <= 1}``.  :class:`Linearization` replaces each sign by
``sign(x0) + htanh(x) - htanh(x0)`` around a recorded point ``x0`` so that
finite differences of the forward pass reproduce the surrogate gradient.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import binkernels as bk
from . import shift as sh
from .tensor import pack

# --- state ------------------------------------------------------------------

_state = {
    "grad": True,
    "surrogate": None,
    "linearization": None,
    "backend": "dense",
    "counter": None,
    "kinks": None,
}


def clipped_identity(x: np.ndarray) -> np.ndarray:
    return (np.abs(x) <= 1.0).astype(x.dtype)


def zero_surrogate(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


_state["surrogate"] = clipped_identity


@contextlib.contextmanager
def _setting(key, value):
    old = _state[key]
    _state[key] = value
    try:
        yield value
    finally:
        _state[key] = old


def no_grad():
    return _setting("grad", False)


def surrogate(fn: Callable[[np.ndarray], np.ndarray]):
    """Use ``fn`` as the sign derivative inside the block."""
    return _setting("surrogate", fn)


def binary_backend(name: str):
    """Select how binary convolutions are evaluated: ``"dense"`` or ``"packed"``."""
    if name not in ("dense", "packed"):
        raise ValueError(f"unknown binary backend {name!r}")
    return _setting("backend", name)


@dataclass
class OpCounter:
    """Multiply-accumulate tally of convolutions executed inside :func:`counting`."""

    fp: int = 0
    binary: int = 0
    per_op: list = field(default_factory=list)


def counting(counter: OpCounter):
    return _setting("counter", counter)


def _count(kind: str, macs: int, tag: str):
    c = _state["counter"]
    if c is not None:
        setattr(c, kind, getattr(c, kind) + int(macs))
        c.per_op.append((kind, tag, int(macs)))


@dataclass
class KinkLog:
    """Branch patterns of every piecewise op in a pass, plus the closest
    distance of any input to its breakpoint, per kind."""

    patterns: list = field(default_factory=list)
    min_dist: dict = field(default_factory=dict)

    def same_branches(self, other: "KinkLog") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns)
        )


def recording_kinks(log: KinkLog):
    return _setting("kinks", log)


def _kink(kind: str, x: np.ndarray, breakpoint=0.0):
    log = _state["kinks"]
    if log is None:
        return
    d = np.abs(x - breakpoint)
    log.patterns.append(x > breakpoint)
    if d.size:
        log.min_dist[kind] = min(log.min_dist.get(kind, np.inf), float(d.min()))


class Linearization:
    """Records sign inputs on one pass, then replays them as a linear surrogate."""

    def __init__(self):
        self.points: list[tuple[np.ndarray, np.ndarray | None]] = []
        self.replaying = False
        self._cursor = 0

    @contextlib.contextmanager
    def record(self):
        self.points, self.replaying = [], False
        with _setting("linearization", self):
            yield self

    @contextlib.contextmanager
    def replay(self):
        self.replaying, self._cursor = True, 0
        try:
            with _setting("linearization", self):
                yield self
        finally:
            self.replaying = False

    def site(self, x: np.ndarray, scale: np.ndarray | None = None):
        if not self.replaying:
            self.points.append((x.copy(), None if scale is None else scale.copy()))
            return None
        x0, s0 = self.points[self._cursor]
        self._cursor += 1
        if x0.shape != x.shape:
            raise RuntimeError("linearization replay diverged from the recorded pass")
        return x0, s0


def _htanh(x):
    return np.clip(x, -1.0, 1.0)


def _binarize(x: np.ndarray, scale: np.ndarray | None = None):
    """Returns (value, derivative-fn, scale) honoring any active linearization."""
    lin = _state["linearization"]
    rec = lin.site(x, scale) if lin is not None else None
    if rec is None:
        _kink("sign", x)
        return bk.sign(x), _state["surrogate"], scale
    x0, s0 = rec
    _kink("clip_hi", x, 1.0)
    _kink("clip_lo", x, -1.0)
    return bk.sign(x0) + _htanh(x) - _htanh(x0), clipped_identity, s0


# --- Var --------------------------------------------------------------------


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _make(value, parents: Sequence[Var], backward_fn) -> Var:
    if _state["grad"] and any(p.requires_grad for p in parents):
        return Var(value, True, tuple(parents), backward_fn)
    return Var(value)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def backward(root: Var, grad: np.ndarray | None = None) -> None:
    if root.backward_fn is None and not root.requires_grad:
        raise RuntimeError("backward: output does not depend on any trainable value")
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if grad is None else grad
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        if node is not root and node.parents:
            node.grad = None


# --- elementwise / structural ----------------------------------------------


def add(a: Var, b: Var) -> Var:
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def concat(xs: Sequence[Var], axis: int) -> Var:
    sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.value for x in xs], axis=axis), xs, bw)


def take(x: Var, index) -> Var:
    """Basic-slicing view ``x[index]`` with a scatter adjoint."""

    def bw(g):
        out = np.zeros_like(x.value)
        out[index] = g
        return (out,)

    return _make(x.value[index], (x,), bw)


def mul_const(x: Var, c: np.ndarray) -> Var:
    return _make(x.value * c, (x,), lambda g: (g * c,))


def mul_channel(y: Var, d: Var) -> Var:
    """``y (N, C, H, W) * d (N, C)`` broadcast over space."""
    dv = d.value[:, :, None, None]

    def bw(g):
        return g * dv, (g * y.value).sum(axis=(2, 3))

    return _make(y.value * dv, (y, d), bw)


def sub_channel(x: Var, alpha: Var) -> Var:
    def bw(g):
        return g, -g.sum(axis=(0, 2, 3))

    return _make(x.value - alpha.value[:, None, None], (x, alpha), bw)


def sigmoid(z: Var) -> Var:
    s = bk.sigmoid_open(z.value)
    return _make(s, (z,), lambda g: (g * s * (1.0 - s),))


# --- binarization -----------------------------------------------------------


def rsign(x: Var, alpha: Var, pad: int) -> Var:
    """``sign(zero_pad(x) - alpha)`` as +-1 floats with STE backward."""
    xp = bk.pad_spatial(x.value, pad) - alpha.value[:, None, None]
    val, deriv, _ = _binarize(xp)

    def bw(g):
        gp = g * deriv(xp)
        gx = gp[:, :, pad : gp.shape[2] - pad, pad : gp.shape[3] - pad] if pad else gp
        return gx, -gp.sum(axis=(0, 2, 3))

    return _make(val, (x, alpha), bw)


class Params(dict):
    """``name -> Var`` mapping that also caches each layer's binarized weights,
    so a weight used by several windows is binarized once per forward pass."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.binary_cache: dict[str, tuple[Var, np.ndarray]] = {}


def _layer_weights(p: dict, name: str) -> tuple[Var, np.ndarray]:
    cache = getattr(p, "binary_cache", None)
    if cache is None:
        return sign_weights(p[f"{name}.weight"])
    if name not in cache:
        cache[name] = sign_weights(p[f"{name}.weight"])
    return cache[name]


def sign_weights(w: Var) -> tuple[Var, np.ndarray]:
    """Binary weights plus their (detached) per-row scale."""
    val, deriv, scale = _binarize(w.value, bk.weight_scale(w.value))
    wv = w.value

    return _make(val, (w,), lambda g: (g * deriv(wv),)), scale


# --- convolution ------------------------------------------------------------


def _cols(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(C*K*K, N*Ho*Wo)``: one GEMM covers the whole batch."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_cols`."""
    n, c, h, w = x_shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    gcols = gcols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, h, w), dtype=gcols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += gcols[
                :, ky, kx
            ]
    return out.transpose(1, 0, 2, 3)


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int):
    c_out, _, k, _ = w.shape
    n = xp.shape[0]
    ho, wo = (xp.shape[2] - k) // stride + 1, (xp.shape[3] - k) // stride + 1
    cols = _cols(xp, k, stride)
    y = (w.reshape(c_out, -1) @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), cols


def _conv_backward(g, cols, x_shape, w, stride, pad):
    c_out, k = w.shape[0], w.shape[-1]
    gm = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
    gw = (gm @ cols.T).reshape(w.shape)
    gx = _col2im(w.reshape(c_out, -1).T @ gm, x_shape, k, stride)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx, gw


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1, pad: int = 0, tag: str = "") -> Var:
    xp = bk.pad_spatial(x.value, pad)
    y, cols = _conv_forward(xp, w.value, stride)
    if b is not None:
        y += b.value[:, None, None]
    n, c_out, ho, wo = y.shape
    _count("fp", n * c_out * w.value.shape[1] * w.value.shape[2] * w.value.shape[3] * ho * wo, tag)

    def bw(g):
        gx, gw = _conv_backward(g, cols, xp.shape, w.value, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw)


def bconv(ab: Var, wb: Var, stride: int = 1, tag: str = "") -> Var:
    """Convolution of +-1 activations with +-1 weights (no padding)."""
    w = wb.value
    cols = None
    if _state["backend"] == "packed" and _state["linearization"] is None:
        y = bk.binary_conv2d(pack(ab.value, axis=1), pack(w, axis=1), stride).astype(ab.value.dtype)
    else:
        y, cols = _conv_forward(ab.value, w, stride)
    n, c_out, ho, wo = y.shape
    _count("binary", n * c_out * w.shape[1] * w.shape[2] * w.shape[3] * ho * wo, tag)

    def bw(g):
        c = cols if cols is not None else _cols(ab.value, w.shape[-1], stride)
        return _conv_backward(g, c, ab.value.shape, w, stride, 0)

    return _make(y, (ab, wb), bw)


# --- statistics / DACA ------------------------------------------------------


FLAT_STD_ULPS = 64


def channel_stats(x: Var) -> Var:
    """``(N, C, H, W)`` -> ``(N, 3, C)`` rows (mean |x|, mean x, std x)."""
    v = x.value
    hw = v.shape[2] * v.shape[3]
    mean = v.mean(axis=(2, 3))
    centred = v - mean[:, :, None, None]
    std = np.sqrt((centred**2).mean(axis=(2, 3)))
    # A spatially constant channel (e.g. features of an all-zero frame) has
    # std at rounding-noise level; its derivative there is the cone tip,
    # taken as 0 rather than noise / noise.
    tol = FLAT_STD_ULPS * np.finfo(v.dtype).eps * np.abs(v).max(axis=(2, 3))
    live = std > tol
    _kink("abs", v)
    _kink("std", std, tol)
    out = np.stack([np.abs(v).mean(axis=(2, 3)), mean, std], axis=1)

    def bw(g):
        g_abs, g_mean, g_std = g[:, 0], g[:, 1], g[:, 2]
        safe = np.where(live, std, 1.0)
        g_std = np.where(live, g_std, 0.0)
        gx = (
            g_abs[:, :, None, None] * np.sign(v)
            + g_mean[:, :, None, None]
            + g_std[:, :, None, None] * centred / safe[:, :, None, None]
        ) / hw
        return (gx.astype(v.dtype),)

    return _make(out, (x,), bw)


def conv1d_same(xs: Var, k: Var, b: Var, length: int | None = None, tag: str = "") -> Var:
    """Single-output channel-axis conv of ``(N, 3, C)`` stats with zero padding."""
    v = xs.value
    c_in = v.shape[-1]
    if length is not None and length != c_in:
        v = np.concatenate([v, np.zeros(v.shape[:-1] + (max(0, length - c_in),), v.dtype)], axis=-1)[..., :length]
    ker = k.value
    kk = ker.shape[-1]
    r = kk // 2
    y = bk.conv1d_same(v, ker, 0.0) + b.value
    _count("fp", v.shape[0] * 3 * kk * v.shape[-1], tag)

    def bw(g):
        vp = np.pad(v, [(0, 0), (0, 0), (r, r)])
        win = np.lib.stride_tricks.sliding_window_view(vp, kk, axis=-1)  # (N, 3, L, k)
        gk = np.einsum("nl,nslj->sj", g, win)[None]
        gp = np.zeros(vp.shape, dtype=g.dtype)
        length_ = v.shape[-1]
        for j in range(kk):
            gp[:, :, j : j + length_] += g[:, None, :] * ker[0, :, j][None, :, None]
        gv = gp[:, :, r : r + length_]
        if gv.shape[-1] >= c_in:
            gv = gv[..., :c_in]
        else:
            gv = np.concatenate([gv, np.zeros(gv.shape[:-1] + (c_in - gv.shape[-1],), gv.dtype)], axis=-1)
        return gv, gk, np.asarray(g.sum(), dtype=b.value.dtype).reshape(b.value.shape)

    return _make(y, (xs, k, b), bw)


def daca(a_prime: Var, k: Var, b: Var, out_channels: int | None = None, tag: str = "") -> Var:
    return sigmoid(conv1d_same(channel_stats(a_prime), k, b, out_channels, tag))


def rprelu(y: Var, gamma: Var, zeta: Var, beta: Var) -> Var:
    v = y.value
    gm, zt, bt = (p.value[:, None, None] for p in (gamma, zeta, beta))
    upper = v > zt
    _kink("rprelu", v - zt)
    out = np.where(upper, v - gm + zt, bt * (v - gm) + zt)

    def bw(g):
        gy = np.where(upper, g, g * bt)
        g_gamma = -np.where(upper, g, g * bt).sum(axis=(0, 2, 3))
        g_zeta = g.sum(axis=(0, 2, 3))
        g_beta = np.where(upper, 0.0, g * (v - gm)).sum(axis=(0, 2, 3)).astype(v.dtype)
        return gy, g_gamma, g_zeta, g_beta

    return _make(out, (y, gamma, zeta, beta), bw)


# --- resampling / shift -----------------------------------------------------


def avg_pool2(x: Var) -> Var:
    return _make(bk.avg_pool2(x.value), (x,), lambda g: (bk.avg_pool2_adjoint(g).astype(g.dtype),))


def bilinear_up2(x: Var) -> Var:
    return _make(bk.bilinear_up2(x.value), (x,), lambda g: (bk.bilinear_up2_adjoint(g),))


def st_shift(x: Var, direction, kernel=sh.SHIFT_KERNEL) -> Var:
    """Spatial-temporal shift of a 3-frame batch ``(3, C, H, W)`` -> ``(3, 3C/2, H, W)``."""
    v = x.value
    if v.shape[0] != 3:
        raise ValueError(f"st_shift: expected a 3-frame batch, got {v.shape[0]}")
    out = np.stack(sh.st_shift_window(list(v), direction, kernel))
    perm = sh.temporal_perm(direction)
    half = v.shape[1] // 2

    def bw(g):
        g_keep, g_sp, g_t = g[:, :half], g[:, half : 2 * half], g[:, 2 * half :]
        g_s = g_t + sh.spatial_shift_adjoint(g_sp, kernel)
        g_move = np.empty_like(g_s)
        for i, src in enumerate(perm):
            g_move[src] = g_s[i]
        return (np.concatenate([g_keep, g_move], axis=1),)

    return _make(out, (x,), bw)


# --- loss -------------------------------------------------------------------

CHARBONNIER_EPS = 1e-3


def charbonnier(pred: Var, target: np.ndarray, eps: float = CHARBONNIER_EPS) -> Var:
    if pred.value.shape != np.shape(target):
        raise ValueError(f"charbonnier: shape {pred.value.shape} vs target {np.shape(target)}")
    r = pred.value - target
    root = np.sqrt(r * r + eps * eps)
    n = r.size
    return _make(np.asarray(root.mean()), (pred,), lambda g: (g * r / root / n,))


# --- composite blocks -------------------------------------------------------


def binary_conv_block(x: Var, p: dict, name: str, use_daca: bool = True) -> Var:
    """RPRelu(S * DACA * (A^b (x) W^b)) + x on Var inputs; params from ``p``."""
    w = p[f"{name}.weight"]
    alpha = p[f"{name}.alpha"]
    k = w.value.shape[-1]
    ab = rsign(x, alpha, k // 2)
    wb, scale = _layer_weights(p, name)
    y = bconv(ab, wb, tag=name)
    y = mul_const(y, scale.astype(y.value.dtype)[:, None, None])
    if use_daca:
        a_prime = sub_channel(x, alpha)
        d = daca(a_prime, p[f"{name}.daca_kernel"], p[f"{name}.daca_bias"], w.value.shape[0], tag=name)
        y = mul_channel(y, d)
    y = rprelu(y, p[f"{name}.gamma"], p[f"{name}.zeta"], p[f"{name}.beta"])
    return add(y, x)


def binary_fusion_block(x: Var, p: dict, name: str) -> Var:
    """RPRelu(S * (A^b (x) W^b)) + proj(x), used where the width changes."""
    w = p[f"{name}.weight"]
    k = w.value.shape[-1]
    ab = rsign(x, p[f"{name}.alpha"], k // 2)
    wb, scale = _layer_weights(p, name)
    y = bconv(ab, wb, tag=name)
    y = mul_const(y, scale.astype(y.value.dtype)[:, None, None])
    y = rprelu(y, p[f"{name}.gamma"], p[f"{name}.zeta"], p[f"{name}.beta"])
    proj = conv2d(x, p[f"{name}.proj_weight"], p[f"{name}.proj_bias"], tag=f"{name}.proj")
    return add(y, proj)
