"""Binary and full-precision layer kernels.

Every function here is plain numpy on ``(N, C, H, W)`` arrays (a single
``(C, H, W)`` frame is accepted wherever noted).  The differentiable
versions used by the model live in :mod:`brve.autograd`; they are built from
the same primitives.

Conventions
-----------
* ``sign(0) == -1`` for weights and activations alike.
* Binary convolution pads the *real-valued* activation with zeros before
  RSign, so padded pixels binarize to ``sign(0 - alpha_c)``.
* DACA statistics are taken over the unpadded ``A' = A - alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import BitTensor, channel_stats, check_finite, pack, xnor_popcount

DACA_K = 3
RPRELU_BETA0 = 0.25


def sign(x: np.ndarray) -> np.ndarray:
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    out = (x > 0).astype(dtype)
    out *= 2
    out -= 1
    return out


def _batched(a: np.ndarray) -> tuple[np.ndarray, bool]:
    a = np.asarray(a)
    if a.ndim == 3:
        return a[None], True
    if a.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {a.shape}")
    return a, False


def _unbatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


# --- parameter containers ---------------------------------------------------


@dataclass
class DacaParams:
    kernel: np.ndarray  # (1, 3, k)
    bias: float = 0.0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.kernel.ndim != 3 or self.kernel.shape[:2] != (1, 3) or self.kernel.shape[2] % 2 == 0:
            raise ValueError(f"DACA kernel must be (1, 3, odd k), got {self.kernel.shape}")

    @classmethod
    def zeros(cls, k: int = DACA_K, dtype=np.float32) -> "DacaParams":
        return cls(np.zeros((1, 3, k), dtype=dtype), 0.0)


@dataclass
class RPReluParams:
    gamma: np.ndarray
    zeta: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "RPReluParams":
        return cls(
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.full(channels, RPRELU_BETA0, dtype),
        )

    @classmethod
    def neutral(cls, channels: int, dtype=np.float32) -> "RPReluParams":
        """Identity activation (beta = 1, no shifts)."""
        return cls(np.zeros(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class FpConv:
    weight: np.ndarray  # (C_out, C, K, K)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int | None = None

    @property
    def pad(self) -> int:
        return self.weight.shape[-1] // 2 if self.padding is None else self.padding


@dataclass
class BinaryConvLayer:
    """One binary convolution with its scaling and activation parameters.

    ``scale`` is derived from ``latent_weight`` on every access, so it always
    equals the row-wise mean absolute latent weight.
    """

    latent_weight: np.ndarray  # (C_out, C, K, K)
    alpha: np.ndarray  # (C,)
    daca: DacaParams = field(default_factory=DacaParams.zeros)
    rprelu: RPReluParams | None = None
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        c_out, c = self.latent_weight.shape[:2]
        if self.alpha.shape != (c,):
            raise ValueError(f"alpha has shape {self.alpha.shape}, expected ({c},)")
        if self.rprelu is None:
            self.rprelu = RPReluParams.init(c_out, self.latent_weight.dtype)

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int = 3, rng=None, dtype=np.float32) -> "BinaryConvLayer":
        rng = np.random.default_rng(rng)
        w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k)).astype(dtype)
        return cls(w, np.zeros(c_in, dtype), DacaParams.zeros(dtype=dtype), RPReluParams.init(c_out, dtype))

    @property
    def in_channels(self) -> int:
        return self.latent_weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.latent_weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.latent_weight.shape[-1]

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding

    @property
    def scale(self) -> np.ndarray:
        return weight_scale(self.latent_weight)

    @property
    def binary_weight(self) -> BitTensor:
        return binarize_weights(self.latent_weight)[0]


# --- binarization -----------------------------------------------------------


def weight_scale(latent: np.ndarray) -> np.ndarray:
    c_out = latent.shape[0]
    return np.abs(latent).reshape(c_out, -1).mean(axis=1)


def binarize_weights(latent: np.ndarray) -> tuple[BitTensor, np.ndarray]:
    """Sign-binarize ``(C_out, C, K, K)`` latent weights; return bits and S.

    Bits are packed along the input-channel axis, so the packed words have
    shape ``(C_out, K, K, ceil(C / 64))``.
    """
    latent = np.asarray(latent)
    if latent.ndim != 4:
        raise ValueError(f"latent weights must be (C_out, C, K, K), got {latent.shape}")
    check_finite(latent, "binarize_weights")
    return pack(sign(latent), axis=1), weight_scale(latent)


def pad_spatial(a: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(a, widths, constant_values=value)


def rsign(a: np.ndarray, alpha: np.ndarray) -> tuple[BitTensor, np.ndarray]:
    """Threshold-shifted sign: returns packed ``sign(a - alpha)`` and ``a - alpha``."""
    a = np.asarray(a)
    c = a.shape[-3]
    alpha = np.asarray(alpha)
    if alpha.shape != (c,):
        raise ValueError(f"rsign: alpha has shape {alpha.shape}, input has {c} channels")
    shifted = a - alpha[:, None, None]
    return pack(sign(shifted), axis=-3), shifted


# --- convolutions -----------------------------------------------------------


def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def binary_conv2d(ab: BitTensor, wb: BitTensor, stride: int = 1, pad: int = 0) -> np.ndarray:
    """XNOR-popcount convolution of packed activations with packed weights.

    ``ab`` packs a ``(C, H, W)`` or ``(N, C, H, W)`` tensor along channels;
    ``wb`` packs ``(C_out, C, K, K)`` along C.  Each tap contributes one
    word-wide :func:`signed_dot` per output pixel.  ``pad`` extends the
    activation with -1 lanes (``sign(0)``).  Returns an int64 array.
    """
    if ab.valid_lanes != wb.valid_lanes:
        raise ValueError(f"binary_conv2d: {ab.valid_lanes} input channels vs {wb.valid_lanes} in kernel")
    c = ab.valid_lanes
    words = ab.words
    squeeze = words.ndim == 3
    if squeeze:
        words = words[None]
    if pad:
        fill = pack(-np.ones(c, np.int8), axis=0).words
        n, h, w, nw = words.shape
        padded = np.broadcast_to(fill, (n, h + 2 * pad, w + 2 * pad, nw)).copy()
        padded[:, pad : pad + h, pad : pad + w] = words
        words = padded
    ww = wb.words  # (C_out, K, K, nw)
    c_out, kh, kw, _ = ww.shape
    n, h, w, _ = words.shape
    if kh > h or kw > w:
        raise ValueError(f"binary_conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    pad_matches = ww.shape[-1] * 64 - c
    out = np.zeros((n, c_out, ho, wo), dtype=np.int64)
    for ky in range(kh):
        for kx in range(kw):
            tap = words[:, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]
            matches = xnor_popcount(tap[:, None], ww[None, :, ky, kx, None, None, :])
            out += 2 * (matches - pad_matches) - c
    return out[0] if squeeze else out


def im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, C*K*K, Ho*Wo)`` patch matrix (C-major, then ky, kx)."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Dense cross-correlation, ``(N, C, H, W)`` or ``(C, H, W)`` input."""
    x, squeeze = _batched(x)
    c_out, c, k, _ = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    x = pad_spatial(x, pad)
    if k > x.shape[2] or k > x.shape[3]:
        raise ValueError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape[2:]}")
    ho, wo = _out_size(x.shape[2], k, stride), _out_size(x.shape[3], k, stride)
    y = np.matmul(weight.reshape(c_out, -1), im2col(x, k, stride)).reshape(x.shape[0], c_out, ho, wo)
    if bias is not None:
        y += bias[:, None, None]
    return _unbatch(y, squeeze)


def dense_binary_conv2d(a_pm: np.ndarray, w_pm: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Same result as :func:`binary_conv2d` computed on unpacked +-1 values."""
    a_pm, squeeze = _batched(a_pm)
    a_pm = pad_spatial(a_pm.astype(np.float32), pad, -1.0)
    y = conv2d(a_pm, w_pm.astype(np.float32), stride=stride)
    return _unbatch(np.rint(y).astype(np.int64), squeeze)


def fp_conv2d(a: np.ndarray, conv: FpConv) -> np.ndarray:
    return conv2d(a, conv.weight, conv.bias, conv.stride, conv.pad)


# --- resampling -------------------------------------------------------------


def avg_pool2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    return a.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2j] = .75 x[j] + .25 x[j-1], out[2j+1] = .75 x[j] + .25 x[j+1]
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_up2(a: np.ndarray) -> np.ndarray:
    """2x bilinear upsampling with half-pixel centres and edge clamping."""
    return _up_axis(_up_axis(a, -2), -1)


def bilinear_up2_adjoint(g: np.ndarray) -> np.ndarray:
    return _up_axis_adjoint(_up_axis_adjoint(g, -1), -2)


def avg_pool2_adjoint(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0


# --- DACA / DABC / RPRelu ---------------------------------------------------


def conv1d_same(x: np.ndarray, kernel: np.ndarray, bias: float, length: int | None = None) -> np.ndarray:
    """Single-output 1-D convolution along the last axis with zero same-padding.

    ``x`` is ``(..., 3, C)``, ``kernel`` is ``(1, 3, k)``.  With ``length``
    set, the sequence is zero-extended or truncated to that many positions
    first.
    """
    k = kernel.shape[-1]
    if length is not None and length != x.shape[-1]:
        if length > x.shape[-1]:
            x = np.concatenate([x, np.zeros(x.shape[:-1] + (length - x.shape[-1],), x.dtype)], axis=-1)
        else:
            x = x[..., :length]
    r = k // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(r, r)])
    win = sliding_window_view(xp, k, axis=-1)  # (..., 3, C, k)
    return np.einsum("...scj,sj->...c", win, kernel[0]) + bias


def sigmoid_open(z: np.ndarray) -> np.ndarray:
    """Logistic function clipped to the open interval (0, 1) of its dtype."""
    dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    s = 0.5 * (1.0 + np.tanh(0.5 * z.astype(dtype)))
    lo = np.finfo(dtype).tiny
    hi = np.nextafter(dtype.type(1), dtype.type(0))
    return np.clip(s, lo, hi)


def daca(a_prime: np.ndarray, p: DacaParams, out_channels: int | None = None) -> np.ndarray:
    """Distribution-aware channel attention of ``A'``.

    Stacks per-channel (mean |A'|, mean A', std A') as three input channels
    of a length-C sequence, convolves along the channel axis and applies the
    logistic function.  Returns ``(C,)`` for one frame or ``(N, C)``.
    """
    st = channel_stats(a_prime)
    x = np.stack([st.mean_abs, st.mean, st.std], axis=-2)
    return sigmoid_open(conv1d_same(x, p.kernel, p.bias, out_channels))


def rprelu(y: np.ndarray, p: RPReluParams) -> np.ndarray:
    g = p.gamma[:, None, None]
    z = p.zeta[:, None, None]
    b = p.beta[:, None, None]
    return np.where(y > z, y - g + z, b * (y - g) + z)


def dabc_forward(a: np.ndarray, layer: BinaryConvLayer, use_daca: bool = True) -> np.ndarray:
    """Binary conv output rescaled by S and the DACA vector."""
    a, squeeze = _batched(a)
    ab, _ = rsign(pad_spatial(a, layer.pad), layer.alpha)
    a_prime = a - layer.alpha[:, None, None]
    y = binary_conv2d(ab, layer.binary_weight, layer.stride).astype(a.dtype)
    y = y * layer.scale.astype(a.dtype)[:, None, None]
    if use_daca:
        d = daca(a_prime, layer.daca, layer.out_channels)
        y = y * d[:, :, None, None]
    return _unbatch(y, squeeze)


def binary_conv_block(a: np.ndarray, layer: BinaryConvLayer, use_daca: bool = True) -> np.ndarray:
    if layer.in_channels != layer.out_channels:
        raise ValueError(
            f"binary_conv_block: layer maps {layer.in_channels} -> {layer.out_channels} channels; "
            "use binary_fusion_block for width changes"
        )
    return rprelu(dabc_forward(a, layer, use_daca), layer.rprelu) + a


def binary_fusion_block(a: np.ndarray, layer: BinaryConvLayer, proj: FpConv) -> np.ndarray:
    """Width-changing block: RPRelu(S * binary conv) + 1x1 full-precision projection."""
    if proj.weight.shape[0] != layer.out_channels:
        raise ValueError(
            f"binary_fusion_block: projection gives {proj.weight.shape[0]} channels, layer gives {layer.out_channels}"
        )
    a, squeeze = _batched(a)
    ab, _ = rsign(pad_spatial(a, layer.pad), layer.alpha)
    y = binary_conv2d(ab, layer.binary_weight, layer.stride).astype(a.dtype)
    y = y * layer.scale.astype(a.dtype)[:, None, None]
    return _unbatch(rprelu(y, layer.rprelu) + fp_conv2d(a, proj), squeeze)



# --- verification ------------------------------------------------------------


def random_case(rng: np.random.Generator, max_channels: int = 128):
    """One randomized (activations, weights, stride, pad) conv case in +-1."""
    c = int(rng.integers(1, max_channels + 1))
    c_out = int(rng.integers(1, 9))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    h = int(rng.integers(max(1, k - 2 * pad), 10))
    w = int(rng.integers(max(1, k - 2 * pad), 10))
    a = rng.choice(np.array([-1.0, 1.0]), (c, h, w))
    wt = rng.choice(np.array([-1.0, 1.0]), (c_out, c, k, k))
    return a, wt, stride, pad


def verify_bitexact(n_cases: int = 1000, seed: int = 0, workers: int = 1) -> list[bool]:
    """Packed XNOR-popcount vs dense +-1 convolution on ``n_cases`` random cases."""
    from concurrent.futures import ThreadPoolExecutor

    rngs = np.random.default_rng(seed).spawn(n_cases)

    def one(rng):
        a, wt, stride, pad = random_case(rng)
        got = binary_conv2d(pack(a, axis=0), pack(wt, axis=1), stride, pad)
        want = dense_binary_conv2d(a, wt, stride, pad)
        return bool(got.shape == want.shape and np.array_equal(got, want.astype(np.int64)))

    if workers <= 1:
        return [one(r) for r in rngs]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(one, rngs))
