"""Temporal and spatial shift algebra."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from brve import autograd as ag
from brve import shift as sh


def test_kernel_set_and_order():
    k = sh.SHIFT_KERNEL
    assert len(k) == 24
    assert set(k) == {(x, y) for x in (-8, -4, 0, 4, 8) for y in (-8, -4, 0, 4, 8)} - {(0, 0)}
    assert k[:5] == ((-8, -8), (-4, -8), (0, -8), (4, -8), (8, -8))
    assert k[10:14] == ((-8, 0), (-4, 0), (4, 0), (8, 0))


def test_temporal_directions():
    a, b, c = "A", "B", "C"
    assert sh.cyclic_temporal_shift([a, b, c], "forward") == [c, a, b]
    assert sh.cyclic_temporal_shift([a, b, c], "backward") == [b, c, a]
    assert sh.level_direction(0) is sh.Direction.FORWARD
    assert sh.level_direction(1) is sh.Direction.BACKWARD
    with pytest.raises(ValueError):
        sh.cyclic_temporal_shift([a, b], "forward")


@given(st.lists(st.integers(), min_size=3, max_size=3))
def test_permutation_algebra(parts):
    f = lambda p: sh.cyclic_temporal_shift(p, "forward")
    b = lambda p: sh.cyclic_temporal_shift(p, "backward")
    assert f(b(parts)) == parts and b(f(parts)) == parts
    assert f(f(f(parts))) == parts


def translate_oracle(a, dx, dy):
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    for i in range(h):
        for j in range(w):
            si, sj = i - dy, j - dx
            if 0 <= si < h and 0 <= sj < w:
                out[..., i, j] = a[..., si, sj]
    return out


@given(st.integers(-12, 12), st.integers(-12, 12), st.integers(0, 2**32 - 1))
def test_translate_matches_index_oracle(dx, dy, seed):
    a = np.random.default_rng(seed).normal(size=(2, 9, 10))
    np.testing.assert_array_equal(sh.translate(a, dx, dy), translate_oracle(a, dx, dy))


def test_positive_x_moves_right():
    a = np.zeros((1, 1, 9))
    a[0, 0, 0] = 1
    assert sh.translate(a, 4, 0)[0, 0, 4] == 1


@pytest.mark.parametrize("c,expect", [(24, [1] * 24), (48, [2] * 24), (26, [2, 2] + [1] * 22), (5, [1] * 5 + [0] * 19)])
def test_slice_sizes(c, expect):
    assert sh.slice_sizes(c) == expect


def test_spatial_shift_slices(rng):
    s = rng.normal(size=(50, 17, 17))
    out = sh.spatial_shift(s)
    start = 0
    for (dx, dy), n in zip(sh.SHIFT_KERNEL, sh.slice_sizes(50)):
        np.testing.assert_array_equal(out[start : start + n], translate_oracle(s[start : start + n], dx, dy))
        start += n


def test_spatial_adjoint_exact_integers(rng):
    """Adjoint identity on integer data, no tolerance."""
    for _ in range(20):
        c = int(rng.integers(1, 60))
        h, w = rng.integers(1, 20, 2)
        x = rng.integers(-50, 50, (c, h, w))
        g = rng.integers(-50, 50, (c, h, w))
        assert np.sum(sh.spatial_shift(x) * g) == np.sum(x * sh.spatial_shift_adjoint(g))


@pytest.mark.parametrize("c", [2, 8, 24, 32, 48, 64, 128, 256])
def test_fused_width_is_three_halves(rng, c):
    window = [rng.normal(size=(c, 16, 16)) for _ in range(3)]
    out = sh.st_shift_window(window, "forward")
    assert [o.shape for o in out] == [(3 * c // 2, 16, 16)] * 3


def test_fused_layout(rng):
    c = 48
    window = [rng.normal(size=(c, 8, 8)) for _ in range(3)]
    out = sh.st_shift_window(window, "backward")
    for t in range(3):
        src = (t + 1) % 3  # backward: position t takes frame t+1
        moving = window[src][c // 2 :]
        np.testing.assert_array_equal(out[t][: c // 2], window[t][: c // 2])
        np.testing.assert_array_equal(out[t][c // 2 : c], sh.spatial_shift(moving))
        np.testing.assert_array_equal(out[t][c:], moving)


def test_odd_channels_rejected(rng):
    with pytest.raises(ValueError):
        sh.st_shift_window([rng.normal(size=(3, 4, 4))] * 3, "forward")


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_autograd_shift_backward_is_adjoint(rng, direction):
    x = rng.integers(-9, 9, (3, 10, 12, 12)).astype(np.float64)
    g = rng.integers(-9, 9, (3, 15, 12, 12)).astype(np.float64)
    v = ag.Var(x, requires_grad=True)
    out = ag.st_shift(v, direction)
    ag.backward(out, g)
    assert np.sum(out.value * g) == np.sum(x * v.grad)
