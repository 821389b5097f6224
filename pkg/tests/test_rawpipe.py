"""Bayer packing, amplification, synthetic sequences, metrics and RSQ1 files."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from brve.rawpipe import (
    MotionSpec,
    NoiseParams,
    RawSequence,
    amplify,
    load_rsq,
    object_mask,
    pack_bayer,
    psnr,
    save_rsq,
    sequence_psnr,
    ssim,
    synth_clean,
    synth_sequence,
    training_pair,
    unpack_bayer,
)


def test_pack_single_cell():
    packed = pack_bayer(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert packed.shape == (4, 1, 1)
    assert packed[:, 0, 0].tolist() == [1, 2, 3, 4]


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_pack_unpack_bijection(h, w, seed):
    x = np.random.default_rng(seed).uniform(size=(2, 2 * h, 2 * w))
    np.testing.assert_array_equal(unpack_bayer(pack_bayer(x)), x)


def test_pack_video_resolution():
    assert pack_bayer(np.zeros((480, 640))).shape == (4, 240, 320)
    with pytest.raises(ValueError):
        pack_bayer(np.zeros((3, 4)))


def test_amplify():
    np.testing.assert_array_equal(amplify(np.array([0.4, 0.6]), 1), [0.4, 0.6])
    np.testing.assert_allclose(amplify(np.array([0.4, 0.6]), 2), [0.8, 1.0])
    with pytest.raises(ValueError):
        amplify(np.zeros(2), 0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 20))
def test_amplify_monotone_lipschitz(a, b, r):
    lo, hi = min(a, b), max(a, b)
    fa, fb = amplify(np.array([lo]), r)[0], amplify(np.array([hi]), r)[0]
    assert fa <= fb
    assert fb - fa <= r * (hi - lo) + 1e-12


def test_noise_params_validation():
    for bad in (dict(gain=0), dict(sigma=-1), dict(ratio=0), dict(ratio=1.5)):
        with pytest.raises(ValueError):
            NoiseParams(**bad)


def test_noise_free_limit():
    noise = NoiseParams(gain=1e9, sigma=0.0, ratio=0.1)
    noisy, clean = synth_sequence(3, 3, 16, 16, noise=noise)
    np.testing.assert_allclose(noisy.frames, clean.frames * 0.1, atol=1e-3)
    assert noisy.ratio == pytest.approx(10.0)


def test_synth_determinism():
    a = synth_sequence(5, 4, 16, 16)
    b = synth_sequence(5, 4, 16, 16)
    assert a[0].frames.tobytes() == b[0].frames.tobytes()
    assert a[1].frames.tobytes() == b[1].frames.tobytes()
    assert a[0].frames.tobytes() != synth_sequence(6, 4, 16, 16)[0].frames.tobytes()


def test_motion_translation_index_oracle():
    motion = MotionSpec(n_objects=2, velocity=(2, 0))
    _, objs = synth_clean(11, 4, 32, 32, motion)
    for obj in objs:
        m0 = object_mask(obj, 0, 32, 32)
        for k in range(1, 4):
            shifted = np.zeros_like(m0)
            shifted[:, 2 * k :] = m0[:, : 32 - 2 * k]
            mk = object_mask(obj, k, 32, 32)
            # compare away from the right border where content leaves the frame
            np.testing.assert_array_equal(mk[:, 2 * k :], shifted[:, 2 * k :])


def test_clean_and_noisy_share_geometry():
    noisy, clean = synth_sequence(2, 2, 32, 32, noise=NoiseParams(gain=1e6, sigma=0.0, ratio=1.0))
    assert np.corrcoef(noisy.frames.ravel(), clean.frames.ravel())[0, 1] > 0.99


def test_training_pair_shapes():
    x, y = training_pair(0, 10, 32)
    assert x.shape == y.shape == (10, 4, 16, 16)
    assert x.min() >= 0 and x.max() <= 1


def test_psnr_cases():
    a = np.zeros((4, 8, 8))
    assert psnr(a, a) == np.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 8, 7)))


def test_psnr_monotone_in_noise(rng):
    clean = rng.uniform(0.2, 0.8, (4, 16, 16))
    vals = [psnr(clean + rng.normal(0, s, clean.shape), clean) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def ssim_direct(x, y, win=7):
    """Per-window SSIM by explicit loops over valid positions."""
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            a = x[i : i + win, j : j + win].ravel()
            b = y[i : i + win, j : j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = a.var(), b.var()
            cov = ((a - ma) * (b - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return np.mean(vals)


def test_ssim_direct_formula(rng):
    a = rng.uniform(size=(4, 12, 13))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    want = np.mean([ssim_direct(a[c], b[c]) for c in range(4)])
    assert ssim(a, b) == pytest.approx(want, abs=1e-6)
    assert ssim(a, a) == pytest.approx(1.0)


def test_sequence_psnr_is_frame_mean(rng):
    a = rng.uniform(size=(3, 4, 8, 8))
    b = rng.uniform(size=(3, 4, 8, 8))
    assert sequence_psnr(a, b) == pytest.approx(np.mean([psnr(x, y) for x, y in zip(a, b)]))


def test_rsq_round_trip(tmp_path):
    seq = RawSequence(np.random.default_rng(0).uniform(size=(3, 6, 8)).astype(np.float32), "GRBG", 64, 1023, 8.0)
    save_rsq(seq, tmp_path / "s.rsq")
    back = load_rsq(tmp_path / "s.rsq")
    assert back.frames.tobytes() == seq.frames.tobytes()
    assert (back.pattern, back.black_level, back.white_level, back.ratio) == ("GRBG", 64, 1023, 8.0)
    (tmp_path / "b.rsq").write_bytes(b"NOPE" + (tmp_path / "s.rsq").read_bytes()[4:])
    with pytest.raises(ValueError, match="RSQ1"):
        load_rsq(tmp_path / "b.rsq")


def test_raw_sequence_validation():
    with pytest.raises(ValueError):
        RawSequence(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        RawSequence(np.zeros((2, 4, 4)), pattern="RG")
