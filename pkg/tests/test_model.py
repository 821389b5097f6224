"""Model assembly, sliding-window schedule, FLOPs accounting and checkpoints."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from brve import autograd as ag
from brve.model import (
    BrveModel,
    LayerSpec,
    ModelConfig,
    _unet,
    count_flops,
    layer_ops,
    layer_specs,
    load_checkpoint,
    schedule,
)
from brve.train import randomize_smooth

SMALL = ModelConfig(levels=2, base_channels=8, blocks_per_level=1)


def random_model(cfg=SMALL, seed=0):
    """Model with every parameter non-trivial, so all paths affect the output."""
    rng = np.random.default_rng(seed)
    m = BrveModel.init(cfg, seed)
    randomize_smooth(m, rng)
    w = m.params["s3.last.weight"]
    w[...] = rng.normal(0, 0.1, w.shape)
    return m


def frames(t, size=8, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (t, 4, size, size)).astype(np.float32)


def test_config_validation():
    for bad in (dict(window=4), dict(stride=4), dict(base_channels=7), dict(daca_k=2), dict(dtype="int8")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"levels": 2, "depth": 3})


def test_full_precision_layers_are_first_and_last():
    specs = layer_specs(ModelConfig())
    fp = [s.name for s in specs if s.kind == "fp"]
    assert fp == ["s1.first", "s3.last"]
    assert specs[0].name == "s1.first" and specs[-1].name == "s3.last"


def test_default_size_in_toy_range():
    r = BrveModel.init().count_flops()
    assert 0.1e6 <= r.total_params <= 0.4e6


@pytest.mark.parametrize("t", [1, 2, 3, 4, 7])
@pytest.mark.parametrize("stride", [1, 2, 3])
def test_output_count_and_shape(t, stride):
    m = random_model()
    x = frames(t)
    assert m.forward(x, stride).shape == x.shape


def walkthrough(t, stride):
    """Independent replay of the window policy: returns the frame index
    emitted at each output slot in emission order."""
    carried = [None] * (3 - stride)  # warm-up slots hold no frame
    order = []
    nxt = 0
    while nxt < t:
        window = carried + [f if f < t else None for f in range(nxt, nxt + stride)]
        nxt += stride
        order += [f for f in window[:stride] if f is not None]
        carried = window[stride:]
    order += [f for f in carried if f is not None]
    return order


@given(st.integers(1, 30), st.sampled_from([1, 2, 3]))
def test_schedule_emits_each_frame_once_in_order(t, stride):
    emitted = []
    last_carried = []
    for new, emit, carried in schedule(t, stride):
        assert len(new) == stride and len(emit) == stride and len(carried) == 3 - stride
        emitted += [f for f in emit if 0 <= f < t]
        last_carried = carried
    emitted += [f for f in last_carried if 0 <= f < t]
    assert emitted == list(range(t)) == walkthrough(t, stride)


def test_single_frame_stride1():
    m = random_model()
    out = m.forward(frames(1), 1)
    assert out.shape == (1, 4, 8, 8) and np.all(np.isfinite(out))


def test_stride3_locality():
    m = random_model()
    x = frames(6)
    y = x.copy()
    y[3:] = np.random.default_rng(9).uniform(0, 1, y[3:].shape)
    a, b = m.forward(x, 3), m.forward(y, 3)
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_stride1_has_history():
    m = random_model()
    x = frames(6)
    y = x.copy()
    y[0] += 0.3
    assert not np.array_equal(m.forward(x, 1)[3], m.forward(y, 1)[3])


def test_stride1_vs_stride3_differ():
    m = random_model()
    x = frames(6)
    assert not np.allclose(m.forward(x, 1), m.forward(x, 3))


def test_determinism_and_backends_agree():
    m = random_model()
    x = frames(4)
    a = m.forward(x)
    np.testing.assert_array_equal(a, m.forward(x))
    np.testing.assert_array_equal(a, random_model().forward(x))
    np.testing.assert_allclose(m.forward(x, backend="packed"), a, rtol=1e-5, atol=1e-5)


def test_init_is_identity():
    """The residual head starts at zero, so an untrained model returns its input."""
    x = frames(3)
    np.testing.assert_array_equal(BrveModel.init(SMALL, 0).forward(x), x)


def test_bad_spatial_dims():
    with pytest.raises(ValueError, match="divisible"):
        random_model().forward(np.zeros((2, 4, 6, 7), np.float32))
    with pytest.raises(ValueError):
        random_model().forward(np.zeros((2, 3, 8, 8), np.float32))


def test_one_level_unet_zero_weights_is_projection_path():
    cfg = ModelConfig(levels=1, base_channels=4, blocks_per_level=2, dtype="float64")
    m = BrveModel.init(cfg, 0)
    rng = np.random.default_rng(0)
    for name, p in m.params.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            p[...] = 0.0
        elif leaf == "beta":
            p[...] = 1.0
        elif leaf in ("proj_weight", "proj_bias", "alpha", "daca_kernel"):
            p[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(2, 8, 4, 4))  # stage-3 input: 2 * base channels
    with ag.no_grad():
        out = _unet(cfg, m.variables(), ag.Var(x), "s3", shift=False).value
    pw, pb = m.params["s3.enc0.fuse.proj_weight"][:, :, 0, 0], m.params["s3.enc0.fuse.proj_bias"]
    np.testing.assert_allclose(out, np.einsum("oc,nchw->nohw", pw, x) + pb[:, None, None], rtol=1e-12)


# --- FLOPs ------------------------------------------------------------------


def test_single_layer_closed_form():
    spec = LayerSpec("x", "block", 64, 64, 3, 0, 1)
    fp, b = layer_ops(spec, ModelConfig(), 256, 256)
    assert b == 64 * 64 * 9 * 256 * 256
    assert fp == 3 * 3 * 64  # channel-attention conv1d


def test_totals_obey_formulas():
    r = BrveModel.init().count_flops()
    assert r.total_flops == r.ops_fp + r.ops_bin / 64
    assert r.total_params == r.params_fp + r.params_bin / 32


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_analytic_flops_match_runtime_counter(stride):
    cfg = ModelConfig(levels=2, base_channels=8, blocks_per_level=1)
    m = random_model(cfg)
    t, size = 5, 8
    counter = ag.OpCounter()
    with ag.counting(counter):
        m.forward(frames(t, size), stride)
    r = count_flops(cfg, size, size, t, stride)
    assert counter.fp == r.ops_fp * t
    assert counter.binary == r.ops_bin * t


def test_flops_monotone_in_width_and_depth():
    a = count_flops(ModelConfig(base_channels=16), 64, 64).total_flops
    b = count_flops(ModelConfig(base_channels=32), 64, 64).total_flops
    c = count_flops(ModelConfig(base_channels=32, blocks_per_level=3), 64, 64).total_flops
    assert a < b < c


def test_param_count_matches_arrays():
    m = BrveModel.init()
    r = m.count_flops()
    stored = sum(p.size for p in m.params.values())
    n_binary = len(m.binary_layer_names())
    s_values = sum(m.params[f"{n}.weight"].shape[0] for n in m.binary_layer_names())
    assert n_binary > 0
    assert r.params_fp + r.params_bin == stored + s_values


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = random_model()
    path = tmp_path / "m.brve"
    m.save(path)
    m2 = load_checkpoint(path)
    assert m2.config == m.config
    for k in m.params:
        assert m2.params[k].tobytes() == m.params[k].tobytes()
    x = frames(3)
    np.testing.assert_array_equal(m2.forward(x), m.forward(x))
    assert m2.count_flops().as_dict() == m.count_flops().as_dict()


def test_checkpoint_errors(tmp_path):
    m = random_model()
    path = tmp_path / "m.brve"
    m.save(path)
    data = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXXX" + data[5:])
    with pytest.raises(ValueError, match="BRVE1"):
        load_checkpoint(bad)
    bad.write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(data[:5] + (2).to_bytes(2, "little") + data[7:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)
    with pytest.raises(ValueError, match="digest"):
        load_checkpoint(path, ModelConfig())
    bad.write_bytes(data + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(bad)
