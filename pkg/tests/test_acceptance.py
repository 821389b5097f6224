"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
repeated at the end of the session.
"""
import itertools
import time

import numpy as np
import pytest

from brve import autograd as ag
from brve import shift as sh
from brve.binkernels import verify_bitexact
from brve.model import BrveModel, LayerSpec, ModelConfig, count_flops, layer_ops, layer_specs
from brve.rawpipe import training_pair
from brve.train import evaluate, gradcheck, toy_config, train_loop

RESULTS: list[str] = []

HELDOUT = 8
EFFICACY_STEPS = 800
ABLATION_STEPS = 300
ABLATION_SEEDS = (0, 1, 2)


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)


@pytest.fixture(scope="module")
def heldout():
    return [training_pair(10**6 + i, 10, 32) for i in range(HELDOUT)]


def test_bit_exactness():
    t0 = time.perf_counter()
    ok = verify_bitexact(1000, seed=2024)
    dt = time.perf_counter() - t0
    n = sum(ok)
    report("bit-exactness", n == 1000 and dt < 60, f"{n}/1000 exact in {dt:.1f} s (limit 60 s)")
    assert n == 1000 and dt < 60


def test_scale_law():
    cfg = ModelConfig(levels=2, base_channels=8, blocks_per_level=1, dtype="float64")
    m = BrveModel.init(cfg, 0)
    rng = np.random.default_rng(7)
    for name in m.binary_layer_names():
        w = m.params[f"{name}.weight"]
        w[...] = rng.normal(0, 0.5, w.shape)
    worst = []

    def check(step, model):
        err = 0.0
        for name in model.binary_layer_names():
            w = model.params[f"{name}.weight"]
            c_out, c, k, _ = w.shape
            direct = np.array([sum(abs(float(v)) for v in w[o].ravel()) / (c * k * k) for o in range(c_out)])
            s = model.binary_layer(name).scale
            err = max(err, float(np.max(np.abs(s - direct) / direct)))
        worst.append(err)

    data = (training_pair(int(s), 4, 16) for s in itertools.count(100))
    train_loop(m, 100, dataset=data, lr=1e-2, log_every=0, callback=check)
    ok = len(worst) == 100 and max(worst) < 1e-13
    report("scale law", ok, f"max relative |S - ||W||_1/(CKK)| = {max(worst):.2e} over {len(worst)} steps")
    assert ok


def test_shift_algebra():
    rng = np.random.default_rng(11)
    failures = 0
    for _ in range(200):
        c = 2 * int(rng.integers(1, 40))
        h, w = (int(v) for v in rng.integers(1, 24, 2))
        frames = [rng.integers(-100, 100, (c, h, w)) for _ in range(3)]
        fwd = lambda p: sh.cyclic_temporal_shift(p, "forward")
        bwd = lambda p: sh.cyclic_temporal_shift(p, "backward")
        ids = lambda a, b: all(x is y for x, y in zip(a, b))
        if not (ids(fwd(bwd(frames)), frames) and ids(bwd(fwd(frames)), frames) and ids(fwd(fwd(fwd(frames))), frames)):
            failures += 1
        x, g = frames[0], rng.integers(-100, 100, (c, h, w))
        if np.sum(sh.spatial_shift(x) * g) != np.sum(x * sh.spatial_shift_adjoint(g)):
            failures += 1
    report("shift algebra", failures == 0, f"{200 - failures}/200 trials exact")
    assert failures == 0


def test_fused_width():
    widths = set()
    for cfg in (ModelConfig(), ModelConfig(base_channels=16, levels=4), ModelConfig(base_channels=48)):
        widths |= {cfg.width(lvl) for lvl in range(cfg.levels)}
    bad = []
    rng = np.random.default_rng(0)
    for c in sorted(widths):
        out = sh.st_shift_window([rng.normal(size=(c, 4, 4)) for _ in range(3)], "forward")
        if any(o.shape[0] != 3 * c // 2 for o in out):
            bad.append(c)
    # the model's stage-2 fusion layers consume exactly 3C/2 channels
    cfg = ModelConfig()
    for s in layer_specs(cfg):
        if s.stage == 2 and s.kind == "fuse":
            if ".dec" in s.name:
                src = cfg.width(s.level + 1)
            else:
                src = cfg.width(s.level - 1) if s.level else cfg.base_channels
            if s.c_in != 3 * src // 2:
                bad.append(s.name)
    report("3C/2 shape", not bad, f"widths {sorted(widths)} all fused to 3C/2" if not bad else f"mismatch: {bad}")
    assert not bad


def test_gradcheck():
    t0 = time.perf_counter()
    rep = gradcheck(toy_config(base_channels=8), tolerance=1e-4, seed=0)
    dt = time.perf_counter() - t0
    worst = max(g.rel_err for g in rep.groups)
    ok = rep.ok and dt < 300
    report("gradient check", ok, f"{len(rep.groups) - len(rep.failures)}/{len(rep.groups)} groups, worst rel err {worst:.2e}, {dt:.0f} s")
    for line in rep.lines():
        print("   ", line)
    assert ok


def test_efficiency_formulas():
    cfg = ModelConfig()
    fp, b = layer_ops(LayerSpec("probe", "block", 64, 64, 3, 0, 1), cfg, 256, 256)
    single = b == 64 * 64 * 9 * 256 * 256 and fp == 3 * cfg.daca_k * 64
    r = count_flops(cfg, 128, 128, 100)
    totals = r.total_flops == r.ops_fp + r.ops_bin / 64 and r.total_params == r.params_fp + r.params_bin / 32
    # runtime tally on a small model agrees with the analytic count
    small = ModelConfig(levels=2, base_channels=8, blocks_per_level=1)
    counter = ag.OpCounter()
    with ag.counting(counter):
        BrveModel.init(small, 0).forward(np.zeros((4, 4, 8, 8), np.float32), 2)
    a = count_flops(small, 8, 8, 4, 2)
    runtime = counter.fp == a.ops_fp * 4 and counter.binary == a.ops_bin * 4
    ok = single and totals and runtime
    report(
        "efficiency formulas",
        ok,
        f"single layer {b} binary ops; {r.total_flops / 1e9:.3f} GFLOPs, {r.total_params / 1e6:.3f} M params per frame at 256x256 raw; runtime tally {'matches' if runtime else 'differs'}",
    )
    assert ok


def test_stride_flops():
    cfg = ModelConfig()
    f = {s: count_flops(cfg, 128, 128, 100, s).total_flops for s in (1, 2, 3)}
    red = 1 - f[2] / f[1]
    ok = 0.30 <= red <= 0.55 and f[3] < f[2]
    report("stride ablation", ok, f"stride 2 saves {100 * red:.1f}% (band 30-55%), stride 3 saves {100 * (1 - f[3] / f[1]):.1f}%")
    assert ok


@pytest.mark.slow
def test_toy_denoising(heldout):
    t0 = time.perf_counter()
    m = BrveModel.init(ModelConfig(), 0)
    params = m.count_flops().total_params
    res = train_loop(m, EFFICACY_STEPS, seed=0, log_every=0)
    out_psnr, in_psnr, _ = evaluate(m, heldout)
    # determinism: a fresh run reproduces the start of the loss curve exactly
    again = train_loop(BrveModel.init(ModelConfig(), 0), 5, seed=0, log_every=0)
    same = [c[2] for c in again.curve] == [c[2] for c in train_loop(BrveModel.init(ModelConfig(), 0), 5, seed=0, log_every=0).curve]
    dt = time.perf_counter() - t0
    gain = out_psnr - in_psnr
    ok = gain >= 3.0 and dt <= 1800 and same and 0.1e6 <= params <= 0.4e6
    report(
        "toy denoising",
        ok,
        f"{out_psnr:.2f} dB vs noisy {in_psnr:.2f} dB (+{gain:.2f}, need 3) after {EFFICACY_STEPS} steps, "
        f"{params / 1e6:.3f} M params, {dt / 60:.1f} min, deterministic={same}",
    )
    assert ok


@pytest.mark.slow
def test_daca_ablation(heldout):
    on, off = [], []
    for seed in ABLATION_SEEDS:
        for use, acc in ((True, on), (False, off)):
            m = BrveModel.init(ModelConfig(use_daca=use), seed)
            train_loop(m, ABLATION_STEPS, seed=seed, log_every=0)
            acc.append(evaluate(m, heldout)[0])
    ok = np.mean(on) >= np.mean(off)
    report(
        "DACA ablation",
        ok,
        f"with DACA {np.mean(on):.3f} dB vs frozen {np.mean(off):.3f} dB (per seed {[round(a - b, 3) for a, b in zip(on, off)]})",
    )
    assert ok


def test_checkpoint_round_trip(tmp_path):
    m = BrveModel.init(ModelConfig(), 5)
    rng = np.random.default_rng(5)
    for p in m.params.values():
        p[...] = rng.normal(0, 0.1, p.shape)
    m.save(tmp_path / "m.brve")
    m2 = BrveModel.load(tmp_path / "m.brve")
    probe = rng.uniform(0, 1, (4, 4, 16, 16)).astype(np.float32)
    ok = m.forward(probe).tobytes() == m2.forward(probe).tobytes()
    report("checkpoint round-trip", ok, "bitwise-identical outputs on probe" if ok else "outputs differ")
    assert ok
