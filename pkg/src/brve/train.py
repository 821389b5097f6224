"""Desk-scale training and gradient checking.

Training minimises the Charbonnier loss with Adam under a cosine-annealed
learning rate.  Each step draws one synthetic 10-frame sequence.  Gradients
come from :mod:`brve.autograd`; latent binary weights and RSign thresholds
receive straight-through (clipped identity) gradients, and S is recomputed
from the latent weights on every forward pass.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .binkernels import weight_scale
from .model import BrveModel, ModelConfig, forward_vars
from .rawpipe import NoiseParams, training_pair

log = logging.getLogger(__name__)

BASE_LR = 2e-4
EPS = ag.CHARBONNIER_EPS


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = EPS) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier_loss: shape {pred.shape} vs {target.shape}")
    r = pred.astype(np.float64) - target
    return float(np.mean(np.sqrt(r * r + eps * eps)))


# --- optimizer --------------------------------------------------------------


def cosine_lr(step: int, base_lr: float, horizon: int) -> float:
    """Learning rate for 0-based ``step``: base at 0, decaying to 0 at ``horizon``."""
    if horizon <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, horizon) / horizon))


@dataclass
class OptimState:
    base_lr: float = BASE_LR
    horizon: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.base_lr, self.horizon)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> float:
    """In-place Adam update; returns the learning rate used."""
    lr = state.lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return lr


# --- training ---------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at step {step}: {snapshot}")
        self.step = step
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: BrveModel
    curve: list[tuple[int, float, float]]  # (step, lr, loss)
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        write_loss_csv(self.curve, path)


def write_loss_csv(curve: Iterable[tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(lr), repr(loss)])


def synthetic_dataset(seed: int, frames: int = 10, patch: int = 32, noise: NoiseParams | None = None):
    """Infinite deterministic stream of (noisy packed, clean packed) sequences."""
    rng = np.random.default_rng([seed, 7])
    while True:
        yield training_pair(int(rng.integers(2**31)), frames, patch, noise)


def loss_and_grads(model: BrveModel, noisy: np.ndarray, clean: np.ndarray, stride: int | None = None):
    p = model.variables(trainable=True)
    out = forward_vars(model, p, noisy, stride)
    loss = ag.charbonnier(out, clean.astype(model.config.dtype))
    ag.backward(loss)
    return float(loss.value), {k: v.grad for k, v in p.items()}


def train_loop(
    model: BrveModel,
    steps: int,
    seed: int = 0,
    dataset: Iterable | None = None,
    lr: float = BASE_LR,
    log_every: int = 50,
    csv_path=None,
    callback: Callable[[int, BrveModel], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place for ``steps`` Adam steps.

    ``dataset`` yields (noisy, clean) packed sequences; the default is
    :func:`synthetic_dataset` seeded with ``seed``.  ``callback(step, model)``
    runs after every update.
    """
    data = iter(dataset if dataset is not None else synthetic_dataset(seed))
    state = OptimState(base_lr=lr, horizon=steps)
    curve = []
    t0 = time.perf_counter()
    for step in range(steps):
        noisy, clean = next(data)
        loss, grads = loss_and_grads(model, noisy, clean)
        if not math.isfinite(loss):
            snap = {
                "lr": state.lr,
                "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items() if g is not None},
            }
            raise TrainingDiverged(step, snap)
        used = adam_step(model.params, grads, state)
        curve.append((step, used, loss))
        if callback is not None:
            callback(step, model)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d lr %.3g loss %.5f", step, used, loss)
    result = TrainResult(model, curve, time.perf_counter() - t0)
    if csv_path is not None:
        result.write_csv(csv_path)
    return result


def scale_errors(model: BrveModel) -> dict[str, float]:
    """Max |S - ||W||_1 / (C K K)| per binary layer, S as the model computes it."""
    out = {}
    for name in model.binary_layer_names():
        w = model.params[f"{name}.weight"]
        direct = np.abs(w.astype(np.float64)).sum(axis=(1, 2, 3)) / (w.shape[1] * w.shape[2] * w.shape[3])
        out[name] = float(np.max(np.abs(weight_scale(w) - direct)))
    return out


def evaluate(model: BrveModel, pairs: Iterable[tuple[np.ndarray, np.ndarray]], stride: int | None = None):
    """Mean (output PSNR, input PSNR, output SSIM) over held-out pairs."""
    from .rawpipe import sequence_psnr, sequence_ssim

    outs, ins, ss = [], [], []
    for noisy, clean in pairs:
        pred = np.clip(model.forward(noisy, stride), 0.0, 1.0)
        outs.append(sequence_psnr(pred, clean))
        ins.append(sequence_psnr(noisy, clean))
        ss.append(sequence_ssim(pred, clean))
    return float(np.mean(outs)), float(np.mean(ins)), float(np.mean(ss))


# --- gradient checking ------------------------------------------------------


def _is_binary_weight(name: str) -> bool:
    layer, leaf = name.rsplit(".", 1)
    return leaf == "weight" and layer not in ("s1.first", "s3.last")


def toy_config(**overrides) -> ModelConfig:
    cfg = dict(levels=2, base_channels=4, blocks_per_level=1, dtype="float64")
    cfg.update(overrides)
    return ModelConfig(**cfg)


def randomize_smooth(model: BrveModel, rng: np.random.Generator, margin: float = 0.05) -> None:
    """Give every parameter a generic value; thresholds stay ``margin`` from 0."""
    for name, p in model.params.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "alpha":
            p[...] = rng.choice([-1, 1], p.shape) * rng.uniform(margin, 0.3, p.shape)
        elif leaf in ("daca_kernel", "gamma", "zeta", "bias", "proj_bias"):
            p[...] = rng.normal(0, 0.3, p.shape)
        elif leaf == "daca_bias":
            p[...] = rng.normal(0, 0.5)
        elif leaf == "beta":
            p[...] = rng.uniform(0.1, 0.9, p.shape)


def param_group(name: str, model: BrveModel) -> str:
    """Group key: ``<kind>.<leaf>`` with kind in first/last, fuse, block."""
    layer, leaf = name.rsplit(".", 1)
    if layer in ("s1.first", "s3.last"):
        return f"fp_conv.{leaf}"
    kind = "fuse" if layer.endswith(".fuse") else "block"
    return f"{kind}.{leaf}"


@dataclass
class GroupResult:
    group: str
    rel_err: float
    coords: int
    skipped: int
    mode: str

    def passed(self, tol: float) -> bool:
        return self.coords > 0 and self.rel_err < tol


@dataclass
class GradcheckReport:
    groups: list[GroupResult]
    tolerance: float
    min_breakpoint_dist: dict

    @property
    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.passed(self.tolerance)]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            status = "PASS" if g.passed(self.tolerance) else "FAIL"
            out.append(f"{status} {g.mode:9s} {g.group:22s} rel_err={g.rel_err:.3e} coords={g.coords} skipped={g.skipped}")
        return out


def _loss_fn(model: BrveModel, frames, target, stride):
    def f():
        with ag.no_grad():
            out = forward_vars(model, model.variables(), frames, stride)
        r = out.value - target
        return float(np.mean(np.sqrt(r * r + EPS * EPS)))

    return f


def gradcheck(
    config: ModelConfig | None = None,
    tolerance: float = 1e-4,
    seed: int = 0,
    frames: int = 3,
    size: int = 8,
    coords_per_tensor: int = 3,
    h: float = 1e-6,
    stride: int = 1,
) -> GradcheckReport:
    """Analytic vs central-difference gradients on a small float64 model.

    Smooth groups are checked with the sign derivative set to zero, which
    is the exact derivative away from breakpoints.  Latent weights and RSign
    thresholds are then checked in surrogate mode: every sign is replaced by
    its linearization around the current point, whose exact derivative is
    the clipped-identity estimator the trainer uses.  Coordinates whose
    perturbation flips any branch of a piecewise op are skipped and counted.
    """
    config = config or toy_config()
    if config.dtype != "float64":
        raise ValueError("gradcheck needs a float64 config")
    rng = np.random.default_rng(seed)
    model = BrveModel.init(config, seed)
    randomize_smooth(model, rng)
    x = rng.uniform(0.0, 1.0, (frames, 4, size, size))
    target = rng.uniform(0.0, 1.0, (frames, 4, size, size))
    loss = _loss_fn(model, x, target, stride)

    results: list[GroupResult] = []
    base_log = ag.KinkLog()

    def analytic():
        p = model.variables(trainable=True)
        out = forward_vars(model, p, x, stride)
        ag.backward(ag.charbonnier(out, target))
        return {k: v.grad for k, v in p.items()}

    def run_mode(mode: str, names: list[str], grads: dict, replay: ag.Linearization | None):
        per_group: dict[str, list] = {}
        ref_log = ag.KinkLog()
        ctx = replay.replay() if replay is not None else _null()
        with ctx, ag.recording_kinks(ref_log):
            loss()
        for name in names:
            p = model.params[name]
            g = grads[name] if grads[name] is not None else np.zeros_like(p)
            flat = p.reshape(-1)
            idx = rng.choice(flat.size, min(coords_per_tensor, flat.size), replace=False)
            bucket = per_group.setdefault(param_group(name, model), [[], [], 0])
            for i in idx:
                old = flat[i]
                vals = []
                crossed = False
                for sgn in (1, -1):
                    flat[i] = old + sgn * h
                    klog = ag.KinkLog()
                    ctx = replay.replay() if replay is not None else _null()
                    with ctx, ag.recording_kinks(klog):
                        vals.append(loss())
                    crossed |= not klog.same_branches(ref_log)
                flat[i] = old
                if crossed:
                    bucket[2] += 1
                    continue
                bucket[0].append(g.reshape(-1)[i])
                bucket[1].append((vals[0] - vals[1]) / (2 * h))
        for group, (a, n, skipped) in sorted(per_group.items()):
            a, n = np.array(a), np.array(n)
            denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            err = float(np.linalg.norm(a - n) / denom) if a.size else math.inf
            results.append(GroupResult(group, err, int(a.size), skipped, mode))

    # smooth groups: exact derivative (sign' = 0)
    with ag.surrogate(ag.zero_surrogate):
        grads = analytic()
    with ag.recording_kinks(base_log):
        loss()
    smooth = [n for n in model.params if not _is_binary_weight(n)]
    run_mode("exact", smooth, grads, None)

    # straight-through groups: linearized forward, clipped-identity backward
    lin = ag.Linearization()
    with lin.record():
        loss()
    with lin.replay():
        grads = analytic()
    ste = [n for n in model.params if _is_binary_weight(n) or n.endswith(".alpha")]
    run_mode("surrogate", ste, grads, lin)
    return GradcheckReport(results, tolerance, base_log.min_dist)


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False
