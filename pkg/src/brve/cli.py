"""Command-line entry points: synth, train, enhance, bench, gradcheck, verify.

Config files are plain ``key = value`` lines (``#`` starts a comment) whose
keys are :class:`~brve.model.ModelConfig` fields.  Every command that writes
files also writes ``manifest.json`` next to them, recording the flags needed
to reproduce the run.  ``BRVE_THREADS`` caps worker threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .binkernels import binary_conv2d, dense_binary_conv2d, verify_bitexact
from .model import BrveModel, ModelConfig, load_checkpoint
from .rawpipe import (
    MotionSpec,
    NoiseParams,
    RawSequence,
    amplify,
    load_rsq,
    save_rsq,
    sequence_psnr,
    sequence_ssim,
    synth_sequence,
    unpack_bayer,
)
from .tensor import pack

log = logging.getLogger("brve")


class CliError(Exception):
    """User-facing error; printed without a traceback, exit status 2."""


# --- config / manifest -------------------------------------------------------


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip("\"'")


def parse_config_text(text: str, source: str = "<config>") -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError(f"{source}:{lineno}: unknown config key {key!r} (known: {', '.join(sorted(known))})")
        values[key] = _parse_value(val)
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as e:
        raise CliError(f"{source}: invalid config: {e}") from e


def load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    p = Path(path)
    if not p.is_file():
        raise CliError(f"--config: no such file {p}")
    return parse_config_text(p.read_text(), str(p))


def format_config(cfg: ModelConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in asdict(cfg).items())


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    raise TypeError(f"not serializable: {type(x)}")


def threads() -> int:
    raw = os.environ.get("BRVE_THREADS", "")
    if not raw:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"BRVE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"BRVE_THREADS must be a positive integer, got {raw!r}")
    return n


def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError(f"{args.command}: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, cfg: ModelConfig | None, argv, **kw) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        config_path=getattr(args, "config", None),
        config=asdict(cfg) if cfg is not None else {},
        seed=getattr(args, "seed", None),
        **kw,
    )


# --- previews ---------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit binary PPM of an ``(H, W)`` array in [0, 1], grey in all three channels."""
    v = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.repeat(v[:, :, None], 3, axis=2).tobytes())


# --- commands ---------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    out = _out_dir(args)
    motion = MotionSpec(velocity=tuple(args.velocity) if args.velocity else None)
    noise = NoiseParams(gain=args.gain, sigma=args.sigma, ratio=args.ratio)
    noisy, clean = synth_sequence(args.seed, args.frames, args.height, args.width, motion, noise)
    save_rsq(noisy, out / "noisy.rsq")
    save_rsq(clean, out / "clean.rsq")
    metrics = {"input_psnr": sequence_psnr(amplify(noisy.packed(), noisy.ratio), clean.packed())}
    _manifest(args, None, argv, outputs=["noisy.rsq", "clean.rsq"], metrics=metrics).write(out)
    print(f"wrote {out / 'noisy.rsq'} and {out / 'clean.rsq'} (input PSNR {metrics['input_psnr']:.2f} dB)")
    return 0


def cmd_train(args, argv) -> int:
    from .train import TrainingDiverged, evaluate, train_loop
    from .rawpipe import training_pair

    cfg = load_config(args.config)
    out = _out_dir(args)
    model = BrveModel.init(cfg, args.seed)
    try:
        result = train_loop(model, args.steps, seed=args.seed, lr=args.lr, log_every=args.log_every, csv_path=out / "loss.csv")
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    model.save(out / "model.brve")
    held = [training_pair(10**6 + i, 10, 32) for i in range(args.eval_sequences)]
    out_psnr, in_psnr, out_ssim = evaluate(model, held)
    metrics = {
        "final_loss": result.curve[-1][2] if result.curve else None,
        "heldout_output_psnr": out_psnr,
        "heldout_input_psnr": in_psnr,
        "heldout_output_ssim": out_ssim,
        "seconds": result.seconds,
    }
    _manifest(args, cfg, argv, outputs=["model.brve", "loss.csv"], metrics=metrics).write(out)
    print(f"trained {args.steps} steps: held-out PSNR {out_psnr:.2f} dB (input {in_psnr:.2f} dB)")
    return 0


def _pad_to(x: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x, (h, w)


def enhance_sequence(model: BrveModel, seq: RawSequence, stride: int | None = None) -> RawSequence:
    """Amplify, pack, enhance and unpack one raw sequence."""
    x = amplify(seq.packed(), seq.ratio).astype(model.config.dtype)
    x, (h, w) = _pad_to(x, 2 ** (model.config.levels - 1))
    y = np.clip(model.forward(x, stride), 0.0, 1.0)[..., :h, :w]
    return RawSequence(unpack_bayer(y).astype(np.float32), seq.pattern, seq.black_level, seq.white_level, 1.0)


def cmd_enhance(args, argv) -> int:
    if not args.inputs:
        raise CliError("enhance: --in is required")
    out = _out_dir(args)
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise CliError(f"--checkpoint: no such file {args.checkpoint}")
        model = load_checkpoint(args.checkpoint)
        cfg = model.config
    else:
        cfg = load_config(args.config)
        model = BrveModel.init(cfg, args.seed)
    seqs = []
    for p in args.inputs:
        if not Path(p).is_file():
            raise CliError(f"--in: no such file {p}")
        seqs.append(load_rsq(p))
    refs = [None] * len(seqs)
    if args.ref:
        if len(args.ref) != len(seqs):
            raise CliError(f"--ref: expected {len(seqs)} files, got {len(args.ref)}")
        refs = [load_rsq(p) for p in args.ref]

    with ThreadPoolExecutor(threads()) as ex:
        results = list(ex.map(lambda s: enhance_sequence(model, s, args.stride), seqs))

    outputs, metrics = [], {}
    for k, (src, seq, enhanced, ref) in enumerate(zip(args.inputs, seqs, results, refs)):
        stem = Path(src).stem if len(seqs) == 1 else f"{k:02d}_{Path(src).stem}"
        name = f"{stem}_enhanced.rsq"
        save_rsq(enhanced, out / name)
        outputs.append(name)
        for t, frame in enumerate(enhanced.frames):
            pname = f"{stem}_{t:03d}.ppm"
            write_ppm(out / pname, frame)
            outputs.append(pname)
        m = {"frames": int(enhanced.frames.shape[0]), "mean_level": float(enhanced.frames.mean())}
        if ref is not None:
            amp = amplify(seq.packed(), seq.ratio)
            m["output_psnr"] = sequence_psnr(enhanced.packed(), ref.packed())
            m["input_psnr"] = sequence_psnr(amp, ref.packed())
            m["output_ssim"] = sequence_ssim(enhanced.packed(), ref.packed())
            m["input_ssim"] = sequence_ssim(amp, ref.packed())
        metrics[src] = m
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True, default=_jsonable) + "\n")
    outputs.append("metrics.json")
    _manifest(args, cfg, argv, inputs=list(args.inputs) + list(args.ref or []), outputs=outputs, metrics=metrics).write(out)
    for src, m in metrics.items():
        extra = f", PSNR {m['output_psnr']:.2f} dB (input {m['input_psnr']:.2f})" if "output_psnr" in m else ""
        print(f"{src}: {m['frames']} frames{extra}")
    return 0


def _time(fn, repeat: int) -> float:
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_timings(seed: int = 0, repeat: int = 3) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for c, hw in ((32, 64), (64, 32), (128, 16)):
        a = rng.choice(np.array([-1.0, 1.0]), (c, hw, hw))
        w = rng.choice(np.array([-1.0, 1.0]), (c, c, 3, 3))
        ap, wp = pack(a, axis=0), pack(w, axis=1)
        t_packed = _time(lambda: binary_conv2d(ap, wp, 1, 1), repeat)
        t_dense = _time(lambda: dense_binary_conv2d(a, w, 1, 1), repeat)
        rows.append({"channels": c, "size": hw, "packed_s": t_packed, "dense_s": t_dense})
    return rows


def cmd_bench(args, argv) -> int:
    cfg = load_config(args.config)
    stride = args.stride if args.stride is not None else cfg.stride
    report = BrveModel.init(cfg, args.seed).count_flops(args.height, args.width, args.frames, stride)
    base = BrveModel.init(cfg, args.seed).count_flops(args.height, args.width, args.frames, 1)
    ratio = report.total_flops / base.total_flops
    print(f"config: levels={cfg.levels} base={cfg.base_channels} blocks={cfg.blocks_per_level} stride={stride}")
    print(f"frame (packed): {args.height}x{args.width}, T={args.frames}")
    print(f"ops_fp        {report.ops_fp / 1e9:10.4f} G per frame")
    print(f"ops_bin       {report.ops_bin / 1e9:10.4f} G per frame (binary)")
    print(f"total FLOPs   {report.total_flops / 1e9:10.4f} G per frame")
    print(f"params_fp     {report.params_fp / 1e6:10.4f} M")
    print(f"params_bin    {report.params_bin / 1e6:10.4f} M")
    print(f"total params  {report.total_params / 1e6:10.4f} M")
    print(f"FLOPs ratio vs stride 1: {ratio:.4f}")
    timings = kernel_timings(args.seed, args.repeat)
    print(f"{'C':>5} {'HxW':>7} {'packed ms':>10} {'dense ms':>10}")
    for r in timings:
        print(f"{r['channels']:5d} {r['size']:3d}x{r['size']:<3d} {r['packed_s'] * 1e3:10.2f} {r['dense_s'] * 1e3:10.2f}")
    if args.out:
        out = _out_dir(args)
        result = {"flops": report.as_dict(), "stride1_flops": base.as_dict(), "ratio_vs_stride1": ratio, "timings": timings}
        (out / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        _manifest(args, cfg, argv, outputs=["bench.json"], metrics={"ratio_vs_stride1": ratio}).write(out)
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .train import gradcheck, toy_config

    report = gradcheck(toy_config(), tolerance=args.tolerance, seed=args.seed)
    for line in report.lines():
        print(line)
    n_ok = len(report.groups) - len(report.failures)
    print(f"{n_ok}/{len(report.groups)} groups within {args.tolerance:g}")
    if args.out:
        out = _out_dir(args)
        data = {"tolerance": args.tolerance, "groups": [asdict(g) for g in report.groups]}
        (out / "gradcheck.json").write_text(json.dumps(data, indent=2, default=_jsonable) + "\n")
        _manifest(args, None, argv, outputs=["gradcheck.json"], metrics={"passed": n_ok, "total": len(report.groups)}).write(out)
    return 0 if report.ok else 1


def cmd_verify(args, argv) -> int:
    t0 = time.perf_counter()
    ok = verify_bitexact(args.cases, args.seed, threads())
    n = sum(ok)
    print(f"{n}/{len(ok)} exact ({time.perf_counter() - t0:.1f} s)")
    if args.out:
        out = _out_dir(args)
        _manifest(args, None, argv, metrics={"exact": n, "cases": len(ok)}).write(out)
    return 0 if n == len(ok) else 1


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brve", description="Binarized raw video enhancement tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")
        if config:
            p.add_argument("--config", help="key = value model config file")

    p = sub.add_parser("synth", help="write a synthetic noisy/clean RSQ1 pair")
    common(p, config=False)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--gain", type=float, default=NoiseParams.gain)
    p.add_argument("--sigma", type=float, default=NoiseParams.sigma)
    p.add_argument("--ratio", type=float, default=NoiseParams.ratio)
    p.add_argument("--velocity", type=int, nargs=2, metavar=("VX", "VY"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on synthetic sequences")
    common(p)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--eval-sequences", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance RSQ1 sequences")
    common(p)
    p.add_argument("--in", dest="inputs", nargs="+", help="noisy RSQ1 file(s)")
    p.add_argument("--ref", nargs="+", help="clean RSQ1 file(s) for metrics")
    p.add_argument("--checkpoint", help="BRVE1 checkpoint; omit for a randomly initialised model")
    p.add_argument("--stride", type=int, choices=(1, 2, 3))
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("bench", help="FLOPs/params report and kernel timings")
    common(p)
    p.add_argument("--stride", type=int, choices=(1, 2, 3))
    p.add_argument("--height", type=int, default=128, help="packed frame height")
    p.add_argument("--width", type=int, default=128, help="packed frame width")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, config=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("verify", help="packed vs dense binary conv bit-exactness")
    common(p, config=False)
    p.add_argument("--cases", type=int, default=1000)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, argv)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
