"""Command-line front end: ``tinynerv <command> ...``.

Exit codes: 0 success, 2 input error, 3 configuration error, 4 I/O error,
5 usage error, 6 malformed file, 7 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint
from .data import ingest, synthetic_video, write_frames
from .distill import KD_MODES, KDConfig
from .errors import ConfigurationError, StorageError, TinyNervError, UsageError
from .model import analyze, load_variant, variant_names
from .pipeline import bench_table, benchmark, benchmark_variants, decode_all, evaluate, model_decoder, quantize_cmd, stub_decoder
from .quant import QuantPolicy, ptq_apply
from .train import RunConfig, Teacher, distill, qat_finetune, train

OUT_ENV = "TINYNERV_OUT"


def _out_dir(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int) or target is None and value.isdigit():
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if value.lower() in ("none", "null", ""):
        return None
    return value


def read_config_file(path: str | Path) -> dict:
    """``key = value`` lines; ``kd.<field>`` and ``quant.<field>`` address nested settings."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


def build_run_config(args, overrides: dict | None = None) -> RunConfig:
    kd_fields = {f.name: f.default for f in dataclasses.fields(KDConfig)}
    run_fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    run_kw = {}
    kd_kw = {}
    for name in ("variant", "epochs", "steps", "lr", "seed", "batch_size", "warmup_steps", "checkpoint_every"):
        v = getattr(args, name, None)
        if v is not None:
            run_kw[name] = v
    for name in ("mode", "lambda_kd", "alpha", "gamma", "sigma", "kernel_radius", "delta"):
        v = getattr(args, f"kd_{name}", None)
        if v is not None:
            kd_kw[name] = v
    bits = getattr(args, "bits", None)
    granularity = getattr(args, "granularity", None) or "per_channel"
    # config file wins over flags
    for k, v in (overrides or {}).items():
        if k.startswith("kd."):
            key = k[3:]
            if key not in kd_fields:
                raise ConfigurationError(f"unknown KD setting {key!r}")
            kd_kw[key] = _coerce(v, kd_fields[key])
        elif k == "quant.bits":
            bits = v
        elif k == "quant.granularity":
            granularity = v
        elif k in run_fields and k not in ("kd", "quant"):
            default = run_fields[k].default
            run_kw[k] = _coerce(v, default if default is not dataclasses.MISSING else "")
        else:
            raise ConfigurationError(f"unknown run setting {k!r}")
    quant = QuantPolicy.parse(bits, granularity) if bits is not None else None
    if quant is not None and quant.passthrough:
        quant = None
    return RunConfig(kd=KDConfig(**kd_kw), quant=quant, **run_kw)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", help="frame directory")
    p.add_argument("--variant", help=f"preset ({', '.join(variant_names())}) or key=value file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--config", help="key=value run config; overrides flags")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")


def _add_kd_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--kd-mode", dest="kd_mode", choices=KD_MODES)
    p.add_argument("--lambda-kd", dest="kd_lambda_kd", type=float)
    p.add_argument("--alpha", dest="kd_alpha", type=float)
    p.add_argument("--gamma", dest="kd_gamma", type=float)
    p.add_argument("--sigma", dest="kd_sigma", type=float)
    p.add_argument("--kernel-radius", dest="kd_kernel_radius", type=int)
    p.add_argument("--delta", dest="kd_delta", type=int)


def _load_teacher(path: str | None) -> Teacher | None:
    if not path:
        return None
    ck = Checkpoint.load(path)
    return Teacher(ck.params(), ck.variant)


def cmd_ingest_check(args) -> int:
    ds = ingest(args.data)
    h, w = ds.resolution
    print(f"frames: {len(ds)}\nresolution: {h}x{w}\nindices: {ds.indices[0]:.6f} .. {ds.indices[-1]:.6f}")
    return 0


def cmd_synth(args) -> int:
    ds = synthetic_video(args.frames, args.height, args.width, args.seed)
    paths = write_frames(ds.frames, args.out, args.format)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    reports = [analyze(load_variant(v), args.scale) for v in args.variants]
    print("\n\n".join(r.table() for r in reports))
    if args.csv:
        text = reports[0].to_csv() + "".join(r.to_csv().split("\n", 1)[1] for r in reports[1:])
        _write_text(args.csv, text)
    return 0


def _write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _run_training(args, command: str) -> int:
    overrides = read_config_file(args.config) if args.config else {}
    run = build_run_config(args, overrides)
    teacher_path = overrides.get("teacher") or getattr(args, "teacher", None)
    ds = ingest(args.data)
    out = _out_dir(args, command)
    out.mkdir(parents=True, exist_ok=True)
    if command == "train":
        if run.kd.mode != "none":
            raise UsageError("use the distill command for KD modes")
        result = train(ds, run, log_path=out / "train_log.csv", checkpoint_dir=out)
    else:
        if run.kd.mode == "none":
            raise UsageError("distill needs --kd-mode")
        teacher = _load_teacher(teacher_path)
        if teacher is None:
            raise UsageError("distill needs --teacher")
        result = distill(ds, run, teacher, log_path=out / "train_log.csv", checkpoint_dir=out)
    ck = result.to_checkpoint()
    ck.save(out / "model.tnrv")
    rep = evaluate(ck, ds)
    _write_text(out / "metrics.csv", rep.to_csv())
    print(rep.table())
    print(f"checkpoint: {out / 'model.tnrv'}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "train")


def cmd_distill(args) -> int:
    return _run_training(args, "distill")


def cmd_quantize(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    q, size = quantize_cmd(ck, QuantPolicy.parse(args.bits, args.granularity))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".int{args.bits}.tnrv")
    q.save(out)
    print(size.table())
    print(f"quantized checkpoint: {out}")
    return 0


def cmd_qat(args) -> int:
    overrides = read_config_file(args.config) if args.config else {}
    run = build_run_config(args, overrides)
    ck = Checkpoint.load(args.checkpoint)
    if ck.is_quantized:
        raise UsageError("QAT starts from a full-precision checkpoint")
    ds = ingest(args.data)
    policy = QuantPolicy.parse(args.bits, args.granularity)
    teacher = _load_teacher(overrides.get("teacher") or args.teacher)
    out = _out_dir(args, "qat")
    out.mkdir(parents=True, exist_ok=True)
    steps = run.steps if run.steps is not None else run.total_steps(len(ds))
    result = qat_finetune(
        ck.params(), ds, policy, kd_cfg=run.kd, steps=steps, cfg=ck.variant, teacher=teacher,
        lr=args.lr if args.lr is not None else 1e-4, seed=run.seed, log_path=out / "train_log.csv",
    )
    latent = result.to_checkpoint()
    latent.save(out / "latent_fp32.tnrv")
    q, size = quantize_cmd(latent, policy)
    q.save(out / f"model.int{policy.bits}.tnrv")
    rep = evaluate(q, ds)
    _write_text(out / "metrics.csv", rep.to_csv())
    print(rep.table())
    print(size.table())
    return 0


def cmd_evaluate(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    ds = ingest(args.data)
    rep = evaluate(ck, ds, label=f"{ck.variant.name} [{ck.precision}]")
    print(rep.table())
    if args.csv:
        _write_text(args.csv, rep.to_csv())
    return 0


def cmd_benchmark(args) -> int:
    results = []
    if args.stub:
        results.append(benchmark(stub_decoder(), args.frames, args.warmup, args.runs, label="stub"))
    for path in args.checkpoints:
        ck = Checkpoint.load(path)
        results.append(benchmark(model_decoder(ck.params(), ck.variant), args.frames, args.warmup, args.runs, label=ck.variant.name))
    if args.variants:
        results.extend(benchmark_variants(args.variants, args.frames, args.warmup, args.runs))
    if not results:
        raise UsageError("nothing to benchmark: give checkpoints, --variants or --stub")
    print(bench_table(results))
    return 0


def cmd_decode(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    n = args.frames
    indices = [i / (n - 1) if n > 1 else 0.0 for i in range(n)]
    frames = decode_all(ck.params(), ck.variant, indices)
    paths = write_frames(frames, args.out, args.format)
    print(f"decoded {len(paths)} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinynerv", description="Tiny NeRV video fitting, distillation and quantization")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="validate a frame directory")
    p.add_argument("data")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("synth", help="write the procedural test clip")
    p.add_argument("out")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("png", "ppm", "rgb"), default="png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="layer-wise GFLOPs and parameter counts")
    p.add_argument("variants", nargs="*", default=["T", "T+", "S"])
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="fit a model to a frame directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="fit a student with a frozen teacher")
    _add_run_flags(p)
    _add_kd_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("quantize", help="post-training weight quantization")
    p.add_argument("checkpoint")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--granularity", choices=("per_channel", "per_tensor"), default="per_channel")
    p.add_argument("--out")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("qat", help="quantization-aware fine-tuning from a float checkpoint")
    _add_run_flags(p)
    _add_kd_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--granularity", choices=("per_channel", "per_tensor"), default="per_channel")
    p.set_defaults(func=cmd_qat)

    p = sub.add_parser("evaluate", help="PSNR / MS-SSIM / temporal metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="decode throughput")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--variants", nargs="*")
    p.add_argument("--stub", action="store_true", help="also time a parameter-free decoder")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--runs", type=int, default=3)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("decode", help="write decoded frames")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--format", choices=("png", "ppm", "rgb"), default="png")
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TinyNervError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
