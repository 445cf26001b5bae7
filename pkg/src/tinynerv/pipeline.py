"""Evaluation, throughput benchmarking and checkpoint quantization."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint, SizeReport, size_report
from .data import FrameDataset
from .errors import ConfigurationError, UsageError
from .metrics import MetricReport, report
from .model import VariantConfig, analyze, forward, init_params, make_variant
from .quant import QuantPolicy


def decode_all(params: Mapping[str, Tensor], cfg: VariantConfig, indices: Sequence[float]) -> np.ndarray:
    with ag.no_grad():
        return np.stack([forward(params, cfg, float(t)).data for t in indices])


def evaluate(checkpoint: Checkpoint | tuple, dataset: FrameDataset, label: str = "") -> MetricReport:
    """Decode every frame and score it. Accepts a Checkpoint or a (params, cfg) pair."""
    if isinstance(checkpoint, Checkpoint):
        cfg, params = checkpoint.variant, checkpoint.params()
    else:
        params, cfg = checkpoint
    if cfg.output_size != dataset.resolution:
        raise ConfigurationError(f"model decodes {cfg.output_size}, dataset frames are {dataset.resolution}")
    recon = decode_all(params, cfg, dataset.indices)
    return report(recon, dataset.frames, analyze(cfg).total_gflops, label or cfg.name)


@dataclass(frozen=True)
class BenchResult:
    label: str
    fps: float
    runs: tuple[float, ...]
    n_frames: int

    @property
    def ms_per_frame(self) -> float:
        return 1000.0 / self.fps


def benchmark(decoder: Callable[[float], object], n_frames: int = 8, warmup: int = 1, runs: int = 3, label: str = "") -> BenchResult:
    """Median-of-runs frames per second for sequential single-frame decodes."""
    if warmup < 1:
        raise UsageError("benchmark needs at least one warm-up decode")
    if n_frames < 1 or runs < 1:
        raise UsageError("n_frames and runs must be positive")
    ts = np.linspace(0.0, 1.0, n_frames)
    for i in range(warmup):
        decoder(float(ts[i % n_frames]))
    fps = []
    for _ in range(runs):
        start = time.perf_counter()
        for t in ts:
            decoder(float(t))
        fps.append(n_frames / (time.perf_counter() - start))
    return BenchResult(label, statistics.median(fps), tuple(fps), n_frames)


def model_decoder(params: Mapping[str, Tensor], cfg: VariantConfig) -> Callable[[float], np.ndarray]:
    def run(t: float) -> np.ndarray:
        with ag.no_grad():
            return forward(params, cfg, t).data

    return run


def stub_decoder(shape=(3, 180, 320)) -> Callable[[float], np.ndarray]:
    """Parameter-free decoder used to measure harness overhead."""
    frame = np.zeros(shape, dtype=np.float32)
    return lambda t: frame


def benchmark_variants(names: Sequence[str], n_frames: int = 8, warmup: int = 1, runs: int = 3) -> list[BenchResult]:
    """Throughput does not depend on weight values, so fresh initialisations are timed."""
    results = []
    for name in names:
        cfg = make_variant(name) if isinstance(name, str) else name
        params = init_params(cfg, seed=0)
        results.append(benchmark(model_decoder(params, cfg), n_frames, warmup, runs, label=cfg.name))
    return results


def bench_table(results: Sequence[BenchResult]) -> str:
    lines = [f"{'model':<12}{'FPS':>10}{'ms/frame':>12}"]
    for r in results:
        lines.append(f"{r.label:<12}{r.fps:>10.2f}{r.ms_per_frame:>12.2f}")
    return "\n".join(lines)


def quantize_cmd(checkpoint: Checkpoint, policy: QuantPolicy) -> tuple[Checkpoint, SizeReport]:
    """Post-training quantization of a float checkpoint plus a size comparison."""
    if checkpoint.is_quantized:
        raise UsageError(f"checkpoint is already quantized ({checkpoint.precision})")
    if policy.passthrough:
        raise ConfigurationError("quantize needs a bit width")
    q = checkpoint.quantized(policy)
    return q, size_report(checkpoint, q)
