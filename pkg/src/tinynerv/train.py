"""Per-video fitting loop shared by plain training, distillation and QAT fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import FrameDataset
from .distill import KDConfig, adapter_stages, init_adapters, total_loss
from .errors import ConfigurationError, TrainingDiverged, UsageError
from .model import VariantConfig, clone_params, forward, init_params, make_variant
from .quant import QuantPolicy, fake_quant_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "frame", "lr", "loss", "recon", "kd")


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p.data -= ((lr / c1) * m / denom).astype(p.dtype)

    def zero_grad(self) -> None:
        ag.zero_grad(self.params)


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = (step - warmup) / (total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))


@dataclass
class RunConfig:
    variant: str = "T-desk"
    epochs: int = 100
    steps: int | None = None  # overrides epochs when set
    lr: float = 5e-4
    warmup_steps: int = 0
    batch_size: int = 1
    beta: float = 0.7
    kd: KDConfig = field(default_factory=KDConfig)
    quant: QuantPolicy | None = None
    teacher: str | None = None
    base_checkpoint: str | None = None
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.kd is None:
            self.kd = KDConfig()

    def total_steps(self, n_frames: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return self.epochs * math.ceil(n_frames / self.batch_size)

    def variant_config(self) -> VariantConfig:
        from .model import load_variant

        return load_variant(self.variant)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    cfg: VariantConfig
    history: list[dict]
    adapters: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")

    def to_checkpoint(self):
        from .checkpoint import Checkpoint

        return Checkpoint.from_params(self.cfg, self.params, self.metadata)


@dataclass
class Teacher:
    params: Mapping[str, Tensor]
    cfg: VariantConfig


def _teacher_outputs(teacher: Teacher, dataset: FrameDataset) -> np.ndarray:
    outs = []
    with ag.no_grad():
        for t in dataset.indices:
            outs.append(forward(teacher.params, teacher.cfg, float(t)).data.astype(np.float32))
    return np.stack(outs)


def fit(
    params: dict[str, Tensor],
    cfg: VariantConfig,
    dataset: FrameDataset,
    run: RunConfig,
    teacher: Teacher | None = None,
    quant: QuantPolicy | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Optimise ``params`` in place-free fashion (a copy is trained and returned)."""
    kd = run.kd
    h, w = dataset.resolution
    if cfg.output_size != (h, w):
        raise ConfigurationError(f"{cfg.name} decodes {cfg.output_size[0]}x{cfg.output_size[1]} frames, dataset is {h}x{w}")
    if kd.mode != "none" and teacher is None:
        raise UsageError(f"KD mode {kd.mode!r} needs a teacher")
    if teacher is not None and teacher.cfg.output_size != cfg.output_size:
        raise ConfigurationError(
            f"teacher resolution {teacher.cfg.output_size} does not match student {cfg.output_size}"
        )
    if kd.mode == "temporal" and run.batch_size != 1:
        raise ConfigurationError("temporal KD is implemented for batch size 1")
    if run.batch_size < 1:
        raise ConfigurationError("batch size must be >= 1")

    params = clone_params(params)
    adapters: dict[str, Tensor] = {}
    stages: list[int] = []
    if kd.mode == "feature":
        stages = adapter_stages(cfg, teacher.cfg, kd.feature_stages)
        adapters = init_adapters(cfg, teacher.cfg, stages, seed=run.seed)
    trainable = list(params.values()) + list(adapters.values())
    opt = Adam(trainable, lr=run.lr)

    teacher_frames = None
    if kd.mode in ("final", "freq", "freq_focal", "temporal"):
        teacher_frames = _teacher_outputs(teacher, dataset)  # teacher is frozen: decode once

    n = len(dataset)
    total = run.total_steps(n)
    per_epoch = math.ceil(n / run.batch_size)
    rng = np.random.default_rng(run.seed)
    idx_t = dataset.indices
    history: list[dict] = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    started = time.perf_counter()
    try:
        order = np.empty(0, dtype=int)
        for step in range(total):
            epoch, pos = divmod(step, per_epoch)
            if pos == 0:
                order = rng.permutation(n)
            batch = order[pos * run.batch_size : (pos + 1) * run.batch_size]
            lr = cosine_lr(step, total, run.lr, run.warmup_steps)
            eff = fake_quant_params(params, quant) if quant is not None else params
            ts = idx_t[batch]
            gt = dataset.frames[batch]
            extras = {}
            if kd.mode == "feature":
                out = forward(eff, cfg, ts, features=True)
                pred = out.frame
                with ag.no_grad():
                    tout = forward(teacher.params, teacher.cfg, ts, features=True)
                extras = {
                    "student_feats": {s: out.features[s - 1] for s in stages},
                    "teacher_feats": {s: tout.features[s - 1].data for s in stages},
                    "adapters": adapters,
                }
            elif kd.mode == "temporal":
                i = int(batch[0])
                j = i - kd.delta
                if j >= 0:
                    both = forward(eff, cfg, np.array([idx_t[i], idx_t[j]]))
                    pred = ag.reshape(_take(both, 0), (1, 3, h, w))
                    extras = {"student_prev": ag.reshape(_take(both, 1), (1, 3, h, w)), "teacher_prev": teacher_frames[[j]]}
                else:
                    pred = forward(eff, cfg, ts)
                    extras = {"student_prev": None, "teacher_prev": None}
            else:
                pred = forward(eff, cfg, ts)
            tpred = teacher_frames[batch] if teacher_frames is not None else None
            terms: dict = {}
            loss = total_loss(pred, gt, tpred, kd, extras, beta=run.beta, log=terms)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}")
            ag.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            row = {"step": step, "epoch": epoch, "frame": int(batch[0]), "lr": lr, "loss": value, **terms}
            history.append(row)
            if writer is not None:
                writer.writerow(row)
            if run.checkpoint_every and checkpoint_dir is not None and (step + 1) % run.checkpoint_every == 0:
                TrainResult(params, cfg, history).to_checkpoint().save(Path(checkpoint_dir) / f"step_{step + 1:06d}.tnrv")
            if step % 200 == 0:
                log.debug("step %d/%d loss %.5f", step, total, value)
    finally:
        if log_file is not None:
            log_file.close()
    meta = {
        "steps": total,
        "seed": run.seed,
        "lr": run.lr,
        "kd_mode": kd.mode,
        "lambda_kd": kd.lambda_kd,
        "quant_bits": None if quant is None else quant.bits,
        "final_loss": history[-1]["loss"] if history else None,
        "seconds": round(time.perf_counter() - started, 3),
    }
    for p in params.values():
        p.grad = None
    return TrainResult(params, cfg, history, adapters, meta)


def _take(x: Tensor, i: int) -> Tensor:
    """Differentiable ``x[i]`` along the leading axis."""
    data = x.data[i]

    def bw(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return ag._make(np.ascontiguousarray(data), (x,), bw, "take")


def train(dataset: FrameDataset, run: RunConfig, init: Mapping[str, Tensor] | None = None, **kwargs) -> TrainResult:
    """Fit a fresh (or given) model to ``dataset`` with the reconstruction loss."""
    cfg = run.variant_config()
    if run.kd.mode != "none":
        raise UsageError("train() runs without distillation; use distill() for KD modes")
    params = init if init is not None else init_params(cfg, seed=run.seed)
    return fit(dict(params), cfg, dataset, run, quant=run.quant, **kwargs)


def distill(dataset: FrameDataset, run: RunConfig, teacher: Teacher, init=None, **kwargs) -> TrainResult:
    """Same loop as :func:`train` with a frozen teacher supervising through ``run.kd``."""
    cfg = run.variant_config()
    params = init if init is not None else init_params(cfg, seed=run.seed)
    return fit(dict(params), cfg, dataset, run, teacher=teacher, quant=run.quant, **kwargs)


def qat_finetune(
    params: Mapping[str, Tensor] | None,
    dataset: FrameDataset,
    policy: QuantPolicy,
    kd_cfg: KDConfig | None = None,
    steps: int = 0,
    cfg: VariantConfig | None = None,
    teacher: Teacher | None = None,
    lr: float = 1e-4,
    seed: int = 0,
    **kwargs,
) -> TrainResult:
    """Fine-tune full-precision ``params`` with fake-quantized weights (STE gradients)."""
    if params is None:
        raise UsageError("QAT starts from a full-precision checkpoint; none given")
    if policy.passthrough:
        raise ConfigurationError("QAT needs a bit width")
    if cfg is None:
        raise UsageError("qat_finetune needs the model's VariantConfig")
    run = RunConfig(variant=cfg.name, steps=steps, lr=lr, kd=kd_cfg or KDConfig(), seed=seed)
    if steps == 0:
        return TrainResult(clone_params(params), cfg, [], metadata={"steps": 0, "quant_bits": policy.bits})
    return fit(dict(params), cfg, dataset, run, teacher=teacher, quant=policy, **kwargs)
