"""Reconstruction objective and teacher-distillation losses.

All L1 norms are means over elements. Teacher frames and features enter as
constants, so no gradient ever reaches teacher parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, InputError, UsageError
from .filters import blur, ssim
from .model import VariantConfig

KD_MODES = ("none", "final", "freq", "freq_focal", "temporal", "feature")


@dataclass
class KDConfig:
    mode: str = "none"
    lambda_kd: float = 1.0
    alpha: float = 2.0
    gamma: float = 1.0
    sigma: float = 1.0
    kernel_radius: int = 3
    delta: int = 1
    feature_stages: tuple[int, ...] = (2, 3, 4, 5)
    w_floor: float = 0.1
    eps: float = 1e-8

    def __post_init__(self):
        self.feature_stages = tuple(int(s) for s in self.feature_stages)
        if self.mode not in KD_MODES:
            raise ConfigurationError(f"unknown KD mode {self.mode!r}; expected one of {KD_MODES}")
        if self.lambda_kd < 0 or self.alpha < 0 or self.gamma < 0 or self.w_floor < 0:
            raise ConfigurationError("lambda_kd, alpha, gamma and w_floor must be >= 0")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be > 0")
        if self.kernel_radius < math.ceil(3 * self.sigma):
            raise ConfigurationError(f"kernel_radius {self.kernel_radius} < ceil(3*sigma) = {math.ceil(3 * self.sigma)}")
        if self.delta < 1:
            raise ConfigurationError("temporal step delta must be >= 1")

    @property
    def active(self) -> bool:
        return self.mode != "none" and self.lambda_kd > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_stages"] = list(self.feature_stages)
        return d


def _same_shape(a: Tensor, b, what: str) -> None:
    if tuple(a.shape) != tuple(np.shape(b.data if isinstance(b, Tensor) else b)):
        raise InputError(f"{what}: shape mismatch {a.shape} vs {np.shape(b.data if isinstance(b, Tensor) else b)}")


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x.detach() if x.requires_grad else x
    return Tensor(np.asarray(x, dtype=like.dtype))


def l1(a: Tensor, b) -> Tensor:
    return ag.mean(ag.tabs(a - b))


def recon_loss(pred: Tensor, gt, beta: float = 0.7) -> Tensor:
    """beta * L1 + (1 - beta) * (1 - SSIM)."""
    gt = _const(gt, pred)
    _same_shape(pred, gt, "recon_loss")
    return beta * l1(pred, gt) + (1.0 - beta) * (1.0 - ssim(pred, gt))


def kd_final(student: Tensor, teacher) -> Tensor:
    teacher = _const(teacher, student)
    _same_shape(student, teacher, "kd_final")
    return l1(student, teacher)


def freq_split(x: Tensor, sigma: float = 1.0, kernel_radius: int = 3) -> tuple[Tensor, Tensor]:
    """Gaussian low band and its residual; ``low + high`` reproduces ``x``."""
    low = blur(x, sigma, kernel_radius)
    return low, x - low


def kd_freq(student: Tensor, teacher, alpha: float = 2.0, sigma: float = 1.0, kernel_radius: int = 3) -> Tensor:
    teacher = _const(teacher, student)
    _same_shape(student, teacher, "kd_freq")
    s_low, s_high = freq_split(student, sigma, kernel_radius)
    t_low, t_high = freq_split(teacher, sigma, kernel_radius)
    return l1(s_low, t_low) + alpha * l1(s_high, t_high)


def focal_weights(s_high, t_high, gamma: float = 1.0, w_floor: float = 0.1, eps: float = 1e-8) -> np.ndarray:
    """Per-pixel weight map from the channel-averaged high-band mismatch.

    Normalised by the per-frame maximum, raised to ``gamma`` and offset by
    ``w_floor``; shape [..., 1, H, W]. Returned as plain data (no gradient).
    """
    sd = s_high.data if isinstance(s_high, Tensor) else np.asarray(s_high)
    td = t_high.data if isinstance(t_high, Tensor) else np.asarray(t_high)
    e = np.abs(sd - td).mean(axis=-3, keepdims=True)
    peak = e.max(axis=(-2, -1), keepdims=True)
    return np.power(e / (peak + eps), gamma) + w_floor


def kd_freq_focal(
    student: Tensor,
    teacher,
    alpha: float = 2.0,
    gamma: float = 1.0,
    sigma: float = 1.0,
    kernel_radius: int = 3,
    w_floor: float = 0.1,
    eps: float = 1e-8,
) -> Tensor:
    teacher = _const(teacher, student)
    _same_shape(student, teacher, "kd_freq_focal")
    s_low, s_high = freq_split(student, sigma, kernel_radius)
    t_low, t_high = freq_split(teacher, sigma, kernel_radius)
    w = Tensor(focal_weights(s_high, t_high, gamma, w_floor, eps).astype(student.dtype))
    return l1(s_low, t_low) + alpha * ag.mean(ag.tabs(w * (s_high - t_high)))


def kd_temporal(s_cur: Tensor, s_prev: Tensor, t_cur, t_prev) -> Tensor:
    t_cur = _const(t_cur, s_cur)
    t_prev = _const(t_prev, s_cur)
    for other, what in ((s_prev, "student previous"), (t_cur, "teacher"), (t_prev, "teacher previous")):
        _same_shape(s_cur, other, f"kd_temporal ({what})")
    return l1(s_cur - s_prev, t_cur - t_prev)


# -- feature-level distillation ------------------------------------------------------


def adapter_stages(student: VariantConfig, teacher: VariantConfig, stages: Sequence[int]) -> list[int]:
    """Requested stages that exist in both decoders."""
    if student.strides != teacher.strides:
        raise ConfigurationError("feature KD needs identical stride schedules for student and teacher")
    n = len(student.strides)
    return [s for s in stages if 1 <= s <= n]


def init_adapters(
    student: VariantConfig, teacher: VariantConfig, stages: Sequence[int], seed: int = 0, dtype=np.float32
) -> dict[str, Tensor]:
    """1x1 conv adapters mapping student stage widths onto teacher widths."""
    rng = np.random.default_rng(seed + 7919)
    adapters = {}
    for s in adapter_stages(student, teacher, stages):
        cs, ct = student.stage_widths[s - 1], teacher.stage_widths[s - 1]
        bound = 1.0 / math.sqrt(cs)
        adapters[f"adapters.{s}.weight"] = Tensor(rng.uniform(-bound, bound, (ct, cs, 1, 1)).astype(dtype), requires_grad=True)
        adapters[f"adapters.{s}.bias"] = Tensor(np.zeros(ct, dtype=dtype), requires_grad=True)
    return adapters


def kd_feature(
    student_feats: Mapping[int, Tensor], teacher_feats: Mapping[int, object], adapters: Mapping[str, Tensor]
) -> Tensor:
    """Mean over stages of L1(adapter(student feature), teacher feature)."""
    if set(student_feats) != set(teacher_feats):
        raise ConfigurationError(f"stage sets differ: {sorted(student_feats)} vs {sorted(teacher_feats)}")
    if not student_feats:
        raise ConfigurationError("feature KD needs at least one stage")
    terms = []
    for s in sorted(student_feats):
        sf = student_feats[s]
        tf = _const(teacher_feats[s], sf)
        if sf.shape[-2:] != tf.shape[-2:]:
            raise ConfigurationError(f"stage {s}: spatial size {sf.shape[-2:]} vs teacher {tf.shape[-2:]}")
        mapped = ag.conv2d(sf, adapters[f"adapters.{s}.weight"], adapters[f"adapters.{s}.bias"])
        _same_shape(mapped, tf, f"kd_feature stage {s}")
        terms.append(l1(mapped, tf))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def kd_term(student: Tensor, teacher, cfg: KDConfig, extras: Mapping | None = None) -> Tensor | None:
    """Distillation term for ``cfg.mode``; ``None`` when the mode has nothing to compare."""
    extras = extras or {}
    if cfg.mode == "final":
        return kd_final(student, teacher)
    if cfg.mode == "freq":
        return kd_freq(student, teacher, cfg.alpha, cfg.sigma, cfg.kernel_radius)
    if cfg.mode == "freq_focal":
        return kd_freq_focal(student, teacher, cfg.alpha, cfg.gamma, cfg.sigma, cfg.kernel_radius, cfg.w_floor, cfg.eps)
    if cfg.mode == "temporal":
        if "student_prev" not in extras or "teacher_prev" not in extras:
            raise UsageError("temporal KD needs 'student_prev' and 'teacher_prev' extras")
        if extras["student_prev"] is None:
            return None  # tau - delta falls before the first frame
        return kd_temporal(student, extras["student_prev"], teacher, extras["teacher_prev"])
    if cfg.mode == "feature":
        missing = {"student_feats", "teacher_feats", "adapters"} - set(extras)
        if missing:
            raise UsageError(f"feature KD needs extras {sorted(missing)}")
        return kd_feature(extras["student_feats"], extras["teacher_feats"], extras["adapters"])
    raise ConfigurationError(f"no KD term for mode {cfg.mode!r}")


def total_loss(
    pred: Tensor,
    gt,
    teacher_pred=None,
    cfg: KDConfig | None = None,
    extras: Mapping | None = None,
    beta: float = 0.7,
    log: dict | None = None,
) -> Tensor:
    """recon_loss + lambda_kd * L_KD. Fills ``log`` with the individual terms when given."""
    cfg = cfg or KDConfig()
    loss = recon_loss(pred, gt, beta)
    if log is not None:
        log["recon"] = float(loss.data)
        log["kd"] = 0.0
    if cfg.mode == "none":
        return loss
    needs_teacher = cfg.mode != "feature"
    if needs_teacher and teacher_pred is None:
        raise UsageError(f"KD mode {cfg.mode!r} needs teacher predictions")
    if cfg.lambda_kd == 0:
        return loss
    term = kd_term(pred, teacher_pred, cfg, extras)
    if term is None:
        return loss
    if log is not None:
        log["kd"] = float(term.data)
    return loss + cfg.lambda_kd * term
