"""Reconstruction and temporal-stability metrics (pure functions on numpy frames)."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InputError
from .filters import SSIM_WINDOW, ssim_maps

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def mse(x, y) -> float:
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); zero error reports the 100 dB cap."""
    m = mse(x, y)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / m))


def ssim(x, y, peak: float = 1.0) -> float:
    """Single-scale SSIM, mean over channels and valid window positions."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    with ag.no_grad():
        s, _ = ssim_maps(Tensor(a), Tensor(b), peak)
    return float(s.data.mean())


def _avg_pool2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2] // 2 * 2, a.shape[-1] // 2 * 2
    a = a[..., :h, :w]
    return 0.25 * (a[..., 0::2, 0::2] + a[..., 1::2, 0::2] + a[..., 0::2, 1::2] + a[..., 1::2, 1::2])


def ms_ssim_scales(h: int, w: int) -> int:
    """Usable scales: the coarsest level must still fit the 11-tap window."""
    n = 0
    while n < len(MS_SSIM_WEIGHTS) and min(h, w) >= SSIM_WINDOW:
        n += 1
        h, w = h // 2, w // 2
    return n


def ms_ssim(x, y, peak: float = 1.0) -> float:
    """Five-scale MS-SSIM; small images use fewer scales with renormalised weights."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    n = ms_ssim_scales(*a.shape[-2:])
    if n == 0:
        raise InputError(f"image {a.shape[-2:]} too small for MS-SSIM (needs >= {SSIM_WINDOW} px per side)")
    weights = np.array(MS_SSIM_WEIGHTS[:n])
    if n < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    lead = a.shape[:-2]
    vals = []
    with ag.no_grad():
        for j in range(n):
            s_map, cs_map = ssim_maps(Tensor(a), Tensor(b), peak)
            axes = (-2, -1)
            if j == n - 1:
                vals.append(np.maximum(s_map.data.mean(axis=axes), 0.0))
            else:
                vals.append(np.maximum(cs_map.data.mean(axis=axes), 0.0))
                a, b = _avg_pool2(a), _avg_pool2(b)
    out = np.ones(lead)
    for v, wgt in zip(vals, weights):
        out = out * np.power(v, wgt)
    return float(out.mean())


def temporal_metrics(recon, gt, peak: float = 1.0) -> tuple[float, float]:
    """(T-PSNR, tSSIM) between frame-difference sequences.

    T-PSNR uses the MSE over all stacked differences with the image peak;
    tSSIM averages SSIM over difference pairs remapped by (d + 1) / 2.
    """
    r, g = _arr(recon), _arr(gt)
    if r.shape != g.shape:
        raise InputError(f"sequence shapes differ: {r.shape} vs {g.shape}")
    if r.shape[0] < 2:
        raise InputError("temporal metrics need at least two frames")
    d_r = r[1:] - r[:-1]
    d_g = g[1:] - g[:-1]
    t_psnr = psnr(d_r, d_g, peak)
    tssim = float(np.mean([ssim((d_r[i] + 1) / 2, (d_g[i] + 1) / 2, peak) for i in range(len(d_r))]))
    return t_psnr, tssim


def efficiency(mean_psnr: float, gflops) -> float:
    """PSNR per GFLOP; accepts a number or a ComplexityReport."""
    total = getattr(gflops, "total_gflops", gflops)
    if not total > 0:
        raise InputError("GFLOPs must be positive")
    return mean_psnr / total


@dataclass
class MetricReport:
    frame_psnr: list[float]
    frame_ms_ssim: list[float]
    t_psnr: float | None
    tssim: float | None
    gflops: float
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.frame_psnr))

    @property
    def mean_ms_ssim(self) -> float:
        return float(np.mean(self.frame_ms_ssim))

    @property
    def psnr_per_gflop(self) -> float:
        return efficiency(self.mean_psnr, self.gflops)

    def to_csv(self) -> str:
        """One row per frame plus a ``mean`` summary row. PSNR of 100 marks zero error."""
        buf = io.StringIO()
        buf.write("frame,psnr_db,ms_ssim,t_psnr_db,tssim,gflops,psnr_per_gflop\n")
        for i, (p, m) in enumerate(zip(self.frame_psnr, self.frame_ms_ssim)):
            buf.write(f"{i},{p:.6f},{m:.6f},,,,\n")
        tp = "" if self.t_psnr is None else f"{self.t_psnr:.6f}"
        ts = "" if self.tssim is None else f"{self.tssim:.6f}"
        buf.write(
            f"mean,{self.mean_psnr:.6f},{self.mean_ms_ssim:.6f},{tp},{ts},{self.gflops:.6f},{self.psnr_per_gflop:.6f}\n"
        )
        return buf.getvalue()

    def table(self) -> str:
        rows = [
            ("frames", f"{len(self.frame_psnr)}"),
            ("PSNR (dB)", f"{self.mean_psnr:.3f}"),
            ("MS-SSIM", f"{self.mean_ms_ssim:.4f}"),
            ("T-PSNR (dB)", "-" if self.t_psnr is None else f"{self.t_psnr:.3f}"),
            ("tSSIM", "-" if self.tssim is None else f"{self.tssim:.4f}"),
            ("GFLOPs", f"{self.gflops:.4f}"),
            ("PSNR/GFLOP", f"{self.psnr_per_gflop:.3f}"),
        ]
        head = [self.label] if self.label else []
        return "\n".join(head + [f"{k:<14}{v:>12}" for k, v in rows])


def report(recon: np.ndarray, gt: np.ndarray, gflops: float, label: str = "") -> MetricReport:
    recon, gt = _arr(recon), _arr(gt)
    if recon.shape != gt.shape:
        raise InputError(f"reconstruction {recon.shape} does not match ground truth {gt.shape}")
    fp = [psnr(r, g) for r, g in zip(recon, gt)]
    fm = [ms_ssim(r, g) for r, g in zip(recon, gt)]
    tp, ts = temporal_metrics(recon, gt) if len(gt) >= 2 else (None, None)
    return MetricReport(fp, fm, tp, ts, float(gflops), label)
