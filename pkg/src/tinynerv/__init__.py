"""Tiny NeRV video decoders with distillation and low-bit weight quantization, in numpy."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, gradcheck, no_grad, precision
from .checkpoint import Checkpoint, size_report
from .data import FrameDataset, ingest, synthetic_video, write_frames
from .distill import KDConfig, freq_split, kd_feature, kd_final, kd_freq, kd_freq_focal, kd_temporal, recon_loss, total_loss
from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    StorageError,
    TinyNervError,
    TrainingDiverged,
    UsageError,
)
from .metrics import MetricReport, efficiency, ms_ssim, psnr, ssim, temporal_metrics
from .model import VariantConfig, analyze, decode, forward, init_params, load_variant, make_variant, param_count
from .pipeline import benchmark, evaluate, quantize_cmd
from .quant import QuantPolicy, dequantize, fake_quant_forward, pack_bits, ptq_apply, quantize, unpack_bits
from .train import RunConfig, Teacher, distill, fit, qat_finetune, train
