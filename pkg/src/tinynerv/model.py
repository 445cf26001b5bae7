"""NeRV variant family: configuration, parameters, forward decode and cost analysis."""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, InputError, StorageError

PAPER_STRIDES = (5, 2, 2, 2, 2)
SEED_GRID = (9, 16)


@dataclass(frozen=True)
class VariantConfig:
    name: str
    stem_hidden: int
    seed_channels: int
    stage_widths: tuple[int, ...]
    strides: tuple[int, ...] = PAPER_STRIDES
    seed_grid: tuple[int, int] = SEED_GRID
    kernel: int = 3
    pe_base: float = 1.25
    pe_levels: int = 80

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(c) for c in self.stage_widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "seed_grid", tuple(int(g) for g in self.seed_grid))
        validate(self)

    @property
    def pe_dim(self) -> int:
        return 2 * self.pe_levels

    @property
    def is_desk(self) -> bool:
        """True for the truncated-stride configurations used for desk experiments."""
        return self.strides != PAPER_STRIDES

    @property
    def output_size(self) -> tuple[int, int]:
        up = math.prod(self.strides)
        return self.seed_grid[0] * up, self.seed_grid[1] * up

    def conv_channels(self) -> list[tuple[int, int]]:
        """(C_in, C_out) of every 3x3 block convolution, C_out counted before the shuffle."""
        out = []
        c_in = self.seed_channels
        for width, s in zip(self.stage_widths, self.strides):
            out.append((c_in, width * s * s))
            c_in = width
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["strides"] = list(self.strides)
        d["seed_grid"] = list(self.seed_grid)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariantConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown variant fields: {sorted(unknown)}")
        return cls(**d)


def validate(cfg: VariantConfig) -> None:
    if cfg.seed_grid != SEED_GRID:
        raise ConfigurationError(f"seed grid must be {SEED_GRID}, got {cfg.seed_grid}")
    if cfg.kernel != 3:
        raise ConfigurationError(f"kernel must be 3, got {cfg.kernel}")
    n = len(cfg.strides)
    # desk variants drop trailing blocks but never alter the schedule
    if n == 0 or cfg.strides != PAPER_STRIDES[:n]:
        raise ConfigurationError(f"strides must be {PAPER_STRIDES} (or a prefix for desk variants), got {cfg.strides}")
    if len(cfg.stage_widths) != n:
        raise ConfigurationError(f"{n} strides need {n} stage widths, got {len(cfg.stage_widths)}")
    if min(cfg.stage_widths) < 1 or cfg.seed_channels < 1 or cfg.stem_hidden < 1:
        raise ConfigurationError("channel counts must be positive")
    if cfg.pe_levels < 1 or not cfg.pe_base > 0:
        raise ConfigurationError("positional encoding needs pe_levels >= 1 and pe_base > 0")


_PAPER_VARIANTS = {
    "T": dict(stem_hidden=256, seed_channels=16, stage_widths=(16, 32, 32, 32, 32)),
    "T+": dict(stem_hidden=512, seed_channels=15, stage_widths=(15, 64, 64, 64, 64)),
    "S": dict(stem_hidden=512, seed_channels=26, stage_widths=(26, 96, 96, 96, 96)),
}

DESK_STRIDES = (5, 2, 2)


def variant_names() -> list[str]:
    return [*_PAPER_VARIANTS, *(f"{k}-desk" for k in _PAPER_VARIANTS)]


def make_variant(spec: str | Mapping) -> VariantConfig:
    """Return a named variant ("T", "T+", "S", or their "-desk" forms) or validate a custom dict.

    Desk variants keep the first three blocks (strides 5, 2, 2), producing
    180x320 frames; they are not configurations from the original study.
    """
    if isinstance(spec, Mapping):
        d = dict(spec)
        base = d.pop("base", None)
        if base is not None:
            d = {**make_variant(base).to_dict(), **d}
        d.setdefault("name", "custom")
        missing = {"stem_hidden", "seed_channels", "stage_widths"} - set(d)
        if missing:
            raise ConfigurationError(f"custom variant missing fields: {sorted(missing)}")
        return VariantConfig.from_dict(d)
    name = str(spec)
    if name in _PAPER_VARIANTS:
        return VariantConfig(name=name, **_PAPER_VARIANTS[name])
    if name.endswith("-desk") and name[:-5] in _PAPER_VARIANTS:
        base = _PAPER_VARIANTS[name[:-5]]
        n = len(DESK_STRIDES)
        return VariantConfig(
            name=name,
            stem_hidden=base["stem_hidden"],
            seed_channels=base["seed_channels"],
            stage_widths=base["stage_widths"][:n],
            strides=DESK_STRIDES,
        )
    raise ConfigurationError(f"unknown variant {name!r}; known: {', '.join(variant_names())}")


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("stage_widths", "strides", "seed_grid"):
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    if key in ("stem_hidden", "seed_channels", "kernel", "pe_levels"):
        return int(raw)
    if key == "pe_base":
        return float(raw)
    return raw


def parse_variant_text(text: str) -> VariantConfig:
    """Parse ``key = value`` lines (``#`` comments allowed). ``base = T`` inherits a preset."""
    d = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            d[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return make_variant(d)


def load_variant(path_or_name: str | Path) -> VariantConfig:
    p = Path(path_or_name)
    if p.suffix and p.exists():
        try:
            return parse_variant_text(p.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read variant file {p}: {exc}") from exc
    return make_variant(str(path_or_name))


def format_variant_text(cfg: VariantConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for k, v in d.items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- positional encoding ---------------------------------------------------------


def positional_encode(t, b: float = 1.25, l: int = 80, dtype=None) -> np.ndarray:
    """Interleaved [sin(b^i pi t), cos(b^i pi t)] for i < l; shape [..., 2l]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if l < 1:
        raise InputError("positional encoding needs l >= 1")
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise InputError(f"temporal index must lie in [0, 1], got {t}")
    freqs = np.power(float(b), np.arange(l)) * np.pi
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (2 * l,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(dtype or ag.default_dtype())


# -- parameters ---------------------------------------------------------------------


def param_shapes(cfg: VariantConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table; the single source of truth for parameter layout."""
    g0, g1 = cfg.seed_grid
    shapes = {
        "stem.0.weight": (cfg.stem_hidden, cfg.pe_dim),
        "stem.0.bias": (cfg.stem_hidden,),
        "stem.1.weight": (cfg.seed_channels * g0 * g1, cfg.stem_hidden),
        "stem.1.bias": (cfg.seed_channels * g0 * g1,),
    }
    for i, (c_in, c_out) in enumerate(cfg.conv_channels(), 1):
        shapes[f"blocks.{i}.weight"] = (c_out, c_in, cfg.kernel, cfg.kernel)
        shapes[f"blocks.{i}.bias"] = (c_out,)
    shapes["head.weight"] = (3, cfg.stage_widths[-1], 1, 1)
    shapes["head.bias"] = (3,)
    return shapes


def param_count(cfg: VariantConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def is_weight(name: str) -> bool:
    """Conv and linear weights (quantization targets); biases excluded."""
    return name.endswith(".weight")


ModelParams = dict  # name -> Tensor, ordered as param_shapes()


def init_params(cfg: VariantConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        wshape = shapes[name.replace(".bias", ".weight")]
        fan_in = math.prod(wshape[1:])
        bound = 1.0 / math.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def check_params(params: Mapping[str, Tensor], cfg: VariantConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ConfigurationError(f"parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ConfigurationError(f"{name}: expected shape {shape}, got {params[name].shape}")


@dataclass
class DecodeOutput:
    frame: Tensor
    features: list[Tensor] = field(default_factory=list)


def forward(params: Mapping[str, Tensor], cfg: VariantConfig, t, features: bool = False):
    """Decode frame(s) for temporal index ``t`` (scalar -> [3,H,W], array -> [N,3,H,W]).

    With ``features=True`` returns a :class:`DecodeOutput` that also carries the
    post-activation output of every block.
    """
    check_params(params, cfg)
    scalar = np.ndim(t) == 0
    dtype = params["stem.0.weight"].dtype
    pe = Tensor(positional_encode(np.atleast_1d(t), cfg.pe_base, cfg.pe_levels, dtype=dtype))
    n = pe.shape[0]
    h = ag.gelu(ag.linear(pe, params["stem.0.weight"], params["stem.0.bias"]))
    h = ag.linear(h, params["stem.1.weight"], params["stem.1.bias"])
    x = ag.reshape(h, (n, cfg.seed_channels, *cfg.seed_grid))
    feats = []
    for i, s in enumerate(cfg.strides, 1):
        x = ag.conv2d(x, params[f"blocks.{i}.weight"], params[f"blocks.{i}.bias"])
        x = ag.gelu(ag.pixel_shuffle(x, s))
        feats.append(x)
    out = ag.sigmoid(ag.conv2d(x, params["head.weight"], params["head.bias"]))
    if scalar:
        out = ag.reshape(out, out.shape[1:])
    if features:
        return DecodeOutput(out, feats)
    return out


def decode(params: Mapping[str, Tensor], cfg: VariantConfig, t) -> np.ndarray:
    """Inference-only decode returning a numpy frame."""
    with ag.no_grad():
        return forward(params, cfg, t).data


def clone_params(params: Mapping[str, Tensor], requires_grad: bool = True, dtype=None) -> ModelParams:
    return {
        k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=requires_grad)
        for k, v in params.items()
    }


# -- complexity analysis ---------------------------------------------------------


@dataclass(frozen=True)
class StageCost:
    stage: str
    grid: tuple[int, int]
    c_out: int
    c_in: int
    kernel: int
    mults: int

    @property
    def gflops(self) -> float:
        return 2 * self.mults / 1e9

    @property
    def arithmetic(self) -> str:
        hw = self.grid[0] * self.grid[1]
        if self.kernel == 1:
            return f"{hw}*{self.c_out}*{self.c_in}"
        return f"{hw}*{self.c_out}*({self.kernel * self.kernel}*{self.c_in})"


@dataclass(frozen=True)
class ComplexityReport:
    variant: str
    scale: int
    stages: tuple[StageCost, ...]
    params: int

    @property
    def total_mults(self) -> int:
        return sum(s.mults for s in self.stages)

    @property
    def total_gflops(self) -> float:
        # exact integer sum, one division
        return 2 * self.total_mults / 1e9

    def table(self) -> str:
        lines = [f"{self.variant} (grid scale {self.scale})", f"{'stage':<18}{'grid':>12}  {'arithmetic':<28}{'GFLOPs':>10}"]
        for s in self.stages:
            grid = f"{s.grid[0]}x{s.grid[1]}"
            lines.append(f"{s.stage:<18}{grid:>12}  {s.arithmetic:<28}{s.gflops:>10.4f}")
        lines.append(f"{'total':<18}{'':>12}  {'':<28}{self.total_gflops:>10.4f}")
        lines.append(f"params: {self.params} ({self.params / 1e6:.2f}M)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("variant,stage,grid_h,grid_w,c_out,c_in,kernel,mults,gflops\n")
        for s in self.stages:
            buf.write(
                f"{self.variant},{s.stage},{s.grid[0]},{s.grid[1]},{s.c_out},{s.c_in},{s.kernel},{s.mults},{s.gflops:.6f}\n"
            )
        buf.write(f"{self.variant},total,,,,,,{self.total_mults},{self.total_gflops:.6f}\n")
        return buf.getvalue()


def analyze(cfg: VariantConfig, scale: int = 1) -> ComplexityReport:
    """Per-stage multiplication counts: (H*W) * C_out * (k*k*C_in) for each conv."""
    if scale < 1 or int(scale) != scale:
        raise ConfigurationError(f"grid scale must be a positive integer, got {scale}")
    h, w = cfg.seed_grid[0] * scale, cfg.seed_grid[1] * scale
    stages = []
    for i, ((c_in, c_out), s) in enumerate(zip(cfg.conv_channels(), cfg.strides), 1):
        k = cfg.kernel
        stages.append(StageCost(f"Block{i} (s={s})", (h, w), c_out, c_in, k, h * w * c_out * k * k * c_in))
        h, w = h * s, w * s
    c5 = cfg.stage_widths[-1]
    stages.append(StageCost("RGB head (1x1)", (h, w), 3, c5, 1, h * w * 3 * c5))
    return ComplexityReport(cfg.name, scale, tuple(stages), param_count(cfg))
