"""Frame datasets: directory ingestion, frame writers and a procedural test sequence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError, StorageError

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".bmp", ".jpg", ".jpeg")
RAW_SUFFIX = ".rgb"
MANIFEST = "manifest.txt"


@dataclass
class FrameDataset:
    frames: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    source: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3 or f.shape[0] < 1:
            raise InputError(f"frames must have shape [N, 3, H, W], got {f.shape}")
        if not np.all(np.isfinite(f)) or f.min() < 0 or f.max() > 1:
            raise InputError("frame values must lie in [0, 1]")
        self.frames = f

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    @property
    def indices(self) -> np.ndarray:
        n = len(self)
        if n == 1:
            return np.zeros(1)
        return np.arange(n) / (n - 1)

    def subset(self, n: int) -> "FrameDataset":
        return FrameDataset(self.frames[:n], self.source)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise StorageError(f"cannot read frame {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _read_manifest(path: Path) -> tuple[int, int, int]:
    try:
        fields = path.read_text().split()
        width, height, count = (int(v) for v in fields[:3])
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"manifest {path} must contain 'width height count'") from exc
    return width, height, count


def ingest(path: str | Path) -> FrameDataset:
    """Load a directory of image files, or planar ``.rgb`` frames described by manifest.txt.

    Files are ordered by name and 8-bit values scaled by 1/255.
    """
    root = Path(path)
    if not root.is_dir():
        raise StorageError(f"frame directory not found: {root}")
    manifest = root / MANIFEST
    frames = []
    if manifest.exists():
        width, height, count = _read_manifest(manifest)
        files = sorted(p for p in root.iterdir() if p.suffix.lower() == RAW_SUFFIX)
        if len(files) != count:
            raise InputError(f"manifest lists {count} frames, found {len(files)} {RAW_SUFFIX} files")
        for f in files:
            try:
                raw = f.read_bytes()
            except OSError as exc:
                raise StorageError(f"cannot read frame {f}: {exc}") from exc
            if len(raw) != 3 * width * height:
                raise InputError(f"{f.name}: {len(raw)} bytes, expected {3 * width * height} for {width}x{height} planar RGB")
            frames.append(np.frombuffer(raw, dtype=np.uint8).reshape(3, height, width))
    else:
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for f in files:
            arr = _read_image(f)
            if frames and arr.shape != frames[0].shape:
                raise InputError(
                    f"mixed resolutions: {f.name} is {arr.shape[2]}x{arr.shape[1]}, "
                    f"expected {frames[0].shape[2]}x{frames[0].shape[1]}"
                )
            frames.append(arr)
    if not frames:
        raise InputError(f"no frames found in {root}")
    data = np.stack(frames).astype(np.float32) / np.float32(255.0)
    return FrameDataset(data, str(root))


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def write_frames(frames: np.ndarray, out_dir: str | Path, fmt: str = "png") -> list[Path]:
    """Write [N, 3, H, W] frames as frame_0000.<fmt>; ``fmt='rgb'`` writes planar raw + manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        frames = np.asarray(frames)
        for i, fr in enumerate(frames):
            u8 = to_uint8(fr)
            p = out / f"frame_{i:04d}.{fmt}"
            if fmt == "rgb":
                p.write_bytes(u8.tobytes())
            elif fmt in ("png", "ppm"):
                Image.fromarray(u8.transpose(1, 2, 0)).save(p)
            else:
                raise InputError(f"unsupported frame format {fmt!r}")
            paths.append(p)
        if fmt == "rgb":
            (out / MANIFEST).write_text(f"{frames.shape[3]} {frames.shape[2]} {frames.shape[0]}\n")
    except OSError as exc:
        raise StorageError(f"cannot write frames to {out}: {exc}") from exc
    return paths


def _fractal_texture(rng: np.random.Generator, h: int, w: int, slope: float = 1.6) -> np.ndarray:
    """Colour 1/f^slope noise normalised to [0, 1], shape [3, h, w]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    amp = 1.0 / np.maximum(np.hypot(fy, fx), 1.0 / max(h, w)) ** slope
    out = np.empty((3, h, w))
    for c in range(3):
        spec = amp * np.exp(2j * np.pi * rng.random(amp.shape)) * rng.normal(1.0, 0.2, amp.shape)
        tex = np.fft.irfft2(spec, s=(h, w))
        tex -= tex.min()
        out[c] = tex / tex.max()
    return out


def synthetic_video(n_frames: int = 16, height: int = 180, width: int = 320, seed: int = 0) -> FrameDataset:
    """Procedural clip: a panning fractal-noise backdrop, moving soft blobs, a
    striped band and a sharp-edged box. Values are snapped to the 8-bit grid so
    the clip survives a PNG round trip unchanged."""
    rng = np.random.default_rng(seed)
    pan = max(8, width // 8)
    backdrop = _fractal_texture(rng, height, width + pan)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    blobs = [
        dict(c=rng.uniform(0.2, 0.8, 2), v=rng.uniform(-0.25, 0.25, 2), r=rng.uniform(0.08, 0.16), col=rng.uniform(0, 1, 3))
        for _ in range(4)
    ]
    box_col = rng.uniform(0.1, 0.9, 3)
    out = np.empty((n_frames, 3, height, width))
    for i in range(n_frames):
        t = i / max(n_frames - 1, 1)
        shift = int(round(pan * t))
        tex = backdrop[:, :, shift : shift + width]
        grad = np.stack([0.35 + 0.25 * xx, 0.30 + 0.30 * yy, 0.55 - 0.20 * xx])
        img = 0.45 * grad + 0.55 * tex
        for b in blobs:
            cy, cx = b["c"] + b["v"] * t
            d2 = ((yy - cy) * height / width) ** 2 + (xx - cx) ** 2
            a = np.exp(-d2 / (2 * b["r"] ** 2 / 4))
            img = img * (1 - a) + b["col"][:, None, None] * a
        band = (yy > 0.7) & (yy < 0.85)
        stripes = 0.5 + 0.35 * np.sin(2 * np.pi * (xx * 18 + yy * 4 - 1.5 * t))
        img = np.where(band, 0.6 * img + 0.4 * stripes, img)
        x0 = 0.1 + 0.3 * t
        box = (xx > x0) & (xx < x0 + 0.12) & (yy > 0.2) & (yy < 0.4)
        img = np.where(box, box_col[:, None, None], img)
        out[i] = img
    out = np.rint(np.clip(out, 0, 1) * 255) / 255
    return FrameDataset(out.astype(np.float32), f"synthetic(seed={seed})")
