"""Image I/O, synthetic degradation, and patch sampling.

Images live in memory as ``[C, H, W]`` float32 arrays in ``[0, 1]``. Files are
binary PGM (P5, gray) or PPM (P6, RGB) with maxval 255.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError, ParseError


@dataclass
class ImageBuffer:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] not in (1, 3):
            raise DimensionError(f"expected [C, H, W] with C in (1, 3), got {v.shape}")
        if min(v.shape[1:]) < 1:
            raise DimensionError("image dimensions must be >= 1")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


# --- PGM / PPM ---------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _header_fields(raw: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer fields after the magic; return them and the raster offset."""
    pos = 2
    fields = []
    n = len(raw)
    while len(fields) < count:
        while pos < n and raw[pos] in _WS:
            pos += 1
        if pos < n and raw[pos] == ord("#"):
            while pos < n and raw[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and raw[pos] not in _WS and raw[pos] != ord("#"):
            pos += 1
        tok = raw[start:pos]
        if not tok:
            raise ParseError("truncated header", start)
        if not tok.isdigit():
            raise ParseError(f"bad header field {tok!r}", start)
        fields.append(int(tok))
    if pos >= n or raw[pos] not in _WS:
        raise ParseError("missing whitespace before raster", pos)
    return fields, pos + 1


def parse_pnm(raw: bytes) -> ImageBuffer:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}; need P5 or P6", 0)
    (width, height, maxval), offset = _header_fields(raw, 3)
    if width < 1 or height < 1:
        raise ParseError(f"bad dimensions {width}x{height}", 2)
    if maxval != 255:
        raise ParseError(f"maxval must be 255, got {maxval}", offset - 1)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    if len(raw) - offset < need:
        raise ParseError(f"raster truncated: need {need} bytes, have {len(raw) - offset}", len(raw))
    px = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset)
    px = px.reshape(height, width, channels).transpose(2, 0, 1)
    return ImageBuffer(px.astype(np.float32) / np.float32(255))


def load_image(path) -> ImageBuffer:
    return parse_pnm(Path(path).read_bytes())


def to_bytes(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    px = np.clip(np.rint(img.values * 255), 0, 255).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + px.transpose(1, 2, 0).tobytes()


def save_image(path, img: ImageBuffer) -> None:
    Path(path).write_bytes(to_bytes(img))


# --- degradation ---------------------------------------------------------------

@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "gaussian"
    sigma: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


def gaussian_noise(shape, sigma: float, seed: int) -> np.ndarray:
    """Zero-mean noise with std ``sigma / 255``, from a seeded PCG64 stream."""
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * (sigma / 255.0)).astype(np.float32)


def add_gaussian_noise(img: ImageBuffer, spec: DegradationSpec) -> ImageBuffer:
    noisy = img.values + gaussian_noise(img.values.shape, spec.sigma, spec.seed)
    return ImageBuffer(np.clip(noisy, 0.0, 1.0))


# degradation hook: kind -> callable(image, spec)
DEGRADATIONS: dict[str, Callable[[ImageBuffer, "DegradationSpec"], ImageBuffer]] = {
    "gaussian": add_gaussian_noise,
}


def degrade(img: ImageBuffer, spec: DegradationSpec) -> ImageBuffer:
    return DEGRADATIONS[spec.kind](img, spec)


# --- manifests and patches -------------------------------------------------------

def read_manifest(path) -> list[str]:
    """One path per line; ``#`` starts a comment. Relative paths resolve against the manifest."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(str(p if p.is_absolute() else base / p))
    return out


def write_manifest(path, paths) -> None:
    base = Path(path).parent
    lines = []
    for p in paths:
        try:
            lines.append(os.path.relpath(p, base))
        except ValueError:
            lines.append(str(p))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    patch_size: int = 32
    patches_per_image: int = 8

    def __post_init__(self):
        overlap = set(self.train) & set(self.val)
        if overlap:
            raise ConfigError(f"train and val overlap: {sorted(overlap)[:3]}")
        if self.patch_size < 1 or self.patches_per_image < 1:
            raise ConfigError("patch_size and patches_per_image must be >= 1")


class PatchPair(NamedTuple):
    clean: np.ndarray
    noisy: np.ndarray


def sample_patches(img: ImageBuffer, manifest: SplitManifest, seed: int,
                   degradation: DegradationSpec | None = None) -> list[PatchPair]:
    """Crop ``patches_per_image`` aligned (clean, degraded) pairs at uniform corners.

    The whole image is degraded once (seeded by ``degradation.seed``) before
    cropping so both members of a pair see the same pixels.
    """
    p = manifest.patch_size
    if p > img.height or p > img.width:
        raise ConfigError(f"patch {p} larger than image {img.height}x{img.width}")
    degradation = degradation or DegradationSpec()
    noisy = degrade(img, degradation).values
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(manifest.patches_per_image):
        i = int(rng.integers(0, img.height - p + 1))
        j = int(rng.integers(0, img.width - p + 1))
        pairs.append(PatchPair(img.values[:, i:i + p, j:j + p].copy(),
                               noisy[:, i:i + p, j:j + p].copy()))
    return pairs


def flip_pair(pair: PatchPair, horizontal: bool, vertical: bool) -> PatchPair:
    c, n = pair.clean, pair.noisy
    if horizontal:
        c, n = c[:, :, ::-1], n[:, :, ::-1]
    if vertical:
        c, n = c[:, ::-1, :], n[:, ::-1, :]
    return PatchPair(np.ascontiguousarray(c), np.ascontiguousarray(n))


def augment_flip(pair: PatchPair, rng) -> PatchPair:
    """Flip both members with probability 1/2 per axis; ``rng`` may be a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h, v = rng.random(2) < 0.5
    return flip_pair(pair, bool(h), bool(v))


# --- synthetic corpus ------------------------------------------------------------

def synth_image(height: int, width: int, seed: int, channels: int = 1) -> ImageBuffer:
    """Piecewise-smooth test image: shaded background, flat shapes, soft stripes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    out = np.empty((channels, height, width))
    for c in range(channels):
        a, b, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7)
        img = base + a * (xx - 0.5) + b * (yy - 0.5)
        out[c] = img
    for _ in range(int(rng.integers(3, 8))):
        val = rng.uniform(0.05, 0.95, size=channels)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.35, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            hy, hx = rng.uniform(0.08, 0.4, 2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        out[:, mask] = val[:, None]
    if rng.random() < 0.5:
        freq = rng.uniform(2, 6)
        theta = rng.uniform(0, np.pi)
        amp = rng.uniform(0.05, 0.15)
        out += amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    px = np.clip(np.rint(out * 255), 0, 255) / 255.0
    return ImageBuffer(px.astype(np.float32))


def write_synthetic_corpus(root, n_train: int = 25, n_val: int = 5, size: int = 64,
                           seed: int = 0, channels: int = 1) -> tuple[Path, Path]:
    """Write PGM/PPM images plus ``train.txt``/``val.txt`` manifests under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if channels == 1 else "ppm"
    paths = []
    for k in range(n_train + n_val):
        p = root / "images" / f"synth_{k:04d}.{ext}"
        save_image(p, synth_image(size, size, seed * 100003 + k, channels))
        paths.append(p)
    write_manifest(root / "train.txt", paths[:n_train])
    write_manifest(root / "val.txt", paths[n_train:])
    return root / "train.txt", root / "val.txt"
