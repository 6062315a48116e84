"""
Image plumbing: PNG I/O, bilinear downscaling, patch cropping and sampling.

Images are plain 2-D ``float64`` numpy arrays with values in [0, 1].
Ground-truth masks are 2-D ``bool`` arrays of the same shape.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import cv2
import numpy as np

__all__ = [
    "DatasetManifest",
    "as_image",
    "crop_patch",
    "downscale_bilinear",
    "load_image",
    "load_mask",
    "read_manifest",
    "read_raw_residual",
    "sample_patches",
    "sample_positions",
    "save_image",
    "save_mask",
    "write_manifest",
    "write_raw_residual",
]

PathLike = Union[str, os.PathLike]

_DEPTH_MAX = {8: 255, 16: 65535}
_RAW_MAGIC = b"TXSG"
_RAW_HEADER = struct.Struct("<4sIII")


def as_image(data, *, name: str = "image") -> np.ndarray:
    """Validate ``data`` as a single-channel image and return it as float64."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D (single channel), got shape {img.shape}")
    if img.size and not (np.all(np.isfinite(img)) and img.min() >= 0.0 and img.max() <= 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------
def load_image(path: PathLike) -> np.ndarray:
    """
    Read an 8- or 16-bit single-channel PNG and map it to [0, 1].

    Multi-channel files are rejected rather than converted.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot decode image: {path}")
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got {raw.shape[2]} channels")
    if raw.dtype == np.uint8:
        scale = _DEPTH_MAX[8]
    elif raw.dtype == np.uint16:
        scale = _DEPTH_MAX[16]
    else:
        raise ValueError(f"{path}: unsupported pixel type {raw.dtype}")
    return raw.astype(np.float64) / scale


def save_image(img, path: PathLike, depth: int = 8) -> None:
    """Write ``img`` as a grayscale PNG with 8 or 16 bits per pixel."""
    if depth not in _DEPTH_MAX:
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    img = as_image(img)
    top = _DEPTH_MAX[depth]
    dtype = np.uint8 if depth == 8 else np.uint16
    quantized = np.rint(img * top).astype(dtype)
    path = Path(path)
    try:
        ok = cv2.imwrite(str(path), quantized)
    except cv2.error as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    if not ok:
        raise OSError(f"cannot write {path}")


def load_mask(path: PathLike) -> np.ndarray:
    """Read a ground-truth mask; any pixel above half intensity is a defect."""
    return load_image(path) > 0.5


def save_mask(mask, path: PathLike) -> None:
    save_image(np.asarray(mask, dtype=bool).astype(np.float64), path, depth=8)


# ---------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------
def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centre alignment
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def downscale_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Shrink ``img`` to ``(out_h, out_w)`` with half-pixel aligned bilinear sampling."""
    img = as_image(img)
    h, w = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if out_h > h or out_w > w:
        raise ValueError(f"cannot upscale {h}x{w} to {out_h}x{out_w}")
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    rows = img[r0] * (1.0 - fr)[:, None] + img[r1] * fr[:, None]
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return np.clip(out, 0.0, 1.0)


def crop_patch(img, top: int, left: int, size: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape
    if top < 0 or left < 0 or size < 1 or top + size > h or left + size > w:
        raise IndexError(f"crop ({top}, {left}, {size}) outside {h}x{w} image")
    return img[top:top + size, left:left + size].copy()


def sample_positions(shapes: Sequence[tuple[int, int]], count: int, size: int, seed: int
                     ) -> list[tuple[int, int, int]]:
    """
    ``count`` draws of ``(image index, top, left)``.

    Index and corner are uniform, with replacement, from a generator seeded
    with ``seed``.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    if not shapes:
        raise ValueError("no images to sample from")
    for i, (h, w) in enumerate(shapes):
        if h < size or w < size:
            raise ValueError(f"image {i} ({h}x{w}) is smaller than patch size {size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        i = int(rng.integers(len(shapes)))
        h, w = shapes[i]
        out.append((i, int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))))
    return out


def sample_patches(imgs: Sequence[np.ndarray], count: int, size: int, seed: int) -> list[np.ndarray]:
    """Random ``size x size`` crops at :func:`sample_positions`."""
    shapes = [np.shape(im) for im in imgs]
    return [crop_patch(imgs[i], top, left, size) for i, top, left in sample_positions(shapes, count, size, seed)]


# ---------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------
@dataclass
class DatasetManifest:
    """Training images plus (image, mask) test pairs."""

    train_images: list[Path] = field(default_factory=list)
    test_images: list[tuple[Path, Path]] = field(default_factory=list)
    validation_fraction: float = 0.1
    path: Path | None = None

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        self.train_images = [Path(p) for p in self.train_images]
        self.test_images = [(Path(a), Path(b)) for a, b in self.test_images]
        test_files = {p.resolve() for pair in self.test_images for p in pair}
        shared = [p for p in self.train_images if p.resolve() in test_files]
        if shared:
            raise ValueError(f"train and test lists overlap: {shared[0]}")

    def split(self) -> tuple[list[Path], list[Path]]:
        """Split training images into (train, validation) by sorted file name."""
        ordered = sorted(self.train_images, key=lambda p: (p.name, str(p)))
        n_val = int(round(len(ordered) * self.validation_fraction))
        n_val = min(n_val, max(len(ordered) - 1, 0))
        if n_val == 0:
            return ordered, []
        return ordered[:-n_val], ordered[-n_val:]

    def check(self) -> None:
        """Raise if any referenced file is missing or undecodable."""
        for p in self.train_images:
            load_image(p)
        for img_path, mask_path in self.test_images:
            img = load_image(img_path)
            mask = load_mask(mask_path)
            if img.shape != mask.shape:
                raise ValueError(f"{mask_path}: mask shape {mask.shape} != image shape {img.shape}")


def read_manifest(path: PathLike, validation_fraction: float = 0.1, check: bool = False) -> DatasetManifest:
    """
    Parse a manifest file.

    Each line is ``train <path>`` or ``test <image-path> <mask-path>``; lines
    starting with ``#`` are comments. Relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    base = path.parent
    train, test = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "train" and len(parts) == 2:
                train.append(base / parts[1])
            elif parts[0] == "test" and len(parts) == 3:
                test.append((base / parts[1], base / parts[2]))
            else:
                raise ValueError(f"{path}:{lineno}: malformed record {line!r}")
    manifest = DatasetManifest(train, test, validation_fraction, path=path)
    if check:
        manifest.check()
    return manifest


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    lines = ["# texseg dataset manifest"]
    lines += [f"train {rel(p)}" for p in manifest.train_images]
    lines += [f"test {rel(a)} {rel(b)}" for a, b in manifest.test_images]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------
# Raw float32 residual export
# ---------------------------------------------------------------------
def write_raw_residual(scores, path: PathLike) -> None:
    """Write a float map as little-endian float32 behind a 16-byte ``TXSG`` header."""
    scores = np.asarray(scores, dtype="<f4")
    if scores.ndim != 2:
        raise ValueError("residual map must be 2-D")
    h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(_RAW_MAGIC, h, w, 0))
        fh.write(np.ascontiguousarray(scores).tobytes())


def read_raw_residual(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, h, w, _ = _RAW_HEADER.unpack_from(blob)
    if magic != _RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = blob[_RAW_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
