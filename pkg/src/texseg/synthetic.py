"""
Seeded checkerboard textures with painted gray defects.

Boards are two-tone checkerboards of random cell size and orientation,
rotated about the image centre and anti-aliased by supersampling. Defects
are rotated rectangular strokes and filled dots painted with a constant
gray; the returned mask marks exactly the painted pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .imaging import DatasetManifest, save_image, save_mask, write_manifest

_MAX_TRIES = 1000

__all__ = [
    "CheckerSpec",
    "DefectSpec",
    "gen_checkerboard",
    "inject_defects",
    "make_toy_dataset",
]


@dataclass(frozen=True)
class CheckerSpec:
    image_size: int = 128
    cell_min: int = 8
    cell_max: int = 24
    rot_min: float = 0.0
    rot_max: float = 90.0
    low: float = 0.0
    high: float = 1.0
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.cell_min < 2 or self.cell_max < self.cell_min:
            raise ValueError("need 2 <= cell_min <= cell_max")
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ValueError("need 0 <= low < high <= 1")
        if self.rot_max < self.rot_min:
            raise ValueError("rot_max < rot_min")
        if self.image_size < 1 or self.supersample < 1:
            raise ValueError("image_size and supersample must be positive")


@dataclass(frozen=True)
class DefectSpec:
    strokes_min: int = 1
    strokes_max: int = 2
    stroke_width_min: float = 2.0
    stroke_width_max: float = 4.0
    stroke_length_min: float = 12.0
    stroke_length_max: float = 40.0
    dots_min: int = 0
    dots_max: int = 2
    dot_radius_min: float = 2.0
    dot_radius_max: float = 5.0
    intensity: float = 0.5
    margin: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if min(self.strokes_min, self.dots_min) < 0:
            raise ValueError("defect counts must be non-negative")
        if self.strokes_max < self.strokes_min or self.dots_max < self.dots_min:
            raise ValueError("count range reversed")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")


def gen_checkerboard(spec: CheckerSpec) -> np.ndarray:
    """
    Render one board. Cell size (integer) and angle are drawn from the
    spec's ranges with ``spec.seed``; at 0 degrees cell edges fall on pixel
    edges, so pixels are exactly ``low`` or ``high``.
    """
    rng = np.random.default_rng(spec.seed)
    cell = int(rng.integers(spec.cell_min, spec.cell_max + 1))
    angle = np.deg2rad(rng.uniform(spec.rot_min, spec.rot_max))
    n, ss = spec.image_size, spec.supersample

    # sub-sample positions relative to the image centre
    sub = (np.arange(n * ss) + 0.5) / ss - n / 2.0
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * xx + sa * yy
    v = -sa * xx + ca * yy
    parity = (np.floor(u / cell) + np.floor(v / cell)) % 2
    fine = np.where(parity == 0, spec.high, spec.low)
    return fine.reshape(n, ss, n, ss).mean(axis=(1, 3))


def inject_defects(img, spec: DefectSpec) -> tuple[np.ndarray, np.ndarray]:
    """
    Paint strokes and dots; returns ``(defective image, mask)``.

    With ``spec.margin > 0`` each shape is redrawn until it keeps that many
    pixels clear of the image edge.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    rim = np.ones((h, w), dtype=bool)
    if spec.margin:
        if 2 * spec.margin >= min(h, w):
            raise ValueError(f"margin {spec.margin} leaves no room in a {h}x{w} image")
        rim[spec.margin:h - spec.margin, spec.margin:w - spec.margin] = False

    def stroke():
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        phi = rng.uniform(0, np.pi)
        length = rng.uniform(spec.stroke_length_min, spec.stroke_length_max)
        width = rng.uniform(spec.stroke_width_min, spec.stroke_width_max)
        along = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        across = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        return (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)

    def dot():
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(spec.dot_radius_min, spec.dot_radius_max)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2

    def place(draw):
        for _ in range(_MAX_TRIES):
            shape = draw()
            if not spec.margin or not (shape & rim).any():
                return shape
        raise ValueError(f"no defect fits inside a {spec.margin}px margin after {_MAX_TRIES} draws")

    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(spec.strokes_min, spec.strokes_max + 1))):
        mask |= place(stroke)
    for _ in range(int(rng.integers(spec.dots_min, spec.dots_max + 1))):
        mask |= place(dot)

    out = img.copy()
    out[mask] = spec.intensity
    return out, mask


def make_toy_dataset(out_dir, n_train: int = 100, n_test: int = 50, checker: CheckerSpec = CheckerSpec(),
                     defects: DefectSpec = DefectSpec(), seed: int = 0) -> DatasetManifest:
    """
    Write ``n_train`` clean boards and ``n_test`` defective boards with masks
    under ``out_dir`` (16-bit PNG), plus ``manifest.txt``.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n_train + 2 * n_test)
    seeds = [int(s.generate_state(1)[0]) for s in streams]

    train = []
    for i in range(n_train):
        img = gen_checkerboard(replace(checker, seed=seeds[i]))
        path = out / "train" / f"train_{i:04d}.png"
        save_image(img, path, depth=16)
        train.append(path)

    test = []
    for i in range(n_test):
        board = gen_checkerboard(replace(checker, seed=seeds[n_train + 2 * i]))
        img, mask = inject_defects(board, replace(defects, seed=seeds[n_train + 2 * i + 1]))
        img_path = out / "test" / f"test_{i:04d}.png"
        mask_path = out / "test" / f"test_{i:04d}_mask.png"
        save_image(img, img_path, depth=16)
        save_mask(mask, mask_path)
        test.append((img_path, mask_path))

    manifest = DatasetManifest(train, test, path=out / "manifest.txt")
    write_manifest(manifest, manifest.path)
    return manifest
