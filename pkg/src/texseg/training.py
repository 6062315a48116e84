"""Seeded training loop shared by every autoencoder variant and loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .imaging import DatasetManifest, downscale_bilinear, load_image, sample_patches
from .models import (
    Autoencoder,
    Checkpoint,
    FeatureExtractor,
    ModelSpec,
    fm_loss,
    save_checkpoint,
    vae_loss,
)
from .ssim import SsimParams, l2_loss, ssim_loss

__all__ = [
    "LOSS_VARIANT",
    "EpochRecord",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "batch_loss",
    "extractor_from_meta",
    "fit",
    "load_training_images",
    "make_optimizer",
    "train",
    "validate",
]

log = logging.getLogger(__name__)

LOSS_VARIANT = {"L2": "AE", "SSIM": "AE", "VAE": "VAE", "FM": "FM-AE"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    patch_count: int = 10_000
    patch_size: int = 128
    loss: str = "L2"
    seed: int = 0
    validation_fraction: float = 0.1
    val_patch_count: int | None = None
    resample_each_epoch: bool = False
    decoupled_weight_decay: bool = False
    checkpoint_every: int = 50
    resize: int | None = None
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        self.loss = self.loss.upper()
        if self.loss not in LOSS_VARIANT:
            raise ValueError(f"loss must be one of {sorted(LOSS_VARIANT)}, got {self.loss!r}")
        for name in ("epochs", "batch_size", "patch_count", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")

    def check_spec(self, spec: ModelSpec) -> None:
        want = LOSS_VARIANT[self.loss]
        if spec.variant != want:
            raise ValueError(f"loss {self.loss} needs a {want} model, got {spec.variant}")
        if self.patch_size != spec.input_size:
            raise ValueError(f"patch_size {self.patch_size} != model input size {spec.input_size}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float

    def line(self) -> str:
        return f"epoch {self.epoch} train {self.train_loss:.8g} val {self.val_loss:.8g} sec {self.seconds:.3f}"


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoint_path: Path | None = None

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    @classmethod
    def parse(cls, text: str) -> "TrainLog":
        out = cls()
        for line in text.splitlines():
            parts = line.split()
            if len(parts) == 8 and parts[0] == "epoch":
                out.records.append(EpochRecord(int(parts[1]), float(parts[3]), float(parts[5]), float(parts[7])))
        return out


# ---------------------------------------------------------------------
# Losses and optimizer
# ---------------------------------------------------------------------
def batch_loss(net: Autoencoder, x: torch.Tensor, loss: str, *, ssim_params: SsimParams = SsimParams(),
               extractor: FeatureExtractor | None = None, seed: int = 0) -> torch.Tensor:
    """Training objective for one batch. Reconstructions are not clamped here."""
    if loss == "VAE":
        return vae_loss(net, x, seed)
    x_hat = net(x)
    if loss == "L2":
        return l2_loss(x, x_hat)
    if loss == "SSIM":
        return ssim_loss(x, x_hat, ssim_params)
    if loss == "FM":
        if extractor is None:
            raise ValueError("FM loss needs a feature extractor")
        return fm_loss(extractor, x, x_hat, net.spec.fm_lambda)
    raise ValueError(f"unknown loss {loss!r}")


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    """ADAM (0.9, 0.999, 1e-8); L2-coupled weight decay unless decoupled is requested."""
    kw = dict(lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    if cfg.decoupled_weight_decay:
        return torch.optim.AdamW(params, **kw)
    return torch.optim.Adam(params, **kw)


def extractor_from_meta(meta: dict) -> FeatureExtractor | None:
    source = meta.get("extractor")
    if not source:
        return None
    kind, _, arg = source.partition(":")
    if kind == "random":
        return FeatureExtractor(seed=int(arg))
    if kind == "file":
        return FeatureExtractor.from_file(arg)
    raise ValueError(f"unknown extractor source {source!r}")


def _stack(patches: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack(patches)[:, None], dtype=torch.float32)


@torch.no_grad()
def _mean_loss(net, data: torch.Tensor, loss, ssim_params, extractor, batch_size, seed) -> float:
    was_training = net.training
    net.eval()
    total = 0.0
    try:
        for b, start in enumerate(range(0, len(data), batch_size)):
            x = data[start:start + batch_size]
            value = batch_loss(net, x, loss, ssim_params=ssim_params, extractor=extractor, seed=seed + b)
            total += float(value) * len(x)
    finally:
        net.train(was_training)
    return total / len(data)


def validate(ckpt: Checkpoint | Autoencoder, patches: Sequence[np.ndarray], *, loss: str | None = None,
             ssim_params: SsimParams | None = None, extractor: FeatureExtractor | None = None,
             batch_size: int = 64, seed: int | None = None) -> float:
    """
    Mean loss over ``patches`` without updating weights.

    With a :class:`Checkpoint`, the loss type, SSIM parameters and feature
    extractor default to what the checkpoint was trained with.
    """
    if len(patches) == 0:
        raise ValueError("validation needs at least one patch")
    if isinstance(ckpt, Checkpoint):
        meta = ckpt.training_meta
        net = ckpt.build_model()
        loss = loss or meta.get("loss")
        if ssim_params is None and "ssim" in meta:
            ssim_params = SsimParams(**meta["ssim"])
        if extractor is None and loss == "FM":
            extractor = extractor_from_meta(meta)
        if seed is None:
            seed = meta.get("val_seed", 0)
    else:
        net = ckpt
    if loss is None:
        raise ValueError("loss type unknown; pass loss= or use a checkpoint with metadata")
    data = _stack(patches)
    return _mean_loss(net, data, loss.upper(), ssim_params or SsimParams(), extractor, batch_size, seed or 0)


# ---------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------
def load_training_images(paths: Sequence[Path], resize: int | None = None) -> list[np.ndarray]:
    imgs = [load_image(p) for p in paths]
    if resize:
        imgs = [downscale_bilinear(im, resize, resize) for im in imgs]
    return imgs


def train(manifest: DatasetManifest, spec: ModelSpec, cfg: TrainConfig, out_dir: Path | str | None = None,
          extractor: FeatureExtractor | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train on the manifest's defect-free images (minus the validation share)."""
    manifest.validation_fraction = cfg.validation_fraction
    train_paths, val_paths = manifest.split()
    if not train_paths:
        raise ValueError("manifest has no training images")
    train_imgs = load_training_images(train_paths, cfg.resize)
    val_imgs = load_training_images(val_paths, cfg.resize)
    return fit(train_imgs, val_imgs, spec, cfg, out_dir=out_dir, extractor=extractor)


def fit(train_imgs: Sequence[np.ndarray], val_imgs: Sequence[np.ndarray], spec: ModelSpec, cfg: TrainConfig,
        out_dir: Path | str | None = None, extractor: FeatureExtractor | None = None,
        ) -> tuple[Checkpoint, TrainLog]:
    """Train from in-memory images. See :func:`train`."""
    if not train_imgs:
        raise ValueError("empty training set")
    cfg.check_spec(spec)
    if cfg.loss == "FM" and extractor is None:
        extractor = FeatureExtractor(seed=cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = out / "train.log"
        log_file.write_text("")

    torch.manual_seed(cfg.seed)
    net = Autoencoder(spec)
    net.train()
    opt = make_optimizer(net.parameters(), cfg)

    seeds = np.random.SeedSequence(cfg.seed)
    patch_seed, val_seed = (int(s.generate_state(1)[0]) for s in seeds.spawn(2))
    data = _stack(sample_patches(train_imgs, cfg.patch_count, cfg.patch_size, patch_seed))
    val_data = None
    if val_imgs:
        n_val = cfg.val_patch_count or max(1, int(round(cfg.patch_count * cfg.validation_fraction)))
        val_data = _stack(sample_patches(val_imgs, n_val, cfg.patch_size, val_seed))

    meta = {
        "loss": cfg.loss,
        "seed": cfg.seed,
        "ssim": asdict(cfg.ssim),
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "patch_count": cfg.patch_count,
        "val_seed": val_seed,
    }
    if extractor is not None:
        meta["extractor"] = extractor.source

    history = TrainLog()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.resample_each_epoch and epoch > 1:
            data = _stack(sample_patches(train_imgs, cfg.patch_count, cfg.patch_size, patch_seed + epoch))
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            x = data[order[start:start + cfg.batch_size]]
            opt.zero_grad(set_to_none=True)
            value = batch_loss(net, x, cfg.loss, ssim_params=cfg.ssim, extractor=extractor,
                               seed=cfg.seed * 1_000_003 + step)
            scalar = value.item()
            if not math.isfinite(scalar):
                raise TrainingDiverged(f"non-finite {cfg.loss} loss at epoch {epoch}, step {step}")
            value.backward()
            opt.step()
            total += scalar * len(x)
            step += 1
        train_loss = total / len(data)
        val_loss = float("nan")
        if val_data is not None:
            val_loss = _mean_loss(net, val_data, cfg.loss, cfg.ssim, extractor, cfg.batch_size, val_seed)
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
        history.records.append(rec)
        log.info(rec.line())
        if out is not None:
            with open(log_file, "a") as fh:
                fh.write(rec.line() + "\n")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch != cfg.epochs:
                ckpt = Checkpoint.from_model(net, **meta, epochs_completed=epoch)
                save_checkpoint(ckpt, out / f"checkpoint_e{epoch:04d}.pt")

    ckpt = Checkpoint.from_model(net, **meta, epochs_completed=cfg.epochs)
    if out is not None:
        history.checkpoint_path = out / "checkpoint.pt"
        save_checkpoint(ckpt, history.checkpoint_path)
    return ckpt, history
