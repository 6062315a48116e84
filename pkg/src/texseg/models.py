"""
Convolutional autoencoders for 128 x 128 single-channel patches.

Encoder layers (kernel, stride, padding -> output for a 128x128x1 input)::

    conv1  4 2 1 -> 64x64x32      conv6  4 2 1 -> 8x8x128
    conv2  4 2 1 -> 32x32x32      conv7  3 1 1 -> 8x8x64
    conv3  3 1 1 -> 32x32x32      conv8  3 1 1 -> 8x8x32
    conv4  4 2 1 -> 16x16x64      conv9  8 1 0 -> 1x1xd
    conv5  3 1 1 -> 16x16x64

The decoder reads the same table bottom-up with transposed convolutions.
Every layer but the last of each half is followed by LeakyReLU(0.2).
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
from torch import nn

from .ssim import l2_loss

__all__ = [
    "Autoencoder",
    "Checkpoint",
    "CheckpointError",
    "FeatureExtractor",
    "ModelSpec",
    "VaePosterior",
    "VARIANTS",
    "build_decoder",
    "build_encoder",
    "fm_loss",
    "kl_divergence",
    "kl_score",
    "load_checkpoint",
    "reconstruct",
    "save_checkpoint",
    "vae_encode",
    "vae_loss",
    "vae_residual",
    "vae_sample",
]

PathLike = Union[str, os.PathLike]

VARIANTS = ("AE", "VAE", "FM-AE")
INPUT_SIZE = 128
CHECKPOINT_VERSION = 1

# (out_channels, kernel, stride, padding) for conv1..conv8; conv9 depends on the variant
_ENCODER_TABLE = [
    (32, 4, 2, 1),
    (32, 4, 2, 1),
    (32, 3, 1, 1),
    (64, 4, 2, 1),
    (64, 3, 1, 1),
    (128, 4, 2, 1),
    (64, 3, 1, 1),
    (32, 3, 1, 1),
]
_BOTTLENECK = (8, 1, 0)


@dataclass(frozen=True)
class ModelSpec:
    latent_dim: int = 100
    variant: str = "AE"
    input_size: int = INPUT_SIZE
    leaky_slope: float = 0.2
    fm_lambda: float = 1.0
    vae_samples: int = 6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.latent_dim) != self.latent_dim or self.latent_dim < 1:
            raise ValueError("latent_dim must be a positive integer")
        if self.input_size != INPUT_SIZE:
            raise ValueError(f"unsupported input size {self.input_size}; the architecture needs {INPUT_SIZE}")
        if self.variant == "FM-AE" and not self.fm_lambda > 0:
            raise ValueError("fm_lambda must be positive for FM-AE")
        if self.vae_samples < 1:
            raise ValueError("vae_samples must be >= 1")


@dataclass
class VaePosterior:
    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)


def _init_weights(net: nn.Sequential, slope: float) -> None:
    convs = [m for m in net if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    for i, m in enumerate(convs):
        last = i == len(convs) - 1
        # torch computes fan-in of a transposed conv from the wrong weight axis
        mode = "fan_out" if isinstance(m, nn.ConvTranspose2d) else "fan_in"
        if last:
            nn.init.kaiming_normal_(m.weight, mode=mode, nonlinearity="linear")
        else:
            nn.init.kaiming_normal_(m.weight, a=slope, mode=mode, nonlinearity="leaky_relu")
        nn.init.zeros_(m.bias)


def build_encoder(spec: ModelSpec) -> nn.Sequential:
    """Encoder trunk; the VAE head emits ``2 * d`` channels (mean, log-variance)."""
    layers: list[nn.Module] = []
    in_ch = 1
    for out_ch, k, s, p in _ENCODER_TABLE:
        layers += [nn.Conv2d(in_ch, out_ch, k, s, p), nn.LeakyReLU(spec.leaky_slope)]
        in_ch = out_ch
    out = 2 * spec.latent_dim if spec.variant == "VAE" else spec.latent_dim
    layers.append(nn.Conv2d(in_ch, out, *_BOTTLENECK))
    net = nn.Sequential(*layers)
    _init_weights(net, spec.leaky_slope)
    return net


def build_decoder(spec: ModelSpec) -> nn.Sequential:
    layers: list[nn.Module] = []
    chans = [1] + [row[0] for row in _ENCODER_TABLE]
    # bottleneck first, then conv8 ... conv1 mirrored
    layers += [nn.ConvTranspose2d(spec.latent_dim, chans[-1], *_BOTTLENECK), nn.LeakyReLU(spec.leaky_slope)]
    for i in range(len(_ENCODER_TABLE) - 1, -1, -1):
        _, k, s, p = _ENCODER_TABLE[i]
        layers.append(nn.ConvTranspose2d(chans[i + 1], chans[i], k, s, p))
        if i > 0:
            layers.append(nn.LeakyReLU(spec.leaky_slope))
    net = nn.Sequential(*layers)
    _init_weights(net, spec.leaky_slope)
    nn.init.constant_(net[-1].bias, 0.5)  # outputs start at mid-gray
    return net


class Autoencoder(nn.Module):
    """Deterministic, variational or feature-matching autoencoder."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec)
        self.decoder = build_decoder(spec)

    @property
    def is_vae(self) -> bool:
        return self.spec.variant == "VAE"

    def _check_input(self, x: torch.Tensor) -> None:
        n = self.spec.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, n, n):
            raise ValueError(f"expected (B, 1, {n}, {n}) input, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Latent code ``(B, d)``; for the VAE this is the posterior mean."""
        self._check_input(x)
        h = self.encoder(x).flatten(1)
        return h[:, : self.spec.latent_dim]

    def posterior(self, x: torch.Tensor) -> VaePosterior:
        if not self.is_vae:
            raise TypeError("posterior() needs a VAE")
        self._check_input(x)
        h = self.encoder(x).flatten(1)
        d = self.spec.latent_dim
        return VaePosterior(h[:, :d], h[:, d:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z.reshape(z.shape[0], -1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def _to_batch(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


@torch.no_grad()
def reconstruct(net: nn.Module, x) -> torch.Tensor:
    """Inference-time reconstruction ``D(E(x))`` clamped to [0, 1]."""
    x = _to_batch(x)
    param = next(net.parameters(), None)
    if param is not None:
        x = x.to(param.dtype)
    was_training = net.training
    net.eval()
    try:
        out = net(x)
    finally:
        net.train(was_training)
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------
def vae_encode(net: Autoencoder, x) -> VaePosterior:
    return net.posterior(_to_batch(x))


def vae_sample(post: VaePosterior, n: int, seed: int) -> list[torch.Tensor]:
    """Reparameterised draws ``mean + std * eps`` with seeded standard normal ``eps``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    std = post.std
    return [
        post.mean + std * torch.randn(post.mean.shape, generator=gen, dtype=post.mean.dtype)
        for _ in range(n)
    ]


def kl_divergence(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """``KL(N(mean, exp(log_variance)) || N(0, I))`` summed over the last axis."""
    return 0.5 * (mean.pow(2) + log_variance.exp() - 1.0 - log_variance).sum(-1)


def kl_score(post: VaePosterior) -> torch.Tensor:
    """Per-image KL novelty score, shape ``(B,)``."""
    return kl_divergence(post.mean, post.log_variance)


def vae_loss(net: Autoencoder, x: torch.Tensor, seed: int) -> torch.Tensor:
    """Sum-of-squares reconstruction of one reparameterised sample plus KL, batch averaged."""
    post = net.posterior(x)
    (z,) = vae_sample(post, 1, seed)
    return l2_loss(x, net.decode(z)) + kl_divergence(post.mean, post.log_variance).mean()


@torch.no_grad()
def vae_residual(net: Autoencoder, x, n: int = 6, seed: int = 0) -> np.ndarray:
    """
    Per-pixel mean squared error over ``n`` decoded posterior samples.

    Returns an array shaped like ``x`` without the channel axis: ``(H, W)``
    for one image, ``(B, H, W)`` for a batch.
    """
    single = not isinstance(x, torch.Tensor) and np.ndim(x) == 2
    xb = _to_batch(x).to(next(net.parameters()).dtype)
    was_training = net.training
    net.eval()
    try:
        post = net.posterior(xb)
        acc = torch.zeros_like(xb)
        for z in vae_sample(post, n, seed):
            acc += (xb - net.decode(z).clamp(0.0, 1.0)) ** 2
    finally:
        net.train(was_training)
    res = (acc / n)[:, 0].double().numpy()
    return res[0] if single else res


# ---------------------------------------------------------------------
# Feature matching
# ---------------------------------------------------------------------
class FeatureExtractor(nn.Module):
    """
    Frozen feature map ``F`` for the feature-matching loss.

    Layout follows the first three convolutions of AlexNet, with parameter
    names matching torchvision's ``features.*`` keys so exported ImageNet
    weights load directly. Without a weight file the layers are randomly
    initialised from ``seed``. Single-channel input is replicated to RGB.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 64, 11, 4, 2),
            nn.ReLU(inplace=False),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(64, 192, 5, padding=2),
            nn.ReLU(inplace=False),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(192, 384, 3, padding=1),
            nn.ReLU(inplace=False),
        )
        self.seed = seed
        self.source = f"random:{seed}"
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: always stays in eval mode
        return super().train(False)

    @classmethod
    def from_file(cls, path: PathLike) -> "FeatureExtractor":
        """Load weights saved as a dict of named tensors (``features.0.weight``, ...)."""
        fx = cls()
        try:
            blobs = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read feature weights {path}: {exc}") from exc
        if "weights" in blobs and isinstance(blobs["weights"], dict):
            blobs = blobs["weights"]
        own = fx.state_dict()
        picked = {k: v for k, v in blobs.items() if k in own}
        missing = set(own) - set(picked)
        if missing:
            raise CheckpointError(f"{path}: missing feature weights {sorted(missing)}")
        for k, v in picked.items():
            if tuple(v.shape) != tuple(own[k].shape):
                raise CheckpointError(f"{path}: {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
        fx.load_state_dict(picked)
        fx.requires_grad_(False)
        fx.source = f"file:{Path(path)}"
        return fx

    def save(self, path: PathLike) -> None:
        torch.save({"format_version": CHECKPOINT_VERSION, "weights": self.state_dict()}, path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] not in (1, 3):
            raise ValueError(f"expected (B, 1|3, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        w = self.features[0].weight
        return self.features(x.to(w.dtype)).flatten(1)


def feature_distance(extractor: FeatureExtractor, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """``||F(x) - F(x_hat)||^2`` per image, averaged over the batch."""
    return ((extractor(x) - extractor(x_hat)) ** 2).sum(1).mean()


def fm_loss(extractor: FeatureExtractor, x: torch.Tensor, x_hat: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    return l2_loss(x, x_hat) + lam * feature_distance(extractor, x, x_hat)


# ---------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------
class CheckpointError(RuntimeError):
    """Corrupt, incompatible or mismatched checkpoint file."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: dict[str, torch.Tensor]
    training_meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, net: Autoencoder, **meta) -> "Checkpoint":
        weights = {k: v.detach().clone() for k, v in net.state_dict().items()}
        return cls(net.spec, weights, dict(meta))

    def build_model(self) -> Autoencoder:
        net = Autoencoder(self.spec)
        own = net.state_dict()
        if set(own) != set(self.weights):
            raise CheckpointError("checkpoint weights do not match the model spec")
        for k, v in self.weights.items():
            if tuple(v.shape) != tuple(own[k].shape):
                raise CheckpointError(f"{k}: shape {tuple(v.shape)} does not match spec {tuple(own[k].shape)}")
        net.load_state_dict(self.weights)
        net.eval()
        return net

    @property
    def loss(self) -> str | None:
        return self.training_meta.get("loss")


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "spec": asdict(ckpt.spec),
        "weights": {k: v.detach().cpu() for k, v in ckpt.weights.items()},
        "training_meta": dict(ckpt.training_meta),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: PathLike, expected_spec: ModelSpec | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or not {"format_version", "spec", "weights"} <= set(payload):
        raise CheckpointError(f"{path}: not a texseg checkpoint")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        spec = ModelSpec(**payload["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model spec ({exc})") from exc
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"{path}: spec {spec} differs from expected {expected_spec}")
    ckpt = Checkpoint(spec, dict(payload["weights"]), dict(payload.get("training_meta", {})))
    ckpt.build_model()  # validates weight names and shapes
    return ckpt
