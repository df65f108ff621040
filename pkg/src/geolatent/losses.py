"""Training objectives: triplet reconstruction, perceptual, and pose losses.

The reconstruction loss drives the rotatable-latent autoencoder: encode a
source view, rotate the latent point set into the target view, decode over
the target background with a donor frame's appearance, and compare to the
real target image in pixels and in frozen network features.  The pose loss
supervises the fully-connected head on labeled samples with the unsquared
per-sample Euclidean norm.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from . import nets

PERCEPTUAL_SEED = 1234
DEFAULT_FEATURE_WEIGHT = 2.0


@dataclasses.dataclass
class LossReport:
    """Differentiable loss terms; total = pixel + weight * feature."""

    pixel_term: torch.Tensor
    feature_term: torch.Tensor
    total: torch.Tensor
    batch_size: int
    feature_weight: float = DEFAULT_FEATURE_WEIGHT

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        expected = float(self.pixel_term.detach()) + self.feature_weight * float(
            self.feature_term.detach()
        )
        if abs(float(self.total.detach()) - expected) > 1e-5 * max(1.0, abs(expected)):
            raise ValueError("total does not decompose into pixel + weight * feature")

    def to_json(self) -> dict:
        return {
            "pixel_term": float(self.pixel_term),
            "feature_term": float(self.feature_term),
            "total": float(self.total),
            "batch_size": self.batch_size,
            "feature_weight": self.feature_weight,
        }


class FrozenFeatureNet(nn.Module):
    """Fixed-seed random residual conv stack used as a feature extractor.

    Stands in for a pretrained 18-layer residual network, which is out of
    scope here.  Features are taken after the second residual block; the
    weights are frozen at construction.
    """

    def __init__(self, seed: int = PERCEPTUAL_SEED, channels: int = 16):
        super().__init__()
        self.stem = nets.conv_bn_relu(3, channels)
        self.block1 = nets.ResidualBlock(channels, channels)
        self.block2 = nets.ResidualBlock(channels, 2 * channels, stride=2)
        nets.init_weights(self, seed)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # Frozen for good: batch-norm always runs on its initial stats.
        return super().train(False)

    def forward(self, x):
        return self.block2(self.block1(self.stem(x)))


_feature_net_cache: dict[torch.dtype, FrozenFeatureNet] = {}


def default_feature_net(dtype: torch.dtype = torch.float32) -> FrozenFeatureNet:
    if dtype not in _feature_net_cache:
        net = FrozenFeatureNet()
        if dtype != torch.float32:
            net = net.to(dtype)
        _feature_net_cache[dtype] = net
    return _feature_net_cache[dtype]


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor,
                    feature_net: FrozenFeatureNet | None = None) -> torch.Tensor:
    """Mean squared feature difference; symmetric in its arguments."""
    if pred.shape != target.shape:
        raise ValueError("prediction and target sizes differ")
    if feature_net is None:
        feature_net = default_feature_net(pred.dtype)
    return (feature_net(pred) - feature_net(target)).square().mean()


def reconstruction_loss(batch, model: nets.GeoAutoencoder,
                        feature_weight: float = DEFAULT_FEATURE_WEIGHT,
                        feature_net: FrozenFeatureNet | None = None) -> LossReport:
    """Triplet loss: source geometry, donor appearance, target pixels.

    ``batch`` is either a collated dict of NHWC arrays (see
    :func:`geolatent.datapipe.collate_triplets`) or a list of triplet
    samples.  The source's appearance and the donor's geometry are simply
    never used.  A zero ``feature_weight`` skips the feature network
    entirely (the no-perceptual ablation).
    """
    if not isinstance(batch, dict):
        if len(batch) == 0:
            raise ValueError("empty batch")
        from . import datapipe

        batch = datapipe.collate_triplets(batch)
    dtype = model.fusion.mix.weight.dtype
    src = nets.to_tensor(batch["source"]).to(dtype)
    target = nets.to_tensor(batch["target"]).to(dtype)
    donor = nets.to_tensor(batch["donor"]).to(dtype)
    background = nets.to_tensor(batch["background"]).to(dtype)
    pred = model.reconstruct(src, batch["rotation"], donor, background)
    pixel = (pred - target).square().mean()
    if feature_weight != 0.0:
        feature = perceptual_loss(pred, target, feature_net)
    else:
        feature = torch.zeros((), dtype=dtype)
    total = pixel + feature_weight * feature
    return LossReport(pixel, feature, total, batch_size=src.shape[0],
                      feature_weight=feature_weight)


def pose_loss(images: torch.Tensor, poses: torch.Tensor,
              model: nets.GeoAutoencoder, head=None) -> torch.Tensor:
    """Mean unsquared Euclidean norm of the per-sample 3K residual.

    ``poses`` are root-centered normalized joints (B, K, 3); ``images``
    are normalized NCHW inputs.  ``head`` of None uses the model's own.
    """
    if head is None:
        head = model.pose_head
    if images.shape[0] != poses.shape[0]:
        raise ValueError("batch sizes differ")
    code = model.encode(images)
    pred = head(code.geometry)
    residual = (pred - poses).flatten(1)
    return residual.norm(dim=1).mean()


def pose_loss_from_codes(geometry: torch.Tensor, poses: torch.Tensor,
                         head) -> torch.Tensor:
    """Same objective on precomputed latent point sets (frozen encoder)."""
    if geometry.shape[0] != poses.shape[0]:
        raise ValueError("batch sizes differ")
    residual = (head(geometry) - poses).flatten(1)
    return residual.norm(dim=1).mean()
