"""Computation graphs: encoder, latent rotation, decoder, and pose head.

The autoencoder maps an image to a rotatable latent point set plus an
appearance vector, rotates the point set into a target view, and decodes
it against that view's background plate.  A small fully-connected head
regresses a root-centered pose from the point set alone.

All reference dimensions follow a single scaling rule relative to the
128-pixel reference layout (conv features 512x16x16, 200 latent points,
appearance length 128): widths scale linearly with image size, so the
64-pixel desk-scale default uses 256x8x8 features, 100 points and
appearance length 64.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

import numpy as np
import torch
from torch import nn

VARIANTS = ("unet_style", "deep_residual", "no3d_baseline")


@dataclasses.dataclass(frozen=True)
class ArchitectureConfig:
    """Everything needed to rebuild a model with matching shapes."""

    variant: str = "unet_style"
    image_size: int = 64
    num_points: int | None = None
    appearance_dim: int | None = None
    base_channels: int | None = None
    head_hidden: int | None = None
    head_layers: int = 2
    num_joints: int = 16
    seed: int = 0
    bilinear_only: bool = False
    use_background: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")
        factor = self.image_size / 128.0
        defaults = {
            "num_points": int(round(200 * factor)),
            "appearance_dim": int(round(128 * factor)),
            # Reference U-Net starts at 64 channels; widths are halved and
            # then scaled like every other desk-scale dimension.
            "base_channels": int(round(32 * factor)),
            # Pinned at both ends: 2048 hidden units at 128px, 256 at 64px.
            "head_hidden": int(round(2048 * factor**3)),
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        if self.appearance_dim >= 8 * self.base_channels:
            raise ValueError("appearance_dim must leave room for geometry channels")
        if self.head_layers not in (1, 2):
            raise ValueError("head_layers must be 1 or 2")

    @property
    def feature_size(self) -> int:
        return self.image_size // 8

    @property
    def top_channels(self) -> int:
        return 8 * self.base_channels

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ArchitectureConfig":
        return cls(**data)


@dataclasses.dataclass
class LatentCode:
    """Geometry is a batch of 3xN point sets; appearance a batch of vectors."""

    geometry: torch.Tensor
    appearance: torch.Tensor

    def __post_init__(self):
        if self.geometry.ndim != 3 or self.geometry.shape[1] != 3:
            raise ValueError(f"geometry must be (B, 3, N), got {tuple(self.geometry.shape)}")
        if self.appearance.ndim != 2 or self.appearance.shape[0] != self.geometry.shape[0]:
            raise ValueError("appearance must be (B, A) with matching batch")


def rotate_latent(code: LatentCode, rotation) -> LatentCode:
    """Rotate every latent point; the appearance vector is untouched."""
    geom = code.geometry
    rot = torch.as_tensor(np.asarray(rotation), dtype=geom.dtype, device=geom.device)
    if rot.shape[-2:] != (3, 3) or rot.ndim not in (2, 3):
        raise ValueError(f"rotation must be (3,3) or (B,3,3), got {tuple(rot.shape)}")
    if rot.ndim == 2:
        rot = rot.unsqueeze(0).expand(geom.shape[0], 3, 3)
    if rot.shape[0] != geom.shape[0]:
        raise ValueError("rotation batch does not match geometry batch")
    return LatentCode(torch.bmm(rot, geom), code.appearance)


def conv_bn_relu(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(conv_bn_relu(c_in, c_out), conv_bn_relu(c_out, c_out))


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride), nn.BatchNorm2d(c_out)
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.skip(x))


class Encoder(nn.Module):
    """Image -> flat latent of length 3N + A, dropout after the latent FC."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        c = config.base_channels
        if config.variant == "deep_residual":
            self.features = nn.Sequential(
                conv_bn_relu(3, c),
                ResidualBlock(c, c),
                ResidualBlock(c, 2 * c, stride=2),
                ResidualBlock(2 * c, 4 * c, stride=2),
                ResidualBlock(4 * c, 8 * c, stride=2),
            )
        else:
            self.features = nn.Sequential(
                double_conv(3, c),
                nn.MaxPool2d(2),
                double_conv(c, 2 * c),
                nn.MaxPool2d(2),
                double_conv(2 * c, 4 * c),
                nn.MaxPool2d(2),
                double_conv(4 * c, 8 * c),
            )
        flat = config.top_channels * config.feature_size**2
        self.latent_fc = nn.Linear(flat, 3 * config.num_points + config.appearance_dim)
        self.dropout = nn.Dropout(0.3)

    def forward(self, x):
        h = self.features(x)
        return self.dropout(self.latent_fc(h.flatten(1)))


class Decoder(nn.Module):
    """Geometry FC -> feature map, broadcast appearance, upsample to image.

    The first conv block is preceded by bilinear interpolation, the later
    ones by up-convolutions.  The output is a raw 3-channel foreground map
    to be fused with the background.
    """

    def __init__(self, config: ArchitectureConfig, geometry_inputs: int):
        super().__init__()
        c = config.base_channels
        self.config = config
        self.base_channels_out = config.top_channels - config.appearance_dim
        self.geometry_fc = nn.Linear(
            geometry_inputs, self.base_channels_out * config.feature_size**2
        )
        self.block1 = double_conv(config.top_channels, 4 * c)
        if config.bilinear_only:
            self.up2 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
            self.up3 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        else:
            self.up2 = nn.ConvTranspose2d(4 * c, 4 * c, 2, stride=2)
            self.up3 = nn.ConvTranspose2d(2 * c, 2 * c, 2, stride=2)
        self.block2 = double_conv(4 * c, 2 * c)
        self.block3 = double_conv(2 * c, c)
        self.block4 = double_conv(c, c)
        self.to_rgb = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, geometry_flat, appearance):
        cfg = self.config
        s = cfg.feature_size
        base = torch.relu(self.geometry_fc(geometry_flat))
        base = base.view(-1, self.base_channels_out, s, s)
        app = appearance[:, :, None, None].expand(-1, -1, s, s)
        h = torch.cat([base, app], dim=1)
        h = nn.functional.interpolate(
            h, scale_factor=2, mode="bilinear", align_corners=False
        )
        h = self.block1(h)
        h = self.block2(self.up2(h))
        h = self.block3(self.up3(h))
        h = self.block4(h)
        return self.to_rgb(h)


class BackgroundFusion(nn.Module):
    """Learned per-pixel linear mix of foreground map and background plate.

    With ``use_background`` off (the background-handling ablation), the
    plate is never concatenated and the 1x1 conv sees only the foreground.
    """

    def __init__(self, use_background: bool = True):
        super().__init__()
        self.use_background = use_background
        self.mix = nn.Conv2d(6 if use_background else 3, 3, 1)

    def forward(self, foreground, background=None):
        if not self.use_background:
            return self.mix(foreground)
        if background is None:
            raise ValueError("background plate required")
        if foreground.shape[-2:] != background.shape[-2:]:
            raise ValueError("foreground and background sizes differ")
        return self.mix(torch.cat([foreground, background], dim=1))

    def set_passthrough(self):
        """Constructed weights: copy the background, ignore the foreground."""
        if not self.use_background:
            raise ValueError("no background channels to pass through")
        with torch.no_grad():
            self.mix.weight.zero_()
            self.mix.bias.zero_()
            for ch in range(3):
                self.mix.weight[ch, 3 + ch, 0, 0] = 1.0


class PoseHead(nn.Module):
    """Fully-connected regressor from the latent point set to K joints."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        width = config.head_hidden
        layers = [nn.Linear(3 * config.num_points, width), nn.ReLU(inplace=True)]
        if config.head_layers == 2:
            layers += [nn.Linear(width, width), nn.ReLU(inplace=True)]
        layers.append(nn.Linear(width, 3 * config.num_joints))
        self.net = nn.Sequential(*layers)
        self.num_joints = config.num_joints

    def forward(self, geometry):
        flat = geometry.flatten(1)
        return self.net(flat).view(-1, self.num_joints, 3)


class GeoAutoencoder(nn.Module):
    """Encoder, latent rotation, decoder with background fusion, pose head.

    The flat-latent baseline variant keeps the same encoder but feeds the
    decoder the unrotated latent concatenated with the 9 rotation entries
    instead of rotating a 3D point set.
    """

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        geometry_inputs = 3 * config.num_points
        if config.variant == "no3d_baseline":
            geometry_inputs += 9
        self.decoder = Decoder(config, geometry_inputs)
        self.fusion = BackgroundFusion(config.use_background)
        self.pose_head = PoseHead(config)

    @property
    def uses_3d_latent(self) -> bool:
        return self.config.variant != "no3d_baseline"

    def _check_size(self, img: torch.Tensor, what: str):
        s = self.config.image_size
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[-2:] != (s, s):
            raise ValueError(f"{what} must be (B, 3, {s}, {s}), got {tuple(img.shape)}")

    def encode(self, img: torch.Tensor) -> LatentCode:
        self._check_size(img, "input image")
        flat = self.encoder(img)
        n = self.config.num_points
        geometry = flat[:, : 3 * n].view(-1, 3, n)
        appearance = flat[:, 3 * n:]
        return LatentCode(geometry, appearance)

    def decode(self, geometry, appearance, background, rotation=None):
        """Render an image from geometry + appearance over a background.

        ``geometry`` is a (B, 3, N) tensor, already rotated into the
        target view for the 3D variants.  The flat-latent baseline
        instead requires ``rotation`` here and concatenates its entries.
        """
        if self.config.use_background:
            self._check_size(background, "background")
        else:
            background = None
        flat = geometry.flatten(1)
        if self.uses_3d_latent:
            if rotation is not None:
                raise ValueError("rotation conditioning is only for the flat-latent variant")
        else:
            if rotation is None:
                raise ValueError("the flat-latent variant needs the rotation as input")
            rot = torch.as_tensor(
                np.asarray(rotation), dtype=flat.dtype, device=flat.device
            )
            if rot.ndim == 2:
                rot = rot.unsqueeze(0).expand(flat.shape[0], 3, 3)
            flat = torch.cat([flat, rot.reshape(-1, 9)], dim=1)
        foreground = self.decoder(flat, appearance)
        return self.fusion(foreground, background)

    def reconstruct(self, source, rotation, donor, background):
        """Novel-view synthesis: source geometry, donor appearance."""
        code = self.encode(source)
        donor_app = self.encode(donor).appearance
        if self.uses_3d_latent:
            rotated = rotate_latent(code, rotation)
            return self.decode(rotated.geometry, donor_app, background)
        return self.decode(code.geometry, donor_app, background, rotation=rotation)

    def regress_pose(self, geometry) -> torch.Tensor:
        return self.pose_head(geometry)


def init_weights(model: nn.Module, seed: int):
    """Fan-in-scaled uniform init (He bound sqrt(6/fan_in)) with small biases.

    The He bound keeps activation magnitudes roughly constant through the
    ReLU stacks, so the decoder is alive at init.  Nonzero biases keep
    activations away from exact ReLU kinks, which matters for
    finite-difference gradient verification.  Deterministic under a
    dedicated generator so two builds with the same seed are
    bitwise-identical.  Batch-norm keeps its default init.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = module.weight.shape[1] * (
                module.weight[0, 0].numel() if module.weight.ndim > 2 else 1
            )
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = module.weight.shape[0] * module.weight[0, 0].numel()
            bound = math.sqrt(6.0 / fan_in)
            bias_bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bias_bound, bias_bound, generator=gen)


def build_model(variant: str | None = None, config: ArchitectureConfig | None = None,
                **overrides) -> GeoAutoencoder:
    """Construct and deterministically initialize a model."""
    if config is None:
        config = ArchitectureConfig(variant=variant or "unet_style", **overrides)
    elif variant is not None and config.variant != variant:
        raise ValueError("variant argument disagrees with config.variant")
    model = GeoAutoencoder(config)
    init_weights(model, config.seed)
    # Regression heads start near zero so the first predictions sit at the
    # target mean instead of several standard deviations away; full-scale
    # output init was observed to stall supervised training for hundreds
    # of steps.  Kept small but nonzero so every parameter has gradient.
    last = [m for m in model.pose_head.modules() if isinstance(m, nn.Linear)][-1]
    with torch.no_grad():
        last.weight.mul_(0.01)
        last.bias.mul_(0.01)
    return model


def save_model(model: GeoAutoencoder, path: str):
    """Write a checkpoint directory: named arrays + architecture descriptor."""
    os.makedirs(path, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(os.path.join(path, "weights.npz"), **arrays)
    with open(os.path.join(path, "descriptor.json"), "w") as fh:
        json.dump(model.config.to_json(), fh, indent=2)


def load_model(path: str) -> GeoAutoencoder:
    with open(os.path.join(path, "descriptor.json")) as fh:
        config = ArchitectureConfig.from_json(json.load(fh))
    model = GeoAutoencoder(config)
    with np.load(os.path.join(path, "weights.npz")) as data:
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files}
    model.load_state_dict(state)
    return model


def to_tensor(images) -> torch.Tensor:
    """HxWx3 (or a batch of them) float arrays to a NCHW float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """NCHW tensor back to a batch of HxWx3 float32 arrays."""
    return tensor.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy()


def standardize_codes(geometry: torch.Tensor, norm_stats) -> torch.Tensor:
    """Whiten a batch of latent point sets with stage-2 code statistics.

    The encoder's raw geometry coordinates can sit far from unit scale,
    which starves the pose head's ReLU layers; stage 2 therefore records
    per-dimension stats of the flattened codes and the head is always fed
    standardized inputs.  Stats of None pass the codes through unchanged.
    """
    if getattr(norm_stats, "code_mean", None) is None:
        return geometry
    flat = geometry.flatten(1)
    mean = torch.as_tensor(np.asarray(norm_stats.code_mean), dtype=flat.dtype)
    std = torch.as_tensor(np.asarray(norm_stats.code_std), dtype=flat.dtype)
    return ((flat - mean) / std).view(geometry.shape)


def predict_poses(model: GeoAutoencoder, head, images, norm_stats,
                  batch_size: int = 32) -> list:
    """Run encoder + pose head over images, de-normalize to mm poses.

    ``head`` of None uses the model's own pose head.  Images follow the
    dataset convention (HxWx3 float in [0, 1]); ``norm_stats`` is the
    training-set normalization applied before encoding and inverted on
    the regressed poses.
    """
    if head is None:
        head = model.pose_head
    was_training = model.training
    model.eval()
    head.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = [norm_stats.apply_image(img) for img in images[start:start + batch_size]]
            code = model.encode(to_tensor(np.stack(chunk)))
            pred = head(standardize_codes(code.geometry, norm_stats)).cpu().numpy()
            out.extend(norm_stats.invert_pose(p) for p in pred)
    if was_training:
        model.train()
        head.train()
    return out
