"""Segmentation U-Net, inpainting generator and patch discriminator.

All three are built through `build(config, seed)`, which applies Xavier
initialization to every convolution weight and zeroes every bias.
"""

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigError, IngestionError, NormalizationError, ShapeError

# =========================
# CONFIG
# =========================

CHECKPOINT_FORMAT_VERSION = 1

# Discriminator maps are 1/5 of the input so they line up with the
# stride-5 pooled edge map.
DISC_DOWNSAMPLE = 5

RANGE_TOLERANCE = 1e-5


@dataclass
class UNetConfig:
    in_channels: int = 4
    encoder_channels: tuple = (64, 128, 256, 320)
    out_channels: int = 4

    def validate(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ConfigError(f"invalid encoder_channels {self.encoder_channels}")
        return self


@dataclass
class GeneratorConfig:
    in_channels: int = 4
    encoder_channels: tuple = (64, 128, 256, 320)
    out_channels: int = 4

    def validate(self):
        if self.out_channels != self.in_channels:
            raise ConfigError(
                f"generator must map {self.in_channels} modalities back to "
                f"{self.in_channels}, got out_channels={self.out_channels}")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ConfigError(f"invalid encoder_channels {self.encoder_channels}")
        return self


@dataclass
class DiscriminatorConfig:
    in_channels: int = 4
    channels: tuple = (64, 128, 256)
    downsample: int = DISC_DOWNSAMPLE
    leaky_slope: float = 0.2

    def validate(self):
        if self.in_channels < 1 or not self.channels or min(self.channels) < 1:
            raise ConfigError(f"invalid discriminator channels {self.channels}")
        if self.downsample != DISC_DOWNSAMPLE:
            raise ConfigError(
                f"discriminator downsample is fixed at {DISC_DOWNSAMPLE} to match the edge map")
        return self


CONFIG_TYPES = {
    "UNetConfig": UNetConfig,
    "GeneratorConfig": GeneratorConfig,
    "DiscriminatorConfig": DiscriminatorConfig,
}


# =========================
# ARCHITECTURES
# =========================


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels, out_channels):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_channels, affine=True),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """2D U-Net with a symmetric decoder and a 1x1 head.

    `output` selects the head activation: "softmax" for the segmenter,
    "tanh" for the inpainting generator.
    """

    def __init__(self, in_channels, encoder_channels, out_channels, output):
        super().__init__()
        self.output = output
        self.depth = len(encoder_channels)

        self.encoders = nn.ModuleList()
        prev = in_channels
        for ch in encoder_channels:
            self.encoders.append(ConvBlock(prev, ch))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(prev, prev)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for ch in reversed(encoder_channels):
            self.ups.append(nn.ConvTranspose2d(prev, ch, 2, stride=2))
            self.decoders.append(ConvBlock(2 * ch, ch))
            prev = ch
        self.head = nn.Conv2d(prev, out_channels, 1)

    def forward(self, x):
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([skip, up(x)], dim=1))
        logits = self.head(x)
        if self.output == "softmax":
            return torch.softmax(logits, dim=1)
        return torch.tanh(logits)


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels, channels, leaky_slope):
        super().__init__()
        layers = [
            nn.Conv2d(in_channels, channels[0], DISC_DOWNSAMPLE, stride=DISC_DOWNSAMPLE),
            nn.LeakyReLU(leaky_slope, inplace=True),
        ]
        prev = channels[0]
        for ch in channels[1:]:
            layers += [
                nn.Conv2d(prev, ch, 3, padding=1, bias=False),
                nn.InstanceNorm2d(ch, affine=True),
                nn.LeakyReLU(leaky_slope, inplace=True),
            ]
            prev = ch
        layers += [nn.Conv2d(prev, 1, 3, padding=1), nn.Sigmoid()]
        self.main = nn.Sequential(*layers)

    def forward(self, x):
        height, width = x.shape[-2:]
        if height < DISC_DOWNSAMPLE or width < DISC_DOWNSAMPLE:
            raise ShapeError(
                f"discriminator input {height}x{width} is smaller than one {DISC_DOWNSAMPLE}x{DISC_DOWNSAMPLE} patch")
        # ceil(H/5) x ceil(W/5) output
        x = F.pad(x, (0, -width % DISC_DOWNSAMPLE, 0, -height % DISC_DOWNSAMPLE), mode="replicate")
        return self.main(x)


def _xavier_init(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.InstanceNorm2d) and module.affine:
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _construct(config):
    if isinstance(config, UNetConfig):
        return UNet(config.in_channels, config.encoder_channels, config.out_channels, "softmax")
    if isinstance(config, GeneratorConfig):
        return UNet(config.in_channels, config.encoder_channels, config.out_channels, "tanh")
    if isinstance(config, DiscriminatorConfig):
        return PatchDiscriminator(config.in_channels, config.channels, config.leaky_slope)
    raise ConfigError(f"unknown network config {type(config).__name__}")


def build(config, seed=0):
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _construct(config)
        net.apply(_xavier_init)
    net.config = config
    return net


# =========================
# FORWARD PASSES
# =========================


def _pad_to_multiple(images, multiple, pad):
    height, width = images.shape[-2:]
    pad_h, pad_w = -height % multiple, -width % multiple
    if pad_h or pad_w:
        if not pad:
            raise ShapeError(
                f"input {height}x{width} is not divisible by {multiple}; enable padding")
        images = F.pad(images, (0, pad_w, 0, pad_h), mode="replicate")
    return images, (height, width)


def _check_range(images, what):
    if images.numel() and (images.min() < -1 - RANGE_TOLERANCE or images.max() > 1 + RANGE_TOLERANCE):
        raise NormalizationError(f"{what} input must lie in [-1, 1]")


def seg_forward(net, images, pad=True):
    """Per-pixel class probabilities [B, C, H, W]; inputs are padded then cropped back."""
    padded, (height, width) = _pad_to_multiple(images, 2 ** net.depth, pad)
    return net(padded)[..., :height, :width]


def whole_tumor(probs):
    """Union mask of every tumor class: 1 - P(background)."""
    return 1.0 - probs[:, 0]


def gen_forward(net, occluded, pad=True):
    _check_range(occluded, "generator")
    padded, (height, width) = _pad_to_multiple(occluded, 2 ** net.depth, pad)
    return net(padded)[..., :height, :width]


def disc_forward(net, images):
    """Patch probability map [B, ceil(H/5), ceil(W/5)]."""
    _check_range(images, "discriminator")
    return net(images)[:, 0]


# =========================
# CHECKPOINTS
# =========================


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def parameter_digest(net):
    digest = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, net, kind, state=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config_type": type(net.config).__name__,
        "config": asdict(net.config),
        "state_dict": net.state_dict(),
        "state": state or {},
    }, path)
    return path


def load_checkpoint(path, expected_kind=None):
    """Rebuild a network from a checkpoint; returns (net, payload)."""
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise IngestionError(f"checkpoint not found: {path}") from e
    except Exception as e:
        raise IngestionError(f"cannot read checkpoint {path}: {e}") from e

    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if expected_kind and payload.get("kind") != expected_kind:
        raise IngestionError(f"{path}: expected a {expected_kind} checkpoint, got {payload.get('kind')}")

    config_cls = CONFIG_TYPES.get(payload.get("config_type"))
    if config_cls is None:
        raise IngestionError(f"{path}: unknown config type {payload.get('config_type')}")
    config = config_cls(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in payload["config"].items()})
    net = build(config)
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise ShapeError(f"{path}: parameters do not match config ({e})") from e
    return net, payload
