"""Generator (U-Net encoder/decoder with a densely concatenated bottleneck) and PatchGAN discriminator."""

from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn


@dataclass
class GeneratorConfig:
    in_channels: int = 4
    num_classes: int = 4
    depth: int = 4
    base_filters: int = 8
    bottleneck_blocks: int = 4
    kernel_size: int = 4
    leaky_slope: float = 0.3
    dropout: float = 0.2

    def __post_init__(self):
        if self.base_filters < 1 or self.depth < 1:
            raise ValueError("base_filters and depth must be >= 1")
        if self.kernel_size % 2:
            raise ValueError("stride-2 'same' convolutions need an even kernel size")

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        return cls(base_filters=64)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 8
    depth: int = 4
    base_filters: int = 8
    kernel_size: int = 4
    leaky_slope: float = 0.3

    def __post_init__(self):
        if self.base_filters < 1 or self.depth < 1:
            raise ValueError("base_filters and depth must be >= 1")
        if self.kernel_size % 2:
            raise ValueError("stride-2 'same' convolutions need an even kernel size")

    @classmethod
    def full_scale(cls) -> "DiscriminatorConfig":
        return cls(base_filters=64)


def he_init(module: nn.Module) -> None:
    """Fan-in scaled Gaussian weights (std sqrt(2 / fan_in)), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_divisible(shape, depth: int) -> None:
    factor = 2 ** depth
    if any(s % factor for s in shape):
        raise ValueError(f"spatial shape {tuple(shape)} not divisible by 2^{depth} = {factor}")


def same_conv(c_in: int, c_out: int, k: int, bias: bool = True) -> nn.Sequential:
    """Stride-1 convolution with 'same' padding; even kernels pad one extra voxel on the high side."""
    lo = (k - 1) // 2
    hi = k - 1 - lo
    return nn.Sequential(nn.ConstantPad3d((lo, hi) * 3, 0.0), nn.Conv3d(c_in, c_out, k, bias=bias))


# Convolutions feeding an affine instance norm carry no bias: the norm's mean
# subtraction would cancel it and leave it without gradient.


def _down(c_in: int, c_out: int, k: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, k, stride=2, padding=(k - 2) // 2, bias=False),
        nn.InstanceNorm3d(c_out, affine=True, eps=1e-5),
        nn.LeakyReLU(slope),
    )


class Encoder(nn.Module):
    """``depth`` stride-2 conv -> instance norm -> leaky ReLU blocks, filters doubling per block."""

    def __init__(self, in_channels: int, base_filters: int, depth: int, k: int, slope: float):
        super().__init__()
        chans = [base_filters * 2 ** i for i in range(depth)]
        self.out_channels = chans
        self.blocks = nn.ModuleList(
            _down(c_in, c_out, k, slope) for c_in, c_out in zip([in_channels] + chans[:-1], chans)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        return skips


class DenseBottleneck(nn.Module):
    """Stride-1 conv blocks where each block's output is concatenated onto its input.

    Block ``i`` sees the encoder output and all earlier block outputs; the
    module returns the full concatenation.
    """

    def __init__(self, channels: int, blocks: int, k: int, slope: float, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            nn.Sequential(
                same_conv(channels * (i + 1), channels, k, bias=False),
                nn.InstanceNorm3d(channels, affine=True, eps=1e-5),
                nn.LeakyReLU(slope),
                nn.Dropout(dropout),
            )
            for i in range(blocks)
        )
        self.out_channels = channels * (blocks + 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = torch.cat([block(x), x], dim=1)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        k, slope = cfg.kernel_size, cfg.leaky_slope
        pad = (k - 2) // 2
        self.encoder = Encoder(cfg.in_channels, cfg.base_filters, cfg.depth, k, slope)
        enc = self.encoder.out_channels
        self.bottleneck = DenseBottleneck(enc[-1], cfg.bottleneck_blocks, k, slope, cfg.dropout)

        ups = []
        c_in = self.bottleneck.out_channels
        for skip in reversed(enc[:-1]):
            ups.append(nn.Sequential(
                nn.ConvTranspose3d(c_in, skip, k, stride=2, padding=pad, bias=False),
                nn.InstanceNorm3d(skip, affine=True, eps=1e-5),
                nn.ReLU(),
            ))
            c_in = 2 * skip  # upsampled features concatenated with the encoder skip
        self.decoder = nn.ModuleList(ups)
        self.head = nn.ConvTranspose3d(c_in, cfg.num_classes, k, stride=2, padding=pad)
        he_init(self)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x.shape[2:], self.cfg.depth)
        skips = self.encoder(x)
        h = self.bottleneck(skips[-1])
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            h = torch.cat([block(h), skip], dim=1)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class Discriminator(nn.Module):
    """PatchGAN critic on the channel concatenation of an image and a segmentation."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.in_channels, cfg.base_filters, cfg.depth,
                               cfg.kernel_size, cfg.leaky_slope)
        self.head = same_conv(self.encoder.out_channels[-1], 1, cfg.kernel_size)
        he_init(self)

    def forward(self, image: torch.Tensor, segmentation: torch.Tensor) -> torch.Tensor:
        if image.shape[2:] != segmentation.shape[2:]:
            raise ValueError(
                f"shape mismatch: image {tuple(image.shape[2:])} vs "
                f"segmentation {tuple(segmentation.shape[2:])}"
            )
        _check_divisible(image.shape[2:], self.cfg.depth)
        x = torch.cat([image, segmentation], dim=1)
        return self.head(self.encoder(x)[-1])


def build_generator(cfg: GeneratorConfig | None = None) -> Generator:
    return Generator(cfg or GeneratorConfig())


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> Discriminator:
    return Discriminator(cfg or DiscriminatorConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def meta_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def save_checkpoint(path: str | Path, model: nn.Module, kind: str, config: dict,
                    seed: int | None = None, epoch: int | None = None, **extra) -> None:
    """Write ``state_dict`` plus a ``key = value`` sidecar describing how to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"kind": kind, "config": json.dumps(config, sort_keys=True), "seed": seed,
            "epoch": epoch, "git_revision": git_revision(), **extra}
    meta_path(path).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def read_meta(path: str | Path) -> dict[str, str]:
    mp = meta_path(path)
    if not mp.exists():
        raise FileNotFoundError(f"missing checkpoint metadata: {mp}")
    meta = {}
    for line in mp.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def load_checkpoint(path: str | Path, device: str | torch.device = "cpu") -> nn.Module:
    """Rebuild a generator, discriminator or ensembler from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    meta = read_meta(path)
    config = json.loads(meta["config"])
    kind = meta["kind"]
    if kind == "generator":
        model = Generator(GeneratorConfig(**config))
    elif kind == "discriminator":
        model = Discriminator(DiscriminatorConfig(**config))
    elif kind == "ensembler":
        from .ensemble import Ensembler, EnsemblerConfig

        model = Ensembler(EnsemblerConfig(**config))
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(torch.load(path, map_location=device, weights_only=True))
    return model.to(device)


def config_dict(cfg) -> dict:
    return asdict(cfg)
