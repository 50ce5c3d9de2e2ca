"""Adversarial noise suppression module (ANSM): a trainable encoder-decoder
generator whose two parallel heads produce a bounded defensive perturbation.

One head passes through SoftSign, giving a signed direction in (-1, 1); the
other through Sigmoid, giving a magnitude gate in (0, 1). Their elementwise
product is the perturbation added to the input image before localization, so
the defended image is TRUNC(X + S(X)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .types import trunc, validate_image
from .util import derive_seed, seed_everything

ENCODER_STAGES = 5
UPSAMPLING_BLOCKS = 5
FUSION_BLOCKS = 4
TOTAL_STRIDE = 2**ENCODER_STAGES  # input sides are padded to a multiple of 32


class HeadCombination(Enum):
    PRODUCT = "product"


@dataclass(frozen=True)
class GeneratorConfig:
    """Width settings for the suppression generator.

    ``encoder_widths`` gives the channel count of each of the five
    downsampling stages; ``head_width`` the channel count feeding the two
    output heads. The decoder always has five upsampling blocks interleaved
    with four fusion blocks.
    """

    encoder_widths: tuple[int, int, int, int, int] = (16, 24, 40, 80, 112)
    head_width: int = 16
    combination: HeadCombination = HeadCombination.PRODUCT

    def __post_init__(self):
        if len(self.encoder_widths) != ENCODER_STAGES:
            raise ConfigurationError(
                f"encoder needs {ENCODER_STAGES} stage widths, got {len(self.encoder_widths)}"
            )

    def to_dict(self) -> dict:
        return {
            "encoder_widths": list(self.encoder_widths),
            "head_width": self.head_width,
            "combination": self.combination.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        return GeneratorConfig(
            encoder_widths=tuple(d["encoder_widths"]),
            head_width=d.get("head_width", 16),
            combination=HeadCombination(d.get("combination", "product")),
        )


@dataclass
class DefensivePerturbation:
    """The generator's two head outputs and their combination for one image."""

    direction: Tensor  # SoftSign head, values in (-1, 1)
    gate: Tensor  # Sigmoid head, values in (0, 1)
    combined: Tensor


class _DownStage(nn.Module):
    """Stride-2 conv + BN + ReLU followed by a 3x3 conv + BN + ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _UpsamplingBlock(nn.Module):
    """Nearest x2 upsample, 3x3 conv, BN, ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.bn(self.conv(x)), inplace=True)


class _FusionBlock(nn.Module):
    """Concat the skip, then two 3x3 convs with BN between and ReLU after."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x, skip):
        x = torch.cat([x, skip], dim=1)
        return F.relu(self.conv2(self.bn(self.conv1(x))), inplace=True)


class _Head(nn.Module):
    """3x3 conv, BN, ReLU, 3x3 conv; the last conv starts at zero so the
    untrained generator is an identity defense."""

    def __init__(self, cin):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 3, padding=1)
        self.bn = nn.BatchNorm2d(cin)
        self.conv2 = nn.Conv2d(cin, 3, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(F.relu(self.bn(self.conv1(x)), inplace=True))


class NoiseSuppressor(nn.Module):
    """Multi-scale encoder with five stages; U-Net style decoder with five
    upsampling blocks interleaved with four skip-fusion blocks; two parallel
    bounded output heads."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3, c4, c5 = config.encoder_widths
        self.stage1 = _DownStage(3, c1)
        self.stage2 = _DownStage(c1, c2)
        self.stage3 = _DownStage(c2, c3)
        self.stage4 = _DownStage(c3, c4)
        self.stage5 = _DownStage(c4, c5)
        self.up1 = _UpsamplingBlock(c5, c4)
        self.fuse1 = _FusionBlock(c4 + c4, c4)
        self.up2 = _UpsamplingBlock(c4, c3)
        self.fuse2 = _FusionBlock(c3 + c3, c3)
        self.up3 = _UpsamplingBlock(c3, c2)
        self.fuse3 = _FusionBlock(c2 + c2, c2)
        self.up4 = _UpsamplingBlock(c2, c1)
        self.fuse4 = _FusionBlock(c1 + c1, c1)
        self.up5 = _UpsamplingBlock(c1, config.head_width)
        self.direction_head = _Head(config.head_width)
        self.gate_head = _Head(config.head_width)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Map a (B, 3, H, W) batch to (direction, gate) head outputs of the
        same spatial size. Sides not divisible by 32 are reflect-padded and
        the outputs cropped back."""
        h, w = x.shape[-2:]
        pad_h = (-h) % TOTAL_STRIDE
        pad_w = (-w) % TOTAL_STRIDE
        if pad_h or pad_w:
            top, left = pad_h // 2, pad_w // 2
            x = F.pad(x, (left, pad_w - left, top, pad_h - top), mode="reflect")
        e1 = self.stage1(x)
        e2 = self.stage2(e1)
        e3 = self.stage3(e2)
        e4 = self.stage4(e3)
        e5 = self.stage5(e4)
        d = self.fuse1(self.up1(e5), e4)
        d = self.fuse2(self.up2(d), e3)
        d = self.fuse3(self.up3(d), e2)
        d = self.fuse4(self.up4(d), e1)
        d = self.up5(d)
        direction = F.softsign(self.direction_head(d))
        gate = torch.sigmoid(self.gate_head(d))
        if pad_h or pad_w:
            direction = direction[..., top : top + h, left : left + w]
            gate = gate[..., top : top + h, left : left + w]
        return direction, gate

    def perturbation(self, x: Tensor) -> Tensor:
        """Combined defensive perturbation for a batch, on the autograd path."""
        direction, gate = self(x)
        if self.config.combination is HeadCombination.PRODUCT:
            return direction * gate
        raise ConfigurationError(f"unsupported head combination: {self.config.combination}")

    def defend(self, x: Tensor) -> Tensor:
        """Defended batch: TRUNC(x + S(x))."""
        return trunc(x + self.perturbation(x))


def build_generator(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> NoiseSuppressor:
    """Construct a suppression generator with reproducible initialization."""
    seed_everything(derive_seed(seed, "generator-init"))
    return NoiseSuppressor(config)


def generate_perturbation(gen: NoiseSuppressor, image: Tensor) -> DefensivePerturbation:
    """Produce the defensive perturbation for one canonical image."""
    validate_image(image)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            direction, gate = gen(image.unsqueeze(0))
    finally:
        gen.train(was_training)
    direction = direction.squeeze(0)
    gate = gate.squeeze(0)
    if gen.config.combination is HeadCombination.PRODUCT:
        combined = direction * gate
    else:
        raise ConfigurationError(f"unsupported head combination: {gen.config.combination}")
    return DefensivePerturbation(direction=direction, gate=gate, combined=combined)


def apply_defense(gen: NoiseSuppressor, image: Tensor) -> Tensor:
    """Defend one canonical image: TRUNC(image + S(image))."""
    pert = generate_perturbation(gen, image)
    return trunc(image + pert.combined)


CHECKPOINT_FORMAT = 1


def save_generator(gen: NoiseSuppressor, path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": gen.config.to_dict(),
        "state_dict": gen.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_generator(path) -> NoiseSuppressor:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    gen = NoiseSuppressor(GeneratorConfig.from_dict(payload["config"]))
    gen.load_state_dict(payload["state_dict"])
    gen.eval()
    return gen
