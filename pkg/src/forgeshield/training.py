"""Two-stage generator training.

Stage 1 aligns the feature distributions of defended-adversarial images with
those of their original counterparts (channel-softmax + channel-wise KL over
selected victim taps). Stage 2 refines the defensive perturbation so that
both defended-original and defended-adversarial predictions match the
victim's own clean-image mask (BCE + Dice). The victim is frozen throughout;
only generator parameters move.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
from torch import Tensor

from .ansm import NoiseSuppressor
from .losses import KL_STABILIZER, dual_mask_loss, feature_alignment_loss
from .util import derive_seed, seed_everything
from .victim import DepthCategory, LocalizationModel, select_layers, tap_features_batch


class Supervision(Enum):
    PREDICTED_MASK = "predicted"
    GROUND_TRUTH = "ground-truth"


@dataclass
class AlignmentConfig:
    """Stage-1 settings: feature-alignment taps, stabilizer, and optimizer."""

    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 8
    alpha: float = KL_STABILIZER
    taps: list[str] | None = None  # None selects the middle depth third
    crop: int | None = 256
    geometry: str = "crop"  # "crop" or "resize"
    seed: int = 0
    scheduler_factor: float = 0.9
    scheduler_patience: int = 10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.geometry not in ("crop", "resize"):
            raise ValueError(f"unknown geometry policy: {self.geometry}")


@dataclass
class RefinementConfig:
    """Stage-2 settings: dual-mask refinement supervised by the victim's own
    clean-image prediction (or ground truth under the ablation flag)."""

    epochs: int = 10
    lr: float = 1e-5
    batch_size: int = 8
    lambda_bce: float = 0.3
    threshold: float = 0.5
    supervision: Supervision = Supervision.PREDICTED_MASK
    crop: int | None = 256
    geometry: str = "crop"
    seed: int = 0
    scheduler_factor: float = 0.9
    scheduler_patience: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lambda_bce <= 1.0:
            raise ValueError("lambda_bce must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.geometry not in ("crop", "resize"):
            raise ValueError(f"unknown geometry policy: {self.geometry}")
        if isinstance(self.supervision, str):
            self.supervision = Supervision(self.supervision)


@dataclass
class PairDataset:
    """Aligned original/adversarial image tensors plus ground-truth masks."""

    originals: Tensor  # (N, 3, H, W)
    adversarials: Tensor  # (N, 3, H, W)
    masks: Tensor  # (N, H, W) integer {0, 1}

    def __post_init__(self):
        n = self.originals.shape[0]
        if self.adversarials.shape[0] != n or self.masks.shape[0] != n:
            raise ValueError("originals, adversarials, and masks must be aligned")
        if n == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return self.originals.shape[0]


@dataclass
class StageResult:
    stage: int
    epoch_losses: list[float] = field(default_factory=list)
    epoch_lrs: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {"epoch": i + 1, "stage": self.stage, "loss": loss, "lr": lr}
            for i, (loss, lr) in enumerate(zip(self.epoch_losses, self.epoch_lrs))
        ]


def write_metrics_csv(rows: list[dict], path) -> None:
    """Append-free metrics log: one row per epoch with stage, loss, and lr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "stage", "loss", "lr"])
        writer.writeheader()
        writer.writerows(rows)


def _apply_geometry(tensors: list[Tensor], size: int | None, policy: str, gen: torch.Generator):
    """Apply the same crop (or resize) to every tensor in the list.

    Image tensors are (B, 3, H, W); mask tensors (B, H, W) get the identical
    spatial treatment so supervision stays aligned.
    """
    if size is None:
        return tensors
    h, w = tensors[0].shape[-2:]
    if policy == "resize":
        out = []
        for t in tensors:
            squeeze = t.dim() == 3
            x = t.unsqueeze(1).float() if squeeze else t
            x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
            out.append(x.squeeze(1) if squeeze else x)
        return out
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds input size ({h}, {w})")
    if size == h and size == w:
        return tensors
    top = int(torch.randint(0, h - size + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - size + 1, (1,), generator=gen))
    return [t[..., top : top + size, left : left + size] for t in tensors]


def _check_frozen(victim: LocalizationModel):
    if any(p.requires_grad for p in victim.parameters()):
        victim.freeze()
    victim.eval()


def train_stage1(
    gen: NoiseSuppressor,
    victim: LocalizationModel,
    dataset: PairDataset,
    config: AlignmentConfig,
) -> StageResult:
    """Feature-alignment stage: minimize the channel-wise KL between defended
    adversarial features and original features over the selected taps.

    Mutates only the generator; returns the per-epoch loss history.
    """
    _check_frozen(victim)
    taps = config.taps or select_layers(victim, DepthCategory.MIDDLE)
    seed_everything(derive_seed(config.seed, "stage1"))
    rng = torch.Generator().manual_seed(derive_seed(config.seed, "stage1-order"))
    optimizer = torch.optim.AdamW(gen.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=config.scheduler_factor, patience=config.scheduler_patience
    )
    result = StageResult(stage=1)
    n = len(dataset)
    gen.train()
    for _epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x_o, x_a = _apply_geometry(
                [dataset.originals[idx], dataset.adversarials[idx]],
                config.crop, config.geometry, rng,
            )
            defended = gen.defend(x_a)
            with torch.no_grad():
                ref_feats = tap_features_batch(victim, x_o, taps)
            opt_feats = tap_features_batch(victim, defended, taps)
            loss = feature_alignment_loss(opt_feats, ref_feats, config.alpha)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        mean_loss = sum(losses) / len(losses)
        result.epoch_losses.append(mean_loss)
        result.epoch_lrs.append(optimizer.param_groups[0]["lr"])
        scheduler.step(mean_loss)
    gen.eval()
    return result


def train_stage2(
    gen: NoiseSuppressor,
    victim: LocalizationModel,
    dataset: PairDataset,
    config: RefinementConfig,
) -> StageResult:
    """Mask-guided refinement stage: drive the predictions of both defended
    images toward the victim's clean-image mask (or ground truth under the
    ablation flag). Mutates only the generator."""
    _check_frozen(victim)
    seed_everything(derive_seed(config.seed, "stage2"))
    rng = torch.Generator().manual_seed(derive_seed(config.seed, "stage2-order"))
    optimizer = torch.optim.AdamW(gen.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=config.scheduler_factor, patience=config.scheduler_patience
    )
    result = StageResult(stage=2)
    n = len(dataset)
    gen.train()
    for _epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x_o, x_a, m_gt = _apply_geometry(
                [dataset.originals[idx], dataset.adversarials[idx], dataset.masks[idx].float()],
                config.crop, config.geometry, rng,
            )
            if config.supervision is Supervision.GROUND_TRUTH:
                target = (m_gt > 0.5).float()
            else:
                with torch.no_grad():
                    target = (victim(x_o) > config.threshold).float()
            p_po = victim(gen.defend(x_o))
            p_pa = victim(gen.defend(x_a))
            loss = dual_mask_loss(p_po, p_pa, target, config.lambda_bce)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        mean_loss = sum(losses) / len(losses)
        result.epoch_losses.append(mean_loss)
        result.epoch_lrs.append(optimizer.param_groups[0]["lr"])
        scheduler.step(mean_loss)
    gen.eval()
    return result
