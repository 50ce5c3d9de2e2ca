"""Forgery-localization victims: model abstraction, a small trainable U-Net
victim, thresholding, frozen feature extraction, and depth-based tap selection.

All models take canonical (0, 1) images; a model with a different native
pixel range converts at its own boundary (see ExternalModelAdapter).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
from torch import Tensor, nn

from .errors import ConfigurationError
from .losses import mask_loss
from .types import CANONICAL_RANGE, ValueRange, validate_image
from .util import derive_seed, seed_everything

DEFAULT_THRESHOLD = 0.5


class DepthCategory(Enum):
    SHALLOW = "shallow"
    MIDDLE = "middle"
    TOPMOST = "topmost"


class LocalizationModel(nn.Module):
    """Base class: differentiable map from a (B, 3, H, W) image batch to a
    (B, H, W) forgery-probability batch, with named feature taps.

    Subclasses populate ``tap_ids`` (shallow-to-deep order) and implement
    ``tap_modules`` returning the submodule whose output is each tap.
    """

    expected_range: ValueRange = CANONICAL_RANGE
    tap_ids: tuple[str, ...] = ()

    def tap_modules(self) -> dict[str, nn.Module]:
        raise NotImplementedError

    def freeze(self) -> "LocalizationModel":
        """Put the model in inference mode with immutable parameters."""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class ConvBlock(nn.Module):
    """Two 3x3 conv + batch-norm + ReLU layers."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UpBlock(nn.Module):
    """Nearest x2 upsample, concat skip, then a ConvBlock."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 3, padding=1)
        self.block = ConvBlock(cout + cskip, cout)

    def forward(self, x, skip):
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.reduce(x)
        return self.block(torch.cat([x, skip], dim=1))


@dataclass(frozen=True)
class VictimConfig:
    """Architecture settings for the built-in U-Net victim."""

    widths: tuple[int, int, int, int] = (16, 32, 64, 128)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths)}

    @staticmethod
    def from_dict(d: dict) -> "VictimConfig":
        return VictimConfig(widths=tuple(d["widths"]))


class UNetVictim(LocalizationModel):
    """4-level encoder-decoder forgery localizer with skip connections.

    Declares seven feature taps, one after each encoder and decoder stage,
    indexed shallow to deep in forward order. Input sides must be divisible
    by 8 (three pooling stages).
    """

    STRIDE = 8

    def __init__(self, config: VictimConfig = VictimConfig()):
        super().__init__()
        w0, w1, w2, w3 = config.widths
        self.config = config
        self.enc1 = ConvBlock(3, w0)
        self.enc2 = nn.Sequential(nn.MaxPool2d(2), ConvBlock(w0, w1))
        self.enc3 = nn.Sequential(nn.MaxPool2d(2), ConvBlock(w1, w2))
        self.enc4 = nn.Sequential(nn.MaxPool2d(2), ConvBlock(w2, w3))
        self.dec3 = UpBlock(w3, w2, w2)
        self.dec2 = UpBlock(w2, w1, w1)
        self.dec1 = UpBlock(w1, w0, w0)
        self.head = nn.Conv2d(w0, 1, 1)
        self.tap_ids = ("enc1", "enc2", "enc3", "enc4", "dec3", "dec2", "dec1")

    def tap_modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in self.tap_ids}

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.STRIDE or x.shape[-2] % self.STRIDE:
            raise ConfigurationError(
                f"input sides must be divisible by {self.STRIDE}, got {tuple(x.shape[-2:])}"
            )
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(e4, e3)
        d2 = self.dec2(d3, e2)
        d1 = self.dec1(d2, e1)
        return torch.sigmoid(self.head(d1)).squeeze(1)


class ExternalModelAdapter(LocalizationModel):
    """Wraps a third-party localization network so the toolkit can drive it.

    ``module`` maps a batch in its native pixel range to per-pixel forgery
    probabilities (B, H, W) or (B, 1, H, W); ``taps`` maps tap ids to
    attribute paths inside the module, shallow to deep.
    """

    def __init__(
        self,
        module: nn.Module,
        taps: dict[str, str],
        native_range: ValueRange = CANONICAL_RANGE,
    ):
        super().__init__()
        self.module = module
        self.expected_range = native_range
        self.tap_ids = tuple(taps)
        self._tap_paths = dict(taps)

    def tap_modules(self) -> dict[str, nn.Module]:
        out = {}
        for name, path in self._tap_paths.items():
            mod = self.module
            for part in path.split("."):
                mod = getattr(mod, part)
            out[name] = mod
        return out

    def forward(self, x: Tensor) -> Tensor:
        native = self.expected_range.from_unit(x)
        p = self.module(native)
        if p.dim() == 4 and p.shape[1] == 1:
            p = p.squeeze(1)
        return p


def build_victim(config: VictimConfig = VictimConfig(), seed: int = 0) -> UNetVictim:
    """Construct a U-Net victim with reproducible initialization."""
    seed_everything(derive_seed(seed, "victim-init"))
    return UNetVictim(config)


def predict(model: LocalizationModel, image: Tensor) -> Tensor:
    """Run the model on one canonical (3, H, W) image, returning the (H, W)
    forgery-probability map. Pure for frozen parameters."""
    validate_image(image)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            p = model(image.unsqueeze(0)).squeeze(0)
    finally:
        model.train(was_training)
    return p


def binarize(pmap: Tensor, threshold: float = DEFAULT_THRESHOLD) -> Tensor:
    """Threshold a probability map into a {0, 1} mask; strictly greater wins."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    return (pmap > threshold).to(torch.int64)


# hook registration mutates module state, so captures are serialized; plain
# inference stays lock-free and safe for concurrent callers
_capture_lock = threading.Lock()


@contextmanager
def _tap_capture(model: LocalizationModel, taps: list[str]):
    """Register forward hooks that record each requested tap's output."""
    available = model.tap_modules()
    unknown = [t for t in taps if t not in available]
    if unknown:
        raise ConfigurationError(f"unknown feature taps: {unknown}; model declares {list(model.tap_ids)}")
    captured: dict[str, Tensor] = {}
    handles = []

    def make_hook(name):
        def hook(_module, _inputs, output):
            captured[name] = output

        return hook

    with _capture_lock:
        for name in taps:
            handles.append(available[name].register_forward_hook(make_hook(name)))
        try:
            yield captured
        finally:
            for h in handles:
                h.remove()


def tap_features_batch(model: LocalizationModel, batch: Tensor, taps: list[str]) -> list[Tensor]:
    """Forward a (B, 3, H, W) batch and return the tapped feature tensors in
    request order. Gradients flow through the features when enabled, so this
    is usable inside training losses."""
    if not taps:
        raise ConfigurationError("at least one tap must be requested")
    with _tap_capture(model, taps) as captured:
        model(batch)
    return [captured[name] for name in taps]


def extract_features(model: LocalizationModel, image: Tensor, taps: list[str]) -> list[Tensor]:
    """Extract multi-layer features from one image on a frozen model.

    Returns one (c_i, h_i, w_i) tensor per requested tap, in request order,
    detached from any graph. Deterministic for fixed image and parameters.
    """
    validate_image(image)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = tap_features_batch(model, image.unsqueeze(0), list(taps))
    finally:
        model.train(was_training)
    return [f.squeeze(0).detach() for f in feats]


def select_layers(model: LocalizationModel, category: DepthCategory) -> list[str]:
    """Partition the model's taps into depth thirds and return one category.

    With L taps: shallow covers indices [0, ceil(L/3)), middle
    [ceil(L/3), ceil(2L/3)), topmost [ceil(2L/3), L). The three categories
    are disjoint and jointly cover every tap.
    """
    ids = list(model.tap_ids)
    L = len(ids)
    if L < 3:
        raise ConfigurationError(f"layer selection needs at least 3 taps, model has {L}")
    a = math.ceil(L / 3)
    b = math.ceil(2 * L / 3)
    bounds = {
        DepthCategory.SHALLOW: (0, a),
        DepthCategory.MIDDLE: (a, b),
        DepthCategory.TOPMOST: (b, L),
    }
    lo, hi = bounds[category]
    return ids[lo:hi]


@dataclass
class VictimTrainConfig:
    """Settings for fitting the built-in victim on a synthetic dataset.

    ``label_smoothing`` softens the 0/1 targets toward [eps, 1-eps]; it keeps
    the victim's probability maps away from hard saturation, which matches
    how full-scale localization models behave.
    """

    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    lambda_bce: float = 0.3
    label_smoothing: float = 0.05
    threshold: float = DEFAULT_THRESHOLD
    arch: VictimConfig = field(default_factory=VictimConfig)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lambda_bce": self.lambda_bce,
            "label_smoothing": self.label_smoothing,
            "threshold": self.threshold,
            "arch": self.arch.to_dict(),
        }


@dataclass
class VictimTrainResult:
    model: UNetVictim
    heldout_f1: float
    loss_history: list[float]


def train_victim(config: VictimTrainConfig, manifest) -> VictimTrainResult:
    """Fit the U-Net victim on a manifest's train split and report held-out F1.

    Training is seeded and reproducible: the same config and manifest yield
    bitwise-identical parameters.
    """
    from .data import load_split_tensors  # local import to avoid a module cycle
    from .evaluation import pixel_f1

    images, masks = load_split_tensors(manifest, "train")
    if images.shape[0] == 0:
        raise ValueError("training split is empty")

    model = build_victim(config.arch, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "victim-train"))
    n = images.shape[0]
    history: list[float] = []

    eps = config.label_smoothing
    model.train()
    for _epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            p = model(images[idx])
            target = masks[idx].float()
            if eps > 0:
                target = target * (1.0 - 2.0 * eps) + eps
            loss = mask_loss(p, target, config.lambda_bce)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        history.append(sum(epoch_losses) / len(epoch_losses))

    model.freeze()
    test_images, test_masks = load_split_tensors(manifest, "test")
    scores = []
    with torch.no_grad():
        for i in range(test_images.shape[0]):
            pred = binarize(model(test_images[i : i + 1]).squeeze(0), config.threshold)
            scores.append(pixel_f1(pred, test_masks[i].to(torch.int64)))
    heldout = float(sum(scores) / len(scores)) if scores else float("nan")
    return VictimTrainResult(model=model, heldout_f1=heldout, loss_history=history)


CHECKPOINT_FORMAT = 1


def save_victim(model: UNetVictim, path) -> None:
    """Serialize the victim with its architecture config, taps, and range."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": "unet_victim",
        "config": model.config.to_dict(),
        "taps": list(model.tap_ids),
        "range": [model.expected_range.lo, model.expected_range.hi],
        "state_dict": model.state_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_victim(path) -> UNetVictim:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("arch") != "unet_victim":
        raise ConfigurationError(f"unsupported victim checkpoint arch: {payload.get('arch')}")
    model = UNetVictim(VictimConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.freeze()
    return model
