"""Evaluation: pixel-level F1, residual performance, conventional-defense
baselines, the with/without-defense report grid, and feature-distribution
shift diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor

from .ansm import NoiseSuppressor, apply_defense
from .attacks import AttackSpec, run_attack
from .data import DatasetManifest, load_image, load_mask
from .errors import ConfigurationError
from .losses import channel_kl, channel_softmax
from .types import trunc, validate_image
from .util import config_hash, derive_seed
from .victim import LocalizationModel, binarize, extract_features, predict


def pixel_f1(pred: Tensor, gt: Tensor) -> float:
    """Pixel-level F1 = 2TP / (2TP + FP + FN).

    Two all-zero masks agree perfectly and score 1.0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pred_b = pred > 0
    gt_b = gt > 0
    tp = (pred_b & gt_b).sum().item()
    fp = (pred_b & ~gt_b).sum().item()
    fn = (~pred_b & gt_b).sum().item()
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def rp(f1_current: float, f1_original: float) -> float:
    """Residual performance: the current F1 as a percentage of the original.

    Undefined when the original F1 is zero; reported as NaN and rendered as
    N/A in tables.
    """
    if f1_original == 0:
        return float("nan")
    return 100.0 * (f1_current / f1_original)


class DefenseKind(Enum):
    JPEG_COMPRESS = "jpeg"
    RESIZE = "resize"
    GAUSSIAN_NOISE = "gaussian-noise"
    MEDIAN_FILTER = "median-filter"


def conventional_defense(
    image: Tensor, kind: DefenseKind, strength, seed: int = 0
) -> Tensor:
    """Classic lossy input transformations used as defense baselines.

    Strength ranges: JPEG quality 10..95, resize factor 0.25..1.0 (restored
    to the original size), Gaussian noise sigma 0..0.1, median kernel odd
    3..9. The output keeps the input's spatial size.
    """
    validate_image(image)
    if kind is DefenseKind.JPEG_COMPRESS:
        quality = int(strength)
        if not 10 <= quality <= 95:
            raise ValueError(f"JPEG quality must be in [10, 95], got {strength}")
        arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
        buf = io.BytesIO()
        PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(
            buf, format="JPEG", quality=quality
        )
        buf.seek(0)
        with PILImage.open(buf) as decoded:
            out = np.asarray(decoded.convert("RGB")).astype(np.float32) / 255.0
        return torch.from_numpy(out).permute(2, 0, 1).contiguous()
    if kind is DefenseKind.RESIZE:
        factor = float(strength)
        if not 0.25 <= factor <= 1.0:
            raise ValueError(f"resize factor must be in [0.25, 1.0], got {strength}")
        h, w = image.shape[1:]
        small = (max(1, round(h * factor)), max(1, round(w * factor)))
        x = image.unsqueeze(0)
        x = torch.nn.functional.interpolate(x, size=small, mode="bilinear", align_corners=False)
        x = torch.nn.functional.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return trunc(x.squeeze(0))
    if kind is DefenseKind.GAUSSIAN_NOISE:
        sigma = float(strength)
        if not 0.0 <= sigma <= 0.1:
            raise ValueError(f"noise sigma must be in [0, 0.1], got {strength}")
        if sigma == 0.0:
            return image.clone()
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(image.shape, generator=gen) * sigma
        return trunc(image + noise)
    if kind is DefenseKind.MEDIAN_FILTER:
        from scipy.ndimage import median_filter

        k = int(strength)
        if k not in (3, 5, 7, 9):
            raise ValueError(f"median kernel must be odd in [3, 9], got {strength}")
        out = median_filter(image.numpy(), size=(1, k, k), mode="reflect")
        return torch.from_numpy(out)
    raise ValueError(f"unknown defense kind: {kind}")


@dataclass
class ReportRow:
    condition: str
    defended: bool
    mean_f1: float
    rp: float


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    sample_count: int
    victim_id: str
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "victim_id": self.victim_id,
            "config_hash": self.config_hash,
            "sample_count": self.sample_count,
            "rows": [
                {
                    "condition": r.condition,
                    "defended": r.defended,
                    "mean_f1": r.mean_f1,
                    "rp": None if math.isnan(r.rp) else r.rp,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_text(self) -> str:
        lines = [
            f"victim={self.victim_id}  samples={self.sample_count}  config={self.config_hash}",
            f"{'condition':<16} {'defense':<8} {'F1':>7} {'RP(%)':>8}",
        ]
        for r in self.rows:
            rp_text = "N/A" if math.isnan(r.rp) else f"{r.rp:.1f}"
            defense = "with" if r.defended else "without"
            lines.append(f"{r.condition:<16} {defense:<8} {r.mean_f1:>7.3f} {rp_text:>8}")
        return "\n".join(lines)

    def lookup(self, condition: str, defended: bool) -> ReportRow:
        for r in self.rows:
            if r.condition == condition and r.defended == defended:
                return r
        raise KeyError(f"no report row for ({condition}, defended={defended})")


def _variant_image(manifest, victim, rec, spec: AttackSpec) -> Tensor:
    tag = spec.tag()
    if tag in rec.variants:
        return load_image(manifest.root / rec.variants[tag])
    if victim is None:
        raise ConfigurationError(
            f"record {rec.id} lacks variant '{tag}' and no victim was supplied to compute it"
        )
    seed = derive_seed(manifest.seed, rec.id, tag)
    mask = load_mask(manifest.root / rec.mask)
    return run_attack(victim, load_image(manifest.root / rec.image), mask, spec, seed=seed).adversarial


def evaluate_suite(
    victim: LocalizationModel,
    generator: NoiseSuppressor | None,
    manifest: DatasetManifest,
    attack_specs: list[AttackSpec],
    threshold: float = 0.5,
    split: str = "test",
    victim_id: str = "victim",
) -> MetricsReport:
    """Mean F1 and residual performance over a split, per condition.

    Conditions are the original images plus one per attack spec; when a
    generator is supplied every condition is additionally evaluated with all
    inputs routed through the defense first. RP is measured against the
    original/undefended row, which is exactly 100.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split '{split}' is empty")

    def mean_f1(images_fn, defended: bool) -> float:
        scores = []
        for rec in records:
            image = images_fn(rec)
            if defended:
                image = apply_defense(generator, image)
            pred = binarize(predict(victim, image), threshold)
            gt = load_mask(manifest.root / rec.mask)
            scores.append(pixel_f1(pred, gt))
        return float(sum(scores) / len(scores))

    conditions: list[tuple[str, object]] = [("Original", lambda rec: load_image(manifest.root / rec.image))]
    for spec in attack_specs:
        conditions.append(
            (spec.tag(), lambda rec, s=spec: _variant_image(manifest, victim, rec, s))
        )

    baseline = mean_f1(conditions[0][1], defended=False)
    rows = []
    for name, images_fn in conditions:
        f1_plain = baseline if name == "Original" else mean_f1(images_fn, defended=False)
        rows.append(
            ReportRow(
                condition=name,
                defended=False,
                mean_f1=f1_plain,
                rp=100.0 if name == "Original" else rp(f1_plain, baseline),
            )
        )
        if generator is not None:
            f1_def = mean_f1(images_fn, defended=True)
            rows.append(ReportRow(name, True, f1_def, rp(f1_def, baseline)))

    payload = {
        "split": split,
        "threshold": threshold,
        "attacks": [s.to_dict() for s in attack_specs],
        "defended": generator is not None,
        "manifest_seed": manifest.seed,
    }
    return MetricsReport(
        rows=rows,
        sample_count=len(records),
        victim_id=victim_id,
        config_hash=config_hash(payload),
    )


@dataclass
class FeatureShiftStats:
    """Per-tap mean channel-wise KL between paired feature stacks."""

    per_tap: dict[str, float]
    pair_count: int
    taps: list[str] = field(default_factory=list)

    @property
    def mean_kl(self) -> float:
        return sum(self.per_tap.values()) / len(self.per_tap)


def feature_shift_stats(
    victim: LocalizationModel,
    taps: list[str],
    pairs: list[tuple[Tensor, Tensor]],
    embedding_csv=None,
) -> FeatureShiftStats:
    """Quantify how far paired images drift apart in feature space.

    For each tap, reports the mean channel-wise KL between the second image's
    channel-normalized features and the first's. When ``embedding_csv`` is
    given, also exports flattened per-image feature vectors projected onto
    their first three principal components for plotting; heavier nonlinear
    reducers can be applied downstream to the same vectors.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 image pairs")
    sums = {t: 0.0 for t in taps}
    vectors = []
    groups = []
    for x_ref, x_cmp in pairs:
        f_ref = extract_features(victim, x_ref, taps)
        f_cmp = extract_features(victim, x_cmp, taps)
        for tap, fr, fc in zip(taps, f_ref, f_cmp):
            sums[tap] += channel_kl(channel_softmax(fc), channel_softmax(fr)).item()
        if embedding_csv is not None:
            vectors.append(torch.cat([f.flatten() for f in f_ref]).numpy())
            groups.append("reference")
            vectors.append(torch.cat([f.flatten() for f in f_cmp]).numpy())
            groups.append("comparison")
    stats = FeatureShiftStats(
        per_tap={t: sums[t] / len(pairs) for t in taps},
        pair_count=len(pairs),
        taps=list(taps),
    )
    if embedding_csv is not None:
        _export_embedding(np.stack(vectors), groups, embedding_csv)
    return stats


def _export_embedding(matrix: np.ndarray, groups: list[str], path) -> None:
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    # economy SVD; rows projected onto the top-3 principal directions
    _u, _s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    proj = centered @ comps.T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "index", "pc1", "pc2", "pc3"])
        for i, (group, row) in enumerate(zip(groups, proj)):
            writer.writerow([group, i // 2, f"{row[0]:.6g}", f"{row[1]:.6g}", f"{row[2]:.6g}"])
