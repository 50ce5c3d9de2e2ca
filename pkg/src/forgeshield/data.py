"""Dataset plumbing: synthetic forgery generation, manifest serialization,
adversarial-variant construction, and lossless 8-bit raster I/O.

Layout under a dataset root:

    root/manifest.jsonl        header line + one record per line
    root/images/<id>.png       original forged images (8-bit RGB)
    root/masks/<id>.png        ground-truth masks (8-bit gray, 0 or 255)
    root/adv/<tag>/<id>.png    adversarial variants, quantized to 8 bits
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor

from .attacks import AttackSpec, run_attack
from .errors import ConfigurationError, MissingArtifactError
from .util import TOOLKIT_VERSION, derive_seed, sha256_file

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"


# --------------------------------------------------------------------------
# raster I/O


def save_image(t: Tensor, path) -> None:
    """Quantize a canonical (3, H, W) image to 8 bits and write a PNG."""
    arr = (t.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def save_mask(m: Tensor, path) -> None:
    arr = (m.numpy().astype(np.uint8)) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def _read_raster(path) -> np.ndarray:
    try:
        with PILImage.open(path) as img:
            img.load()
            return np.asarray(img)
    except FileNotFoundError:
        raise MissingArtifactError(path, "raster file")
    except Exception as exc:
        raise OSError(f"cannot decode raster {path}: {exc}") from exc


def _raster_peak(arr: np.ndarray) -> float:
    # 16-bit rasters may arrive as uint16 or as Pillow's int32 "I" mode
    return 65535.0 if arr.dtype in (np.uint16, np.int32) else 255.0


def load_image(path) -> Tensor:
    """Read an 8- or 16-bit raster into a canonical (3, H, W) float tensor."""
    arr = _read_raster(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    t = torch.from_numpy(arr.astype(np.float32) / _raster_peak(arr))
    return t.permute(2, 0, 1).contiguous()


def load_mask(path) -> Tensor:
    """Read a mask raster, binarizing at mid-level into {0, 1} int64."""
    arr = _read_raster(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return torch.from_numpy((arr > _raster_peak(arr) / 2).astype(np.int64))


# --------------------------------------------------------------------------
# manifest


@dataclass
class SampleRecord:
    id: str
    image: str  # path relative to the dataset root
    mask: str
    split: str  # "train" or "test"
    variants: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "mask": self.mask,
            "split": self.split,
            "variants": self.variants,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_dict(d: dict) -> "SampleRecord":
        return SampleRecord(
            id=d["id"],
            image=d["image"],
            mask=d["mask"],
            split=d["split"],
            variants=dict(d.get("variants", {})),
            provenance=dict(d.get("provenance", {})),
        )


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    records: list[SampleRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def save(self) -> Path:
        path = self.path()
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "meta": self.meta}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @staticmethod
    def load(root_or_path) -> "DatasetManifest":
        path = Path(root_or_path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise MissingArtifactError(path, "dataset manifest")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise OSError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported manifest schema {header.get('schema_version')} in {path}"
            )
        records = [SampleRecord.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]
        return DatasetManifest(
            root=path.parent, seed=header["seed"], records=records, meta=header.get("meta", {})
        )

    def validate(self) -> None:
        """Referential integrity: every referenced file exists and decodes to
        the expected spatial size."""
        for rec in self.records:
            img = load_image(self.root / rec.image)
            msk = load_mask(self.root / rec.mask)
            if img.shape[1:] != msk.shape:
                raise ConfigurationError(
                    f"record {rec.id}: mask size {tuple(msk.shape)} "
                    f"!= image size {tuple(img.shape[1:])}"
                )
            for tag, rel in rec.variants.items():
                var = load_image(self.root / rel)
                if var.shape != img.shape:
                    raise ConfigurationError(
                        f"record {rec.id} variant {tag}: size mismatch"
                    )

    def content_hash(self) -> str:
        return sha256_file(self.path())


# --------------------------------------------------------------------------
# synthetic forgery generation


@dataclass(frozen=True)
class SyntheticForgeryConfig:
    """Procedural splicing settings: canvas geometry, patch statistics, and
    the donor-texture pool size. Patches are hard-pasted so the ground-truth
    mask is exactly the pasted support.

    ``patch_contrast`` draws a per-patch mixing weight for donor content
    against the underlying base; lower values make forgeries subtler, keeping
    the localization task learnable but not trivially margin-saturated.
    """

    height: int = 256
    width: int = 256
    patch_count: tuple[int, int] = (1, 3)
    patch_fraction: tuple[float, float] = (0.12, 0.35)
    patch_contrast: tuple[float, float] = (0.4, 0.7)
    source_pool: int = 8
    blend: str = "hard_paste"
    test_fraction: float = 1.0 / 6.0

    def __post_init__(self):
        lo, hi = self.patch_fraction
        if not (0.0 < lo <= hi <= 0.5):
            raise ValueError("patch fractions must lie in (0, 0.5]")
        if self.patch_count[0] < 1 or self.patch_count[1] < self.patch_count[0]:
            raise ValueError("patch counts must be >= 1 and ordered")
        if not (0.0 < self.patch_contrast[0] <= self.patch_contrast[1] <= 1.0):
            raise ValueError("patch contrast must lie in (0, 1]")
        if self.blend != "hard_paste":
            raise ValueError(f"unsupported blend mode: {self.blend}")
        if min(self.height, self.width) < 16:
            raise ValueError("canvas sides must be >= 16")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "patch_count": list(self.patch_count),
            "patch_fraction": list(self.patch_fraction),
            "patch_contrast": list(self.patch_contrast),
            "source_pool": self.source_pool,
            "blend": self.blend,
            "test_fraction": self.test_fraction,
        }


def _smooth_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Value-noise texture: a coarse random grid upsampled bilinearly."""
    cells = int(rng.integers(3, 9))
    grid = rng.random((3, cells, cells)).astype(np.float32)
    t = torch.from_numpy(grid).unsqueeze(0)
    up = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    lo, hi = rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)
    arr = up.squeeze(0).numpy()
    return lo + (hi - lo) * arr


def _gradient(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    proj = np.cos(theta) * xs / max(w - 1, 1) + np.sin(theta) * ys / max(h - 1, 1)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-6)
    c0 = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    c1 = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    return c0[:, None, None] + proj[None] * (c1 - c0)[:, None, None]


def _checker(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cell = int(rng.integers(4, max(5, min(h, w) // 4)))
    ys, xs = np.mgrid[0:h, 0:w]
    board = ((ys // cell + xs // cell) % 2).astype(np.float32)
    c0 = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    c1 = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
    return c0[:, None, None] * (1 - board)[None] + c1[:, None, None] * board[None]


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.integers(0, 3)
    if kind == 0:
        base = _smooth_noise(rng, h, w)
    elif kind == 1:
        base = _gradient(rng, h, w)
    else:
        base = _checker(rng, h, w)
    grain = rng.normal(0.0, 0.015, size=(3, h, w)).astype(np.float32)
    return np.clip(base + grain, 0.0, 1.0)


def _patch_support(rng: np.random.Generator, h: int, w: int, frac_lo: float, frac_hi: float):
    """Random rectangle or ellipse support mask plus its bounding placement."""
    ph = int(rng.uniform(frac_lo, frac_hi) * h)
    pw = int(rng.uniform(frac_lo, frac_hi) * w)
    ph, pw = max(ph, 2), max(pw, 2)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    if rng.integers(0, 2) == 0:
        support = np.ones((ph, pw), dtype=bool)
    else:
        ys, xs = np.mgrid[0:ph, 0:pw].astype(np.float32)
        cy, cx = (ph - 1) / 2.0, (pw - 1) / 2.0
        support = ((ys - cy) / (ph / 2.0)) ** 2 + ((xs - cx) / (pw / 2.0)) ** 2 <= 1.0
    return support, top, left


def _synthesize_parts(
    config: SyntheticForgeryConfig, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    base = _texture(rng, h, w)
    donors = [_texture(rng, h, w) for _ in range(config.source_pool)]
    image = base.copy()
    mask = np.zeros((h, w), dtype=bool)
    count = int(rng.integers(config.patch_count[0], config.patch_count[1] + 1))
    frac_lo, frac_hi = config.patch_fraction
    c_lo, c_hi = config.patch_contrast
    for _ in range(count):
        donor = donors[int(rng.integers(0, len(donors)))]
        contrast = np.float32(rng.uniform(c_lo, c_hi))
        support, top, left = _patch_support(rng, h, w, frac_lo, frac_hi)
        ph, pw = support.shape
        region = image[:, top : top + ph, left : left + pw]
        donor_region = donor[:, top : top + ph, left : left + pw]
        base_region = base[:, top : top + ph, left : left + pw]
        pasted = (1.0 - contrast) * base_region + contrast * donor_region
        region[:, support] = pasted[:, support]
        mask[top : top + ph, left : left + pw] |= support
    return image, mask, base


def synthesize_sample(config: SyntheticForgeryConfig, seed: int) -> tuple[Tensor, Tensor]:
    """Build one forged image and its exact ground-truth mask."""
    image, mask, _base = _synthesize_parts(config, seed)
    return torch.from_numpy(image), torch.from_numpy(mask.astype(np.int64))


def generate_synthetic(
    config: SyntheticForgeryConfig, seed: int, count: int, root
) -> DatasetManifest:
    """Write ``count`` synthetic forged samples plus masks under ``root`` and
    return the saved manifest. Deterministic for a fixed seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    n_test = int(round(count * config.test_fraction))
    records = []
    for i in range(count):
        sample_id = f"s{i:05d}"
        image, mask = synthesize_sample(config, derive_seed(seed, "synth", i))
        img_rel = f"images/{sample_id}.png"
        msk_rel = f"masks/{sample_id}.png"
        save_image(image, root / img_rel)
        save_mask(mask, root / msk_rel)
        split = "test" if i >= count - n_test else "train"
        records.append(SampleRecord(id=sample_id, image=img_rel, mask=msk_rel, split=split))
    manifest = DatasetManifest(
        root=root, seed=seed, records=records, meta={"synthetic": config.to_dict()}
    )
    manifest.save()
    return manifest


# --------------------------------------------------------------------------
# adversarial variants


@dataclass
class AdversarialBuildSummary:
    tag: str
    built: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def build_adversarial_set(
    manifest: DatasetManifest,
    victim,
    spec: AttackSpec,
    splits: tuple[str, ...] = ("train", "test"),
    float_sidecar: bool = False,
    trace_dir=None,
) -> tuple[DatasetManifest, AdversarialBuildSummary]:
    """Attack every record in the chosen splits and store quantized variants.

    Each record's RNG seed derives from (manifest seed, record id, tag), so
    rebuilding yields identical files. A failing record is flagged in the
    summary and the build continues.
    """
    tag = spec.tag()
    summary = AdversarialBuildSummary(tag=tag)
    records = []
    for rec in manifest.records:
        if rec.split not in splits:
            records.append(rec)
            continue
        image = load_image(manifest.root / rec.image)
        mask = load_mask(manifest.root / rec.mask)
        rec_seed = derive_seed(manifest.seed, rec.id, tag)
        try:
            result = run_attack(victim, image, mask, spec, seed=rec_seed)
        except Exception as exc:  # noqa: BLE001 - per-record isolation is the contract
            summary.failures.append(f"{rec.id}: {exc}")
            records.append(rec)
            continue
        rel = f"adv/{tag}/{rec.id}.png"
        save_image(result.adversarial, manifest.root / rel)
        if float_sidecar:
            np.save(manifest.root / (rel + ".npy"), result.adversarial.numpy())
        if trace_dir is not None:
            result.write_trace_csv(Path(trace_dir) / f"{rec.id}.csv")
        stored = load_image(manifest.root / rel)
        linf_post = (stored - image).abs().max().item()
        variants = dict(rec.variants)
        variants[tag] = rel
        provenance = dict(rec.provenance)
        provenance[tag] = {
            "spec_hash": spec.spec_hash(),
            "toolkit_version": TOOLKIT_VERSION,
            "linf_pre": result.linf,
            "linf_post": linf_post,
        }
        records.append(replace(rec, variants=variants, provenance=provenance))
        summary.built += 1
    updated = DatasetManifest(
        root=manifest.root, seed=manifest.seed, records=records, meta=manifest.meta
    )
    updated.save()
    return updated, summary


# --------------------------------------------------------------------------
# tensor loading for training and evaluation


def load_split_tensors(manifest: DatasetManifest, split: str) -> tuple[Tensor, Tensor]:
    """Stack a split's images and masks into (N, 3, H, W) and (N, H, W)."""
    recs = manifest.split(split)
    if not recs:
        return torch.zeros((0, 3, 1, 1)), torch.zeros((0, 1, 1), dtype=torch.int64)
    images = torch.stack([load_image(manifest.root / r.image) for r in recs])
    masks = torch.stack([load_mask(manifest.root / r.mask) for r in recs])
    return images, masks


def load_pair_tensors(
    manifest: DatasetManifest, split: str, tag: str
) -> tuple[Tensor, Tensor, Tensor]:
    """Stack (original, adversarial, mask) triples for records carrying the
    requested variant tag."""
    recs = [r for r in manifest.split(split) if tag in r.variants]
    if not recs:
        raise MissingArtifactError(
            manifest.root / "adv" / tag, f"adversarial variants '{tag}' for split '{split}'"
        )
    originals = torch.stack([load_image(manifest.root / r.image) for r in recs])
    adversarials = torch.stack([load_image(manifest.root / r.variants[tag]) for r in recs])
    masks = torch.stack([load_mask(manifest.root / r.mask) for r in recs])
    return originals, adversarials, masks
