import csv
import json
import math

import pytest
import torch

from forgeshield.ansm import GeneratorConfig, build_generator
from forgeshield.attacks import Algorithm, AttackSpec
from forgeshield.data import SyntheticForgeryConfig, build_adversarial_set, generate_synthetic
from forgeshield.evaluation import (
    DefenseKind,
    conventional_defense,
    evaluate_suite,
    feature_shift_stats,
    pixel_f1,
    rp,
)

CFG32 = SyntheticForgeryConfig(height=32, width=32, test_fraction=0.5, source_pool=3)


# ---------------------------------------------------------------------------
# metrics


def test_f1_perfect_prediction():
    gt = (torch.rand(8, 8) > 0.5).long()
    assert pixel_f1(gt, gt) == 1.0


def test_f1_all_ones_against_half():
    gt = torch.tensor([[1, 1], [0, 0]])
    pred = torch.ones((2, 2), dtype=torch.int64)
    assert pixel_f1(pred, gt) == pytest.approx(2 / 3)


def test_f1_no_true_positives():
    gt = torch.tensor([[1, 0], [0, 0]])
    assert pixel_f1(torch.zeros_like(gt), gt) == 0.0


def test_f1_empty_vs_empty_is_one():
    z = torch.zeros((4, 4), dtype=torch.int64)
    assert pixel_f1(z, z) == 1.0


def test_f1_matches_confusion_matrix_oracle():
    gen = torch.Generator().manual_seed(31)
    for _ in range(25):
        pred = (torch.rand((16, 16), generator=gen) > 0.6).long()
        gt = (torch.rand((16, 16), generator=gen) > 0.6).long()
        tp = fp = fn = 0
        for p, g in zip(pred.flatten().tolist(), gt.flatten().tolist()):
            tp += p == 1 and g == 1
            fp += p == 1 and g == 0
            fn += p == 0 and g == 1
        expected = 1.0 if (tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
        assert pixel_f1(pred, gt) == expected


def test_f1_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_f1(torch.zeros(2, 2, dtype=torch.int64), torch.zeros(3, 3, dtype=torch.int64))


def test_rp_reference_values():
    assert rp(0.225, 0.706) == pytest.approx(31.9, abs=0.1)
    assert rp(0.723, 0.706) == pytest.approx(102.4, abs=0.1)
    assert rp(0.5, 0.5) == 100.0


def test_rp_scale_invariance():
    for a in (0.1, 0.5, 2.0):
        assert rp(a * 0.3, a * 0.6) == pytest.approx(rp(0.3, 0.6), abs=1e-9)


def test_rp_zero_baseline_is_nan():
    assert math.isnan(rp(0.3, 0.0))


# ---------------------------------------------------------------------------
# conventional defenses


def test_gaussian_noise_zero_sigma_is_identity(rand_image):
    x = rand_image(1)
    assert torch.equal(conventional_defense(x, DefenseKind.GAUSSIAN_NOISE, 0.0), x)


def test_gaussian_noise_seeded(rand_image):
    x = rand_image(2)
    a = conventional_defense(x, DefenseKind.GAUSSIAN_NOISE, 0.05, seed=3)
    b = conventional_defense(x, DefenseKind.GAUSSIAN_NOISE, 0.05, seed=3)
    assert torch.equal(a, b)
    assert not torch.equal(a, x)


def test_median_filter_identity_on_constant():
    x = torch.full((3, 16, 16), 0.42)
    out = conventional_defense(x, DefenseKind.MEDIAN_FILTER, 3)
    assert torch.allclose(out, x, atol=1e-7)


def test_resize_round_trip_keeps_size(rand_image):
    x = rand_image(3)
    out = conventional_defense(x, DefenseKind.RESIZE, 0.5)
    assert out.shape == x.shape
    assert not torch.equal(out, x)


def test_jpeg_round_trip(rand_image):
    x = rand_image(4)
    out = conventional_defense(x, DefenseKind.JPEG_COMPRESS, 60)
    assert out.shape == x.shape
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0


@pytest.mark.parametrize(
    "kind,strength",
    [
        (DefenseKind.JPEG_COMPRESS, 5),
        (DefenseKind.JPEG_COMPRESS, 99),
        (DefenseKind.RESIZE, 0.1),
        (DefenseKind.GAUSSIAN_NOISE, 0.5),
        (DefenseKind.MEDIAN_FILTER, 4),
        (DefenseKind.MEDIAN_FILTER, 11),
    ],
)
def test_defense_strength_validation(rand_image, kind, strength):
    with pytest.raises(ValueError):
        conventional_defense(rand_image(5), kind, strength)


# ---------------------------------------------------------------------------
# evaluation suite


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory, tiny_victim):
    root = tmp_path_factory.mktemp("evalset")
    manifest = generate_synthetic(CFG32, seed=41, count=6, root=root)
    spec = AttackSpec(algorithm=Algorithm.FGSM, intensity="3/255")
    manifest, _ = build_adversarial_set(manifest, tiny_victim, spec, splits=("test",))
    return manifest, spec


def test_suite_baseline_only(eval_setup, tiny_victim):
    manifest, _ = eval_setup
    report = evaluate_suite(tiny_victim, None, manifest, [])
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.condition == "Original" and not row.defended
    assert row.rp == 100.0


def test_suite_row_grid_with_generator(eval_setup, tiny_victim):
    manifest, spec = eval_setup
    gen = build_generator(GeneratorConfig(encoder_widths=(4, 6, 8, 10, 12), head_width=4), seed=1)
    report = evaluate_suite(tiny_victim, gen, manifest, [spec])
    assert len(report.rows) == (1 + 1) * 2
    assert report.lookup("Original", False).rp == 100.0
    assert report.lookup(spec.tag(), True).condition == spec.tag()
    assert report.sample_count == len(manifest.split("test"))


def test_suite_deterministic(eval_setup, tiny_victim):
    manifest, spec = eval_setup
    a = evaluate_suite(tiny_victim, None, manifest, [spec])
    b = evaluate_suite(tiny_victim, None, manifest, [spec])
    assert a.to_json() == b.to_json()


def test_suite_computes_missing_variants_on_the_fly(eval_setup, tiny_victim):
    manifest, _ = eval_setup
    other = AttackSpec(algorithm=Algorithm.BIM, intensity="1/255", steps=2)
    report = evaluate_suite(tiny_victim, None, manifest, [other])
    assert len(report.rows) == 2
    assert 0.0 <= report.lookup(other.tag(), False).mean_f1 <= 1.0


def test_suite_empty_split_rejected(tmp_path, tiny_victim):
    cfg = SyntheticForgeryConfig(height=32, width=32, test_fraction=0.0, source_pool=2)
    manifest = generate_synthetic(cfg, seed=1, count=2, root=tmp_path / "d")
    with pytest.raises(ValueError):
        evaluate_suite(tiny_victim, None, manifest, [])


def test_report_render_and_json(eval_setup, tiny_victim):
    manifest, spec = eval_setup
    report = evaluate_suite(tiny_victim, None, manifest, [spec])
    text = report.render_text()
    assert "Original" in text and spec.tag() in text
    payload = json.loads(report.to_json())
    assert payload["sample_count"] == report.sample_count
    assert len(payload["rows"]) == 2


# ---------------------------------------------------------------------------
# feature shift diagnostics


def test_shift_stats_zero_for_identical_pairs(tiny_victim, rand_image):
    pairs = [(rand_image(i), rand_image(i)) for i in range(3)]
    stats = feature_shift_stats(tiny_victim, ["enc2", "enc4"], pairs)
    assert stats.pair_count == 3
    assert all(v == 0.0 for v in stats.per_tap.values())


def test_shift_stats_positive_for_perturbed_pairs(tiny_victim, rand_image):
    pairs = []
    for i in range(3):
        x = rand_image(i)
        y = (x + 0.05 * torch.sign(torch.randn_like(x))).clamp(0, 1)
        pairs.append((x, y))
    stats = feature_shift_stats(tiny_victim, ["enc4"], pairs)
    assert stats.per_tap["enc4"] > 0.0
    assert stats.mean_kl > 0.0


def test_shift_stats_requires_two_pairs(tiny_victim, rand_image):
    with pytest.raises(ValueError):
        feature_shift_stats(tiny_victim, ["enc2"], [(rand_image(0), rand_image(0))])


def test_shift_stats_embedding_export(tiny_victim, rand_image, tmp_path):
    pairs = [(rand_image(i), rand_image(i + 10)) for i in range(4)]
    out = tmp_path / "embed.csv"
    feature_shift_stats(tiny_victim, ["enc3"], pairs, embedding_csv=out)
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["group", "index", "pc1", "pc2", "pc3"]
    assert len(rows) == 1 + 2 * 4
    groups = {row[0] for row in rows[1:]}
    assert groups == {"reference", "comparison"}
