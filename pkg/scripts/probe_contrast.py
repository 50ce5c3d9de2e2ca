"""Probe: forgery contrast vs victim accuracy vs FGSM efficacy."""

import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
torch.set_num_threads(1)

import forgeshield as fs
from forgeshield.attacks import Algorithm, AttackSpec, fgsm, pgd
from forgeshield.victim import binarize, predict
from forgeshield.evaluation import pixel_f1
from forgeshield.data import load_split_tensors

SEED = 7

for contrast in [(0.25, 0.5), (0.35, 0.65), (0.5, 0.8)]:
    for widths in [(12, 24, 48, 96)]:
        t0 = time.time()
        root = Path(f"/tmp/probe_c{int(contrast[0]*100)}_{widths[0]}")
        cfg = fs.SyntheticForgeryConfig(height=64, width=64, patch_contrast=contrast)
        manifest = fs.generate_synthetic(cfg, SEED, 300, root) if not (root / "manifest.jsonl").exists() else fs.DatasetManifest.load(root)
        res = fs.train_victim(
            fs.VictimTrainConfig(epochs=18, seed=SEED, arch=fs.VictimConfig(widths=widths)),
            manifest,
        )
        victim = res.model
        test_images, test_masks = load_split_tensors(manifest, "test")
        f1_fgsm, f1_pgd = [], []
        for i in range(min(30, test_images.shape[0])):
            x, m = test_images[i], test_masks[i]
            adv = fgsm(victim, x, m, 3 / 255).adversarial
            f1_fgsm.append(pixel_f1(binarize(predict(victim, adv), 0.5), m))
            advp = pgd(victim, x, m, 3 / 255, 10, 3 / 255 / 10 * 1.25, 3 / 255, seed=i).adversarial
            f1_pgd.append(pixel_f1(binarize(predict(victim, advp), 0.5), m))
        mf = sum(f1_fgsm) / len(f1_fgsm)
        mp = sum(f1_pgd) / len(f1_pgd)
        print(
            f"contrast={contrast} widths={widths}: clean F1={res.heldout_f1:.3f} "
            f"fgsm F1={mf:.3f} (RP {100*mf/res.heldout_f1:.0f}%) "
            f"pgd F1={mp:.3f} (RP {100*mp/res.heldout_f1:.0f}%)  [{time.time()-t0:.0f}s]",
            flush=True,
        )
