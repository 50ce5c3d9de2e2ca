"""Full-scale probe: 600 samples, 30-epoch victim, all six attacks."""

import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
torch.set_num_threads(1)

import forgeshield as fs
from forgeshield.attacks import (
    Algorithm,
    AttackSpec,
    CwParams,
    PgnParams,
    bim,
    cw,
    fgsm,
    mi_fgsm,
    pgd,
    pgn,
)
from forgeshield.data import load_split_tensors
from forgeshield.evaluation import pixel_f1
from forgeshield.victim import binarize, predict

SEED = 7
PHI = 3 / 255
N_EVAL = 25

t_start = time.time()
for contrast in [(0.5, 0.8), (0.45, 0.75)]:
    root = Path(f"/tmp/full_c{int(contrast[0]*100)}")
    cfg = fs.SyntheticForgeryConfig(height=64, width=64, patch_contrast=contrast)
    if (root / "manifest.jsonl").exists():
        manifest = fs.DatasetManifest.load(root)
    else:
        manifest = fs.generate_synthetic(cfg, SEED, 600, root)
    vict_path = root / "victim.pt"
    if vict_path.exists():
        victim = fs.load_victim(vict_path)
        import json
        clean = json.loads((root / "clean.json").read_text())["f1"]
    else:
        res = fs.train_victim(
            fs.VictimTrainConfig(epochs=30, seed=SEED, arch=fs.VictimConfig(widths=(12, 24, 48, 96))),
            manifest,
        )
        victim = res.model
        fs.save_victim(victim, vict_path)
        clean = res.heldout_f1
        import json
        (root / "clean.json").write_text(json.dumps({"f1": clean}))
    print(f"== contrast {contrast}: clean heldout F1 = {clean:.3f}  [{time.time()-t_start:.0f}s]", flush=True)

    test_images, test_masks = load_split_tensors(manifest, "test")
    step = PHI / 10 * 1.25

    def eval_attack(name, fn):
        scores = []
        for i in range(N_EVAL):
            x, m = test_images[i], test_masks[i]
            adv = fn(x, m, i).adversarial
            scores.append(pixel_f1(binarize(predict(victim, adv), 0.5), m))
        mean = sum(scores) / len(scores)
        print(f"   {name:<14} F1={mean:.3f} RP={100*mean/clean:5.1f}%  [{time.time()-t_start:.0f}s]", flush=True)
        return mean

    eval_attack("fgsm", lambda x, m, i: fgsm(victim, x, m, PHI))
    eval_attack("bim", lambda x, m, i: bim(victim, x, m, PHI, 10, step))
    eval_attack("pgd", lambda x, m, i: pgd(victim, x, m, PHI, 10, step, PHI, seed=i))
    eval_attack("mifgsm", lambda x, m, i: mi_fgsm(victim, x, m, PHI, 10, step, 1.0))
    eval_attack("pgn", lambda x, m, i: pgn(victim, x, m, PHI, 10, step, 1.0, PgnParams(), seed=i))
    for eta in (0.01, 0.05, 0.2):
        eval_attack(f"cw eta={eta}", lambda x, m, i: cw(victim, x, 0.5, CwParams(steps=100, lr=eta)))
