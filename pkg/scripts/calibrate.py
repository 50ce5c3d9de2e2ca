"""Desk-scale calibration run: synth data, victim training, attacks, two-stage
defense, evaluation. Prints timing and metric checkpoints."""

import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
torch.set_num_threads(1)

import forgeshield as fs
from forgeshield import data as data_mod
from forgeshield.attacks import Algorithm, AttackSpec
from forgeshield.training import AlignmentConfig, PairDataset, RefinementConfig

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/calib")
SIZE = 64
COUNT = 600
SEED = 7

t0 = time.time()


def mark(msg):
    print(f"[{time.time() - t0:8.1f}s] {msg}", flush=True)


cfg = fs.SyntheticForgeryConfig(height=SIZE, width=SIZE)
if (ROOT / "manifest.jsonl").exists():
    manifest = fs.DatasetManifest.load(ROOT)
    mark("loaded existing dataset")
else:
    manifest = fs.generate_synthetic(cfg, SEED, COUNT, ROOT)
    mark(f"synth data: {len(manifest.records)} records")

vict_path = ROOT / "victim.pt"
if vict_path.exists():
    victim = fs.load_victim(vict_path)
    mark("loaded existing victim")
else:
    res = fs.train_victim(
        fs.VictimTrainConfig(epochs=30, seed=SEED, arch=fs.VictimConfig(widths=(12, 24, 48, 96))),
        manifest,
    )
    victim = res.model
    fs.save_victim(victim, vict_path)
    mark(f"victim trained: heldout F1 = {res.heldout_f1:.4f}")

fgsm_spec = AttackSpec(algorithm=Algorithm.FGSM, intensity="3/255")
if fgsm_spec.tag() not in manifest.records[0].variants:
    manifest, summary = fs.build_adversarial_set(manifest, victim, fgsm_spec)
    mark(f"fgsm variants built: {summary.built} failures={len(summary.failures)}")
else:
    mark("fgsm variants already present")

pgd_spec = AttackSpec(algorithm=Algorithm.PGD, intensity="3/255", steps=10)
if pgd_spec.tag() not in manifest.split("test")[0].variants:
    manifest, summary = fs.build_adversarial_set(manifest, victim, pgd_spec, splits=("test",))
    mark(f"pgd variants built: {summary.built}")
else:
    mark("pgd variants already present")

report = fs.evaluate_suite(victim, None, manifest, [fgsm_spec, pgd_spec])
print(report.render_text(), flush=True)
mark("baseline eval done")

pairs = PairDataset(*data_mod.load_pair_tensors(manifest, "train", fgsm_spec.tag()))
gen = fs.build_generator(seed=SEED)
mark(f"generator params: {gen.parameter_count()}")

cfg1 = AlignmentConfig(epochs=50, lr=5e-4, batch_size=8, crop=None, seed=SEED)
r1 = fs.train_stage1(gen, victim, pairs, cfg1)
mark(
    "stage1 done: "
    + " ".join(f"{v:.5f}" for v in [r1.epoch_losses[0], r1.epoch_losses[9], r1.epoch_losses[24], r1.epoch_losses[-1]])
)
fs.save_generator(gen, ROOT / "gen-stage1.pt")

report1 = fs.evaluate_suite(victim, gen, manifest, [fgsm_spec, pgd_spec])
print(report1.render_text(), flush=True)
mark("stage1 eval done")

cfg2 = RefinementConfig(epochs=10, lr=1e-5, batch_size=8, crop=None, seed=SEED)
r2 = fs.train_stage2(gen, victim, pairs, cfg2)
mark(f"stage2 done: loss[0]={r2.epoch_losses[0]:.6f} loss[-1]={r2.epoch_losses[-1]:.6f}")
fs.save_generator(gen, ROOT / "gen-final.pt")

report2 = fs.evaluate_suite(victim, gen, manifest, [fgsm_spec, pgd_spec])
print(report2.render_text(), flush=True)
mark("final eval done")
