"""Command-line surface for the full loop: data synthesis, victim training,
attack generation, two-stage defense training, evaluation, and analysis.

Exit codes: 0 success, 2 argument/config error, 3 missing upstream artifact,
4 runtime failure. YAML config files supply defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch
import yaml

from . import ansm as ansm_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import training as training_mod
from . import victim as victim_mod
from .attacks import Algorithm, AttackSpec, CwParams
from .errors import ConfigurationError, ForgeShieldError, MissingArtifactError
from .util import TOOLKIT_VERSION, config_hash, parse_fraction, sha256_file

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "paths": {
            "type": "object",
            "additionalProperties": {"type": "string"},
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "size": {"type": "integer", "minimum": 16},
                "test_fraction": {"type": "number", "minimum": 0, "maximum": 0.9},
                "patch_count": {"type": "array", "items": {"type": "integer"}},
                "patch_fraction": {"type": "array", "items": {"type": "number"}},
                "source_pool": {"type": "integer", "minimum": 1},
            },
        },
        "victim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer"}},
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number"},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "encoder_widths": {"type": "array", "items": {"type": "integer"}},
                "head_width": {"type": "integer", "minimum": 1},
            },
        },
        "stage1": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number"},
                "batch_size": {"type": "integer", "minimum": 1},
                "taps": {"type": "string"},
                "crop": {"type": ["integer", "null"]},
                "geometry": {"enum": ["crop", "resize"]},
            },
        },
        "stage2": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number"},
                "batch_size": {"type": "integer", "minimum": 1},
                "supervision": {"enum": ["predicted", "ground-truth"]},
                "crop": {"type": ["integer", "null"]},
                "geometry": {"enum": ["crop", "resize"]},
            },
        },
        "attacks": {
            "type": "array",
            "items": {"type": "object"},
        },
    },
}


def load_run_config(path) -> dict:
    """Read and schema-validate a YAML run config."""
    import jsonschema

    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "run config")
    with path.open() as fh:
        cfg = yaml.safe_load(fh) or {}
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(f"invalid run config {path}: {exc.message}") from exc
    return cfg


def _stamp(path: Path, payload: dict) -> None:
    """Write a reproducibility stamp next to an artifact."""
    stamp = {
        "toolkit_version": TOOLKIT_VERSION,
        "torch_version": torch.__version__,
        **payload,
    }
    Path(str(path) + ".stamp.json").write_text(
        json.dumps(stamp, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _record_artifact(args, name: str, path: Path) -> None:
    """Track produced artifacts in the run directory's index, if one is set."""
    if not getattr(args, "run_dir", None):
        return
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    index_path = run_dir / "artifacts.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    index[name] = {"path": str(path), "sha256": sha256_file(path)}
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _refuse_overwrite(args, path: Path, what: str) -> None:
    if path.exists() and not args.force:
        raise ConfigurationError(f"{what} already exists at {path}; pass --force to overwrite")


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, what)
    return path


def _cfg(args, section: str) -> dict:
    return (getattr(args, "_config", None) or {}).get(section, {})


def _pick(flag_value, config_value, default):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    return default


def _seed(args) -> int:
    cfg = getattr(args, "_config", None) or {}
    return _pick(args.seed, cfg.get("seed"), 0)


def _threshold(args) -> float:
    cfg = getattr(args, "_config", None) or {}
    return _pick(getattr(args, "threshold", None), cfg.get("threshold"), 0.5)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    cfg = _cfg(args, "synth")
    count = _pick(args.count, cfg.get("count"), 600)
    size = _pick(args.size, cfg.get("size"), 256)
    if count < 1:
        raise ValueError("--count must be >= 1")
    out = Path(args.out)
    _refuse_overwrite(args, out / data_mod.MANIFEST_NAME, "dataset manifest")
    fc = data_mod.SyntheticForgeryConfig(
        height=size,
        width=size,
        test_fraction=_pick(args.test_fraction, cfg.get("test_fraction"), 1.0 / 6.0),
        patch_count=tuple(cfg.get("patch_count", (1, 3))),
        patch_fraction=tuple(cfg.get("patch_fraction", (0.12, 0.35))),
        source_pool=cfg.get("source_pool", 8),
    )
    manifest = data_mod.generate_synthetic(fc, _seed(args), count, out)
    _stamp(manifest.path(), {"seed": _seed(args), "config_hash": config_hash(fc.to_dict()), "count": count})
    _record_artifact(args, "dataset", manifest.path())
    print(f"wrote {len(manifest.records)} records to {manifest.path()}")
    return 0


def cmd_train_victim(args) -> int:
    cfg = _cfg(args, "victim")
    manifest = data_mod.DatasetManifest.load(_require_file(Path(args.data), "dataset manifest"))
    out = Path(args.out)
    _refuse_overwrite(args, out, "victim checkpoint")
    arch = victim_mod.VictimConfig(widths=tuple(cfg.get("widths", (16, 32, 64, 128))))
    tc = victim_mod.VictimTrainConfig(
        epochs=_pick(args.epochs, cfg.get("epochs"), 30),
        lr=_pick(args.lr, cfg.get("lr"), 1e-3),
        batch_size=_pick(args.batch_size, cfg.get("batch_size"), 8),
        seed=_seed(args),
        threshold=_threshold(args),
        arch=arch,
    )
    result = victim_mod.train_victim(tc, manifest)
    victim_mod.save_victim(result.model, out)
    _stamp(out, {
        "seed": tc.seed,
        "config_hash": config_hash(tc.to_dict()),
        "heldout_f1": result.heldout_f1,
    })
    _record_artifact(args, "victim", out)
    print(f"victim saved to {out}; held-out F1 = {result.heldout_f1:.4f}")
    return 0


def _attack_spec_from_args(args) -> AttackSpec:
    phi = parse_fraction(args.phi)
    return AttackSpec(
        algorithm=Algorithm(args.algo.lower().replace("-", "")),
        intensity=phi,
        steps=args.steps,
        step_size=args.step_size,
        momentum=args.momentum,
        random_start_radius=None if args.radius is None else parse_fraction(args.radius),
        cw=CwParams(steps=args.cw_steps, lr=args.cw_lr, weight=args.cw_weight),
        threshold=_threshold(args),
    )


def cmd_attack(args) -> int:
    manifest = data_mod.DatasetManifest.load(_require_file(Path(args.data), "dataset manifest"))
    victim = victim_mod.load_victim(_require_file(args.victim, "victim checkpoint"))
    spec = _attack_spec_from_args(args)
    tag = spec.tag()
    splits = tuple(s.strip() for s in args.splits.split(",") if s.strip())
    already = [r for r in manifest.records if r.split in splits and tag in r.variants]
    if already and not args.force:
        raise ConfigurationError(
            f"variant '{tag}' already built for {len(already)} records; pass --force to rebuild"
        )
    updated, summary = data_mod.build_adversarial_set(
        manifest, victim, spec, splits=splits, float_sidecar=args.float_sidecar,
        trace_dir=args.trace_dir,
    )
    _stamp(updated.root / "adv" / tag, {"seed": manifest.seed, "config_hash": spec.spec_hash()})
    _record_artifact(args, f"adv-{tag}", updated.path())
    print(f"built {summary.built} '{tag}' variants under {updated.root / 'adv' / tag}")
    if summary.failures:
        for item in summary.failures:
            print(f"attack failure: {item}", file=sys.stderr)
        print(f"{len(summary.failures)} records failed", file=sys.stderr)
        return 4
    return 0


def _tap_choice(victim, name: str | None) -> list[str] | None:
    if name is None or name == "middle":
        return None  # stage-1 default resolves to the middle third
    return victim_mod.select_layers(victim, victim_mod.DepthCategory(name))


def cmd_train_ansm(args) -> int:
    gcfg = _cfg(args, "generator")
    s1cfg = _cfg(args, "stage1")
    s2cfg = _cfg(args, "stage2")
    manifest = data_mod.DatasetManifest.load(_require_file(Path(args.data), "dataset manifest"))
    victim = victim_mod.load_victim(_require_file(args.victim, "victim checkpoint"))
    out = Path(args.out)
    _refuse_overwrite(args, out, "generator checkpoint")

    tag = args.adv_tag
    pairs = training_mod.PairDataset(*data_mod.load_pair_tensors(manifest, "train", tag))
    seed = _seed(args)
    crop = _pick(args.crop, s1cfg.get("crop"), None)
    geometry = _pick(args.geometry, s1cfg.get("geometry"), "crop")

    stage1_ckpt = out.with_name(out.stem + "-stage1" + out.suffix)
    rows = []

    if args.stage in ("1", "full"):
        generator = ansm_mod.build_generator(
            ansm_mod.GeneratorConfig(
                encoder_widths=tuple(gcfg.get("encoder_widths", (16, 24, 40, 80, 112))),
                head_width=gcfg.get("head_width", 16),
            ),
            seed=seed,
        )
        cfg1 = training_mod.AlignmentConfig(
            epochs=_pick(args.stage1_epochs, s1cfg.get("epochs"), 50),
            lr=_pick(args.stage1_lr, s1cfg.get("lr"), 5e-4),
            batch_size=_pick(args.batch_size, s1cfg.get("batch_size"), 8),
            taps=_tap_choice(victim, args.taps),
            crop=crop,
            geometry=geometry,
            seed=seed,
        )
        print(f"generator parameters: {generator.parameter_count()}")
        result1 = training_mod.train_stage1(generator, victim, pairs, cfg1)
        rows += result1.rows()
        ansm_mod.save_generator(generator, stage1_ckpt, extra={"stage": 1, "adv_tag": tag})
        _stamp(stage1_ckpt, {"seed": seed, "config_hash": config_hash({"stage1": vars(cfg1) | {"taps": cfg1.taps}})})
        print(f"stage-1 checkpoint saved to {stage1_ckpt}")
    else:
        init = _require_file(args.init or stage1_ckpt, "stage-1 generator checkpoint")
        generator = ansm_mod.load_generator(init)

    if args.stage in ("2", "full"):
        cfg2 = training_mod.RefinementConfig(
            epochs=_pick(args.stage2_epochs, s2cfg.get("epochs"), 10),
            lr=_pick(args.stage2_lr, s2cfg.get("lr"), 1e-5),
            batch_size=_pick(args.batch_size, s2cfg.get("batch_size"), 8),
            supervision=training_mod.Supervision(
                _pick(args.supervision, s2cfg.get("supervision"), "predicted")
            ),
            threshold=_threshold(args),
            crop=_pick(args.crop, s2cfg.get("crop"), crop),
            geometry=_pick(args.geometry, s2cfg.get("geometry"), geometry),
            seed=seed,
        )
        result2 = training_mod.train_stage2(generator, victim, pairs, cfg2)
        rows += result2.rows()
        ansm_mod.save_generator(generator, out, extra={"stage": 2, "adv_tag": tag})
        _stamp(out, {"seed": seed, "config_hash": config_hash({"stage": args.stage})})
        print(f"generator checkpoint saved to {out}")
        _record_artifact(args, "ansm", out)
    elif args.stage == "1":
        _record_artifact(args, "ansm-stage1", stage1_ckpt)

    metrics_path = args.metrics or str(out) + ".metrics.csv"
    training_mod.write_metrics_csv(rows, metrics_path)
    return 0


def _specs_from_names(names: list[str], args) -> list[AttackSpec]:
    specs = []
    for name in names:
        spec = AttackSpec(
            algorithm=Algorithm(name.lower().replace("-", "")),
            intensity=parse_fraction(args.phi),
            steps=args.steps,
            cw=CwParams(steps=args.cw_steps, lr=args.cw_lr, weight=args.cw_weight),
            threshold=_threshold(args),
        )
        specs.append(spec)
    return specs


def cmd_eval(args) -> int:
    cfg = getattr(args, "_config", None) or {}
    manifest = data_mod.DatasetManifest.load(_require_file(Path(args.data), "dataset manifest"))
    victim = victim_mod.load_victim(_require_file(args.victim, "victim checkpoint"))
    generator = None
    if args.ansm:
        generator = ansm_mod.load_generator(_require_file(args.ansm, "generator checkpoint"))
    if args.attacks:
        specs = _specs_from_names([a for a in args.attacks.split(",") if a], args)
    else:
        specs = [AttackSpec.from_dict(d) for d in cfg.get("attacks", [])]
    report = eval_mod.evaluate_suite(
        victim, generator, manifest, specs,
        threshold=_threshold(args), split=args.split,
        victim_id=Path(args.victim).stem,
    )
    print(report.render_text())
    if args.report:
        path = Path(args.report)
        _refuse_overwrite(args, path, "evaluation report")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_json() + "\n", encoding="utf-8")
        _stamp(path, {"seed": manifest.seed, "config_hash": report.config_hash})
        _record_artifact(args, "report", path)
    if args.table:
        Path(args.table).parent.mkdir(parents=True, exist_ok=True)
        Path(args.table).write_text(report.render_text() + "\n", encoding="utf-8")
    return 0


def cmd_analyze(args) -> int:
    manifest = data_mod.DatasetManifest.load(_require_file(Path(args.data), "dataset manifest"))
    victim = victim_mod.load_victim(_require_file(args.victim, "victim checkpoint"))
    generator = None
    if args.ansm:
        generator = ansm_mod.load_generator(_require_file(args.ansm, "generator checkpoint"))
    taps = _tap_choice(victim, args.taps) or victim_mod.select_layers(
        victim, victim_mod.DepthCategory.MIDDLE
    )
    tag = args.adv_tag
    pairs = []
    for rec in manifest.split(args.split):
        if tag not in rec.variants:
            continue
        x_o = data_mod.load_image(manifest.root / rec.image)
        x_cmp = data_mod.load_image(manifest.root / rec.variants[tag])
        if generator is not None:
            x_cmp = ansm_mod.apply_defense(generator, x_cmp)
        pairs.append((x_o, x_cmp))
    if len(pairs) < 2:
        raise MissingArtifactError(
            manifest.root / "adv" / tag, f"at least 2 '{tag}' variants in split '{args.split}'"
        )
    stats = eval_mod.feature_shift_stats(victim, taps, pairs, embedding_csv=args.embedding_csv)
    lines = [f"{'tap':<10} {'mean_channel_kl':>16}"]
    lines += [f"{t:<10} {v:>16.6g}" for t, v in stats.per_tap.items()]
    text = "\n".join(lines)
    print(text)
    if args.out_csv:
        out = Path(args.out_csv)
        out.parent.mkdir(parents=True, exist_ok=True)
        rows = ["tap,mean_channel_kl"] + [f"{t},{v:.6g}" for t, v in stats.per_tap.items()]
        out.write_text("\n".join(rows) + "\n", encoding="utf-8")
        _record_artifact(args, "analysis", out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML run config supplying defaults")
    shared.add_argument("--seed", type=int, default=None, help="global RNG seed")
    shared.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    shared.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    shared.add_argument("--verbose", action="store_true")
    shared.add_argument("--run-dir", default=None, help="directory collecting an artifact index")
    shared.add_argument("--threshold", type=float, default=None, help="forgery threshold")

    parser = argparse.ArgumentParser(prog="forgeshield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[shared], help="generate a synthetic forgery dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-victim", parents=[shared], help="fit the built-in localization victim")
    p.add_argument("--data", required=True, help="dataset manifest or root")
    p.add_argument("--out", required=True, help="victim checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("attack", parents=[shared], help="build adversarial variants of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--algo", required=True,
                   choices=["fgsm", "bim", "pgd", "mifgsm", "mi-fgsm", "pgn", "cw"])
    p.add_argument("--phi", default="3/255", help="intensity as a fraction ('3/255') or decimal")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--momentum", type=float, default=1.0)
    p.add_argument("--radius", default=None, help="random-start radius for pgd")
    p.add_argument("--cw-steps", type=int, default=250)
    p.add_argument("--cw-lr", type=float, default=0.01)
    p.add_argument("--cw-weight", type=float, default=1.0)
    p.add_argument("--splits", default="train,test")
    p.add_argument("--float-sidecar", action="store_true",
                   help="also store unquantized float arrays")
    p.add_argument("--trace-dir", default=None, help="write per-record loss traces as CSV")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-ansm", parents=[shared],
                       help="train the noise-suppression generator (two stages)")
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--out", required=True, help="final generator checkpoint path")
    p.add_argument("--stage", choices=["1", "2", "full"], default="full")
    p.add_argument("--init", default=None, help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--adv-tag", default="fgsm-3_255", help="variant tag of the training pairs")
    p.add_argument("--taps", choices=["shallow", "middle", "topmost"], default=None)
    p.add_argument("--supervision", choices=["predicted", "ground-truth"], default=None)
    p.add_argument("--stage1-epochs", type=int, default=None)
    p.add_argument("--stage1-lr", type=float, default=None)
    p.add_argument("--stage2-epochs", type=int, default=None)
    p.add_argument("--stage2-lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--geometry", choices=["crop", "resize"], default=None)
    p.add_argument("--metrics", default=None, help="metrics CSV path")
    p.set_defaults(func=cmd_train_ansm)

    p = sub.add_parser("eval", parents=[shared], help="evaluate conditions with/without the defense")
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--ansm", default=None, help="generator checkpoint enabling defended rows")
    p.add_argument("--attacks", default=None, help="comma-separated attack names")
    p.add_argument("--phi", default="3/255")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--cw-steps", type=int, default=250)
    p.add_argument("--cw-lr", type=float, default=0.01)
    p.add_argument("--cw-weight", type=float, default=1.0)
    p.add_argument("--split", default="test")
    p.add_argument("--report", default=None, help="JSON report output path")
    p.add_argument("--table", default=None, help="text table output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[shared],
                       help="feature-distribution shift diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--ansm", default=None)
    p.add_argument("--adv-tag", default="fgsm-3_255")
    p.add_argument("--taps", choices=["shallow", "middle", "topmost"], default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out-csv", default=None)
    p.add_argument("--embedding-csv", default=None)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config = load_run_config(args.config) if args.config else {}
        if args.jobs:
            torch.set_num_threads(max(1, args.jobs))
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ForgeShieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
