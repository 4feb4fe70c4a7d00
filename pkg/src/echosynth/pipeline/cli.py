"""Command-line entry point: ``echosynth <subcommand> [flags]``.

Workspace subcommands (gen-phantoms, train-gan, build-dataset, report, run-all)
operate on an output directory laid out as in :mod:`.experiment`; file
subcommands (render, synth, postprocess, evaluate) map one volume to another.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .. import gan3d, metrics, phantom, postproc, segmenter
from ..volume import STRUCTURE_IDS, STRUCTURES
from . import experiment as ex
from .datasets import RECIPES, DatasetManifest, model_name
from .io import ModelCheckpoint, load_volume, save_volume


def _set_override(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ValueError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    *path, leaf = key.split(".")
    for p in path:
        if not isinstance(node.get(p), dict):
            raise ValueError(f"--set: {key!r} does not name a nested config field")
        node = node[p]
    if leaf not in node:
        raise ValueError(f"--set: unknown config field {key!r}")
    node[leaf] = value


def load_config(args) -> ex.ExperimentConfig:
    if getattr(args, "config", None):
        d = json.loads(Path(args.config).read_text())
    elif getattr(args, "smoke", False):
        d = ex.smoke_config().to_dict()
    else:
        d = ex.desk_config().to_dict()
    for a in getattr(args, "set", None) or []:
        _set_override(d, a)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    return ex.ExperimentConfig.from_dict(d)


def _read_folds_csv(path: Path) -> list:
    per_fold: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_fold.setdefault(int(row["fold"]), {})[row["structure"]] = float(row["dice"])
    return [segmenter.FoldResult(k, d) for k, d in sorted(per_fold.items())]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_phantoms(args) -> int:
    cfg = load_config(args)
    ex.stage_phantoms(cfg, Path(cfg.out_dir))
    (Path(cfg.out_dir) / "config.json").write_text(cfg.to_json())
    return 0


def cmd_render(args) -> int:
    labels = load_volume(args.input)
    save_volume(phantom.render_pseudo_ultrasound(labels, seed=args.seed), args.out)
    return 0


def cmd_train_gan(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    if args.manifest:
        (out / "gan").mkdir(parents=True, exist_ok=True)
        ckpt, history = gan3d.train_gan(DatasetManifest.load(args.manifest), cfg.generator_config(),
                                        cfg.discriminator_config(), cfg.gan_train_config())
        ckpt.save(out / "gan" / "checkpoint.eck")
        gan3d.save_history(history, out / "gan" / "history.csv")
    else:
        ex.stage_train_gan(cfg, out)
    return 0


def cmd_synth(args) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    save_volume(gan3d.synthesize(ckpt, load_volume(args.input)), args.out)
    return 0


def cmd_postprocess(args) -> int:
    vol = load_volume(args.input)
    spec = postproc.WaveletSpec.parse(args.wavelet) if args.wavelet else None
    save_volume(ex.postprocess_volume(vol, spec, args.cone == "default"), args.out)
    return 0


def cmd_build_dataset(args) -> int:
    cfg = load_config(args)
    if args.recipe:
        cfg.recipes = list(args.recipe)
        cfg = ex.ExperimentConfig.from_dict(cfg.to_dict())
    for name, m in ex.stage_datasets(cfg, Path(cfg.out_dir)).items():
        print(f"{name}: {len(m)} entries {m.counts()}")
    return 0


def cmd_train_seg(args) -> int:
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    name = model_name(manifest.name)
    d = Path(cfg.out_dir) / "seg" / name
    d.mkdir(parents=True, exist_ok=True)
    results = segmenter.train_seg(manifest, cfg.seg_config())
    (d / "folds.csv").write_text(segmenter.folds_csv(name, results))
    segmenter.best_fold(results).checkpoint.save(d / "best_fold.eck")
    for r in results:
        print(f"fold {r.fold_index}: " + "  ".join(f"{s} {r.dice[s]:.3f}" for s in STRUCTURES))
    return 0


def cmd_evaluate(args) -> int:
    pred, gt = load_volume(args.pred), load_volume(args.gt)
    present = set(int(c) for c in set(gt.classes.ravel()) | set(pred.classes.ravel()))
    for s in STRUCTURES:
        if STRUCTURE_IDS[s] in present:
            print(f"Dice {s} {metrics.dice(pred, gt, STRUCTURE_IDS[s]):.3f}")
    print(f"VS {metrics.HEART_VOLUME} {metrics.volume_similarity(pred, gt):.3f}")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    folds = {}
    for recipe in cfg.recipes:
        path = out / "seg" / model_name(recipe) / "folds.csv"
        if path.exists():
            folds[model_name(recipe)] = _read_folds_csv(path)
    if not folds:
        raise FileNotFoundError(f"no seg/*/folds.csv under {out}")
    scores = ex.stage_evaluate(cfg, out, list(folds))
    _, _, vtab, ttab = ex.stage_report(out, folds, scores)
    print(vtab)
    print(ttab)
    return 0


def cmd_run_all(args) -> int:
    cfg = load_config(args)
    bundle = ex.run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    print(bundle.validation_table)
    print(bundle.test_table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _config_flags(p, out_required=True):
    p.add_argument("--config", help="experiment config JSON (default: built-in desk config)")
    p.add_argument("--smoke", action="store_true", help="start from the reduced smoke config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. seg.epochs=5")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echosynth", description="Synthetic 3D echo augmentation study.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("gen-phantoms", help="sample phantom parameters and label volumes")
    _config_flags(p)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("render", help="oracle-render a label volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="speckle seed")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train-gan", help="train the label-to-image GAN")
    _config_flags(p)
    p.add_argument("--manifest", help="train on this dataset manifest instead of the workspace gan_* pairs")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("synth", help="generate an image from a label volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("postprocess", help="wavelet denoising and/or cone masking")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wavelet", help="family:levels[:rule[:threshold]], e.g. sym4:2")
    p.add_argument("--cone", choices=["default"])
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("build-dataset", help="write dataset manifests")
    _config_flags(p)
    p.add_argument("--recipe", action="append", choices=list(RECIPES))
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train-seg", help="k-fold segmentation training on a manifest")
    _config_flags(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("evaluate", help="Dice and volume similarity between two label volumes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="evaluate best folds on the test set and write the tables")
    _config_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", help="the whole study end to end")
    _config_flags(p)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown subcommands/flags exit 2 with usage
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return int(args.func(args))
    except Exception as exc:  # noqa: BLE001 - surface any failure as a diagnostic
        print(f"echosynth {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
