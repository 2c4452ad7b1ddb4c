"""``sar`` command-line entry point.

Subcommands: synth, preprocess, pretrain, finetune, evaluate, transform-preview.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from sar.config import RunConfig, load_config
from sar.errors import CheckpointError, ConfigError, DataError, NumericalError
from sar.volume import RAW_SUFFIX, Volume, clip_and_normalize, load_volume, resample_to_spacing, save_raw

log = logging.getLogger("sar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.dumps()
    (out / "config.resolved.txt").write_text(resolved)
    log.info("resolved config:\n%s", resolved.rstrip())
    return cfg, out


def _seg_split(cfg: RunConfig, cases):
    """Fixed 2:1 train/test split of the labeled cases."""
    n_test = max(1, int(round(cfg.eval.test_fraction * len(cases))))
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4])).permutation(len(cases))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    if not train:
        raise DataError(f"{len(cases)} labeled cases leave no training case")
    return [cases[i] for i in train], [cases[i] for i in test]


def _pretrain_corpus(cfg, data):
    from sar.synth import make_pretrain_corpus, read_corpus

    return read_corpus(data) if data else make_pretrain_corpus(cfg.synth_spec())


def _seg_corpus(cfg, data):
    from sar.synth import make_segmentation_corpus, read_corpus

    n_classes = cfg.finetune.n_classes
    if data:
        return read_corpus(data)
    return make_segmentation_corpus(cfg.seg_spec(), cfg.eval.n_seg_cases, n_classes)


def cmd_synth(args) -> int:
    from sar.synth import make_pretrain_corpus, make_segmentation_corpus, write_corpus

    cfg, out = _prepare(args)
    write_corpus(make_pretrain_corpus(cfg.synth_spec()), out / "pretrain")
    cases = make_segmentation_corpus(cfg.seg_spec(), cfg.eval.n_seg_cases, cfg.finetune.n_classes)
    write_corpus(cases, out / "segment")
    log.info("wrote %s and %s", out / "pretrain", out / "segment")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from sar.synth import write_corpus

    in_dir, out = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise DataError(f"input directory not found: {in_dir}")
    paths = sorted(p for p in in_dir.iterdir() if p.name.lower().endswith((RAW_SUFFIX, ".nii", ".nii.gz")))
    if not paths:
        raise DataError(f"{in_dir}: no {RAW_SUFFIX} or NIfTI volumes")
    target = tuple(args.spacing)
    vols = []
    for p in paths:
        vol = load_volume(p, modality=args.modality)
        vols.append(clip_and_normalize(resample_to_spacing(vol, target)))
        log.info("%s: %s @ %s -> %s", p.name, vol.shape, vol.spacing, vols[-1].shape)
    write_corpus(vols, out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from sar.trainer import pretrain

    cfg, out = _prepare(args)
    corpus = _pretrain_corpus(cfg, args.data)
    result = pretrain(cfg.pretrain_config(), corpus, out_dir=out, resume_from=args.resume)
    log.info("best checkpoint: %s", result.best_checkpoint)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from sar.trainer import finetune

    cfg, out = _prepare(args)
    train, test = _seg_split(cfg, _seg_corpus(cfg, args.data))
    init = str(args.checkpoint) if args.checkpoint else "scratch"
    result = finetune(cfg.finetune_config(init), train, test, out_dir=out)
    final = [r for r in result.metrics if r["split"] == "val"][-1]
    log.info("final val dice %.4f on %d test cases (%d training cases)", final["dice_score"], len(test), result.n_train_cases)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from sar.evaluation import config_fingerprint, evaluate_cases, export_curves, size_stratified_report, write_table
    from sar.model import SegNet, load_checkpoint

    cfg, out = _prepare(args)
    model, meta = load_checkpoint(args.checkpoint)
    if not isinstance(model, SegNet):
        raise CheckpointError(f"{args.checkpoint}: expected a fine-tuned segmentation checkpoint")
    _, test = _seg_split(cfg, _seg_corpus(cfg, args.data))
    tumor_class = model.n_classes - 1
    fp = config_fingerprint(cfg.finetune_config(), cfg.seg_spec())
    report = size_stratified_report([evaluate_cases(model, test, tumor_class, cfg.finetune.overlap)], tumor_class, fp)
    sidecar = {"fingerprint": fp, "checkpoint": str(args.checkpoint), "checkpoint_meta": meta}
    write_table(report.rows, out / "eval_cases.csv", sidecar)
    summary = [{"bucket": b, "dice_mean": m, "dice_std": s} for b, (m, s) in report.buckets.items()]
    summary.append({"bucket": "all", "dice_mean": report.overall[0], "dice_std": report.overall[1]})
    write_table(summary, out / "eval_summary.csv", sidecar)
    if args.curves:
        export_curves(args.curves, out / "loss_curves.png", labels=args.labels)
    log.info("tumor dice by size: %s", json.dumps({r["bucket"]: r["dice_mean"] for r in summary}))
    return EXIT_OK


def cmd_transform_preview(args) -> int:
    from sar.transforms import inner_painting, local_shuffle, nonlinear_intensity, outer_painting

    cfg, out = _prepare(args)
    vol = load_volume(args.volume)
    data = np.asarray(vol.data, dtype=np.float64)
    if data.min() < 0 or data.max() > 1:
        data = clip_and_normalize(vol).data
    tcfg = cfg.transform
    rng = np.random.default_rng(args.seed)
    views = {
        "original": data,
        "nonlinear": nonlinear_intensity(data, rng)[0],
        "shuffle": local_shuffle(data, tcfg, rng)[0],
        "inner_paint": inner_painting(data, tcfg, rng)[0],
        "outer_paint": outer_painting(data, tcfg, rng)[0],
    }
    for name, arr in views.items():
        save_raw(Volume(arr, vol.spacing, vol.modality, f"{vol.source_id}_{name}"), out / f"{name}{RAW_SUFFIX}")
    log.info("wrote %d previews to %s", len(views), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out-dir", "-o", required=True)
        if config:
            sp.add_argument("--config", "-c")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth", help="write the synthetic pre-training and segmentation corpora")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="resample to 1 mm and window-normalize a directory of volumes")
    sp.add_argument("--in-dir", "-i", required=True)
    sp.add_argument("--modality", "-m", required=True, choices=["CT", "MRI", "ct", "mri"])
    sp.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    common(sp, config=False)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("pretrain", help="self-supervised pre-training")
    sp.add_argument("--data", help="corpus directory with manifest.jsonl (default: generate synthetic)")
    sp.add_argument("--resume", help="train_state.pt to resume from")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="dice-loss fine-tuning")
    sp.add_argument("--data", help="labeled corpus directory (default: generate synthetic)")
    sp.add_argument("--checkpoint", help="pre-training checkpoint (default: train from scratch)")
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="size-stratified dice of a fine-tuned checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--curves", nargs="*", help="metrics CSVs to overlay as loss curves")
    sp.add_argument("--labels", nargs="*")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("transform-preview", help="write each corruption of one volume as raw files")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_transform_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sar: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"sar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"sar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
