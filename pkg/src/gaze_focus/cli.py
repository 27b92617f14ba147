"""Command-line entry point: ``gaze-focus <subcommand>``.

Subcommands: synth, gazeprep, train-heatmap, train-classifier, eval,
ablate, render. Every subcommand exits 0 on success; failures print a
machine-readable JSON error record to stderr and exit nonzero. The
GAZE_FOCUS_THREADS environment variable caps CPU parallelism (default 1,
which also makes runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig, configure_threads, load_config
from .data import Setting, save_sample, synth_dataset


def _base_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    return config


def cmd_synth(args) -> int:
    config = _base_config(args)
    samples = synth_dataset(config.seed, args.count or config.data.synth_count, config.synth)
    out = Path(args.out or config.out_dir)
    for sample in samples:
        save_sample(sample, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_gazeprep(args) -> int:
    from .gazeprep import (
        DEFAULT_KEYWORDS,
        SplitSpec,
        build_setting,
        load_keyword_table,
        split_dataset,
        write_prepared_dataset,
    )
    from .data import load_dataset

    config = _base_config(args)
    setting = Setting(args.setting)
    samples = load_dataset(args.data_dir)
    table = load_keyword_table(args.keywords) if args.keywords else DEFAULT_KEYWORDS
    entries = build_setting(
        samples, setting, table, radius=args.radius, render_scale=config.data.render_scale
    )
    spec = SplitSpec(
        ratios=config.split.ratios, balance=config.split.balance, seed=args.seed or config.seed
    )
    splits = split_dataset(entries, spec)
    manifest = write_prepared_dataset(
        args.out, splits, setting, radius=args.radius, seed=spec.seed
    )
    sizes = {name: len(splits[name]) for name in ("train", "val", "test")}
    print(f"prepared {sum(sizes.values())} entries {sizes} -> {manifest}")
    return 0


def cmd_train_heatmap(args) -> int:
    from .train import train_heatmap, write_run_manifest

    config = _base_config(args)
    result = train_heatmap(config)
    write_run_manifest(
        config, config.out_dir, "heatmap", config.train.iterations,
        {"best_val_fwIoU": result.best_metric},
    )
    print(f"stage-1 checkpoints: {result.best_path} {result.final_path}")
    return 0


def cmd_train_classifier(args) -> int:
    from .train import train_classifier, write_run_manifest

    config = _base_config(args)
    ckpt = args.heatmap_checkpoint or str(
        Path(config.out_dir) / "checkpoints" / "heatmap_best.pt"
    )
    result = train_classifier(config, ckpt)
    write_run_manifest(
        config, config.out_dir, "classifier", config.train.stage2_iterations,
        {"best_val_accuracy": result.best_metric},
    )
    print(f"stage-2 checkpoints: {result.best_path} {result.final_path}")
    return 0


def cmd_eval(args) -> int:
    from .backbone import make_toy_backbone
    from .evaluate import (
        classifier_predictions,
        evaluate_split,
        write_overlays,
        write_prediction_report,
        write_report,
    )
    from .train import prepare_data, predict_entry_heatmaps, load_checkpoint
    from .adapter import AnatomicAdapter

    config = _base_config(args)
    ckpt_dir = Path(config.out_dir) / "checkpoints"
    heat = args.heatmap_checkpoint or str(ckpt_dir / "heatmap_best.pt")
    head = args.classifier_checkpoint or str(ckpt_dir / "classifier_best.pt")
    if not Path(head).exists():
        head = None
    backbone = make_toy_backbone(config.seed, config.backbone)
    prepared = prepare_data(config, backbone)
    report = evaluate_split(config, heat, head, backbone, prepared, split=args.split)
    out = Path(args.out or config.out_dir) / "reports"
    paths = write_report(report, out)

    adapter = AnatomicAdapter(
        config.adapter, config.backbone.channels, config.backbone.text_dim, seed=config.seed
    )
    load_checkpoint(heat, adapter, config)
    adapter.eval()
    entries = prepared.splits[args.split]
    preds = predict_entry_heatmaps(adapter, prepared, entries)
    if head is not None:
        mask_maps = (
            {e.entry_id: e.heatmap.values for e in entries}
            if config.data.mask_source == "ground_truth"
            else preds
        )
        predictions, probabilities = classifier_predictions(
            config, head, backbone, prepared, entries, mask_maps
        )
        write_prediction_report(entries, predictions, probabilities, out)
    write_overlays(prepared, entries, preds, out)
    print(f"report written under {out} ({', '.join(sorted(p.name for p in paths.values()))})")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    config = _base_config(args)
    rows = run_ablation(config, args.which)
    print(f"ablation {args.which}: {len(rows)} rows -> {Path(config.out_dir) / 'ablations'}")
    return 0


def cmd_render(args) -> int:
    from .data import load_heatmap_file, load_image
    from .render import render_overlay

    image = load_image(args.image)
    heatmap = load_heatmap_file(args.heatmap)
    out = render_overlay(image.pixels, heatmap, args.out, alpha=args.alpha)
    print(f"overlay written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaze-focus",
        description="Gaze-supervised heatmap prediction and masked classification.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_required=False):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=out_required, default=None,
                       help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    add_common(p, out_required=True)
    p.add_argument("--count", type=int, default=None, help="number of samples")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gazeprep", help="build ground-truth heatmaps and splits")
    p.add_argument("--data-dir", required=True, help="dataset directory")
    p.add_argument("--setting", required=True, choices=[s.value for s in Setting])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--radius", type=float, default=150.0)
    p.add_argument("--keywords", type=Path, default=None, help="keyword table JSON")
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(func=cmd_gazeprep)

    p = sub.add_parser("train-heatmap", help="stage 1: train the heatmap adapter")
    add_common(p)
    p.set_defaults(func=cmd_train_heatmap)

    p = sub.add_parser("train-classifier", help="stage 2: train the classifier head")
    add_common(p)
    p.add_argument("--heatmap-checkpoint", default=None)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("eval", help="evaluate checkpoints on a split")
    add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--heatmap-checkpoint", default=None)
    p.add_argument("--classifier-checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation suite")
    add_common(p)
    p.add_argument("--which", required=True,
                   choices=["per_setting", "losses", "alpha", "gt_mask"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="blend a heatmap over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--heatmap", required=True, help=".f32 heatmap file")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_threads()
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
