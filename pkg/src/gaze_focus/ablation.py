"""Ablation runner: per-setting training, loss variants, decoder variants,
and ground-truth-versus-predicted masking.

Each ablation trains the relevant variants under a shared corpus and seed,
evaluates on the held-out test split, and emits a comparative table (CSV,
text, and a grouped-bar figure) whose columns mirror the headline report
schema for that comparison.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import torch

from .classifier import FindingClassifier
from .config import PipelineConfig
from .data import Label, Setting
from .evaluate import evaluate_split, gt_area_ratios, pred_area_ratios
from .losses import LossWeights
from .render import save_ablation_figure
from .train import (
    load_checkpoint,
    make_toy_backbone,
    masked_features,
    predict_entry_heatmaps,
    prepare_data,
    train_classifier,
    train_heatmap,
)
from .adapter import AnatomicAdapter

ABLATIONS = ("per_setting", "losses", "alpha", "gt_mask")

_TABLE_COLUMNS = {
    "per_setting": ("Settings", "fwIoU", "mSSIM", "mPSNR", "mL1"),
    "losses": ("L2", "Lce", "Ldice", "fgIoU", "fwIoU", "mPSNR", "mL2"),
    "alpha": ("Settings", "fwIoU", "mSSIM", "mPSNR", "mL1"),
    "gt_mask": ("Settings", "Heatmap", "Area ratio", "Accuracy"),
}


def _train_eval_heatmap(config: PipelineConfig, out_dir: Path, split: str = "test"):
    backbone = make_toy_backbone(config.seed, config.backbone)
    prepared = prepare_data(config, backbone)
    stage1 = train_heatmap(config, backbone, prepared, out_dir)
    report = evaluate_split(
        config, stage1.best_path, backbone=backbone, prepared=prepared, split=split
    )
    return report, stage1, backbone, prepared


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def run_per_setting(config: PipelineConfig, out_dir: Path) -> list[dict]:
    rows = []
    for setting in (Setting.C, Setting.L, Setting.R, Setting.M):
        variant = dataclasses.replace(config, setting=setting)
        report, _, _, _ = _train_eval_heatmap(variant, out_dir / f"setting_{setting.value}")
        agg = report.aggregates
        rows.append(
            {
                "Settings": setting.value,
                "fwIoU": agg["fwIoU"],
                "mSSIM": agg["mSSIM"],
                "mPSNR": agg["mPSNR"],
                "mL1": agg["mL1"],
            }
        )
    return rows


_LOSS_VARIANTS = (
    ("l2_only", LossWeights(l2=1.0, ce=0.0, dice=0.0)),
    ("mask_only", LossWeights(l2=0.0, ce=1.0, dice=1.0)),
    ("full", LossWeights(l2=1.0, ce=1.0, dice=1.0)),
)


def run_losses(config: PipelineConfig, out_dir: Path) -> list[dict]:
    rows = []
    for name, weights in _LOSS_VARIANTS:
        variant = dataclasses.replace(config, loss=weights)
        report, _, _, _ = _train_eval_heatmap(variant, out_dir / f"loss_{name}")
        agg = report.aggregates
        rows.append(
            {
                "L2": "yes" if weights.l2 else "no",
                "Lce": "yes" if weights.ce else "no",
                "Ldice": "yes" if weights.dice else "no",
                "fgIoU": agg["fgIoU"],
                "fwIoU": agg["fwIoU"],
                "mPSNR": agg["mPSNR"],
                "mL2": agg["mL2"],
            }
        )
    return rows


def run_alpha(config: PipelineConfig, out_dir: Path) -> list[dict]:
    rows = []
    for label, mode in (("w/o alpha", "channel_mean"), ("w/ alpha", "alpha_product")):
        adapter_cfg = dataclasses.replace(config.adapter, decoder_mode=mode)
        variant = dataclasses.replace(config, adapter=adapter_cfg)
        report, _, _, _ = _train_eval_heatmap(variant, out_dir / f"decoder_{mode}")
        agg = report.aggregates
        rows.append(
            {
                "Settings": label,
                "fwIoU": agg["fwIoU"],
                "mSSIM": agg["mSSIM"],
                "mPSNR": agg["mPSNR"],
                "mL1": agg["mL1"],
            }
        )
    return rows


def run_gt_mask(config: PipelineConfig, out_dir: Path, settings=None) -> list[dict]:
    """Classifier accuracy and area ratio, ground-truth vs predicted masks."""
    rows = []
    for setting in settings or (config.setting,):
        base = dataclasses.replace(config, setting=setting)
        variant_dir = out_dir / f"gtmask_{setting.value}"
        backbone = make_toy_backbone(base.seed, base.backbone)
        prepared = prepare_data(base, backbone)
        stage1 = train_heatmap(base, backbone, prepared, variant_dir)

        adapter = AnatomicAdapter(
            base.adapter,
            backbone_channels=base.backbone.channels,
            text_dim=base.backbone.text_dim,
            seed=base.seed,
        )
        load_checkpoint(stage1.best_path, adapter, base)
        adapter.eval()
        test_entries = prepared.splits["test"]
        preds = predict_entry_heatmaps(adapter, prepared, test_entries)

        for source_label, source in (("Ground truth", "ground_truth"), ("Ours", "predicted")):
            stage2 = train_classifier(
                base, stage1.best_path, backbone, prepared, variant_dir / source,
                mask_source=source,
            )
            classifier = FindingClassifier(backbone, seed=base.seed + 2)
            load_checkpoint(stage2.best_path, classifier.head, base)
            mask_maps = (
                {e.entry_id: e.heatmap.values for e in test_entries}
                if source == "ground_truth"
                else preds
            )
            feats = masked_features(classifier, prepared, test_entries, mask_maps)
            with torch.no_grad():
                hard = classifier.logits_from_features(feats).argmax(dim=1)
            labels = torch.tensor(
                [1 if e.label is Label.POSITIVE else 0 for e in test_entries]
            )
            accuracy = float((hard == labels).float().mean())
            area = (
                gt_area_ratios(test_entries)
                if source == "ground_truth"
                else pred_area_ratios(preds)
            )
            rows.append(
                {
                    "Settings": setting.value,
                    "Heatmap": source_label,
                    "Area ratio": area,
                    "Accuracy": accuracy,
                }
            )
    return rows


def write_ablation_table(which: str, rows: list[dict], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = _TABLE_COLUMNS[which]
    paths = {}

    csv_path = out_dir / f"{which}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    paths["csv"] = csv_path

    txt_path = out_dir / f"{which}.txt"
    header = " | ".join(f"{c:>12}" for c in columns)
    lines = [f"ablation: {which}", "", header, "-" * len(header)]
    for row in rows:
        lines.append(" | ".join(f"{_fmt(row[c]):>12}" for c in columns))
    txt_path.write_text("\n".join(lines) + "\n")
    paths["text"] = txt_path

    json_path = out_dir / f"{which}.json"
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True))
    paths["json"] = json_path

    value_columns = [c for c in columns if rows and isinstance(rows[0][c], float)]
    fig_rows = [
        {**row, "variant": " ".join(str(row[c]) for c in columns if c not in value_columns)}
        for row in rows
    ]
    fig_path = out_dir / f"{which}.png"
    save_ablation_figure(fig_rows, value_columns, "variant", fig_path, f"ablation: {which}")
    paths["figure"] = fig_path
    return paths


def run_ablation(config: PipelineConfig, which: str, out_dir: str | Path | None = None) -> list[dict]:
    """Train the variants for one ablation and emit its comparative table."""
    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")
    out_dir = Path(out_dir if out_dir is not None else config.out_dir) / "ablations"
    runner = {
        "per_setting": run_per_setting,
        "losses": run_losses,
        "alpha": run_alpha,
        "gt_mask": run_gt_mask,
    }[which]
    rows = runner(config, out_dir)
    write_ablation_table(which, rows, out_dir)
    return rows
