"""Test-split evaluation and report emission.

Reports are written as delimited CSV (per-sample and aggregate), a
human-readable text table in the headline column order
(fgIoU/bgIoU/fwIoU | mSSIM/mPSNR/mL1/mL2 | Accuracy), and matplotlib
figures alongside. Nothing time-dependent goes into the files, so two runs
with the same seed produce byte-identical reports.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .adapter import AnatomicAdapter
from .backbone import FrozenBackbone, make_toy_backbone
from .classifier import FindingClassifier
from .config import PipelineConfig, config_hash
from .data import Label
from .gazeprep import SettingEntry
from .metrics import MetricsReport, area_ratio, evaluate as metrics_evaluate
from .render import save_metrics_figure, save_overlay_grid
from .train import (
    PreparedData,
    load_checkpoint,
    masked_features,
    predict_entry_heatmaps,
    prepare_data,
)

EVAL_COLUMNS = ("fgIoU", "bgIoU", "fwIoU", "mSSIM", "mPSNR", "mL1", "mL2", "Accuracy")
PER_SAMPLE_COLUMNS = (
    "id", "fgIoU", "bgIoU", "fwIoU", "ssim", "psnr", "l1", "l2", "area_ratio",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def evaluate_split(
    config: PipelineConfig,
    heatmap_checkpoint: str | Path,
    classifier_checkpoint: str | Path | None = None,
    backbone: FrozenBackbone | None = None,
    prepared: PreparedData | None = None,
    split: str = "test",
) -> MetricsReport:
    """Full metrics over one split from saved checkpoints."""
    backbone = backbone or make_toy_backbone(config.seed, config.backbone)
    prepared = prepared or prepare_data(config, backbone)
    entries = prepared.splits[split]
    if not entries:
        raise ValueError(f"split {split!r} is empty")

    adapter = AnatomicAdapter(
        config.adapter,
        backbone_channels=config.backbone.channels,
        text_dim=config.backbone.text_dim,
        seed=config.seed,
    )
    load_checkpoint(heatmap_checkpoint, adapter, config)
    adapter.eval()

    preds = predict_entry_heatmaps(adapter, prepared, entries)
    gts = {e.entry_id: e.heatmap.values for e in entries}

    labels = None
    predictions = None
    if classifier_checkpoint is not None:
        mask_maps = (
            {e.entry_id: e.heatmap.values for e in entries}
            if config.data.mask_source == "ground_truth"
            else preds
        )
        predictions, _ = classifier_predictions(
            config, classifier_checkpoint, backbone, prepared, entries, mask_maps
        )
        labels = {e.entry_id: 1 if e.label is Label.POSITIVE else 0 for e in entries}

    provenance = {
        "config_hash": config_hash(config),
        "heatmap_checkpoint": str(heatmap_checkpoint),
        "classifier_checkpoint": str(classifier_checkpoint) if classifier_checkpoint else None,
        "split": split,
        "setting": config.setting.value,
        "n_samples": len(entries),
    }
    return metrics_evaluate(preds, gts, labels, predictions, provenance)


def classifier_predictions(
    config: PipelineConfig,
    checkpoint: str | Path,
    backbone: FrozenBackbone,
    prepared: PreparedData,
    entries: list[SettingEntry],
    mask_maps: dict[str, np.ndarray],
) -> tuple[dict[str, int], dict[str, tuple[float, float]]]:
    """Hard labels and probability pairs for masked entries."""
    classifier = FindingClassifier(backbone, seed=config.seed + 2)
    load_checkpoint(checkpoint, classifier.head, config)
    feats = masked_features(classifier, prepared, entries, mask_maps)
    with torch.no_grad():
        probs = torch.softmax(classifier.logits_from_features(feats), dim=-1)
    predictions = {e.entry_id: int(p.argmax()) for e, p in zip(entries, probs)}
    probabilities = {
        e.entry_id: (float(p[0]), float(p[1])) for e, p in zip(entries, probs)
    }
    return predictions, probabilities


def report_rows(report: MetricsReport) -> dict[str, str]:
    """Aggregate row in the headline column order."""
    agg = report.aggregates
    row = {k: _fmt(agg.get(k)) for k in EVAL_COLUMNS[:-1]}
    row["Accuracy"] = _fmt(report.accuracy)
    return row


def write_report(report: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    """Emit per-sample CSV, aggregate CSV, JSON, text table, and figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    per_sample = out_dir / "per_sample.csv"
    with per_sample.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_SAMPLE_COLUMNS)
        for row in report.per_sample:
            writer.writerow([_fmt(row[c]) for c in PER_SAMPLE_COLUMNS])
    paths["per_sample"] = per_sample

    aggregate = out_dir / "metrics.csv"
    row = report_rows(report)
    with aggregate.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        writer.writerow([row[c] for c in EVAL_COLUMNS])
    paths["metrics"] = aggregate

    as_json = out_dir / "report.json"
    as_json.write_text(
        json.dumps(
            {
                "aggregates": report.aggregates,
                "accuracy": report.accuracy,
                "provenance": report.provenance,
                "per_sample": report.per_sample,
            },
            indent=2,
            sort_keys=True,
        )
    )
    paths["json"] = as_json

    text = out_dir / "report.txt"
    lines = ["Location and intensity metrics (mean over samples)", ""]
    header = " | ".join(f"{c:>8}" for c in EVAL_COLUMNS)
    lines.append(header)
    lines.append("-" * len(header))
    lines.append(" | ".join(f"{row[c]:>8}" for c in EVAL_COLUMNS))
    if report.provenance:
        lines += ["", f"config: {report.provenance.get('config_hash', '')}",
                  f"checkpoint: {report.provenance.get('heatmap_checkpoint', '')}"]
    text.write_text("\n".join(lines) + "\n")
    paths["text"] = text

    figure = out_dir / "metrics.png"
    save_metrics_figure(report, figure)
    paths["figure"] = figure
    return paths


def write_prediction_report(
    entries: list[SettingEntry],
    predictions: dict[str, int],
    probabilities: dict[str, tuple[float, float]],
    out_dir: str | Path,
) -> Path:
    """Delimited per-sample classifier output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "predictions.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "prediction", "p_negative", "p_positive"])
        for e in entries:
            label = 1 if e.label is Label.POSITIVE else 0
            p_neg, p_pos = probabilities[e.entry_id]
            writer.writerow(
                [e.entry_id, label, predictions[e.entry_id], _fmt(p_neg), _fmt(p_pos)]
            )
    return path


def write_overlays(
    prepared: PreparedData,
    entries: list[SettingEntry],
    preds: dict[str, np.ndarray],
    out_dir: str | Path,
    max_panels: int = 8,
) -> Path | None:
    if not entries:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = entries[:max_panels]
    panels = []
    for e in chosen:
        image = prepared.images[e.sample_id][0].numpy()
        panels.append((e.entry_id, image, e.heatmap.values, preds[e.entry_id]))
    path = out_dir / "overlays.png"
    save_overlay_grid(panels, path)
    return path


def gt_area_ratios(entries: list[SettingEntry]) -> float:
    return float(np.mean([area_ratio(e.heatmap.values, 0.0) for e in entries]))


def pred_area_ratios(preds: dict[str, np.ndarray]) -> float:
    return float(np.mean([area_ratio(p, 0.5) for p in preds.values()]))
