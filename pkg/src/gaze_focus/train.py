"""Two-stage training: heatmap adapter first, classifier head second.

Stage 1 minimizes the combined heatmap objective over the train split with
AdamW, validating periodically on frequency-weighted IoU and keeping both
the best and the final checkpoint. Stage 2 freezes everything from stage 1,
masks each image with its (predicted or ground-truth) heatmap, and trains
only the linear classification head on the frozen encoder's pooled
features. Batch order is derived from the seed, so single-threaded runs
are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapter import AnatomicAdapter
from .backbone import FrozenBackbone, make_toy_backbone
from .classifier import FindingClassifier
from .config import PipelineConfig, config_hash, config_to_dict
from .data import Label, load_dataset, synth_dataset
from .gazeprep import (
    DEFAULT_KEYWORDS,
    SettingEntry,
    build_setting,
    load_keyword_table,
    make_prompt,
    split_dataset,
)
from .losses import classifier_ce, combined_loss
from .metrics import fw_iou


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; carries diagnostics."""

    def __init__(self, iteration: int, batch_ids: list[str], components: dict[str, float]):
        self.iteration = iteration
        self.batch_ids = batch_ids
        self.components = components
        super().__init__(
            f"non-finite loss at iteration {iteration} "
            f"(components {components}, batch {batch_ids})"
        )


@dataclass
class PreparedData:
    """Tensorized splits plus cached frozen-backbone features."""

    splits: dict[str, list[SettingEntry]]
    images: dict[str, torch.Tensor]  # sample_id -> (1, H, W) float32
    text: dict[str, torch.Tensor]  # prompt target -> (E,)
    visual: dict[str, "object"]  # sample_id -> VisualFeatures
    heatmaps: dict[str, torch.Tensor]  # entry_id -> (H, W) float32

    def batch(self, entries: list[SettingEntry]) -> tuple[torch.Tensor, ...]:
        images = torch.stack([self.images[e.sample_id] for e in entries])
        targets = torch.stack([self.heatmaps[e.entry_id] for e in entries])
        text = torch.stack([self.text[e.prompt_target] for e in entries])
        return images, targets, text


def load_samples(config: PipelineConfig):
    if config.data.data_dir:
        return load_dataset(config.data.data_dir)
    return synth_dataset(config.seed, config.data.synth_count, config.synth)


def prepare_entries(config: PipelineConfig, samples=None) -> dict[str, list[SettingEntry]]:
    """Keyword/interval/mask/render pipeline plus the balanced split."""
    samples = samples if samples is not None else load_samples(config)
    table = (
        load_keyword_table(config.data.keywords_file)
        if config.data.keywords_file
        else DEFAULT_KEYWORDS
    )
    entries = build_setting(
        samples,
        config.setting,
        table,
        radius=config.data.radius,
        render_scale=config.data.render_scale,
    )
    return split_dataset(entries, config.split)


def prepare_data(
    config: PipelineConfig,
    backbone: FrozenBackbone,
    samples=None,
    splits: dict[str, list[SettingEntry]] | None = None,
) -> PreparedData:
    """Cache images, targets, prompts, and frozen visual features."""
    samples = samples if samples is not None else load_samples(config)
    if splits is None:
        splits = prepare_entries(config, samples)
    by_id = {s.id: s for s in samples}
    images: dict[str, torch.Tensor] = {}
    visual: dict[str, object] = {}
    heatmaps: dict[str, torch.Tensor] = {}
    text: dict[str, torch.Tensor] = {}
    for split_entries in splits.values():
        for entry in split_entries:
            if entry.sample_id not in images:
                arr = by_id[entry.sample_id].image.pixels.astype(np.float32)
                img = torch.from_numpy(arr)[None]
                images[entry.sample_id] = img
                visual[entry.sample_id] = backbone.visual_encode(img[None])
            heatmaps[entry.entry_id] = torch.from_numpy(
                entry.heatmap.values.astype(np.float32)
            )
            if entry.prompt_target not in text:
                text[entry.prompt_target] = backbone.text_encode(
                    make_prompt(entry.prompt_target)
                )
    return PreparedData(splits=splits, images=images, text=text, visual=visual, heatmaps=heatmaps)


def _stack_visual(prepared: PreparedData, entries: list[SettingEntry]):
    from .backbone import VisualFeatures

    taps = {}
    first = prepared.visual[entries[0].sample_id]
    for name in first.taps:
        taps[name] = torch.cat(
            [prepared.visual[e.sample_id].taps[name] for e in entries], dim=0
        )
    return VisualFeatures(taps=taps)


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int):
    """Endless seeded epoch shuffles, yielding batches of indices."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk):
                yield [int(i) for i in chunk]


def save_checkpoint(
    path: str | Path,
    module: torch.nn.Module,
    config: PipelineConfig,
    stage: str,
    iteration: int,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash(config),
        "stage": stage,
        "iteration": iteration,
        "seed": config.seed,
    }
    if extra:
        manifest.update(extra)
    torch.save({"state_dict": module.state_dict(), "manifest": manifest}, path)
    return path


def load_checkpoint(path: str | Path, module: torch.nn.Module, config: PipelineConfig) -> dict:
    """Restore parameters; refuses checkpoints from a different config."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    manifest = payload["manifest"]
    expect = config_hash(config)
    if manifest["config_hash"] != expect:
        raise ValueError(
            f"checkpoint {path} was produced under config {manifest['config_hash']}, "
            f"current config hashes to {expect}"
        )
    module.load_state_dict(payload["state_dict"])
    return manifest


@dataclass
class StageResult:
    best_path: Path
    final_path: Path
    history: list[dict] = field(default_factory=list)
    best_metric: float = float("-inf")


def validation_fwiou(
    adapter: AnatomicAdapter, prepared: PreparedData, entries: list[SettingEntry]
) -> float:
    if not entries:
        return float("nan")
    adapter.eval()
    scores = []
    with torch.no_grad():
        for entry in entries:
            images, targets, text = prepared.batch([entry])
            vis = _stack_visual(prepared, [entry])
            probs = torch.sigmoid(adapter(images, vis, text))[0].numpy()
            scores.append(fw_iou(probs > 0.5, targets[0].numpy() > 0))
    adapter.train()
    return float(np.mean(scores))


def train_heatmap(
    config: PipelineConfig,
    backbone: FrozenBackbone | None = None,
    prepared: PreparedData | None = None,
    out_dir: str | Path | None = None,
) -> StageResult:
    """Stage 1: fit the adapter to ground-truth heatmaps with AdamW."""
    backbone = backbone or make_toy_backbone(config.seed, config.backbone)
    prepared = prepared or prepare_data(config, backbone)
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    train_entries = prepared.splits["train"]
    if not train_entries:
        raise ValueError("no training entries; prepare a dataset first")

    adapter = AnatomicAdapter(
        config.adapter,
        backbone_channels=config.backbone.channels,
        text_dim=config.backbone.text_dim,
        seed=config.seed,
    )
    adapter.train()
    opt = torch.optim.AdamW(
        adapter.parameters(), lr=config.train.lr, weight_decay=config.train.weight_decay
    )
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    batches = _batch_indices(rng, len(train_entries), config.train.batch_size)

    result = StageResult(
        best_path=out_dir / "checkpoints" / "heatmap_best.pt",
        final_path=out_dir / "checkpoints" / "heatmap_final.pt",
    )
    best = float("-inf")
    for iteration in range(1, config.train.iterations + 1):
        idx = next(batches)
        batch_entries = [train_entries[i] for i in idx]
        images, targets, text = prepared.batch(batch_entries)
        vis = _stack_visual(prepared, batch_entries)
        logits = adapter(images, vis, text)
        loss, components = combined_loss(logits, targets, config.loss, config.loss_eps)
        if not torch.isfinite(loss):
            raise TrainingAborted(iteration, [e.entry_id for e in batch_entries], components)
        opt.zero_grad()
        loss.backward()
        if config.train.clip_gradients:
            torch.nn.utils.clip_grad_norm_(adapter.parameters(), config.train.max_grad_norm)
        opt.step()

        record = {"iteration": iteration, "loss": float(loss.detach()), **components}
        if iteration % config.train.val_every == 0 or iteration == config.train.iterations:
            val = validation_fwiou(adapter, prepared, prepared.splits["val"])
            record["val_fwIoU"] = val
            if not np.isnan(val) and val > best:
                best = val
                save_checkpoint(result.best_path, adapter, config, "heatmap", iteration,
                                {"val_fwIoU": val})
        result.history.append(record)

    save_checkpoint(result.final_path, adapter, config, "heatmap", config.train.iterations)
    if not result.best_path.exists():
        save_checkpoint(result.best_path, adapter, config, "heatmap", config.train.iterations)
    result.best_metric = best
    (out_dir / "heatmap_history.json").write_text(json.dumps(result.history, indent=2))
    return result


def predict_entry_heatmaps(
    adapter: AnatomicAdapter, prepared: PreparedData, entries: list[SettingEntry]
) -> dict[str, np.ndarray]:
    """Predicted probability heatmaps keyed by entry id."""
    adapter.eval()
    out = {}
    with torch.no_grad():
        for entry in entries:
            images, _, text = prepared.batch([entry])
            vis = _stack_visual(prepared, [entry])
            out[entry.entry_id] = torch.sigmoid(adapter(images, vis, text))[0].numpy()
    return out


def masked_features(
    classifier: FindingClassifier,
    prepared: PreparedData,
    entries: list[SettingEntry],
    heatmaps: dict[str, np.ndarray],
) -> torch.Tensor:
    feats = []
    with torch.no_grad():
        for entry in entries:
            image = prepared.images[entry.sample_id][0].numpy()
            masked = image * heatmaps[entry.entry_id]
            tensor = torch.from_numpy(masked.astype(np.float32))[None, None]
            feats.append(classifier.features(tensor)[0])
    return torch.stack(feats)


def train_classifier(
    config: PipelineConfig,
    heatmap_checkpoint: str | Path,
    backbone: FrozenBackbone | None = None,
    prepared: PreparedData | None = None,
    out_dir: str | Path | None = None,
    mask_source: str | None = None,
) -> StageResult:
    """Stage 2: train only the linear head on masked-image features.

    Masking uses stage-1 predictions by default; set
    ``data.mask_source = "ground_truth"`` (or pass ``mask_source``, which
    overrides the config without changing its hash, as the ablation runner
    does when comparing both sources against one stage-1 checkpoint) to
    mask with the rendered truth.
    """
    backbone = backbone or make_toy_backbone(config.seed, config.backbone)
    prepared = prepared or prepare_data(config, backbone)
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)

    adapter = AnatomicAdapter(
        config.adapter,
        backbone_channels=config.backbone.channels,
        text_dim=config.backbone.text_dim,
        seed=config.seed,
    )
    load_checkpoint(heatmap_checkpoint, adapter, config)
    adapter.eval()

    classifier = FindingClassifier(backbone, seed=config.seed + 2)
    train_entries = prepared.splits["train"]
    val_entries = prepared.splits["val"]
    source = mask_source or config.data.mask_source

    def entry_heatmaps(entries):
        if source == "ground_truth":
            return {e.entry_id: e.heatmap.values for e in entries}
        return predict_entry_heatmaps(adapter, prepared, entries)

    train_feats = masked_features(classifier, prepared, train_entries, entry_heatmaps(train_entries))
    classifier.set_feature_center(train_feats)
    train_labels = torch.tensor(
        [1 if e.label is Label.POSITIVE else 0 for e in train_entries], dtype=torch.long
    )
    val_feats = (
        masked_features(classifier, prepared, val_entries, entry_heatmaps(val_entries))
        if val_entries
        else None
    )
    val_labels = torch.tensor(
        [1 if e.label is Label.POSITIVE else 0 for e in val_entries], dtype=torch.long
    )

    opt = torch.optim.AdamW(
        classifier.trainable_parameters(),
        lr=config.train.stage2_lr,
        weight_decay=config.train.weight_decay,
    )
    rng = np.random.default_rng(np.random.PCG64(config.seed + 3))
    batches = _batch_indices(rng, len(train_entries), config.train.batch_size)

    result = StageResult(
        best_path=out_dir / "checkpoints" / "classifier_best.pt",
        final_path=out_dir / "checkpoints" / "classifier_final.pt",
    )
    best = float("-inf")
    for iteration in range(1, config.train.stage2_iterations + 1):
        idx = next(batches)
        logits = classifier.logits_from_features(train_feats[idx])
        loss = classifier_ce(logits, train_labels[idx])
        if not torch.isfinite(loss):
            raise TrainingAborted(iteration, [train_entries[i].entry_id for i in idx],
                                  {"ce": float(loss.detach())})
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"iteration": iteration, "loss": float(loss.detach())}
        if iteration % config.train.val_every == 0 or iteration == config.train.stage2_iterations:
            if val_feats is not None and len(val_entries):
                with torch.no_grad():
                    preds = classifier.logits_from_features(val_feats).argmax(dim=1)
                acc = float((preds == val_labels).float().mean())
                record["val_accuracy"] = acc
                if acc > best:
                    best = acc
                    save_checkpoint(result.best_path, classifier.head, config, "classifier",
                                    iteration, {"val_accuracy": acc})
        result.history.append(record)

    save_checkpoint(result.final_path, classifier.head, config, "classifier",
                    config.train.stage2_iterations, {"mask_source": source})
    if not result.best_path.exists():
        save_checkpoint(result.best_path, classifier.head, config, "classifier",
                        config.train.stage2_iterations)
    result.best_metric = best
    (out_dir / "classifier_history.json").write_text(json.dumps(result.history, indent=2))
    return result


def write_run_manifest(
    config: PipelineConfig, out_dir: str | Path, stage: str, iterations: int,
    final_metrics: dict | None = None,
) -> Path:
    """Atomically record what was run and with which config."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "seed": config.seed,
        "version": __version__,
        "stage": stage,
        "iterations": iterations,
        "final_metrics": final_metrics or {},
    }
    path = out_dir / f"manifest_{stage}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)
    return path
