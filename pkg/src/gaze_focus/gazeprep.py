"""Ground-truth heatmap construction from gaze recordings.

The semi-automatic pipeline: find transcript sentences mentioning the target
anatomy, take everything dictated up to the end of the last such sentence,
drop fixations outside the anatomic mask, and render the survivors as a
duration-weighted, truncated-Gaussian intensity field normalized to [0, 1].
Also houses the setting builder (C/L/R/M) and the balanced splitter.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    Fixation,
    GazeSample,
    Label,
    SETTING_TARGETS,
    Setting,
    Transcript,
    save_heatmap_file,
)

#: Keyword groups per setting. Each group is conjunctive: all of its terms
#: must co-occur (whole-word, case-insensitive) within a single sentence.
DEFAULT_KEYWORDS: dict[Setting, list[list[str]]] = {
    Setting.C: [["cardiomegaly"], ["enlarged", "cardiac"]],
    Setting.L: [["left", "lung"], ["left", "base"], ["left", "lobe"], ["left", "hemithorax"]],
    Setting.R: [["right", "lung"], ["right", "base"], ["right", "lobe"], ["right", "hemithorax"]],
}

PROMPT_PREFIX = "diagnosis of"

_PROMPT_TARGETS = {
    "left_lung": "left lung",
    "right_lung": "right lung",
    "heart": "heart",
}


@dataclass(frozen=True)
class Heatmap:
    """Dense intensity field over the image grid, values in [0, 1]."""

    values: np.ndarray
    role: str = "ground_truth"  # or "predicted"


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios plus class balancing; ratios must sum to 1."""

    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    balance: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios {self.ratios} must sum to 1")
        if any(r < 0 for r in self.ratios):
            raise ValueError("split ratios must be non-negative")


@dataclass(frozen=True)
class SettingEntry:
    """One training/evaluation unit produced by the setting builder."""

    sample_id: str
    setting: Setting
    prompt_target: str
    label: Label
    heatmap: Heatmap

    @property
    def entry_id(self) -> str:
        return f"{self.sample_id}:{self.setting.value}"


def load_keyword_table(path: str | Path) -> dict[Setting, list[list[str]]]:
    """Read a keyword table from JSON: {"C": [["cardiomegaly"], ...], ...}."""
    payload = json.loads(Path(path).read_text())
    table = {}
    for key, groups in payload.items():
        setting = Setting(key)
        table[setting] = [[str(t).lower() for t in g] for g in groups]
        if not table[setting]:
            raise ValueError(f"keyword table entry for {key} is empty")
    return table


def find_keyword_sentences(
    transcript: Transcript, keywords: Sequence[Sequence[str]]
) -> list[int]:
    """Indices of sentences matching any keyword group, sorted ascending.

    Matching is case-insensitive on whole words; a group matches only when
    all of its terms occur within the same sentence.
    """
    patterns = [
        [re.compile(r"\b" + re.escape(term) + r"\b", re.IGNORECASE) for term in group]
        for group in keywords
    ]
    hits = []
    for idx, sentence in enumerate(transcript):
        for group in patterns:
            if all(p.search(sentence.text) for p in group):
                hits.append(idx)
                break
    return hits


def select_interval(
    transcript: Transcript, match_indices: Sequence[int]
) -> tuple[float, float] | None:
    """Time window [0, e] where e ends the highest-index matching sentence.

    Returns None when nothing matched (the sample is then excluded from the
    setting). The window always starts at 0 so that the reader's very first
    glance is retained.
    """
    if not match_indices:
        return None
    last = max(match_indices)
    if last < 0 or last >= len(transcript):
        raise IndexError(f"sentence index {last} out of range for transcript of length {len(transcript)}")
    return (0.0, transcript.sentences[last].t_end)


def filter_fixations(
    fixations: Sequence[Fixation],
    interval: tuple[float, float],
    mask: np.ndarray,
) -> list[Fixation]:
    """Keep fixations that start inside the window and land on the mask.

    Coordinates are rounded to the nearest pixel for the mask test; points
    off the grid or on a zero pixel are dropped. A fixation straddling the
    window end is kept with its duration clipped to the window.
    """
    start, end = interval
    h, w = mask.shape
    kept: list[Fixation] = []
    for fx in fixations:
        if not fx.t_start < end:
            continue
        ix = int(math.floor(fx.x + 0.5))
        iy = int(math.floor(fx.y + 0.5))
        if not (0 <= ix < w and 0 <= iy < h) or not mask[iy, ix]:
            continue
        t0 = max(fx.t_start, start)
        t1 = min(fx.t_end, end)
        if t1 <= t0:
            continue
        if t0 == fx.t_start and t1 == fx.t_end:
            kept.append(fx)
        else:
            kept.append(Fixation(x=fx.x, y=fx.y, t_start=t0, t_end=t1))
    return kept


def render_heatmap(
    fixations: Sequence[Fixation],
    width: int,
    height: int,
    radius: float = 150.0,
) -> Heatmap:
    """Duration-weighted truncated-Gaussian intensity field, peak 1.

    Each fixation contributes ``duration * exp(-d^2 / (2 sigma^2))`` with
    ``sigma = radius / 3``, cut to zero beyond ``radius`` pixels from its
    (clipped) center. The summed field is divided by its maximum; an empty
    or all-zero field stays all-zero. Fixations are accumulated in a
    canonical order so the output is bit-identical under input permutation.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    field_ = np.zeros((height, width), dtype=np.float64)
    sigma = radius / 3.0
    denom = 2.0 * sigma * sigma
    ordered = sorted(fixations, key=lambda f: (f.x, f.y, f.t_start, f.t_end))
    for fx in ordered:
        cx = min(max(fx.x, 0.0), width - 1.0)
        cy = min(max(fx.y, 0.0), height - 1.0)
        x0 = max(0, int(math.ceil(cx - radius)))
        x1 = min(width - 1, int(math.floor(cx + radius)))
        y0 = max(0, int(math.ceil(cy - radius)))
        y1 = min(height - 1, int(math.floor(cy + radius)))
        if x0 > x1 or y0 > y1:
            continue
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        patch = fx.duration * np.exp(-d2 / denom)
        patch[d2 > radius * radius] = 0.0
        field_[y0 : y1 + 1, x0 : x1 + 1] += patch
    peak = field_.max()
    if peak > 0:
        field_ = field_ / peak
    return Heatmap(values=field_, role="ground_truth")


def mediastinum_to_heart(mediastinum_mask: np.ndarray) -> np.ndarray:
    """Derive a heart mask by zeroing the top third of the mask's extent.

    The vertical extent is the bounding row range of nonzero pixels; the
    number of rows removed is ceil(extent / 3).
    """
    rows = np.flatnonzero(mediastinum_mask.any(axis=1))
    if rows.size == 0:
        raise ValueError("mediastinum mask is empty")
    top, bottom = int(rows[0]), int(rows[-1])
    extent = bottom - top + 1
    n_zero = math.ceil(extent / 3)
    out = np.array(mediastinum_mask, copy=True)
    out[top : top + n_zero, :] = 0
    return out


def make_prompt(target: str, wordings: dict[str, str] | None = None) -> str:
    """Anatomical prompt string, e.g. "diagnosis of heart"."""
    table = dict(_PROMPT_TARGETS)
    if wordings:
        table.update(wordings)
    if target not in table:
        raise ValueError(
            f"unknown prompt target {target!r}; expected one of {sorted(_PROMPT_TARGETS)}"
        )
    return f"{PROMPT_PREFIX} {table[target]}"


def target_mask(sample: GazeSample, target: str) -> np.ndarray:
    """Anatomic mask for a prompt target; derives the heart when absent."""
    masks = sample.masks
    if target == "heart":
        return masks.heart if masks.heart is not None else mediastinum_to_heart(masks.mediastinum)
    return masks.named()[target]


def build_setting(
    samples: Sequence[GazeSample],
    setting: Setting,
    keyword_table: dict[Setting, list[list[str]]] | None = None,
    radius: float = 150.0,
    render_scale: int = 2,
) -> list[SettingEntry]:
    """Run keyword -> interval -> mask filter -> render for one setting.

    Samples without a keyword match or labeled absent are excluded. The
    merged setting M is the union of the per-setting entries, each keeping
    its own prompt target and origin setting. Heatmaps are rendered at
    ``render_scale`` times the image resolution and block-averaged back
    down, so the stated radius applies to the finer grid.
    """
    table = keyword_table or DEFAULT_KEYWORDS
    if setting is Setting.M:
        entries: list[SettingEntry] = []
        for sub in (Setting.C, Setting.L, Setting.R):
            entries.extend(build_setting(samples, sub, table, radius, render_scale))
        return entries

    entries = []
    for sample in samples:
        if sample.labels.get(setting, Label.ABSENT) is Label.ABSENT:
            continue
        matches = find_keyword_sentences(sample.transcript, table[setting])
        interval = select_interval(sample.transcript, matches)
        if interval is None:
            continue
        target = SETTING_TARGETS[setting]
        mask = target_mask(sample, target)
        h, w = mask.shape
        kept = filter_fixations(sample.fixations, interval, mask)
        if render_scale > 1:
            # map pixel centers onto the finer grid: i -> i*s + (s-1)/2
            off = (render_scale - 1) / 2.0
            scaled = [
                Fixation(
                    x=fx.x * render_scale + off,
                    y=fx.y * render_scale + off,
                    t_start=fx.t_start,
                    t_end=fx.t_end,
                )
                for fx in kept
            ]
            hi = render_heatmap(scaled, w * render_scale, h * render_scale, radius)
            values = _block_mean(hi.values, render_scale)
        else:
            values = render_heatmap(kept, w, h, radius).values
        entries.append(
            SettingEntry(
                sample_id=sample.id,
                setting=setting,
                prompt_target=target,
                label=sample.labels[setting],
                heatmap=Heatmap(values=values, role="ground_truth"),
            )
        )
    return entries


def _block_mean(values: np.ndarray, factor: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def split_dataset(
    entries: Sequence[SettingEntry], spec: SplitSpec
) -> dict[str, list[SettingEntry]]:
    """Deterministic stratified 70/15/15 partition with optional balancing.

    With ``balance`` on, the majority class is down-sampled (uniform,
    seeded) to a 1:1 ratio first. Entries are then split per class so the
    split sizes hit the ratios exactly and each split's class counts differ
    by at most one.
    """
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    by_class: dict[Label, list[SettingEntry]] = {Label.NEGATIVE: [], Label.POSITIVE: []}
    for entry in entries:
        by_class[entry.label].append(entry)

    if spec.balance and all(by_class.values()):
        n_min = min(len(v) for v in by_class.values())
        for label, members in by_class.items():
            if len(members) > n_min:
                keep = rng.choice(len(members), size=n_min, replace=False)
                by_class[label] = [members[i] for i in sorted(keep)]

    names = ("train", "val", "test")
    splits: dict[str, list[SettingEntry]] = {name: [] for name in names}
    for class_idx, label in enumerate((Label.NEGATIVE, Label.POSITIVE)):
        members = list(by_class[label])
        perm = rng.permutation(len(members))
        members = [members[i] for i in perm]
        n = len(members)
        quotas = [r * n for r in spec.ratios]
        counts = [int(math.floor(q)) for q in quotas]
        remainder = n - sum(counts)
        # alternate the tiebreak direction between classes so near-ties
        # (e.g. .5/.5 fractional parts) land on different splits
        order = sorted(
            range(3),
            key=lambda i: (-(quotas[i] - counts[i]), i if class_idx % 2 == 0 else -i),
        )
        for i in order[:remainder]:
            counts[i] += 1
        offset = 0
        for name, cnt in zip(names, counts):
            splits[name].extend(members[offset : offset + cnt])
            offset += cnt

    if entries and any(len(v) == 0 for v in splits.values()):
        raise ValueError(
            "split produced an empty partition; need at least one sample per "
            f"split after balancing (got sizes {[len(splits[n]) for n in names]})"
        )
    for name in names:
        splits[name].sort(key=lambda e: e.entry_id)
    return splits


def write_prepared_dataset(
    out_dir: str | Path,
    splits: dict[str, list[SettingEntry]],
    setting: Setting,
    radius: float,
    seed: int,
) -> Path:
    """Persist heatmaps plus a manifest of ids, labels, prompts and splits."""
    out_dir = Path(out_dir)
    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for split_name in ("train", "val", "test"):
        for entry in splits[split_name]:
            fname = f"{entry.sample_id}_{entry.setting.value}.f32"
            save_heatmap_file(entry.heatmap.values, heat_dir / fname)
            records.append(
                {
                    "entry_id": entry.entry_id,
                    "sample_id": entry.sample_id,
                    "setting": entry.setting.value,
                    "prompt_target": entry.prompt_target,
                    "label": entry.label.value,
                    "split": split_name,
                    "heatmap_file": f"heatmaps/{fname}",
                }
            )
    manifest = {
        "setting": setting.value,
        "radius": radius,
        "seed": seed,
        "entries": records,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
