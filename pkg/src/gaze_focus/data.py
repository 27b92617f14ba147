"""Domain types, on-disk formats, and the synthetic gaze-study generator.

A gaze study ("sample") bundles a chest radiograph, the fixation sequence
recorded while a radiologist read it, the dictated transcript with sentence
timestamps, anatomic segmentation masks, and per-setting finding labels.
Real recordings are restricted data, so this module also ships a seeded
generator that produces format-identical synthetic studies for development
and testing.

On-disk layout of a dataset: one sub-directory per sample id containing
``image.png`` (8- or 16-bit grayscale), ``fixations.csv``,
``transcript.json``, ``masks/<region>.png`` (1-bit), and ``labels.json``.
Dense heatmaps are stored as little-endian float32 row-major ``.f32`` blobs
with a ``{width, height}`` JSON sidecar.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

PATCH_SIZE = 16

MASK_REGIONS = ("left_lung", "right_lung", "mediastinum", "heart")


class DataFormatError(ValueError):
    """Raised when an input file violates the documented format."""


class Setting(str, Enum):
    """Diagnostic subsets: cardiomegaly, left lung, right lung, merged."""

    C = "C"
    L = "L"
    R = "R"
    M = "M"


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    ABSENT = "absent"


#: Anatomic target read for each non-merged setting.
SETTING_TARGETS = {
    Setting.C: "heart",
    Setting.L: "left_lung",
    Setting.R: "right_lung",
}

#: Yes/no question answered by the classifier in each setting.
SETTING_QUESTIONS = {
    Setting.C: "Is there cardiomegaly?",
    Setting.L: "Is there a finding (excluding cardiomegaly) in the left lung of the image?",
    Setting.R: "Is there a finding (excluding cardiomegaly) in the right lung of the image?",
    Setting.M: "Is there a finding in the masked image?",
}


@dataclass(frozen=True)
class CXRImage:
    """Grayscale radiograph with intensities in [0, 1]."""

    pixels: np.ndarray  # (H, W) float64

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Fixation:
    """One gaze dwell: continuous pixel coordinates plus a time interval."""

    x: float
    y: float
    t_start: float
    t_end: float

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class Sentence:
    text: str
    t_start: float
    t_end: float


@dataclass(frozen=True)
class Transcript:
    """Dictated sentences, sorted by start time and non-overlapping."""

    sentences: tuple[Sentence, ...]

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)


@dataclass(frozen=True)
class AnatomicMaskSet:
    """Binary segmentation masks on the image grid (values in {0, 1})."""

    left_lung: np.ndarray
    right_lung: np.ndarray
    mediastinum: np.ndarray
    heart: np.ndarray | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {
            "left_lung": self.left_lung,
            "right_lung": self.right_lung,
            "mediastinum": self.mediastinum,
        }
        if self.heart is not None:
            out["heart"] = self.heart
        return out


@dataclass(frozen=True)
class GazeSample:
    """One complete gaze study."""

    id: str
    image: CXRImage
    fixations: tuple[Fixation, ...]
    transcript: Transcript
    masks: AnatomicMaskSet
    labels: dict[Setting, Label]

    def participates(self, setting: Setting) -> bool:
        if setting is Setting.M:
            return any(self.participates(s) for s in (Setting.C, Setting.L, Setting.R))
        return self.labels.get(setting, Label.ABSENT) is not Label.ABSENT


# ---------------------------------------------------------------------------
# image / mask / heatmap files
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> CXRImage:
    """Load an 8- or 16-bit grayscale PNG and rescale intensities to [0, 1].

    Rejects color images and images whose sides are not divisible by the
    patch size (16).
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"image file does not exist: {path}")
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
        elif img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            raise DataFormatError(
                f"{path}: expected 8- or 16-bit grayscale raster, got mode {img.mode!r}"
            )
    h, w = arr.shape
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise DataFormatError(
            f"{path}: image dimensions {w}x{h} must be divisible by the patch size {PATCH_SIZE}"
        )
    return CXRImage(pixels=arr)


def save_image(image: CXRImage, path: str | Path, bits: int = 8) -> None:
    """Write a CXRImage as an 8- or 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 8:
        arr = np.rint(image.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    elif bits == 16:
        arr = np.rint(image.pixels * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported bit depth {bits}")


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("1"), dtype=np.uint8)
    return arr


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0)).save(path)


def save_heatmap_file(values: np.ndarray, path: str | Path) -> None:
    """Write a dense field as little-endian float32 row-major plus sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype="<f4")
    path.write_bytes(arr.tobytes())
    h, w = arr.shape
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"width": int(w), "height": int(h)}))


def load_heatmap_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise DataFormatError(f"missing sidecar metadata for heatmap {path}")
    meta = json.loads(sidecar.read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    w, h = int(meta["width"]), int(meta["height"])
    if raw.size != w * h:
        raise DataFormatError(
            f"{path}: payload holds {raw.size} values, sidecar says {w}x{h}"
        )
    return raw.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# fixation / transcript / label files
# ---------------------------------------------------------------------------

FIXATION_COLUMNS = ("x", "y", "t_start", "t_end")


def load_fixations(path: str | Path) -> list[Fixation]:
    """Parse a comma-delimited fixation table with header x,y,t_start,t_end.

    Rows are returned in file order. A malformed row (wrong arity, bad
    number, or a non-increasing time interval) fails with its row number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in FIXATION_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing fixation column(s) {missing}")
        fixations: list[Fixation] = []
        for row_idx, row in enumerate(reader, start=1):
            try:
                values = {c: float(row[c]) for c in FIXATION_COLUMNS}
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: malformed row {row_idx}: {exc}") from exc
            if not values["t_start"] < values["t_end"]:
                raise DataFormatError(
                    f"{path}: row {row_idx}: t_start {values['t_start']} must be "
                    f"strictly before t_end {values['t_end']}"
                )
            fixations.append(Fixation(**values))
    return fixations


def save_fixations(fixations: Sequence[Fixation], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIXATION_COLUMNS)
        for fx in fixations:
            writer.writerow([repr(fx.x), repr(fx.y), repr(fx.t_start), repr(fx.t_end)])


def make_transcript(sentences: Sequence[Sentence]) -> Transcript:
    """Sort sentences by start time and reject overlapping intervals."""
    ordered = tuple(sorted(sentences, key=lambda s: (s.t_start, s.t_end)))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.t_start < prev.t_end:
            raise DataFormatError(
                f"transcript sentences overlap: [{prev.t_start}, {prev.t_end}] "
                f"({prev.text!r}) and [{cur.t_start}, {cur.t_end}] ({cur.text!r})"
            )
    return Transcript(sentences=ordered)


def load_transcript(path: str | Path) -> Transcript:
    path = Path(path)
    payload = json.loads(path.read_text())
    records = payload["sentences"] if isinstance(payload, dict) else payload
    sentences = []
    for rec in records:
        sentences.append(
            Sentence(text=str(rec["text"]), t_start=float(rec["t_start"]), t_end=float(rec["t_end"]))
        )
    return make_transcript(sentences)


def save_transcript(transcript: Transcript, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "sentences": [
            {"text": s.text, "t_start": s.t_start, "t_end": s.t_end} for s in transcript
        ]
    }
    path.write_text(json.dumps(payload, indent=2))


def load_labels(path: str | Path) -> dict[Setting, Label]:
    payload = json.loads(Path(path).read_text())
    labels = {}
    for key, value in payload.items():
        labels[Setting(key)] = Label(value)
    return labels


def save_labels(labels: dict[Setting, Label], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {s.value: labels[s].value for s in (Setting.C, Setting.L, Setting.R)}
    path.write_text(json.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# sample directories
# ---------------------------------------------------------------------------


def save_sample(sample: GazeSample, root: str | Path) -> Path:
    """Write one sample under ``root/<id>/`` and return that directory."""
    base = Path(root) / sample.id
    base.mkdir(parents=True, exist_ok=True)
    save_image(sample.image, base / "image.png")
    save_fixations(sample.fixations, base / "fixations.csv")
    save_transcript(sample.transcript, base / "transcript.json")
    for name, mask in sample.masks.named().items():
        save_mask(mask, base / "masks" / f"{name}.png")
    save_labels(sample.labels, base / "labels.json")
    return base


def load_sample(sample_dir: str | Path) -> GazeSample:
    base = Path(sample_dir)
    masks = {}
    for name in MASK_REGIONS:
        mask_path = base / "masks" / f"{name}.png"
        if mask_path.exists():
            masks[name] = load_mask(mask_path)
        elif name != "heart":
            raise DataFormatError(f"{base}: missing required mask {name}")
    return GazeSample(
        id=base.name,
        image=load_image(base / "image.png"),
        fixations=tuple(load_fixations(base / "fixations.csv")),
        transcript=load_transcript(base / "transcript.json"),
        masks=AnatomicMaskSet(**masks),
        labels=load_labels(base / "labels.json"),
    )


def load_dataset(root: str | Path) -> list[GazeSample]:
    root = Path(root)
    sample_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    return [load_sample(p) for p in sample_dirs]


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_sample(sample: GazeSample) -> list[str]:
    """Return every invariant violation as a human-readable string.

    An empty list means the sample is valid. Never mutates its input.
    """
    violations: list[str] = []
    if not sample.id:
        violations.append("sample id is empty")

    px = sample.image.pixels
    if px.ndim != 2:
        violations.append(f"image must be 2-D, got shape {px.shape}")
    else:
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            violations.append("image intensities fall outside [0, 1]")
        if sample.image.height % PATCH_SIZE or sample.image.width % PATCH_SIZE:
            violations.append(
                f"image dimensions {sample.image.width}x{sample.image.height} "
                f"not divisible by patch size {PATCH_SIZE}"
            )

    for name, mask in sample.masks.named().items():
        if mask.shape != px.shape:
            violations.append(
                f"mask {name} has shape {mask.shape}, image has {px.shape}"
            )
        values = np.unique(mask)
        if not np.isin(values, [0, 1]).all():
            violations.append(f"mask {name} holds values outside {{0, 1}}")

    for i, fx in enumerate(sample.fixations):
        if not fx.t_start < fx.t_end:
            violations.append(f"fixation {i} has t_start >= t_end")

    sentences = sample.transcript.sentences
    for i, (prev, cur) in enumerate(zip(sentences, sentences[1:])):
        if cur.t_start < prev.t_start:
            violations.append(f"transcript not sorted at sentence {i + 1}")
        if cur.t_start < prev.t_end:
            violations.append(
                f"transcript sentences {i} and {i + 1} overlap "
                f"([{prev.t_start}, {prev.t_end}] vs [{cur.t_start}, {cur.t_end}])"
            )

    for setting, label in sample.labels.items():
        if setting is Setting.M:
            violations.append("labels must be per anatomic setting (C, L, R), not M")
        if not isinstance(label, Label):
            violations.append(f"label for {setting} is not a Label")
    return violations


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

#: Filler dictations free of every default keyword (no "left"/"right"/
#: "cardiac"/"enlarged"/"cardiomegaly" and no lung-region nouns).
FILLER_SENTENCES = (
    "the bones are unremarkable",
    "no acute osseous abnormality",
    "the trachea is midline",
    "degenerative changes of the spine are noted",
    "the visualized upper abdomen is normal",
    "surgical clips project over the chest wall",
    "no displaced fracture is identified",
    "the costophrenic angles are sharp",
)

_POSITIVE_TEMPLATES = {
    Setting.C: (
        "there is moderate cardiomegaly",
        "cardiomegaly with an enlarged cardiac silhouette",
    ),
    Setting.L: (
        "there is an opacity in the left lung",
        "patchy consolidation at the left base",
    ),
    Setting.R: (
        "there is an opacity in the right lung",
        "patchy consolidation at the right base",
    ),
}

_NEGATIVE_TEMPLATES = {
    Setting.C: (
        "no evidence of cardiomegaly",
        "no cardiomegaly is seen",
    ),
    Setting.L: (
        "the left lung is clear",
        "no focal finding in the left lung",
    ),
    Setting.R: (
        "the right lung is clear",
        "no focal finding in the right lung",
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic study generator.

    Geometry fields are fractions of the image side. ``cluster_duration_frac``
    is the share of total dwell time forced onto the focus anatomy, which
    keeps every positive sample's gaze concentrated inside the labeled mask.
    """

    image_size: int = 224
    positive_rate: float = 0.5
    setting_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # C, L, R
    fixation_count: tuple[int, int] = (12, 20)
    cluster_spread: float = 0.045
    cluster_duration_frac: float = 0.8
    lesion_radius: float = 0.055
    lesion_contrast: float = 0.35
    dwell_contrast: float = 0.12
    noise_sigma: float = 0.02
    geometry_jitter: float = 0.08

    def __post_init__(self) -> None:
        if self.image_size % PATCH_SIZE:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {PATCH_SIZE}"
            )
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must lie in [0, 1]")
        if self.cluster_duration_frac <= 0.5 or self.cluster_duration_frac > 1.0:
            raise ValueError("cluster_duration_frac must lie in (0.5, 1]")


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return inside.astype(np.uint8)


def _point_in_ellipse(rng: np.random.Generator, cx: float, cy: float, rx: float, ry: float) -> tuple[float, float]:
    # uniform over the ellipse via rejection on the unit disk
    while True:
        u, v = rng.uniform(-1.0, 1.0, size=2)
        if u * u + v * v <= 1.0:
            return cx + u * rx, cy + v * ry


def _radical_inverse(n: int, base: int) -> float:
    """Van der Corput sequence member; spreads label draws evenly so that
    contiguous seed ranges hit the configured rates closely."""
    inv = 0.0
    denom = 1.0
    n = n + 1  # skip the degenerate 0 term
    while n > 0:
        denom *= base
        n, digit = divmod(n, base)
        inv += digit / denom
    return inv


def synth_sample(seed: int, config: SynthConfig | None = None) -> GazeSample:
    """Generate one deterministic synthetic gaze study.

    Each sample participates in exactly one setting (its "focus"): that
    setting's label is positive with ``config.positive_rate``, the other two
    are absent. The transcript mentions exactly the focus keywords, and the
    share ``cluster_duration_frac`` of total fixation time lands inside the
    focus anatomy mask.
    """
    config = config or SynthConfig()
    rng = np.random.default_rng(np.random.PCG64(seed))
    size = config.image_size
    s = float(size)

    weights = np.asarray(config.setting_weights, dtype=np.float64)
    cumulative = np.cumsum(weights / weights.sum())
    focus = (Setting.C, Setting.L, Setting.R)[
        int(np.searchsorted(cumulative, _radical_inverse(seed, 3), side="right"))
    ]
    positive = _radical_inverse(seed, 2) < config.positive_rate

    jit = config.geometry_jitter

    def jitter(base: float) -> float:
        return base * (1.0 + rng.uniform(-jit, jit))

    # Anatomy layout: lungs flank a central mediastinum, heart sits low-central.
    left = (jitter(0.30) * s, jitter(0.48) * s, jitter(0.14) * s, jitter(0.27) * s)
    right = (jitter(0.70) * s, jitter(0.48) * s, jitter(0.14) * s, jitter(0.27) * s)
    medi = (jitter(0.50) * s, jitter(0.45) * s, jitter(0.09) * s, jitter(0.30) * s)
    heart = (jitter(0.52) * s, jitter(0.60) * s, jitter(0.12) * s, jitter(0.15) * s)

    masks = AnatomicMaskSet(
        left_lung=_ellipse_mask(size, *left),
        right_lung=_ellipse_mask(size, *right),
        mediastinum=_ellipse_mask(size, *medi),
        heart=_ellipse_mask(size, *heart),
    )
    target_mask = masks.named()[SETTING_TARGETS[focus]]
    target_geom = {"heart": heart, "left_lung": left, "right_lung": right}[
        SETTING_TARGETS[focus]
    ]

    # Dwell center: where the radiologist concentrates. Positives get a
    # bright lesion there; negatives a faint tissue bump so the location
    # stays visually grounded.
    gx, gy, grx, gry = target_geom
    dwell = _point_in_ellipse(rng, gx, gy, 0.55 * grx, 0.55 * gry)

    yy, xx = np.mgrid[0:size, 0:size]
    cxn = (xx - 0.5 * s) / (0.5 * s)
    cyn = (yy - 0.5 * s) / (0.5 * s)
    image = 0.55 - 0.25 * (cxn**2 + cyn**2)
    image = image - 0.10 * masks.left_lung - 0.10 * masks.right_lung
    image = image + 0.12 * masks.mediastinum
    image = image + 0.02 * np.sin(yy / s * rng.uniform(28.0, 36.0) + rng.uniform(0, 6.28))
    contrast = config.lesion_contrast if positive else config.dwell_contrast
    r_lesion = config.lesion_radius * s
    d2 = (xx - dwell[0]) ** 2 + (yy - dwell[1]) ** 2
    image = image + contrast * np.exp(-d2 / (2.0 * (0.5 * r_lesion) ** 2))
    image = image + rng.normal(0.0, config.noise_sigma, size=(size, size))
    image = np.clip(image, 0.0, 1.0)
    # quantize to the 8-bit grid so PNG round-trips are bit-exact
    image = np.rint(image * 255.0) / 255.0

    n_fix = int(rng.integers(config.fixation_count[0], config.fixation_count[1] + 1))
    n_cluster = max(1, math.ceil(0.8 * n_fix))
    n_noise = n_fix - n_cluster

    spread = config.cluster_spread * s
    cluster_pts = []
    for _ in range(n_cluster):
        for _attempt in range(20):
            px_, py_ = rng.normal(dwell, spread)
            ix, iy = int(math.floor(px_ + 0.5)), int(math.floor(py_ + 0.5))
            if 0 <= ix < size and 0 <= iy < size and target_mask[iy, ix]:
                cluster_pts.append((px_, py_))
                break
        else:
            cluster_pts.append(dwell)
    noise_pts = [
        (rng.uniform(-0.02 * s, 1.02 * s), rng.uniform(-0.02 * s, 1.02 * s))
        for _ in range(n_noise)
    ]

    durations = rng.uniform(0.15, 0.6, size=n_fix)
    cluster_dur = durations[:n_cluster].sum()
    noise_dur = durations[n_cluster:].sum()
    if n_noise and cluster_dur > 0:
        # rescale so the cluster holds exactly its configured duration share
        f = config.cluster_duration_frac
        durations[:n_cluster] *= (f / (1.0 - f)) * noise_dur / cluster_dur

    points = cluster_pts + noise_pts
    order = rng.permutation(n_fix)
    fixations = []
    t = 0.0
    for idx in order:
        dur = float(durations[idx])
        x_, y_ = points[idx]
        fixations.append(Fixation(x=float(x_), y=float(y_), t_start=t, t_end=t + dur))
        t = t + dur + float(rng.uniform(0.01, 0.05))

    templates = (_POSITIVE_TEMPLATES if positive else _NEGATIVE_TEMPLATES)[focus]
    keyword_sentence = templates[int(rng.integers(len(templates)))]
    n_fill = int(rng.integers(2, 5))
    fillers = [FILLER_SENTENCES[i] for i in rng.choice(len(FILLER_SENTENCES), size=n_fill, replace=False)]
    texts = fillers + [keyword_sentence]
    total_time = (fixations[-1].t_end if fixations else 1.0) + 1.0
    bounds = np.linspace(0.0, total_time, len(texts) + 1)
    sentences = [
        Sentence(text=txt, t_start=float(bounds[i]), t_end=float(bounds[i + 1]))
        for i, txt in enumerate(texts)
    ]

    labels = {st: Label.ABSENT for st in (Setting.C, Setting.L, Setting.R)}
    labels[focus] = Label.POSITIVE if positive else Label.NEGATIVE

    return GazeSample(
        id=f"synth-{seed:010d}",
        image=CXRImage(pixels=image),
        fixations=tuple(fixations),
        transcript=make_transcript(sentences),
        masks=masks,
        labels=labels,
    )


def synth_dataset(base_seed: int, count: int, config: SynthConfig | None = None) -> list[GazeSample]:
    """Generate ``count`` samples seeded ``base_seed .. base_seed+count-1``."""
    return [synth_sample(base_seed + i, config) for i in range(count)]
