"""Declarative run configuration: defaults, JSON loading, and hashing.

Every run is driven by one ``PipelineConfig``. Checkpoints record the
config hash so that evaluation refuses to mix incompatible artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import AdapterConfig
from .backbone import BackboneDims
from .data import Setting, SynthConfig
from .gazeprep import SplitSpec
from .losses import LossWeights

THREADS_ENV_VAR = "GAZE_FOCUS_THREADS"


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer and loop settings (decoupled-weight-decay Adam)."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    iterations: int = 2000
    val_every: int = 200
    clip_gradients: bool = False
    max_grad_norm: float = 1.0
    stage2_lr: float = 1e-3
    stage2_iterations: int = 1000

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("lr must be positive, batch_size and iterations at least 1")


@dataclass(frozen=True)
class DataSettings:
    """Where samples come from: a directory on disk or the generator."""

    data_dir: str | None = None
    prepared_dir: str | None = None
    synth_count: int = 40
    radius: float = 150.0
    render_scale: int = 2
    keywords_file: str | None = None
    mask_source: str = "predicted"  # or "ground_truth" for stage-2 masking

    def __post_init__(self) -> None:
        if self.mask_source not in ("predicted", "ground_truth"):
            raise ValueError(f"mask_source must be predicted|ground_truth, got {self.mask_source!r}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    setting: Setting = Setting.M
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSettings = field(default_factory=DataSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneDims = field(default_factory=BackboneDims)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    loss_eps: float = 1e-4
    split: SplitSpec = field(default_factory=SplitSpec)


def _asdict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = _asdict(value)
        elif isinstance(value, Setting):
            out[f.name] = value.value
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def config_to_dict(config: PipelineConfig) -> dict:
    return _asdict(config)


def config_hash(config: PipelineConfig) -> str:
    """Digest of everything that affects the computation.

    The output directory is excluded: artifacts stay loadable when a run
    directory is renamed, and reruns into different directories are the
    same experiment.
    """
    payload = config_to_dict(config)
    payload.pop("out_dir", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "data": DataSettings,
    "synth": SynthConfig,
    "backbone": BackboneDims,
    "adapter": AdapterConfig,
    "train": TrainSettings,
    "loss": LossWeights,
    "split": SplitSpec,
}


def _build_section(cls, payload: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} option(s): {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        if isinstance(value, list):
            value = tuple(value)
        coerced[f.name] = value
    return cls(**coerced)


def config_from_dict(payload: dict) -> PipelineConfig:
    """Build a validated config from a plain dict (e.g. parsed JSON)."""
    payload = dict(payload)
    kwargs = {}
    if "setting" in payload:
        kwargs["setting"] = Setting(payload.pop("setting"))
    for scalar in ("seed", "out_dir", "loss_eps"):
        if scalar in payload:
            kwargs[scalar] = payload.pop(scalar)
    for name, cls in _SECTIONS.items():
        if name in payload:
            kwargs[name] = _build_section(cls, payload.pop(name))
    if payload:
        raise ValueError(f"unknown config section(s): {sorted(payload)}")
    return PipelineConfig(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(config: PipelineConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True))


def configure_threads() -> int:
    """Apply the GAZE_FOCUS_THREADS cap (default 1 for reproducibility)."""
    import torch

    threads = int(os.environ.get(THREADS_ENV_VAR, "1"))
    threads = max(1, threads)
    torch.set_num_threads(threads)
    return threads
