"""Gaze-supervised heatmap prediction and masked chest X-ray classification.

The pipeline turns radiologist gaze recordings into anatomic intensity
heatmaps, trains a prompt-conditioned adapter over a frozen backbone to
predict them, and classifies findings from the heatmap-masked image.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CXRImage,
    Fixation,
    GazeSample,
    Label,
    Setting,
    SynthConfig,
    Transcript,
    synth_dataset,
    synth_sample,
    validate_sample,
)
from .gazeprep import (  # noqa: F401
    DEFAULT_KEYWORDS,
    Heatmap,
    SplitSpec,
    build_setting,
    filter_fixations,
    find_keyword_sentences,
    make_prompt,
    mediastinum_to_heart,
    render_heatmap,
    select_interval,
    split_dataset,
)
from .config import PipelineConfig, load_config  # noqa: F401
