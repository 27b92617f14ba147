import numpy as np
import pytest
from matplotlib import colormaps

from gaze_focus.metrics import MetricsReport
from gaze_focus.render import (
    OVERLAY_ALPHA,
    blend_overlay,
    render_overlay,
    save_ablation_figure,
    save_metrics_figure,
    save_overlay_grid,
)


def test_zero_heatmap_tints_with_cmap_floor(rng):
    image = rng.random((16, 16))
    out = blend_overlay(image, np.zeros((16, 16)))
    zero_color = np.asarray(colormaps["viridis"](0.0)[:3])
    expected = (1 - OVERLAY_ALPHA) * image[..., None] + OVERLAY_ALPHA * zero_color
    assert np.allclose(out, expected)


def test_peak_pixel_blend_formula(rng):
    image = rng.random((8, 8))
    heat = np.zeros((8, 8))
    heat[3, 4] = 1.0
    out = blend_overlay(image, heat, alpha=0.4)
    top_color = np.asarray(colormaps["viridis"](1.0)[:3])
    expected = (1 - 0.4) * image[3, 4] + 0.4 * top_color
    assert np.allclose(out[3, 4], expected)


def test_overlay_bytes_deterministic(tmp_path, rng):
    image = rng.random((16, 16))
    heat = rng.random((16, 16))
    a = render_overlay(image, heat, tmp_path / "a.png")
    b = render_overlay(image, heat, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()


def test_overlay_shape_mismatch(tmp_path):
    with pytest.raises(ValueError, match="disagree"):
        render_overlay(np.zeros((4, 4)), np.zeros((5, 5)), tmp_path / "x.png")


def test_metrics_figure_written(tmp_path):
    report = MetricsReport(
        aggregates={"fgIoU": 0.4, "bgIoU": 0.9, "fwIoU": 0.85,
                    "mSSIM": 0.7, "mPSNR": 18.0, "mL1": 0.05, "mL2": 0.01},
        accuracy=0.75,
    )
    path = save_metrics_figure(report, tmp_path / "m.png")
    assert path.exists() and path.stat().st_size > 0


def test_ablation_figure_written(tmp_path):
    rows = [
        {"variant": "a", "fwIoU": 0.8, "mL1": 0.1},
        {"variant": "b", "fwIoU": 0.9, "mL1": 0.05},
    ]
    path = save_ablation_figure(rows, ["fwIoU", "mL1"], "variant", tmp_path / "a.png", "t")
    assert path.exists() and path.stat().st_size > 0


def test_overlay_grid_written(tmp_path, rng):
    panels = [
        ("one", rng.random((32, 32)), rng.random((32, 32)), rng.random((32, 32))),
        ("two", rng.random((32, 32)), rng.random((32, 32)), rng.random((32, 32))),
    ]
    path = save_overlay_grid(panels, tmp_path / "grid.png")
    assert path.exists() and path.stat().st_size > 0
