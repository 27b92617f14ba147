import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from gaze_focus.data import (
    DataFormatError,
    Fixation,
    Label,
    Sentence,
    Setting,
    SynthConfig,
    load_fixations,
    load_heatmap_file,
    load_image,
    load_sample,
    load_transcript,
    make_transcript,
    save_heatmap_file,
    save_sample,
    synth_dataset,
    synth_sample,
    validate_sample,
)


# ---------------------------------------------------------------------- images


def test_load_image_all_zero(tmp_path):
    path = tmp_path / "zero.png"
    Image.fromarray(np.zeros((224, 224), dtype=np.uint8), mode="L").save(path)
    img = load_image(path)
    assert img.pixels.min() == img.pixels.max() == 0.0
    assert (img.width, img.height) == (224, 224)


def test_load_image_8bit_endpoint(tmp_path):
    arr = np.zeros((32, 32), dtype=np.uint8)
    arr[0, 0] = 255
    path = tmp_path / "max.png"
    Image.fromarray(arr, mode="L").save(path)
    assert load_image(path).pixels[0, 0] == 1.0


def test_load_image_16bit_midscale(tmp_path):
    arr = np.full((32, 32), 32768, dtype=np.uint16)
    path = tmp_path / "mid.png"
    Image.fromarray(arr).save(path)
    img = load_image(path)
    assert img.pixels[0, 0] == 32768 / 65535  # direct division oracle


def test_load_image_rejects_color(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8), mode="RGB").save(path)
    with pytest.raises(DataFormatError, match="grayscale"):
        load_image(path)


def test_load_image_rejects_bad_dims(tmp_path):
    path = tmp_path / "odd.png"
    Image.fromarray(np.zeros((30, 32), dtype=np.uint8), mode="L").save(path)
    with pytest.raises(DataFormatError, match="divisible by the patch size 16"):
        load_image(path)


def test_load_image_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match="does not exist"):
        load_image(tmp_path / "nope.png")


# ------------------------------------------------------------------- fixations


def test_load_fixations_direct_parse(tmp_path):
    path = tmp_path / "fx.csv"
    path.write_text("x,y,t_start,t_end\n100,50,0.0,0.3\n")
    fixations = load_fixations(path)
    assert len(fixations) == 1
    fx = fixations[0]
    assert (fx.x, fx.y) == (100.0, 50.0)
    assert fx.duration == pytest.approx(0.3)


def test_load_fixations_empty_after_header(tmp_path):
    path = tmp_path / "fx.csv"
    path.write_text("x,y,t_start,t_end\n")
    assert load_fixations(path) == []


def test_load_fixations_bad_interval_names_row(tmp_path):
    path = tmp_path / "fx.csv"
    path.write_text("x,y,t_start,t_end\n1,1,0.0,0.5\n2,2,0.9,0.4\n")
    with pytest.raises(DataFormatError, match="row 2"):
        load_fixations(path)


def test_load_fixations_missing_column(tmp_path):
    path = tmp_path / "fx.csv"
    path.write_text("x,y,t_start\n1,1,0.0\n")
    with pytest.raises(DataFormatError, match="t_end"):
        load_fixations(path)


# ------------------------------------------------------------------ transcript


def _write_transcript(path, records):
    path.write_text(json.dumps({"sentences": records}))


def test_load_transcript_two_sentences(tmp_path):
    path = tmp_path / "t.json"
    _write_transcript(path, [
        {"text": "a", "t_start": 0.0, "t_end": 1.5},
        {"text": "b", "t_start": 1.5, "t_end": 3.0},
    ])
    assert len(load_transcript(path)) == 2


def test_load_transcript_sorts(tmp_path):
    path = tmp_path / "t.json"
    _write_transcript(path, [
        {"text": "late", "t_start": 2.0, "t_end": 3.0},
        {"text": "early", "t_start": 0.0, "t_end": 1.0},
    ])
    transcript = load_transcript(path)
    assert [s.text for s in transcript] == ["early", "late"]


def test_load_transcript_overlap_error(tmp_path):
    path = tmp_path / "t.json"
    _write_transcript(path, [
        {"text": "a", "t_start": 0.0, "t_end": 2.0},
        {"text": "b", "t_start": 1.0, "t_end": 3.0},
    ])
    with pytest.raises(DataFormatError, match="overlap"):
        load_transcript(path)


# ------------------------------------------------------------------- generator


def test_synth_deterministic(small_synth_config):
    a = synth_sample(11, small_synth_config)
    b = synth_sample(11, small_synth_config)
    assert a.id == b.id
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert a.fixations == b.fixations
    assert a.transcript == b.transcript
    assert a.labels == b.labels
    for name, mask in a.masks.named().items():
        assert np.array_equal(mask, b.masks.named()[name])


def test_synth_positive_c_mentions_cardiomegaly(small_synth_config):
    found = 0
    for seed in range(60):
        sample = synth_sample(seed, small_synth_config)
        if sample.labels[Setting.C] is Label.POSITIVE:
            found += 1
            assert any("cardiomegaly" in s.text for s in sample.transcript)
    assert found > 0


def test_synth_positive_fraction_near_configured_rate(small_synth_config):
    samples = synth_dataset(0, 1000, small_synth_config)
    for setting in (Setting.C, Setting.L, Setting.R):
        participating = [s for s in samples if s.labels[setting] is not Label.ABSENT]
        positives = sum(1 for s in participating if s.labels[setting] is Label.POSITIVE)
        fraction = positives / len(participating)
        assert abs(fraction - small_synth_config.positive_rate) <= 0.05


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_synth_always_valid(seed):
    sample = synth_sample(seed, SynthConfig(image_size=64))
    assert validate_sample(sample) == []


def test_synth_lungs_disjoint(small_synth_config):
    for seed in range(10):
        masks = synth_sample(seed, small_synth_config).masks
        assert not np.logical_and(masks.left_lung, masks.right_lung).any()


def test_synth_positive_duration_clusters_in_mask(small_synth_config):
    checked = 0
    for seed in range(40):
        sample = synth_sample(seed, small_synth_config)
        for setting in (Setting.C, Setting.L, Setting.R):
            if sample.labels[setting] is not Label.POSITIVE:
                continue
            from gaze_focus.data import SETTING_TARGETS

            mask = sample.masks.named()[SETTING_TARGETS[setting]]
            total = sum(fx.duration for fx in sample.fixations)
            inside = 0.0
            for fx in sample.fixations:
                ix, iy = int(math.floor(fx.x + 0.5)), int(math.floor(fx.y + 0.5))
                if 0 <= ix < mask.shape[1] and 0 <= iy < mask.shape[0] and mask[iy, ix]:
                    inside += fx.duration
            assert inside / total >= 0.70
            checked += 1
    assert checked > 5


# ------------------------------------------------------------------ validation


def test_validate_sample_clean(small_synth_config):
    assert validate_sample(synth_sample(3, small_synth_config)) == []


def test_validate_sample_mask_dims(small_synth_config):
    import dataclasses

    sample = synth_sample(3, small_synth_config)
    bad_masks = dataclasses.replace(sample.masks, heart=np.zeros((8, 8), dtype=np.uint8))
    bad = dataclasses.replace(sample, masks=bad_masks)
    violations = validate_sample(bad)
    assert len(violations) == 1
    assert "heart" in violations[0]


def test_validate_sample_transcript_overlap(small_synth_config):
    import dataclasses

    sample = synth_sample(3, small_synth_config)
    overlapping = type(sample.transcript)(sentences=(
        Sentence("one", 0.0, 2.0),
        Sentence("two", 1.0, 3.0),
    ))
    bad = dataclasses.replace(sample, transcript=overlapping)
    assert any("overlap" in v for v in validate_sample(bad))


# ------------------------------------------------------------------ round trip


def test_sample_round_trip_bit_exact(tmp_path, small_synth_config):
    sample = synth_sample(21, small_synth_config)
    save_sample(sample, tmp_path)
    loaded = load_sample(tmp_path / sample.id)
    assert loaded.id == sample.id
    assert np.array_equal(loaded.image.pixels, sample.image.pixels)
    assert loaded.fixations == sample.fixations
    assert loaded.transcript == sample.transcript
    assert loaded.labels == sample.labels
    for name, mask in sample.masks.named().items():
        assert np.array_equal(loaded.masks.named()[name], mask)


def test_heatmap_file_round_trip(tmp_path, rng):
    values = rng.random((24, 40)).astype(np.float32)
    path = tmp_path / "h.f32"
    save_heatmap_file(values, path)
    out = load_heatmap_file(path)
    assert out.dtype == np.float32
    assert np.array_equal(out, values)


def test_heatmap_file_requires_sidecar(tmp_path):
    path = tmp_path / "h.f32"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(DataFormatError, match="sidecar"):
        load_heatmap_file(path)


def test_make_transcript_rejects_overlap():
    with pytest.raises(DataFormatError):
        make_transcript([Sentence("a", 0.0, 2.0), Sentence("b", 1.0, 3.0)])


def test_fixation_duration():
    assert Fixation(x=0, y=0, t_start=1.0, t_end=1.75).duration == pytest.approx(0.75)
