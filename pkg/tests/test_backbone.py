import pytest
import torch

from gaze_focus.backbone import (
    BackboneDims,
    FrozenBackbone,
    VisualFeatures,
    make_toy_backbone,
)


@pytest.fixture(scope="module")
def backbone(small_backbone_dims):
    return make_toy_backbone(0, small_backbone_dims)


def test_visual_taps_shape_224(backbone, small_backbone_dims):
    feats = backbone.visual_encode(torch.rand(1, 1, 224, 224))
    assert set(feats.taps) == {"stem", "3", "6", "9"}
    for tap in feats.taps.values():
        assert tuple(tap.shape) == (1, 14, 14, small_backbone_dims.channels)


def test_visual_taps_shape_160(backbone, small_backbone_dims):
    feats = backbone.visual_encode(torch.rand(1, 1, 160, 160))
    for tap in feats.taps.values():
        assert tuple(tap.shape) == (1, 160 // 16, 160 // 16, small_backbone_dims.channels)


def test_visual_encode_deterministic(backbone):
    image = torch.rand(1, 1, 64, 64)
    a = backbone.visual_encode(image)
    b = backbone.visual_encode(image.clone())
    for name in a.taps:
        assert torch.equal(a.taps[name], b.taps[name])


def test_same_seed_same_parameters(small_backbone_dims):
    a = make_toy_backbone(42, small_backbone_dims)
    b = make_toy_backbone(42, small_backbone_dims)
    assert a.parameter_checksum() == b.parameter_checksum()
    c = make_toy_backbone(43, small_backbone_dims)
    assert a.parameter_checksum() != c.parameter_checksum()


def test_visual_rejects_bad_size(backbone):
    with pytest.raises(ValueError, match="divisible"):
        backbone.visual_encode(torch.rand(1, 1, 60, 60))


def test_text_embedding_shape(backbone, small_backbone_dims):
    vec = backbone.text_encode("diagnosis of heart")
    assert vec.shape == (small_backbone_dims.text_dim,)
    assert torch.isfinite(vec).all()


def test_text_embedding_repeatable(backbone):
    a = backbone.text_encode("diagnosis of heart")
    b = backbone.text_encode("diagnosis of heart")
    assert torch.equal(a, b)


def test_text_embeddings_distinct_per_prompt(backbone):
    heart = backbone.text_encode("diagnosis of heart")
    left = backbone.text_encode("diagnosis of left lung")
    right = backbone.text_encode("diagnosis of right lung")
    assert not torch.equal(heart, left)
    assert not torch.equal(heart, right)
    assert not torch.equal(left, right)


def test_text_empty_prompt(backbone):
    with pytest.raises(ValueError, match="non-empty"):
        backbone.text_encode("   ")


def test_parameters_frozen(backbone):
    assert all(not p.requires_grad for p in backbone.parameters())


def test_no_gradient_flows_into_backbone(backbone, small_backbone_dims):
    before = backbone.parameter_checksum()
    image = torch.rand(1, 1, 64, 64, requires_grad=True)
    feats = backbone.visual_encode(image)
    # features are constants: using them downstream must not touch the backbone
    loss = sum(t.sum() for t in feats.taps.values())
    assert not loss.requires_grad
    assert backbone.parameter_checksum() == before


def test_visual_features_validates_taps():
    grid = torch.zeros(1, 2, 2, 4)
    with pytest.raises(ValueError, match="exactly"):
        VisualFeatures(taps={"stem": grid})


def test_dims_head_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        FrozenBackbone(0, BackboneDims(channels=30, visual_heads=4))
