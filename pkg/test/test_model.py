import math

import numpy as np
import pytest
from conftest import make_image

from msdd.autodiff import ShapeError, Tensor, add, gradcheck, mean, no_grad
from msdd.config_models import BackboneConfig, ModelConfig
from msdd.model import MSDDModel, class_features, pooled_embeddings
from msdd.model.backbone import FeatureExtractor, image_tensor, working_feature
from msdd.model.metric_head import (
    BACKGROUND,
    PrototypeBank,
    cla_loss,
    cla_loss_from_logits,
    classify,
    compute_prototype,
    embed,
    sq_euclid,
    total_loss,
)
from msdd.model.proposals import roi_pool
from msdd.model.reweight import (
    ReweightNet,
    apply_reweighting,
    class_reweighting_vector,
    encode_support,
    identity_vector,
    reweight_input,
)
from msdd.training.episodes import Task, episode_loss

SMALL = BackboneConfig(stem_channels=4, stage_channels=(8, 8, 8), fpn_channels=8)


def vec(values):
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.float64)


@pytest.fixture()
def defect():
    return make_image("c0-00000", 0, [(8, 12, 28, 24), (40, 40, 56, 60)])


# -----------------------------------------------------------------------------
# Backbone
# -----------------------------------------------------------------------------


def test_image_tensor():
    x = image_tensor(np.array([[0, 255], [51, 102]], dtype=np.uint8))
    assert x.shape == (1, 2, 2)
    np.testing.assert_allclose(x.data[0], [[0.0, 1.0], [0.2, 0.4]], rtol=1e-6)
    with pytest.raises(ShapeError):
        image_tensor(np.zeros((1, 2, 2), dtype=np.uint8))


def test_pyramid_and_fusion_shapes(defect):
    extractor = FeatureExtractor(SMALL, np.random.default_rng(0))
    x = image_tensor(defect.pixels)
    pyramid = extractor.extract_pyramid(x)
    assert pyramid.c2.shape == (8, 32, 32)
    assert pyramid.c3.shape == (8, 16, 16)
    assert pyramid.c4.shape == (8, 8, 8)

    fused = extractor.fuse(pyramid)
    assert fused.p2.shape == (8, 32, 32)
    assert fused.p3.shape == (8, 16, 16)
    assert fused.p4.shape == (8, 8, 8)
    # The direct path computes exactly the fused P3
    np.testing.assert_array_equal(extractor.feature(x).data, working_feature(fused).data)


def test_fuse_topdown_selected_levels(defect):
    extractor = FeatureExtractor(SMALL, np.random.default_rng(0))
    pyramid = extractor.extract_pyramid(image_tensor(defect.pixels))
    laterals = [extractor.lateral_project(level, c) for level, c in zip((2, 3, 4), pyramid.levels())]
    fused = extractor.fuse_topdown(laterals, levels={"p3"})
    assert fused.p2 is None and fused.p4 is None
    with pytest.raises(ShapeError):
        extractor.fuse_topdown([laterals[0], laterals[0], laterals[2]])
    with pytest.raises(ValueError):
        working_feature(extractor.fuse_topdown(laterals, levels={"p2"}))


def test_extractor_rejects_bad_extents():
    extractor = FeatureExtractor(SMALL, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        extractor.extract_pyramid(image_tensor(np.zeros((60, 64), dtype=np.uint8)))


def test_fusion_switch(defect):
    x = image_tensor(defect.pixels)
    fused = FeatureExtractor(SMALL, np.random.default_rng(0), feature_fusion=True).feature(x)
    plain = FeatureExtractor(SMALL, np.random.default_rng(0), feature_fusion=False).feature(x)
    assert fused.shape == plain.shape
    assert not np.array_equal(fused.data, plain.data)


# -----------------------------------------------------------------------------
# Reweighting
# -----------------------------------------------------------------------------


def test_reweight_input_mask(defect):
    x = reweight_input(defect.pixels, defect.boxes)
    assert x.shape == (2, 64, 64)
    assert x.data[1].sum() == sum((x2 - x1) * (y2 - y1) for x1, y1, x2, y2 in defect.boxes)
    assert x.data[1, 12, 8] == 1 and x.data[1, 24, 8] == 0
    with pytest.raises(ValueError):
        reweight_input(defect.pixels, [])


def test_fresh_reweight_net_is_near_identity(defect):
    net = ReweightNet(8, np.random.default_rng(0))
    w = encode_support(net, defect.pixels, defect.boxes, 0).w
    assert w.shape == (8,)
    assert np.abs(w.data - 1).max() < 0.1


def test_class_vector_is_support_mean(defect):
    net = ReweightNet(8, np.random.default_rng(0))
    other = make_image("c0-00001", 0, [(20, 20, 36, 30)])
    support = [(defect.pixels, defect.boxes), (other.pixels, other.boxes)]
    mean_vector = class_reweighting_vector(net, support, 0).w.data
    singles = [encode_support(net, pixels, boxes, 0).w.data for pixels, boxes in support]
    np.testing.assert_allclose(mean_vector, (singles[0] + singles[1]) / 2, rtol=1e-6)
    with pytest.raises(ValueError):
        class_reweighting_vector(net, [], 0)


def test_identity_reweighting_is_exact(defect):
    features = FeatureExtractor(SMALL, np.random.default_rng(0)).feature(image_tensor(defect.pixels))
    reweighted = apply_reweighting(features, identity_vector(8, 0))
    np.testing.assert_array_equal(reweighted.features.data, features.data)
    assert reweighted.class_id == 0


# -----------------------------------------------------------------------------
# Metric head
# -----------------------------------------------------------------------------


def test_classify_known_probabilities():
    bank = PrototypeBank([compute_prototype([vec([0.0, 0.0])], 0), compute_prototype([vec([1.0, 0.0])], 1)])
    probs = classify({0: vec([0.0, 0.0]), 1: vec([0.0, 0.0])}, bank)
    np.testing.assert_allclose(probs.probs.data, [0.731059, 0.268941], atol=1e-6)
    assert probs.argmax() == 0
    assert cla_loss(probs, 1).item() == pytest.approx(-math.log(0.268941), rel=1e-5)


def test_equidistant_prototypes_cost_ln2():
    bank = PrototypeBank([compute_prototype([vec([1.0])], 0), compute_prototype([vec([-1.0])], BACKGROUND)])
    probs = classify({0: vec([0.0]), BACKGROUND: vec([0.0])}, bank)
    assert cla_loss(probs, 0).item() == pytest.approx(math.log(2))
    assert cla_loss_from_logits(probs, BACKGROUND).item() == pytest.approx(math.log(2))


def test_classification_invariant_to_common_shift():
    rng = np.random.default_rng(0)
    protos = [rng.standard_normal(4) for _ in range(3)]
    query = rng.standard_normal(4)
    shift = rng.standard_normal(4) * 10
    base = classify(
        {c: vec(query) for c in range(3)},
        PrototypeBank([compute_prototype([vec(p)], c) for c, p in enumerate(protos)]),
    )
    moved = classify(
        {c: vec(query + shift) for c in range(3)},
        PrototypeBank([compute_prototype([vec(p + shift)], c) for c, p in enumerate(protos)]),
    )
    np.testing.assert_allclose(base.probs.data, moved.probs.data, atol=1e-9)


def test_losses_agree_and_differentiate():
    bank = PrototypeBank([compute_prototype([vec([0.5, -0.2, 0.1])], 0)])
    bank.add(compute_prototype([vec([-0.3, 0.4, 0.0])], BACKGROUND))
    e0 = Tensor(np.array([0.2, 0.1, -0.4]), requires_grad=True, dtype=np.float64)
    eb = Tensor(np.array([-0.1, 0.3, 0.2]), requires_grad=True, dtype=np.float64)

    direct = cla_loss(classify({0: e0, BACKGROUND: eb}, bank), 0).item()
    stable = cla_loss_from_logits(classify({0: e0, BACKGROUND: eb}, bank), 0).item()
    assert direct == pytest.approx(stable, rel=1e-9)
    assert gradcheck(lambda a, b: cla_loss_from_logits(classify({0: a, BACKGROUND: b}, bank), 0), [e0, eb]) < 1e-6


def test_prototype_is_mean():
    prototype = compute_prototype([vec([1.0, 2.0]), vec([3.0, 6.0])], 4)
    np.testing.assert_allclose(prototype.c.data, [2.0, 4.0])
    assert prototype.support_count == 2
    with pytest.raises(ValueError):
        compute_prototype([], 4)


def test_prototype_bank():
    bank = PrototypeBank()
    bank.add(compute_prototype([vec([0.0])], BACKGROUND))
    bank.add(compute_prototype([vec([1.0])], 3))
    bank.add(compute_prototype([vec([2.0])], 1))
    assert bank.class_ids == [1, 3, BACKGROUND]
    assert bank.has_background and 3 in bank and len(bank) == 3
    with pytest.raises(ValueError):
        bank.add(compute_prototype([vec([5.0])], 1))
    with pytest.raises(ShapeError):
        bank.add(compute_prototype([vec([5.0, 1.0])], 7))
    with pytest.raises(ValueError):
        classify({1: vec([0.0])}, bank)


def test_embed_and_distance():
    pooled = Tensor(np.arange(8, dtype=np.float64).reshape(2, 2, 2), dtype=np.float64)
    np.testing.assert_array_equal(embed(pooled).data, np.arange(8))
    assert sq_euclid(vec([1.0, 2.0]), vec([4.0, 6.0])).item() == 25.0
    with pytest.raises(ShapeError):
        sq_euclid(vec([1.0]), vec([1.0, 2.0]))
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((2, 2, 3))))


def test_total_loss():
    assert total_loss(vec(0.25), vec(0.5)).item() == pytest.approx(0.75)
    with pytest.raises(ValueError):
        total_loss(vec(-0.1), vec(0.5))
    with pytest.raises(ShapeError):
        total_loss(vec([0.1, 0.2]), vec(0.5))


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


@pytest.fixture()
def small_config():
    return ModelConfig(backbone=SMALL, roi_size=2, proposals={"anchor_sides": (16, 32)})


def test_model_parameters(small_config):
    model = MSDDModel(small_config)
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    assert any(name.startswith("reweight.") for name in names)
    assert any(name.startswith("rpn.") for name in names)

    model.freeze_extractor()
    extractor = {p.name for p in model.extractor_parameters()}
    assert all(p.frozen == (p.name in extractor) for p in model.parameters())
    model.freeze_extractor(False)
    assert not any(p.frozen for p in model.parameters())


def test_model_without_reweighting(small_config, defect):
    model = MSDDModel(small_config.model_copy(update={"reweighting": False}))
    assert all(p.frozen for p in model.reweight.parameters())
    vector = model.reweighting_vector([(defect.pixels, defect.boxes)], 0)
    np.testing.assert_array_equal(vector.w.data, np.ones(8))


def test_state_dict_roundtrip(small_config):
    model, other = MSDDModel(small_config), MSDDModel(small_config.model_copy(update={"init_seed": 9}))
    assert model.fingerprint() != other.fingerprint()
    other.load_state_dict(model.state_dict())
    assert model.fingerprint() == other.fingerprint()

    state = model.state_dict()
    state.pop("rpn.conv.bias")
    with pytest.raises(ValueError):
        other.load_state_dict(state)
    state = model.state_dict()
    state["rpn.conv.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ShapeError):
        other.load_state_dict(state)
    state = model.state_dict()
    state["rpn.conv.bias"] = state["rpn.conv.bias"].astype(np.float64)
    with pytest.raises(TypeError):
        other.load_state_dict(state)


def test_model_forward_pieces(small_config, defect):
    model = MSDDModel(small_config)
    with no_grad():
        features = model.feature(defect.pixels)
        objectness, deltas = model.rpn_outputs(features)
        proposals = model.propose(features, objectness, deltas, defect.pixels.shape)
    assert features.shape == (8, 16, 16)
    assert objectness.shape == (16 * 16 * 2,)
    assert deltas.shape == (16 * 16 * 2, 4)
    assert len(proposals) <= small_config.proposals.post_nms_top
    assert model.anchors((16, 16)) is model.anchors((16, 16))

    vectors = {0: model.reweighting_vector([(defect.pixels, defect.boxes)], 0)}
    feats = class_features(features, vectors)
    assert set(feats) == {0, BACKGROUND}
    embeddings = pooled_embeddings(feats, defect.boxes[0], 4, 2)
    assert all(e.shape == (small_config.embedding_dim,) for e in embeddings.values())


def test_model_gradient_reaches_every_head(small_config, defect):
    """Finite differences through backbone, reweighting, pooling and the proposal head."""
    model = MSDDModel(small_config).astype(np.float64)
    inputs = [model.reweight.head.bias, model.rpn.objectness.bias, model.extractor.smooth[1].bias]
    target = Tensor(np.full(small_config.embedding_dim, 0.1), dtype=np.float64)

    def fn(*_):
        features = model.feature(defect.pixels)
        vector = model.reweighting_vector([(defect.pixels, defect.boxes)], 0)
        pooled = embed(roi_pool(apply_reweighting(features, vector), defect.boxes[0], 4, 2))
        objectness, _ = model.rpn_outputs(features)
        return add(sq_euclid(pooled, target), mean(objectness))

    assert gradcheck(fn, inputs) < 1e-4


def test_episode_loss_gradient_through_prototypes(small_config):
    """Finite differences of the full episode loss, prototypes and classification included."""
    proposals = small_config.proposals.model_copy(update={"score_min": 0.99})
    model = MSDDModel(small_config.model_copy(update={"proposals": proposals})).astype(np.float64)
    task = Task(
        class_ids=[0, 1],
        support={
            0: [make_image("c0-00000", 0, [(8, 8, 24, 24)])],
            1: [make_image("c1-00000", 1, [(36, 12, 56, 28)], fill=90)],
        },
        query=[make_image("c0-00001", 0, [(30, 30, 50, 46)]), make_image("c1-00001", 1, [(6, 34, 26, 54)], fill=90)],
    )
    inputs = [
        model.reweight.head.bias,
        model.extractor.laterals[2].bias,
        model.rpn.objectness.bias,
        model.rpn.deltas.bias,
    ]

    def fn(*_):
        # Fresh generator per call so every evaluation samples the same ROIs
        loss, _, _ = episode_loss(model, task, np.random.default_rng(0))
        return loss

    with no_grad():
        features = model.feature(task.query[0].pixels)
        assert model.propose(features, *model.rpn_outputs(features), (64, 64)) == []
    assert gradcheck(fn, inputs) < 1e-4
