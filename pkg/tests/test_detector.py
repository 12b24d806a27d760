import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import numeric_grad, softmax_list
from pseudobox.boxes import Box, InvalidInputError
from pseudobox.data_io import TextEmbeddingTable
from pseudobox.detector import (PRESETS, DetectorParams, ShapeBackbone, TrainConfig, detection_loss,
                                extract_region_embedding, fine_tune, infer, load_checkpoint,
                                match_probability, pool_region, save_checkpoint, train)
from pseudobox.evaluation import generalized_eval
from pseudobox.pseudo_label import PseudoBoxLabel, region_merge_proposals
from pseudobox.vlm_core import VisualFeatures


def table3():
    return TextEmbeddingTable(["c1", "c2", "c3"], np.eye(3), np.zeros(3))


def flat_features(grid=(2, 2), dim=3, image_size=(8, 8), seed=0):
    V = np.random.default_rng(seed).standard_normal((grid[0] * grid[1], dim))
    return VisualFeatures(V, grid, image_size)


# -- region embedding -------------------------------------------------------------

def test_region_embedding_identity_projection_is_pooled_mean():
    feats = flat_features()
    params = DetectorParams(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(1))
    whole = extract_region_embedding(feats, Box(0, 0, 8, 8), params, "img")
    assert np.allclose(whole.r, feats.V.mean(axis=0))
    corner = extract_region_embedding(feats, Box(0, 0, 4, 4), params)
    assert np.allclose(corner.r, feats.V[0])


def test_region_embedding_uses_bias_and_projection():
    feats = flat_features()
    W = np.arange(6.0).reshape(2, 3)
    params = DetectorParams(W, np.array([1.0, -1.0]), np.zeros(3), np.zeros(1))
    r = extract_region_embedding(feats, Box(4, 4, 8, 8), params).r
    assert np.allclose(r, W @ feats.V[3] + [1.0, -1.0])


def test_pool_region_outside_grid_raises():
    with pytest.raises(InvalidInputError):
        pool_region(flat_features(), Box(20, 20, 30, 30))


# -- matching probabilities -------------------------------------------------------

def test_match_probability_uniform_at_zero():
    assert np.allclose(match_probability(np.zeros(3), table3()), 0.25)


def test_match_probability_literal_fixture():
    t = TextEmbeddingTable(["c1", "c2"], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    p = match_probability(np.array([1.0, 0.0]), t)
    e = math.e
    assert abs(p[1] - e / (e + 2)) < 1e-9
    assert abs(p[2] - 1 / (e + 2)) < 1e-9 and abs(p[0] - 1 / (e + 2)) < 1e-9


@given(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3))
def test_match_probability_sums_to_one_for_large_logits(r):
    p = match_probability(np.array(r), table3())
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) < 1e-9


@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(-50, 50))
def test_match_probability_invariant_to_uniform_logit_shift(r, shift):
    # an extra coordinate that every class row and bg share adds ``shift`` to each logit
    plain = TextEmbeddingTable(["a", "b", "c"], np.hstack([np.eye(3), np.zeros((3, 1))]), np.zeros(4))
    shared = TextEmbeddingTable(["a", "b", "c"], np.hstack([np.eye(3), np.ones((3, 1))]), [0, 0, 0, 1.0])
    p1 = match_probability(np.append(r, 0.0), plain)
    p2 = match_probability(np.append(r, shift), shared)
    assert np.allclose(p1, p2, atol=1e-9)


def test_normalized_matching_prefers_nearest_direction():
    rng = np.random.default_rng(5)
    C = rng.standard_normal((5, 4))
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    t = TextEmbeddingTable(list("abcde"), C, np.zeros(4))
    for _ in range(20):
        r = rng.standard_normal(4)
        p = match_probability(r, t, normalize=True, logit_scale=10.0)
        rh = r / np.linalg.norm(r)
        assert p[1:].argmax() == np.linalg.norm(C - rh, axis=1).argmin()


def test_subset_conditioning_matches_renormalized_full():
    r = np.array([0.3, -1.2, 2.0])
    full = match_probability(r, table3())
    sub = match_probability(r, table3().subset(["c1", "c3"]))
    keep = full[[0, 1, 3]]
    assert np.allclose(sub, keep / keep.sum(), atol=1e-12)


def test_dimension_mismatch_raises():
    with pytest.raises(InvalidInputError):
        match_probability(np.zeros(4), table3())


# -- loss and gradients -----------------------------------------------------------

def rand_params(rng, d_in=5, d_out=3):
    return DetectorParams(rng.standard_normal((d_out, d_in)) * 0.5, rng.standard_normal(d_out) * 0.1,
                          rng.standard_normal(d_in) * 0.3, rng.standard_normal(1) * 0.1)


def test_loss_uniform_matching_term():
    X = np.zeros((4, 5))
    params = DetectorParams(np.zeros((3, 5)), np.zeros(3), np.zeros(5), np.zeros(1))
    loss, _ = detection_loss(params, X, [1, 2, 3, 0], table3(), objectness_weight=0.0)
    assert loss == pytest.approx(math.log(4))


def test_loss_vanishes_for_confident_correct_predictions():
    X = np.eye(3)
    params = DetectorParams(np.eye(3) * 60, np.zeros(3), np.full(3, 60.0), np.zeros(1))
    loss, _ = detection_loss(params, X, [1, 2, 3], table3())
    assert loss < 1e-10


@pytest.mark.parametrize("normalize", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients_match_finite_differences(seed, normalize):
    rng = np.random.default_rng(seed)
    params = rand_params(rng)
    X = rng.standard_normal((6, 5))
    y = rng.integers(0, 4, size=6)
    t = TextEmbeddingTable(["c1", "c2", "c3"], rng.standard_normal((3, 3)), rng.standard_normal(3) * 0.1)
    _, grads = detection_loss(params, X, y, t, 0.7, normalize, 2.0)
    for g in DetectorParams.GROUPS:
        def f(v, g=g):
            p = params.copy()
            setattr(p, g, v)
            return detection_loss(p, X, y, t, 0.7, normalize, 2.0)[0]
        num = numeric_grad(f, getattr(params, g).copy(), 1e-6)
        assert np.allclose(grads[g], num, rtol=1e-5, atol=1e-7), g


def test_loss_rejects_unknown_target():
    params = rand_params(np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        detection_loss(params, np.zeros((1, 5)), [4], table3())


# -- training ---------------------------------------------------------------------

def toy_images():
    """Two tiny images whose quadrants carry distinct features per category."""
    rng = np.random.default_rng(0)
    return {f"i{k}": rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8) for k in range(3)}


def quadrant_labels():
    out = []
    for k, img in enumerate(["i0", "i1", "i2"]):
        out.append(PseudoBoxLabel(img, "c1", Box(0, 0, 8, 8), 1.0, (0, 1)))
        out.append(PseudoBoxLabel(img, "c2", Box(8, 8, 16, 16), 1.0, (1, 2)))
    return out


def extractor(img):
    return ShapeBackbone(grid=(4, 4))(img)


def quadrant_proposals(image_id, image):
    return [Box(8, 0, 16, 8), Box(0, 8, 8, 16)]


def test_training_reduces_loss():
    cfg = TrainConfig(lr=0.05, batch_size=8, iterations=60, momentum=0.9)
    _, hist = train(quadrant_labels(), toy_images(), table3(), cfg, extractor, quadrant_proposals,
                    return_history=True)
    assert np.mean(hist.losses[-10:]) < np.mean(hist.losses[:10])
    assert hist.target_categories == {"c1", "c2"}


def test_training_is_deterministic_and_leaves_table_untouched():
    t = table3()
    before = (t.C.copy(), t.bg.copy())
    cfg = TrainConfig(iterations=30, seed=4)
    a = train(quadrant_labels(), toy_images(), t, cfg, extractor, quadrant_proposals)
    b = train(quadrant_labels(), toy_images(), t, cfg, extractor, quadrant_proposals)
    assert a.allclose(b)
    assert np.array_equal(t.C, before[0]) and np.array_equal(t.bg, before[1])


def test_learning_rate_drop_scales_update_norm():
    labels = [PseudoBoxLabel("i0", "c1", Box(0, 0, 8, 8), 1.0, (0, 1))]
    cfg = TrainConfig(lr=1e-6, batch_size=1, iterations=20, milestones=(10,), lr_factor=0.1,
                      momentum=0.0, weight_decay=0.0)
    _, hist = train(labels, toy_images(), table3(), cfg, extractor, None, return_history=True)
    assert hist.lrs[9] == pytest.approx(1e-6) and hist.lrs[10] == pytest.approx(1e-7)
    assert hist.update_norms[10] / hist.update_norms[9] == pytest.approx(0.1, rel=1e-3)


def test_training_without_positives_raises():
    labels = [PseudoBoxLabel("i0", "zebra", Box(0, 0, 8, 8), 1.0, (0, 1))]
    with pytest.raises(InvalidInputError):
        train(labels, toy_images(), table3(), TrainConfig(iterations=5), extractor)
    with pytest.raises(InvalidInputError):
        train([], toy_images(), table3(), TrainConfig(iterations=5), extractor)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(lr=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(milestones=(0.9, 0.5))
    assert set(PRESETS) == {"desk", "paper-scale"}


def test_finetune_zero_iterations_is_identity():
    params = rand_params(np.random.default_rng(0), d_in=12)
    gt = {"i0": [(Box(0, 0, 8, 8), "c1")]}
    out = fine_tune(params, gt, toy_images(), table3(), ["c1"], TrainConfig(iterations=0), extractor)
    assert out.allclose(params) and out is not params


def test_finetune_never_targets_novel():
    params = DetectorParams.init(12, 3)
    gt = {"i0": [(Box(0, 0, 8, 8), "c1"), (Box(8, 8, 16, 16), "c3")]}
    _, hist = fine_tune(params, gt, toy_images(), table3(), ["c1", "c2"], TrainConfig(iterations=5),
                        extractor, quadrant_proposals, return_history=True)
    assert hist.target_categories == {"c1"}


# -- inference --------------------------------------------------------------------

def test_infer_examples():
    feats = flat_features(dim=3)
    params = DetectorParams(np.eye(3) * 50, np.zeros(3), np.zeros(3), np.zeros(1))
    box = Box(0, 0, 4, 4)
    dets = infer(feats, [box], ["c1", "c2", "c3"], params, table3(), "img")
    dom = int(np.argmax(feats.V[0]))
    if feats.V[0, dom] > 0:
        assert dets and dets[0].category == f"c{dom + 1}"
    assert infer(feats, [box], ["c1"], params, table3(), threshold=1.01) == []
    with pytest.raises(InvalidInputError):
        infer(feats, [box], [], params, table3())


def test_infer_duplicate_boxes_collapse():
    V = np.tile([5.0, 0, 0], (4, 1))
    feats = VisualFeatures(V, (2, 2), (8, 8))
    params = DetectorParams(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(1))
    dets = infer(feats, [Box(0, 0, 8, 8)] * 3, ["c1", "c2"], params, table3())
    assert len(dets) == 1 and dets[0].category == "c1"


# -- checkpoints and backbone -----------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = rand_params(np.random.default_rng(2))
    cfg = TrainConfig(lr=0.02, milestones=(5, 9), seed=7)
    save_checkpoint(tmp_path / "c.json", params, cfg, 9, {"categories": ["c1"]})
    back, cfg2, doc = load_checkpoint(tmp_path / "c.json")
    assert back.allclose(params) and cfg2 == cfg
    assert doc["extra"]["categories"] == ["c1"] and doc["iterations"] == 9
    (tmp_path / "bad.json").write_text(json.dumps({"params": {}}))
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "bad.json")


def test_backbone_channels():
    img = np.full((32, 32, 3), 128, dtype=np.uint8)
    img[8:16, 8:16] = (255, 0, 0)
    bb = ShapeBackbone(grid=(4, 4))
    f = bb(img)
    assert f.V.shape == (16, bb.dim)
    cell = f.V[5]  # row 1, col 1 covers exactly the red block
    assert cell[0] == 1.0
    assert np.allclose(cell[1:4], [1.0, -1.0, -1.0])
    assert cell[4] == 1.0
    assert np.allclose(f.V[0, 1:8], 0.0)
    with pytest.raises(InvalidInputError):
        ShapeBackbone(grid=(64, 64))(img)


# -- small end-to-end: fine-tuning on base ground truth ------------------------

def test_finetune_does_not_hurt_base(small_world):
    _, manifest, table, _ = small_world
    images = {p.pair_id: p.image for p in manifest.pairs}
    props = {pid: region_merge_proposals(img).boxes for pid, img in images.items()}
    bb = ShapeBackbone()
    train_ids = [p.pair_id for p in manifest.pairs_in("train")]
    gt_train = {i: manifest.ground_truth[i] for i in train_ids}
    labels = [PseudoBoxLabel(i, c, b, 1.0, (k, k + 1)) for i in train_ids
              for k, (b, c) in enumerate(gt_train[i])]
    cfg = TrainConfig(iterations=600)
    params = train(labels, images, table, cfg, bb, lambda i, im: props[i])
    tuned = fine_tune(params, gt_train, images, table, manifest.base, TrainConfig(iterations=200, lr=0.005),
                      bb, lambda i, im: props[i])
    gt = manifest.gt_set("test")

    def base_map(p):
        dets = []
        for i in gt.images:
            dets += infer(bb(images[i]), props[i], table.categories, p, table, i)
        return generalized_eval(dets, gt).base_map

    assert base_map(tuned) >= base_map(params) - 1e-9
