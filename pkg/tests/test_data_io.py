import json

import numpy as np
import pytest

from pseudobox.boxes import Box, InvalidInputError
from pseudobox.data_io import (DEFAULT_CATEGORIES, RecordError, SynthConfig, TextEmbeddingTable,
                               attribute_vector, export_overlay, half_max_blocks, heat_color,
                               hidden_embedding_map, load_coco_annotations, load_embeddings, load_image,
                               load_pairs, load_pseudo_labels, overlay_array, save_embeddings,
                               save_image, save_pairs, save_pseudo_labels, shape_mask, synth_dataset,
                               write_dataset)
from pseudobox.evaluation import pseudo_label_quality
from pseudobox.pseudo_label import PseudoBoxLabel


# -- synthetic world --------------------------------------------------------------

def test_synth_is_deterministic():
    cfg = SynthConfig(n_images=6, seed=11)
    a, ta, _ = synth_dataset(cfg)
    b, tb, _ = synth_dataset(SynthConfig(n_images=6, seed=11))
    assert [p.caption for p in a.pairs] == [p.caption for p in b.pairs]
    assert all(np.array_equal(p.image, q.image) for p, q in zip(a.pairs, b.pairs))
    assert a.ground_truth == b.ground_truth
    assert np.array_equal(ta.C, tb.C)


def test_synth_zero_images():
    manifest, table, _ = synth_dataset(SynthConfig(n_images=0))
    assert manifest.pairs == [] and len(table.categories) == len(DEFAULT_CATEGORIES)


def test_synth_infeasible_packing_raises():
    with pytest.raises(InvalidInputError):
        synth_dataset(SynthConfig(n_images=1, image_size=20, object_size=14, objects_per_image=(3, 3)))


def test_synth_config_validation():
    with pytest.raises(InvalidInputError):
        SynthConfig(novel=["purple blob"])
    with pytest.raises(InvalidInputError):
        SynthConfig(drop_mentions=1.5)
    with pytest.raises(InvalidInputError):
        SynthConfig(embedding_dim=4)
    with pytest.raises(InvalidInputError):
        SynthConfig.from_dict({"n_imgs": 3})


def test_ground_truth_is_tight_mask_bound():
    manifest, _, _ = synth_dataset(SynthConfig(n_images=10, background_noise=0, seed=2))
    for pair in manifest.pairs:
        fg = np.any(pair.image != 128, axis=2)
        for box, _ in manifest.ground_truth[pair.pair_id]:
            sub = fg[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)]
            ys, xs = np.nonzero(sub)
            assert (ys.min(), xs.min()) == (0, 0)
            assert (ys.max() + 1, xs.max() + 1) == (box.height, box.width)


def test_novel_held_out_of_training_images(small_world):
    _, manifest, _, _ = small_world
    for pid in (p.pair_id for p in manifest.pairs_in("train")):
        assert not {c for _, c in manifest.ground_truth[pid]} & set(manifest.novel)
    assert manifest.pairs_in("test")


def test_drop_mentions_changes_only_captions():
    a, _, _ = synth_dataset(SynthConfig(n_images=8, seed=1))
    b, _, _ = synth_dataset(SynthConfig(n_images=8, seed=1, drop_mentions=1.0))
    assert all(np.array_equal(p.image, q.image) for p, q in zip(a.pairs, b.pairs))
    vocab = a.vocabulary()
    from pseudobox.pseudo_label import match_vocabulary, normalize_text
    assert all(not match_vocabulary(normalize_text(p.caption), vocab) for p in b.pairs)


def test_embedding_map_is_linear_in_attributes(small_world):
    """Least squares on base categories alone recovers the map and predicts novel embeddings."""
    cfg, manifest, table, _ = small_world
    attrs = {n: attribute_vector(c, s) for n, s, c in cfg.categories}
    idx = {c: i for i, c in enumerate(table.categories)}
    A = np.stack([attrs[c] for c in manifest.base])
    Y = np.stack([table.C[idx[c]] for c in manifest.base])
    E_hat, *_ = np.linalg.lstsq(A, Y, rcond=None)
    assert np.abs(A @ E_hat - Y).max() < 1e-6
    for c in manifest.novel:
        assert np.allclose(attrs[c] @ E_hat, table.C[idx[c]], atol=1e-6)


def test_hidden_map_is_isometric():
    E = hidden_embedding_map(10, 3)
    assert np.allclose(E.T @ E, np.eye(E.shape[1]))
    with pytest.raises(InvalidInputError):
        hidden_embedding_map(4, 0)


def test_shape_masks_have_exact_bounds():
    for shape in ("circle", "square", "triangle"):
        m = shape_mask(shape, 3, 5, 10, 32, 32)
        ys, xs = np.nonzero(m)
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (3, 5, 13, 15)


# -- pairs ------------------------------------------------------------------------

def test_pairs_round_trip(tmp_path, small_world):
    _, manifest, table, _ = small_world
    write_dataset(manifest, table, tmp_path)
    back = list(load_pairs(tmp_path / "pairs.jsonl"))
    assert [p.pair_id for p in back] == [p.pair_id for p in manifest.pairs]
    assert all(np.array_equal(p.image, q.image) and p.caption == q.caption
               for p, q in zip(back, manifest.pairs))
    for name in ("pairs_train.jsonl", "pairs_test.jsonl", "gt_train.json", "gt_test.json",
                 "vocab.jsonl", "embeddings.json", "manifest.json"):
        assert (tmp_path / name).exists()


def test_pairs_empty_file_and_unicode(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert list(load_pairs(tmp_path / "e.jsonl")) == []
    save_image(np.zeros((4, 4, 3), dtype=np.uint8), tmp_path / "x.png")
    save_pairs([{"pair_id": "é", "image_path": "x.png", "caption": "un cercle rouge à gauche ☃"}],
               tmp_path / "u.jsonl")
    (p,) = load_pairs(tmp_path / "u.jsonl")
    assert p.caption == "un cercle rouge à gauche ☃" and p.pair_id == "é"


def test_missing_image_names_pair(tmp_path):
    save_pairs([{"pair_id": "gone", "image_path": "nope.png", "caption": "x"}], tmp_path / "m.jsonl")
    with pytest.raises(RecordError) as info:
        list(load_pairs(tmp_path / "m.jsonl"))
    assert info.value.record_id == "gone"
    assert list(load_pairs(tmp_path / "m.jsonl", skip_missing=True)) == []


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    save_image(img, tmp_path / "i.png")
    assert np.array_equal(load_image(tmp_path / "i.png"), img)


# -- COCO -------------------------------------------------------------------------

def coco(**over):
    doc = {"images": [{"id": 1, "file_name": "images/a.png"}],
           "annotations": [{"id": 7, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]}],
           "categories": [{"id": 1, "name": "red circle", "split": "novel"}]}
    doc.update(over)
    return doc


def test_coco_minimal(tmp_path):
    (tmp_path / "g.json").write_text(json.dumps(coco()))
    gt = load_coco_annotations(tmp_path / "g.json")
    assert gt.annotations == {"a": [(Box(10, 20, 40, 60), "red circle")]}
    assert gt.novel == {"red circle"} and not gt.base


def test_coco_errors(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps(coco(images=[{"id": 1, "file_name": "a"}, {"id": 1, "file_name": "b"}])))
    with pytest.raises(InvalidInputError, match="duplicate"):
        load_coco_annotations(p)
    p.write_text(json.dumps(coco(categories=[{"id": 2, "name": "x"}])))
    with pytest.raises(InvalidInputError, match="annotation 7"):
        load_coco_annotations(p)
    p.write_text(json.dumps({"images": []}))
    with pytest.raises(InvalidInputError):
        load_coco_annotations(p)


def test_written_coco_matches_manifest(tmp_path, small_world):
    _, manifest, table, _ = small_world
    write_dataset(manifest, table, tmp_path)
    gt = load_coco_annotations(tmp_path / "gt_test.json")
    expected = manifest.gt_set("test")
    assert gt.annotations == expected.annotations
    assert gt.novel == set(manifest.novel)


# -- pseudo labels and embeddings -------------------------------------------------

def labels():
    return [PseudoBoxLabel("b", "red circle", Box(1, 2, 3, 4), 0.5, (1, 3)),
            PseudoBoxLabel("a", "blue square", Box(0, 0, 10.5, 8), 2.25, (0, 2))]


def test_pseudo_labels_round_trip(tmp_path):
    save_pseudo_labels(labels(), tmp_path / "l.jsonl")
    back = load_pseudo_labels(tmp_path / "l.jsonl")
    assert back == sorted(labels(), key=PseudoBoxLabel.sort_key)
    (tmp_path / "e.jsonl").write_text("")
    assert load_pseudo_labels(tmp_path / "e.jsonl") == []


def test_pseudo_labels_keep_full_precision(tmp_path):
    lab = PseudoBoxLabel("a", "c", Box(0.1, 1 / 3, 2 / 3, 0.9), 1 / 7, (0, 1))
    save_pseudo_labels([lab], tmp_path / "l.jsonl")
    assert load_pseudo_labels(tmp_path / "l.jsonl") == [lab]


def test_pseudo_labels_schema_error(tmp_path):
    (tmp_path / "l.jsonl").write_text('{"pair_id": "a", "category": "c", "box": [0, 0, 1, 1]}\n')
    with pytest.raises(RecordError, match=":1:"):
        load_pseudo_labels(tmp_path / "l.jsonl")


def test_embeddings_round_trip(tmp_path):
    t = TextEmbeddingTable(["a", "b"], [[1.0, 2.0], [3.0, 1 / 3]], [0.0, 0.5])
    save_embeddings(t, tmp_path / "e.json")
    back = load_embeddings(tmp_path / "e.json")
    assert back.categories == t.categories
    assert np.array_equal(back.C, t.C) and np.array_equal(back.bg, t.bg)


def test_pseudo_label_quality_against_written_ground_truth(tmp_path, small_world):
    _, manifest, table, _ = small_world
    gt = manifest.gt_set()
    perfect = [PseudoBoxLabel(pid, c, b, 1.0, (k, k + 1))
               for pid, anns in manifest.ground_truth.items() for k, (b, c) in enumerate(anns)]
    q = pseudo_label_quality(perfect, gt)
    assert q["precision"] == 1.0 and q["recall"] == 1.0


# -- overlays ---------------------------------------------------------------------

def test_overlay_dimensions_and_zero_map():
    img = np.full((32, 48, 3), 90, dtype=np.uint8)
    out = overlay_array(img, np.zeros((4, 4)))
    assert out.shape == (32, 48, 3)
    assert np.array_equal(out, img)


def test_overlay_max_cell_full_opacity_and_half_max_rule():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    g = np.zeros((2, 2))
    g[0, 0], g[0, 1], g[1, 0] = 4.0, 1.0, 2.0
    assert np.allclose(half_max_blocks(g), [[1.0, 0.0], [0.5, 0.0]])
    out = overlay_array(img, g)
    assert tuple(out[2, 2]) == heat_color(1.0)
    assert tuple(out[2, 12]) == (0, 0, 0)
    assert tuple(out[12, 2]) == tuple(int(round(0.5 * v)) for v in heat_color(0.5))


def test_overlay_draws_selected_box(tmp_path):
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    path = export_overlay(img, np.zeros((2, 2)), None, Box(2, 2, 10, 10), tmp_path / "o.png")
    arr = load_image(path)
    assert tuple(arr[2, 5]) == (255, 0, 0) and tuple(arr[5, 5]) == (0, 0, 0)
