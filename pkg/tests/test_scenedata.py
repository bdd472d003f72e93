import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecap3d.errors import FormatError, ValidationError
from densecap3d.scenedata import (EOS, SOS, UNK, Vocabulary, augment_scene, build_vocabulary, decode_tokens,
                                  encode_caption, load_dataset, load_embeddings, load_scene, save_embeddings,
                                  save_scene, scene_from_dict, scene_to_dict, tokenize)


def obj(i, **kw):
    raw = {"id": i, "center": [float(i), 0.0, 0.5], "lengths": [1.0, 1.0, 1.0], "semantic_class": 2,
           "feature": [0.01 * i] * 128, "captions": ["a chair."]}
    raw.update(kw)
    return raw


def write(tmp_path, raw, name="scene.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_minimal_scene_loads(tmp_path):
    scene = load_scene(write(tmp_path, {"scene_id": "s0", "objects": [obj(0)]}))
    assert len(scene.objects) == 1
    assert scene.objects[0].captions == ("a chair.",)
    assert scene.detections is None


def test_feature_width_127_rejected(tmp_path):
    path = write(tmp_path, {"scene_id": "s", "objects": [obj(0, feature=[0.0] * 127)]})
    with pytest.raises(ValidationError, match=r"objects\[0\]\.feature"):
        load_scene(path)


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        scene_from_dict({"scene_id": "s", "objects": [obj(3), obj(3)]})


@pytest.mark.parametrize("patch, where", [
    ({"lengths": [1.0, 0.0, 1.0]}, "lengths"),
    ({"semantic_class": 18}, "semantic_class"),
    ({"orientation_labels": {"1": 180.0}}, "orientation_labels"),
    ({"orientation_labels": {"7": 10.0}}, "orientation_labels"),
    ({"center": [0.0, float("inf"), 0.0]}, "center"),
])
def test_invariant_violations_name_the_field(patch, where):
    with pytest.raises(ValidationError) as info:
        scene_from_dict({"scene_id": "s", "objects": [obj(0, **patch), obj(1)]})
    assert where in str(info.value)


def test_points_width_enforced():
    with pytest.raises(ValidationError, match="points"):
        scene_from_dict({"scene_id": "s", "objects": [obj(0)], "points": [[0.0] * 134]})
    scene = scene_from_dict({"scene_id": "s", "objects": [obj(0)], "points": [[0.0] * 135] * 2})
    assert scene.points.shape == (2, 135)


def test_too_many_detections_rejected():
    det = {"center": [0, 0, 0], "lengths": [1, 1, 1], "feature": [0.0] * 128, "objectness": 0.9}
    with pytest.raises(ValidationError, match="detections"):
        scene_from_dict({"scene_id": "s", "objects": [], "detections": [det] * 257})


def test_bad_json_is_format_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        load_scene(path)


def test_round_trip_is_field_exact(tmp_path, small_scenes):
    rng = np.random.default_rng(0)
    raw = scene_to_dict(small_scenes[0])
    raw["points"] = rng.normal(size=(3, 135)).tolist()
    raw["detection_loss"] = 0.125
    raw["detections"] = [{"center": [0.1, 0.2, 0.3], "lengths": [1, 2, 3], "feature": [0.5] * 128,
                          "objectness": 0.75, "semantic_class": 4}]
    scene = scene_from_dict(raw)
    save_scene(scene, tmp_path / "x.json")
    assert load_scene(tmp_path / "x.json") == scene


def test_load_dataset_sorted(tmp_path):
    for name in ("b", "a", "c"):
        write(tmp_path, {"scene_id": name, "objects": [obj(0)]}, f"{name}.json")
    assert [s.scene_id for s in load_dataset(tmp_path)] == ["a", "b", "c"]


# -- vocabulary ----------------------------------------------------------------

def test_min_count_two_keeps_frequent_tokens():
    vocab = build_vocabulary(["a a b"], min_count=2)
    assert vocab.tokens[4:] == ("a",)
    assert encode_caption("b", vocab) == [SOS, UNK, EOS]


def test_single_word_vocabulary_has_five_entries():
    assert len(build_vocabulary(["x"], min_count=1)) == 5


def test_empty_captions_contribute_nothing():
    assert build_vocabulary(["", "  ", "x"]).tokens == build_vocabulary(["x"]).tokens


def test_vocabulary_order_frequency_then_alpha():
    vocab = build_vocabulary(["b c c a", "a c"])
    assert vocab.tokens[4:] == ("c", "a", "b")


def test_tokenize_lowercases_and_strips():
    assert tokenize("The Chair, (left)!  is 'big'.") == ["the", "chair", "left", "is", "big"]


def test_encode_empty_and_truncation():
    vocab = build_vocabulary(["w"])
    assert encode_caption("", vocab) == [SOS, EOS]
    seq = encode_caption(" ".join(["w"] * 40), vocab)
    assert len(seq) == 32 and seq[0] == SOS and seq[-1] == EOS


def test_unknown_word_maps_to_unk():
    vocab = build_vocabulary(["chair"])
    assert encode_caption("sofa", vocab)[1] == UNK


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["table", "chair", "the", "is", "next", "to"]), max_size=45))
def test_encode_decode_round_trip(words):
    vocab = build_vocabulary(["table chair the is next to"])
    assert decode_tokens(encode_caption(" ".join(words), vocab), vocab) == words[:30]


def test_vocabulary_file_round_trip(tmp_path):
    vocab = build_vocabulary(["the red chair", "the table"])
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab


# -- embeddings ------------------------------------------------------------------

def test_embeddings_aligned_and_zero_defaults(tmp_path):
    vocab = build_vocabulary(["chair table"])
    rng = np.random.default_rng(1)
    vec = rng.normal(size=(2, 300)).astype(np.float32)
    save_embeddings(["chair", "<unk>"], vec, tmp_path / "e.txt")
    table = load_embeddings(tmp_path / "e.txt", vocab).vectors
    np.testing.assert_array_equal(table[vocab.index("chair")], vec[0])
    np.testing.assert_array_equal(table[vocab.index("table")], 0)
    np.testing.assert_array_equal(table[:4], 0)


def test_embedding_row_width_299_is_format_error(tmp_path):
    (tmp_path / "e.txt").write_text("chair " + " ".join(["0.5"] * 299) + "\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_embeddings(tmp_path / "e.txt", build_vocabulary(["chair"]))


# -- augmentation ------------------------------------------------------------------

def test_zero_bounds_give_identical_scene(small_scenes):
    scene = small_scenes[0]
    assert augment_scene(scene, seed=5, max_rotation_deg=0.0, max_translation=0.0) == scene


def test_same_seed_same_output(small_scenes):
    assert augment_scene(small_scenes[1], 9) == augment_scene(small_scenes[1], 9)
    assert augment_scene(small_scenes[1], 9) != augment_scene(small_scenes[1], 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_augmentation_preserves_attributes_and_bounds(seed):
    from densecap3d.synthetic import World, make_dataset
    scene = make_dataset(1, 4, seed=3, world=World.create(0))[0]
    out = augment_scene(scene, seed)
    centers = np.array([o.center for o in scene.objects])
    centroid = centers.mean(axis=0)
    radius = np.linalg.norm(centers - centroid, axis=1)
    # |R v - v| <= 2 sin(theta/2)|v| with theta <= the combined rotation angle
    rot_bound = 2 * np.sin(np.radians(5.0 * np.sqrt(3)) / 2) * radius
    for a, b, r in zip(scene.objects, out.objects, rot_bound):
        assert (a.id, a.semantic_class, a.feature, a.lengths, a.captions) == \
               (b.id, b.semantic_class, b.feature, b.lengths, b.captions)
        shift = np.abs(np.subtract(b.center, a.center))
        assert (shift <= 0.5 + r + 1e-9).all()
