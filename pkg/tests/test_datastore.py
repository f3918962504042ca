import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ship.datastore import (ClassVocabulary, DataError, LabeledFeatureSet, few_shot_indices, load_manifest,
                            read_feature_store, sample_few_shot, split_base_new, write_feature_store,
                            write_manifest)

from conftest import unit_rows


def _manifest(tmp_path, classes, labels, splits, rng, d=4, unseen=None):
    store = LabeledFeatureSet(unit_rows(rng, len(labels), d), tuple(labels), "real")
    write_feature_store(store, tmp_path / "f.bin")
    write_manifest(tmp_path / "m.json", "t", classes, "f.bin", labels, splits, unseen)
    return tmp_path / "m.json"


def test_vocabulary_canonical_order():
    assert list(ClassVocabulary(["cat", "ant", "bee"])) == ["ant", "bee", "cat"]


def test_vocabulary_byte_order_not_locale():
    assert list(ClassVocabulary(["b", "B", "a"])) == ["B", "a", "b"]


def test_vocabulary_duplicate():
    with pytest.raises(DataError, match="duplicate class"):
        ClassVocabulary(["a", "a"])


def test_feature_set_rejects_non_unit_rows():
    with pytest.raises(DataError, match="unit norm"):
        LabeledFeatureSet(np.ones((1, 3)), ("a",), "real")


def test_feature_set_rejects_bad_origin():
    x = np.eye(2, dtype=np.float32)
    with pytest.raises(DataError):
        LabeledFeatureSet(x, ("a", "b"), "fake")


def test_load_manifest_orders_vocabulary(tmp_path, rng):
    path = _manifest(tmp_path, ["cat", "ant", "bee"], ["cat", "ant", "bee"], ["train"] * 3, rng)
    m = load_manifest(path)
    assert list(m.vocabulary) == ["ant", "bee", "cat"]
    assert len(m.vocabulary) == 3


def test_load_manifest_missing_store(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps(
        {"name": "x", "classes": ["a"], "features": "nope.bin", "items": [{"label": "a", "split": "train"}]}))
    with pytest.raises(DataError, match="feature store not found"):
        load_manifest(tmp_path / "m.json")


def test_load_manifest_duplicate_class(tmp_path, rng):
    path = _manifest(tmp_path, ["a", "b"], ["a", "b"], ["train"] * 2, rng)
    doc = json.loads(path.read_text())
    doc["classes"] = ["a", "a", "b"]
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="duplicate class"):
        load_manifest(path)


def test_load_manifest_label_outside_vocabulary(tmp_path, rng):
    path = _manifest(tmp_path, ["a", "b"], ["a", "b"], ["train"] * 2, rng)
    doc = json.loads(path.read_text())
    doc["classes"] = ["a"]
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="items\\[1\\].label"):
        load_manifest(path)


def test_load_manifest_row_count_mismatch(tmp_path, rng):
    path = _manifest(tmp_path, ["a"], ["a", "a"], ["train"] * 2, rng)
    doc = json.loads(path.read_text())
    doc["items"].append({"label": "a", "split": "test"})
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="row-count mismatch"):
        load_manifest(path)


def test_load_manifest_missing_field(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"name": "x", "classes": ["a"], "items": []}))
    with pytest.raises(DataError, match="'features'"):
        load_manifest(tmp_path / "m.json")


@pytest.mark.parametrize("n, base, new", [(10, 5, 5), (7, 4, 3), (2, 1, 1)])
def test_split_sizes(n, base, new):
    s = split_base_new([f"c{i:02d}" for i in range(n)])
    assert (len(s.base), len(s.new)) == (base, new)
    assert not set(s.base) & set(s.new)


def test_split_needs_two_classes():
    with pytest.raises(DataError):
        split_base_new(["only"])


@given(st.sets(st.text(min_size=1, max_size=6), min_size=2, max_size=30))
def test_split_partitions(names):
    s = split_base_new(list(names))
    assert sorted(s.base + s.new, key=str.encode) == list(ClassVocabulary(names))
    assert len(s.base) == -(-len(names) // 2)


def test_few_shot_counts_and_determinism(toy_world):
    m, _ = toy_world
    classes = list(m.vocabulary[:4])
    a = sample_few_shot(m, classes, 16, 3)
    assert len(a) == 64
    assert all(a.labels.count(c) == 16 for c in classes)
    assert a.equals(sample_few_shot(m, classes, 16, 3))
    assert not a.equals(sample_few_shot(m, classes, 16, 4))
    assert set(a.origin) == {"real"}


def test_few_shot_draws_only_train_items(toy_world):
    m, _ = toy_world
    idx = few_shot_indices(m, m.vocabulary, 16, 0)
    assert all(m.splits[i] == "train" for i in idx)
    assert len(set(idx)) == len(idx)


def test_few_shot_per_class_streams_are_independent(toy_world):
    m, _ = toy_world
    alone = few_shot_indices(m, [m.vocabulary[3]], 8, 9)
    together = few_shot_indices(m, m.vocabulary[:6], 8, 9)
    assert set(alone) <= set(together)


def test_few_shot_insufficient_names_class(tmp_path, rng):
    path = _manifest(tmp_path, ["a", "b"], ["a"] * 6 + ["b"] * 3, ["train"] * 9, rng)
    with pytest.raises(DataError, match="'b'"):
        sample_few_shot(load_manifest(path), ["a", "b"], 5, 0)


def test_store_round_trip(tmp_path, rng):
    s = LabeledFeatureSet(unit_rows(rng, 5, 8), tuple("abcab"), ("real", "real", "synthetic", "real", "synthetic"))
    write_feature_store(s, tmp_path / "s.bin")
    back = read_feature_store(tmp_path / "s.bin")
    assert back.equals(s)
    assert back.features.tobytes() == s.features.tobytes()


def test_store_empty_round_trip(tmp_path):
    s = LabeledFeatureSet.empty(6)
    write_feature_store(s, tmp_path / "e.bin")
    back = read_feature_store(tmp_path / "e.bin")
    assert len(back) == 0 and back.dim == 6


def test_store_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"XXXXXXXX" + bytes(16))
    with pytest.raises(DataError, match="bad magic"):
        read_feature_store(tmp_path / "x.bin")


def test_store_truncated(tmp_path, rng):
    write_feature_store(LabeledFeatureSet(unit_rows(rng, 3, 4), tuple("aaa"), "real"), tmp_path / "s.bin")
    raw = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:30])
    with pytest.raises(DataError, match="truncated"):
        read_feature_store(tmp_path / "t.bin")


def test_store_layout_is_little_endian_f4(tmp_path):
    x = np.array([[0.6, 0.8]], dtype=np.float32)
    write_feature_store(LabeledFeatureSet(x, ("a",), "real"), tmp_path / "s.bin")
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:8] == b"SHIPFS1\0"
    assert raw[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[16:24] == x.astype("<f4").tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 12), st.integers(1, 9), st.integers(0, 2**31))
def test_store_round_trip_property(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    labels = tuple(f"k{int(v)}" for v in rng.integers(0, 3, n))
    s = LabeledFeatureSet(unit_rows(rng, n, d) if n else np.zeros((0, d), np.float32), labels, "synthetic")
    path = tmp_path_factory.mktemp("rt") / "s.bin"
    write_feature_store(s, path)
    assert read_feature_store(path).equals(s)
