import json

import pytest

from tsddnet.data import BoundingBox
from tsddnet.labels import LabelStore, Origin


def _store():
    s = LabelStore()
    s.add("a", BoundingBox(1, 2, 3, 4), 0.6, Origin.MANUAL)
    s.add("b", BoundingBox(5, 5, 10, 10), 0.4, Origin.PSEUDO)
    return s


def test_add_and_lookup():
    s = _store()
    assert len(s) == 2 and "a" in s and "z" not in s
    assert s["a"].initial_roi == BoundingBox(1, 2, 3, 4)
    assert s.boxes() == {"a": BoundingBox(1, 2, 3, 4), "b": BoundingBox(5, 5, 10, 10)}


def test_add_rejects_duplicates_and_refined():
    s = _store()
    with pytest.raises(KeyError):
        s.add("a", BoundingBox(0, 0, 1, 1), 0.1, Origin.MANUAL)
    with pytest.raises(ValueError):
        s.add("c", BoundingBox(0, 0, 1, 1), 0.1, Origin.REFINED)


def test_commit_history():
    s = _store()
    s.commit("a", 1, BoundingBox(1, 2, 3, 4), 0.6, replaced=False)
    s.commit("a", 2, BoundingBox(2, 2, 3, 4), 0.7, replaced=True)
    e = s["a"]
    assert [h.iteration for h in e.history] == [0, 1, 2]
    assert [h.origin for h in e.history] == [Origin.MANUAL, Origin.MANUAL, Origin.REFINED]
    assert e.current_roi == e.history[-1].box and e.current_score == 0.7
    assert e.initial_roi == BoundingBox(1, 2, 3, 4)


def test_commit_requires_increasing_iteration():
    s = _store()
    s.commit("a", 1, BoundingBox(1, 2, 3, 4), 0.6, replaced=False)
    with pytest.raises(ValueError):
        s.commit("a", 1, BoundingBox(1, 2, 3, 4), 0.6, replaced=False)


def test_copy_is_independent():
    s = _store()
    c = s.copy()
    c.commit("a", 1, BoundingBox(0, 0, 9, 9), 0.9, replaced=True)
    assert len(s["a"].history) == 1 and s["a"].origin is Origin.MANUAL


def test_jsonl_round_trip(tmp_path):
    s = _store()
    s.commit("b", 1, BoundingBox(6, 5, 10, 10), 0.5, replaced=True)
    p = tmp_path / "labels.jsonl"
    s.write_jsonl(p)
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert len(rows) == 3
    assert set(rows[0]) == {"image_id", "iteration", "box", "score", "origin"}
    back = LabelStore.read_jsonl(p)
    for k in s:
        assert back[k].history == s[k].history
        assert back[k].current_roi == s[k].current_roi and back[k].origin == s[k].origin


def test_append_only_new_iterations(tmp_path):
    s = _store()
    p = tmp_path / "labels.jsonl"
    s.write_jsonl(p)
    s.commit("a", 1, BoundingBox(1, 2, 3, 4), 0.6, replaced=False)
    s.commit("b", 1, BoundingBox(6, 6, 8, 8), 0.8, replaced=True)
    s.append_jsonl(p, min_iteration=1)
    assert len(p.read_text().splitlines()) == 4
    back = LabelStore.read_jsonl(p)
    assert back["b"].current_roi == BoundingBox(6, 6, 8, 8)
    assert back["b"].origin is Origin.REFINED
