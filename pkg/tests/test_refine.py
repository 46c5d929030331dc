import numpy as np
import pytest
import torch

from tsddnet.cnet import CNet
from tsddnet.data import BoundingBox, ImageRecord, load_manifest
from tsddnet.dnet import CandidateSet
from tsddnet.labels import LabelStore, Origin
from tsddnet.refine import (
    RefinementConfig, best_index, classifier_scorer, generate_pseudo_labels, image_map, refine_labels, run_stage1,
    seed_manual_labels,
)
from tsddnet.train import TensorSet


def _records(n, rng, n_fa=None):
    n_fa = n // 2 if n_fa is None else n_fa
    recs = []
    for i in range(n):
        box = BoundingBox(*rng.uniform(0, 40, 2), *rng.uniform(4, 20, 2)) if i < n_fa else None
        recs.append(ImageRecord(f"im{i}", f"p{i}", int(rng.integers(0, 2)), box))
    return recs


def _frozen_scorer(seed):
    """Deterministic smooth function of the box: a frozen classifier stand-in."""
    w = np.random.default_rng(seed).normal(size=(2, 4))

    def score(rec, boxes):
        return [float(1 / (1 + np.exp(-np.tanh(w[rec.label] @ np.asarray(b.as_tuple()) / 40) * 3))) for b in boxes]
    return score


def _fixed_proposer(seed):
    """Same k candidates for an image on every call."""
    def propose(records, k):
        out = []
        for r in records:
            g = np.random.default_rng([seed, int(r.image_id[2:])])
            out.append(CandidateSet([BoundingBox(*g.uniform(0, 40, 2), *g.uniform(2, 25, 2)) for _ in range(k)],
                                    sorted(g.random(k).tolist(), reverse=True)))
        return out
    return propose


def _random_proposer(rng):
    def propose(records, k):
        return [CandidateSet([BoundingBox(*rng.uniform(0, 40, 2), *rng.uniform(2, 25, 2)) for _ in range(k)],
                             [0.0] * k) for _ in records]
    return propose


class TestSelection:
    def test_best_index_ties_to_lowest(self):
        assert best_index([0.1, 0.7, 0.3]) == 1
        assert best_index([0.5, 0.9, 0.9, 0.2]) == 1
        assert best_index([0.4]) == 0

    def test_pseudo_labels_pick_argmax(self):
        rec = ImageRecord("x1", "p", 1)
        boxes = [BoundingBox(0, 0, 4, 4), BoundingBox(1, 1, 4, 4), BoundingBox(2, 2, 4, 4)]
        store = generate_pseudo_labels([rec], lambda rs, k: [CandidateSet(boxes[:k], [3, 2, 1][:k])],
                                       lambda r, bs: [0.2, 0.9, 0.4][:len(bs)], 3, LabelStore())
        e = store["x1"]
        assert e.current_roi == boxes[1] and e.current_score == 0.9 and e.origin is Origin.PSEUDO

    def test_replacement_is_strict(self):
        rec = ImageRecord("x1", "p", 0, BoundingBox(0, 0, 5, 5))
        store = seed_manual_labels([rec], lambda r, bs: [0.5] * len(bs), LabelStore())
        cand = BoundingBox(1, 1, 5, 5)
        refine_labels([rec], store, lambda rs, k: [CandidateSet([cand], [1.0])], lambda r, bs: [0.5, 0.5], 1, 1)
        assert store["x1"].current_roi == rec.manual_roi and store["x1"].origin is Origin.MANUAL
        refine_labels([rec], store, lambda rs, k: [CandidateSet([cand], [1.0])], lambda r, bs: [0.5, 0.5001], 1, 2)
        assert store["x1"].current_roi == cand and store["x1"].origin is Origin.REFINED
        assert [h.iteration for h in store["x1"].history] == [0, 1, 2]

    def test_incumbent_rescored(self):
        rec = ImageRecord("x1", "p", 0, BoundingBox(0, 0, 5, 5))
        store = seed_manual_labels([rec], lambda r, bs: [0.9], LabelStore())
        # the incumbent's stored 0.9 is stale; under the current classifier it scores 0.3
        refine_labels([rec], store, lambda rs, k: [CandidateSet([BoundingBox(2, 2, 3, 3)], [1.0])],
                      lambda r, bs: [0.3, 0.4], 1, 1)
        assert store["x1"].current_score == 0.4


class TestMonotonicity:
    @pytest.mark.parametrize("chunk", range(4))
    def test_never_decreases_and_reaches_fixed_point(self, chunk):
        # 4 x 50 = 200 randomized stores
        for trial in range(chunk * 50, chunk * 50 + 50):
            rng = np.random.default_rng(trial)
            recs = _records(int(rng.integers(1, 12)), rng)
            score = _frozen_scorer(trial)
            k = int(rng.integers(1, 6))
            fa = [r for r in recs if r.manual_roi is not None]
            pa = [r for r in recs if r.manual_roi is None]
            store = seed_manual_labels(fa, score, LabelStore())
            generate_pseudo_labels(pa, _random_proposer(rng), score, k, store)

            # random candidates: scores never decrease
            prev = {i: store[i].current_score for i in store}
            for it in range(1, 4):
                refine_labels(recs, store, _random_proposer(rng), score, k, it)
                for i in store:
                    assert store[i].current_score >= prev[i]
                    assert store[i].current_score == pytest.approx(score(_rec(recs, i), [store[i].current_roi])[0])
                prev = {i: store[i].current_score for i in store}

            # fixed candidates: the second pass changes nothing
            fixed = _fixed_proposer(trial)
            refine_labels(recs, store, fixed, score, k, 4)
            snap = store.boxes()
            refine_labels(recs, store, fixed, score, k, 5)
            assert store.boxes() == snap
            for i in store:
                hist = store[i].history
                assert [h.iteration for h in hist] == list(range(6))
                assert all(b.score >= a.score for a, b in zip(hist, hist[1:]))

    def test_k_one_with_current_as_candidate_is_identity(self, rng):
        recs = _records(8, rng, n_fa=8)
        score = _frozen_scorer(0)
        store = seed_manual_labels(recs, score, LabelStore())
        before = store.boxes()
        same = lambda rs, k: [CandidateSet([store[r.image_id].current_roi], [1.0]) for r in rs]
        refine_labels(recs, store, same, score, 1, 1)
        assert store.boxes() == before
        assert all(store[i].origin is Origin.MANUAL for i in store)


def _rec(recs, image_id):
    return next(r for r in recs if r.image_id == image_id)


class TestWithNetworks:
    def test_frozen_cnet_monotone(self, tiny_cnet_cfg, rng):
        torch.manual_seed(0)
        net = CNet(tiny_cnet_cfg).eval()
        recs = _records(6, rng, n_fa=6)
        for r in recs:
            r.pixels = rng.random((64, 64))
        data = TensorSet.from_records(recs)
        score = classifier_scorer(net, image_map(data))
        store = seed_manual_labels(recs, score, LabelStore())
        prop = _random_proposer(rng)
        for it in range(1, 4):
            prev = {i: store[i].current_score for i in store}
            refine_labels(recs, store, prop, score, 3, it)
            drops = [prev[i] - store[i].current_score for i in store]
            assert max(drops) <= 0, drops


class TestStage1:
    def _cfg(self, **kw):
        base = dict(k_candidates=2, n_outer_iterations=1, epochs_per_iteration=1, warmup_epochs=1,
                    learning_rate=1e-3, batch_size=4, seed=0)
        base.update(kw)
        return RefinementConfig(**base)

    def _train(self, tiny_phantom):
        from tsddnet.data import apply_annotation_fraction
        recs = load_manifest(tiny_phantom / "manifest.csv", eager=True)
        return apply_annotation_fraction(recs, 0.5, 0)

    def test_zero_iterations(self, tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg):
        train = self._train(tiny_phantom)
        st = run_stage1(train, self._cfg(n_outer_iterations=0), tiny_dnet_cfg, tiny_cnet_cfg)
        assert len(st.store) == len(train)
        for r in train:
            e = st.store[r.image_id]
            assert len(e.history) == 1
            assert e.origin is (Origin.MANUAL if r.manual_roi is not None else Origin.PSEUDO)
            if r.manual_roi is not None:
                assert e.current_roi == r.manual_roi

    def test_no_selection_never_replaces(self, tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg):
        train = self._train(tiny_phantom)
        st = run_stage1(train, self._cfg(candidate_selection=False, n_outer_iterations=2), tiny_dnet_cfg,
                        tiny_cnet_cfg)
        assert all(len(st.store[i].history) == 1 for i in st.store)

    def test_deterministic(self, tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg, tmp_path):
        train = self._train(tiny_phantom)
        a = run_stage1(train, self._cfg(), tiny_dnet_cfg, tiny_cnet_cfg, jsonl_path=tmp_path / "a.jsonl")
        b = run_stage1(train, self._cfg(), tiny_dnet_cfg, tiny_cnet_cfg, jsonl_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        sa, sb = a.detector.state_dict(), b.detector.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
        rows = (tmp_path / "a.jsonl").read_text().splitlines()
        assert len(rows) == 2 * len(train)

    def test_needs_fa(self, tiny_dnet_cfg, tiny_cnet_cfg):
        with pytest.raises(ValueError):
            run_stage1([ImageRecord("a", "p", 0)], self._cfg(), tiny_dnet_cfg, tiny_cnet_cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RefinementConfig(k_candidates=0)
        with pytest.raises(ValueError):
            RefinementConfig(alpha=-1)
        assert RefinementConfig(warmup_epochs=None, epochs_per_iteration=3).n_warmup_epochs == 3
