import json
import warnings

import numpy as np
import pytest
from PIL import Image

from tsddnet.cnet import score_candidate
from tsddnet.data import crop_roi
from tsddnet.experiment import (
    ALL_VARIANTS, ConfigError, Dataset, ExperimentConfig, RunExistsError, Variant, build_config, build_overlay,
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_sweep_p, cmd_train, cmd_visualize, dedupe_p, load_bundle,
    load_fold_metrics, load_run_config, parse_config_text,
)
from tsddnet.labels import LabelStore

TINY = dict(p=0.5, folds="0", warmup_epochs=1, n_outer_iterations=1, epochs_per_iteration=1, k_candidates=2,
            s2_epochs=1, batch_size=4, s2_batch_size=4, dnet_widths="4,8,8,8", dnet_stem=4, fpn_channels=8,
            head_convs=1, cnet_widths="4,8,8,8", cnet_stem=4, image_size=128)


def tiny_config(data_dir, out_dir, **kw):
    return build_config(overrides={**TINY, "data_dir": str(data_dir), "out_dir": str(out_dir), **kw})


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    return cmd_gen_data(tmp_path_factory.mktemp("data"), n_patients=10, images_per_patient=2, image_size=128, seed=3)


@pytest.fixture(scope="module")
def ablation(tiny_data, tmp_path_factory):
    cfg = tiny_config(tiny_data.parent, tmp_path_factory.mktemp("runs"))
    return cfg, cmd_ablate(cfg)


class TestConfig:
    def test_parse_text(self):
        d = parse_config_text("# comment\np = 0.4   # trailing\n\nk_candidates=5\nvariant = CS\n")
        assert d == {"p": 0.4, "k_candidates": 5, "variant": "CS"}

    @pytest.mark.parametrize("text", ["bogus = 1", "k_candidates = three", "just words"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_text_round_trip(self):
        cfg = build_config(overrides={"p": 0.4, "seed": 7})
        assert ExperimentConfig(**parse_config_text(cfg.to_text())) == cfg

    def test_hash(self):
        a = build_config()
        assert a.config_hash() == build_config(overrides={"out_dir": "elsewhere"}).config_hash()
        assert a.config_hash() != build_config(overrides={"p": 0.4}).config_hash()
        assert len(a.config_hash()) == 12

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("p = 0.6\nk_candidates = 4\n")
        cfg = build_config(f, {"k_candidates": "7"})
        assert (cfg.p, cfg.k_candidates) == (0.6, 7)

    def test_paper_profile(self):
        cfg = build_config(overrides={"profile": "paper"})
        s1 = cfg.stage1(Variant.FULL)
        assert (s1.k_candidates, s1.n_outer_iterations, s1.alpha, s1.beta, s1.learning_rate, s1.batch_size) == \
            (10, 10, 0.8, 0.8, 1e-4, 8)
        s2 = cfg.stage2(Variant.FULL)
        assert (s2.epochs, s2.learning_rate, s2.batch_size) == (10, 1e-5, 16)
        assert cfg.dnet().backbone.blocks == (3, 4, 6, 3) and cfg.cnet().backbone.blocks == (2, 2, 2, 2)

    @pytest.mark.parametrize("kw", [{"p": 0.0}, {"p": 1.5}, {"variant": "X"}, {"folds": "7"}, {"profile": "big"},
                                    {"dnet_widths": "1,2"}, {"k_candidates": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            build_config(overrides=kw)

    def test_variants(self):
        table = {v: (v.candidate_selection, v.self_distillation) for v in ALL_VARIANTS}
        assert table == {Variant.B: (False, False), Variant.CS: (True, False), Variant.SD: (False, True),
                         Variant.FULL: (True, True)}

    def test_dedupe(self):
        with pytest.warns(UserWarning):
            assert dedupe_p([0.2, 0.4, 0.2]) == [0.2, 0.4]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert dedupe_p([0.8]) == [0.8]
        with pytest.raises(ConfigError):
            dedupe_p([])


class TestAblation:
    def test_layout(self, ablation):
        cfg, run = ablation
        assert run.name == cfg.config_hash()
        assert load_run_config(run) == cfg
        for v in ALL_VARIANTS:
            d = run / "fold0" / v.value
            assert (d / "metrics.json").is_file() and (d / "bundle" / "manifest.json").is_file()
        for ext in ("txt", "csv", "json"):
            assert (run / f"report.{ext}").is_file()
        assert set(load_fold_metrics(run)) == {"B", "CS", "SD", "FULL"}

    def test_variant_label_semantics(self, ablation):
        cfg, run = ablation
        stores = {v: LabelStore.read_jsonl(run / "fold0" / v / "labels_stage1.jsonl") for v in ("B", "CS", "SD", "FULL")}
        assert all(len(e.history) == 1 for e in stores["B"].entries())
        assert all(len(e.history) == 1 + cfg.n_outer_iterations for e in stores["CS"].entries())
        for a, b in (("B", "SD"), ("CS", "FULL")):
            assert (run / "fold0" / a / "labels_stage1.jsonl").read_bytes() == \
                (run / "fold0" / b / "labels_stage1.jsonl").read_bytes()

    def test_metrics_content(self, ablation):
        _, run = ablation
        m = json.loads((run / "fold0" / "FULL" / "metrics.json").read_text())
        assert {"accuracy", "sensitivity", "specificity", "youden", "auc", "stored_iou", "coarse_iou",
                "test_iou", "predictions"} <= set(m)
        assert m["n_test"] == len(m["predictions"])
        for p in m["predictions"].values():
            assert 0.0 <= p["p_malignant"] <= 1.0

    def test_force_guard(self, ablation, tiny_data):
        cfg, run = ablation
        with pytest.raises(RunExistsError):
            cmd_train(cfg)

    def test_eval_matches_training_metrics(self, ablation):
        _, run = ablation
        cmd_eval(run)
        for v in ("B", "FULL"):
            a = json.loads((run / "fold0" / v / "metrics.json").read_text())
            b = json.loads((run / "fold0" / v / "metrics_eval.json").read_text())
            assert a["predictions"] == b["predictions"] and a["stored_iou"] == b["stored_iou"]
        assert (run / "report_eval.txt").is_file()

    def test_visualize(self, ablation, tmp_path):
        cfg, run = ablation
        ds = Dataset.load(cfg.data_dir, cfg.image_size)
        image_id = next(iter(LabelStore.read_jsonl(run / "fold0" / "FULL" / "bundle" / "labels.jsonl")))
        paths = cmd_visualize(run, [image_id], tmp_path)
        img = Image.open(paths[0])
        assert img.size == (256, 256)
        meta = json.loads((tmp_path / f"{image_id}.json").read_text())
        rec = next(r for r in ds.records if r.image_id == image_id)
        bundle = sorted(run.glob("fold0/*/bundle"))[0]
        model = load_bundle(bundle, cfg.dnet(), cfg.cnet())
        ov = build_overlay(run, image_id, ds)
        for name in ("original", "stored", "predicted"):
            box = getattr(ov, name)
            expected = score_candidate(model.classifier, crop_roi(rec.pixels, box), rec.label)
            assert round(meta["probabilities"][name], 3) == round(expected, 3)
        with pytest.raises(KeyError):
            cmd_visualize(run, ["nope"], tmp_path)


def test_sweep(tiny_data, tmp_path):
    cfg = tiny_config(tiny_data.parent, tmp_path, n_outer_iterations=0, s2_epochs=0)
    with pytest.warns(UserWarning):
        sweep, runs = cmd_sweep_p(cfg, [0.5, 1.0, 0.5])
    assert len(runs) == 2 and runs[0] != runs[1]
    assert json.loads((sweep / "runs.json").read_text()).keys() == {"0.5", "1"}
    text = (sweep / "report.txt").read_text()
    assert "p=0.5 FULL" in text and "p=1 FULL" in text


def test_letterboxed_dataset(tmp_path):
    d = cmd_gen_data(tmp_path / "d", n_patients=5, images_per_patient=1, image_size=128, seed=0).parent
    ds = Dataset.load(d, 64)
    assert all(r.shape == (64, 64) for r in ds.records)
    for r in ds.records:
        assert r.manual_roi.within(64, 64) and ds.truth[r.image_id].within(64, 64)
        np.testing.assert_allclose(ds.truth[r.image_id].w, Dataset.load(d).truth[r.image_id].w / 2, rtol=1e-9)
