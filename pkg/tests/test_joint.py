import numpy as np
import pytest
import torch

from tsddnet.cnet import CNet
from tsddnet.data import BoundingBox, apply_annotation_fraction, load_manifest
from tsddnet.dnet import DNet
from tsddnet.joint import (
    Stage2Config, TSDDNet, cascaded_forward, infer, joint_loss, joint_step_loss, load_bundle, run_stage2,
    save_bundle,
)
from tsddnet.labels import LabelStore, Origin


@pytest.fixture
def cascade(tiny_dnet_cfg, tiny_cnet_cfg):
    torch.manual_seed(0)
    return TSDDNet(DNet(tiny_dnet_cfg), CNet(tiny_cnet_cfg), self_distillation=True)


def test_joint_loss_is_plain_sum(rng):
    for _ in range(100):
        a, b, c, d = rng.uniform(0, 10, 4)
        assert joint_loss(a, b, c, d) == pytest.approx(a + b + c + d, abs=1e-12)
    t = joint_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), torch.tensor(0.25))
    assert float(t) == 3.75


def test_config_validation():
    with pytest.raises(ValueError):
        Stage2Config(k=2)
    with pytest.raises(ValueError):
        Stage2Config(epochs=-1)


def test_aux_removal_is_bit_identical(cascade):
    x = torch.rand(6, 1, 128, 128)
    before = cascaded_forward(cascade, x)
    assert before.aux_det is not None and before.aux_cls is not None
    cascade.drop_aux()
    after = cascaded_forward(cascade, x)
    assert after.aux_det is None and after.aux_cls is None
    assert torch.equal(before.fused, after.fused)
    assert before.boxes == after.boxes


def test_aux_heads_do_not_touch_inference_path(cascade, tiny_dnet_cfg, tiny_cnet_cfg):
    plain = TSDDNet(DNet(tiny_dnet_cfg), CNet(tiny_cnet_cfg), self_distillation=False)
    state = {k: v for k, v in cascade.state_dict().items() if not k.startswith("aux_")}
    plain.load_state_dict(state)
    x = torch.rand(3, 1, 128, 128)
    a = infer(cascade, x)
    b = infer(plain, x)
    assert [(box, p.p_malignant) for box, p in a] == [(box, p.p_malignant) for box, p in b]


def test_probabilities_sum_to_one(cascade):
    for box, p in infer(cascade, torch.rand(4, 1, 128, 128)):
        assert p.p_benign + p.p_malignant == pytest.approx(1.0, abs=1e-12)
        assert box.within(128, 128)


def test_permutation_consistency(cascade):
    x = torch.rand(5, 1, 128, 128)
    perm = torch.tensor([3, 0, 4, 1, 2])
    a = cascaded_forward(cascade, x)
    b = cascaded_forward(cascade, x[perm])
    np.testing.assert_allclose(a.fused[perm].numpy(), b.fused.numpy(), atol=1e-5)
    assert [a.boxes[i] for i in perm.tolist()] == b.boxes


def test_gradients_reach_every_component(cascade):
    x = torch.rand(4, 1, 128, 128)
    boxes = torch.tensor([[10, 10, 40, 40], [20, 30, 50, 40], [5, 5, 100, 90], [60, 60, 30, 30]], dtype=torch.float32)
    y = torch.tensor([0, 1, 1, 0])
    is_fa = torch.tensor([True, False, True, False])
    loss, parts = joint_step_loss(cascade, x, boxes, y, is_fa, Stage2Config())
    loss.backward()
    assert set(parts) >= {"dnet", "fnet", "cls1", "cls2"}
    assert float(loss.detach()) == pytest.approx(parts["dnet"] + parts["fnet"] + parts["cls1"] + parts["cls2"], rel=1e-5)
    for name in ("detector", "classifier", "fusion", "aux_det", "aux_cls"):
        grads = [p.grad for p in getattr(cascade, name).parameters()]
        assert any(g is not None and float(g.abs().sum()) > 0 for g in grads), name
        assert all(g is None or torch.isfinite(g).all() for g in grads)


def test_without_self_distillation_aux_terms_are_zero(tiny_dnet_cfg, tiny_cnet_cfg):
    m = TSDDNet(DNet(tiny_dnet_cfg), CNet(tiny_cnet_cfg), self_distillation=False)
    boxes = torch.tensor([[10, 10, 40, 40], [20, 30, 50, 40]], dtype=torch.float32)
    _, parts = joint_step_loss(m, torch.rand(2, 1, 128, 128), boxes, torch.tensor([0, 1]),
                               torch.tensor([True, True]), Stage2Config(self_distillation=False))
    assert parts["cls1"] == 0.0 and parts["cls2"] == 0.0


def _stage2_inputs(tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg):
    recs = apply_annotation_fraction(load_manifest(tiny_phantom / "manifest.csv", eager=True), 0.5, 0)
    store = LabelStore()
    for r in recs:
        store.add(r.image_id, r.manual_roi or BoundingBox(20, 20, 60, 60), 0.5,
                  Origin.MANUAL if r.manual_roi else Origin.PSEUDO)
    torch.manual_seed(1)
    return recs, store, DNet(tiny_dnet_cfg), CNet(tiny_cnet_cfg)


def test_zero_epochs_keeps_stage1_weights(tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg):
    recs, store, det, cls = _stage2_inputs(tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg)
    res = run_stage2(recs, store, det, cls, Stage2Config(epochs=0))
    for src, dst in ((det, res.model.detector), (cls, res.model.classifier)):
        a, b = src.state_dict(), dst.state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert res.model.aux_det is None and res.val_history == []


def test_training_leaves_inputs_untouched_and_is_deterministic(tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg):
    recs, store, det, cls = _stage2_inputs(tiny_phantom, tiny_dnet_cfg, tiny_cnet_cfg)
    ref = {k: v.clone() for k, v in det.state_dict().items()}
    cfg = Stage2Config(epochs=1, learning_rate=1e-3, batch_size=8)
    a = run_stage2(recs, store, det, cls, cfg, val=recs[:6])
    b = run_stage2(recs, store, det, cls, cfg, val=recs[:6])
    assert all(torch.equal(ref[k], v) for k, v in det.state_dict().items())
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    assert [e for e in a.events if e["event"] == "loss"] == [e for e in b.events if e["event"] == "loss"]
    assert len(a.val_history) == 2


def test_bundle_round_trip(cascade, tiny_dnet_cfg, tiny_cnet_cfg, tmp_path):
    cascade.drop_aux()
    store = LabelStore()
    store.add("x", BoundingBox(1, 1, 5, 5), 0.4, Origin.MANUAL)
    out = save_bundle(cascade, tmp_path / "bundle", {"variant": "FULL"}, store)
    assert (out / "labels.jsonl").exists() and (out / "manifest.json").exists()
    back = load_bundle(out, tiny_dnet_cfg, tiny_cnet_cfg)
    x = torch.rand(3, 1, 128, 128)
    assert torch.equal(cascaded_forward(cascade, x).fused, cascaded_forward(back, x).fused)
