import numpy as np
import pytest

from arcdet import tensor as T
from arcdet.bridge import BridgeConfig
from arcdet.checkpoint import CheckpointError
from arcdet.fusion import Branch
from arcdet.metrics import evaluate
from arcdet.model import (BackboneConfig, Detector, HeadConfig, LossWeights, Targets, build_arc, build_targets,
                          checkpoint_of, decode, detection_loss, detector_from_checkpoint, extend_detector,
                          freeze_report, load_model, verify_frozen)
from arcdet.synth import BASE_CLASSES, build_splits
from arcdet.tensor import ShapeError, Tape, Tensor


@pytest.fixture(scope="module")
def base_ckpt():
    return checkpoint_of(Detector(BackboneConfig(), HeadConfig(3), seed=7))


@pytest.fixture(scope="module")
def images():
    return build_splits(4, 20, "mixed")["train"]


def _arc(ckpt, seed=1, alpha=0.0):
    return build_arc(ckpt, [HeadConfig(1, class_offset=3)], BridgeConfig(32, 32, alpha_init=alpha), seed=seed)


def test_backbone_geometry():
    cfg = BackboneConfig()
    assert (cfg.stride, cfg.grid) == (8, 8)
    with pytest.raises(ValueError):
        BackboneConfig(input_size=60)
    with pytest.raises(ValueError):
        HeadConfig(0)


def test_detector_output_shape_and_input_check(images):
    det = Detector(BackboneConfig(), HeadConfig(3))
    assert det.forward(images.images[:2])["head"].shape == (2, 8, 8, 8)
    with pytest.raises(ShapeError):
        det.forward(np.zeros((1, 3, 32, 32)))


def test_decode_hand_example():
    raw = np.full((1, 7, 8, 8), -30.0)
    raw[0, :4, 2, 3] = 0.0
    raw[0, 4, 2, 3] = 2.0
    raw[0, 5:, 2, 3] = [-1.0, 3.0]
    (d,) = decode(raw, HeadConfig(2, class_offset=3), stride=8, input_size=64, conf_threshold=0.01, image_ids=[9])
    assert d.box.as_tuple() == (20.0, 12.0, 36.0, 28.0)
    assert d.class_id == 4 and d.image_id == 9 and d.branch is Branch.SPECIALIST
    assert d.confidence == pytest.approx(1 / (1 + np.exp(-2.0)) / (1 + np.exp(-3.0)), rel=1e-12)


def test_decode_clips_extent():
    raw = np.full((1, 6, 8, 8), -30.0)
    raw[0, 2:4, 0, 0] = 50.0
    raw[0, 4:, 0, 0] = 10.0
    (d,) = decode(raw, HeadConfig(1), 8, 64, 0.5)
    assert d.box.x2 - d.box.x1 == pytest.approx(128.0)


def _logit(p):
    return np.log(p / (1 - p))


def test_targets_invert_through_decode(images):
    cfg = HeadConfig(3)
    gts = [[g for g in scene if g.class_id in BASE_CLASSES] for scene in images.gts]
    t = build_targets(gts, cfg, 8, 8)
    raw = np.full((len(gts), 8, 8, 8), -20.0)
    raw[:, 0:2] = _logit(np.clip(t.box[:, 0:2], 1e-9, 1 - 1e-9))
    raw[:, 2:4] = t.box[:, 2:4]
    raw[:, 4] = np.where(t.obj > 0, 20.0, -20.0)
    raw[:, 5:] = np.where(t.cls > 0, 20.0, -20.0)
    dets = decode(raw, cfg, 8, 64, 0.5, images.image_ids)
    positives = int(t.obj.sum())
    assert len(dets) == positives
    rep = evaluate(dets, [g for s in gts for g in s], BASE_CLASSES)
    assert rep.map5095 == pytest.approx(1.0) or positives < sum(len(s) for s in gts)


def test_loss_weights_scale_terms():
    rng = np.random.default_rng(0)
    raw = Tensor(rng.normal(size=(2, 6, 4, 4)))
    obj = np.zeros((2, 4, 4))
    obj[0, 1, 1] = 1
    cls = obj[:, None].copy()
    t = Targets(obj, np.zeros((2, 4, 4, 4)) + 0.5 * obj[:, None], cls)
    base, parts = detection_loss(raw, t)
    doubled, _ = detection_loss(raw, t, LossWeights(2.0, 2.0, 2.0))
    assert doubled.item() == pytest.approx(2 * base.item())
    assert base.item() == pytest.approx(sum(parts.values()))


def test_untrained_detector_scores_near_zero():
    val = build_splits(1, 100, "base")["val"]
    det = Detector(BackboneConfig(), HeadConfig(3), seed=3)
    rep = evaluate(det.predict(val.images, val.image_ids), val.all_gts(), BASE_CLASSES)
    assert rep.map50 < 0.05


def test_build_arc_contract(base_ckpt):
    arc = _arc(base_ckpt)
    report = freeze_report(arc)
    assert report["backbone"] == 1.0 and report["context_head"] == 1.0
    assert report["specialist"] == 0.0 and report["bridge"] == 0.0
    for p in arc.context_head.parameters():
        assert np.array_equal(p.values, base_ckpt[p.name.replace("context_head", "head")].values)
    again = _arc(base_ckpt)
    assert checkpoint_of(arc).to_bytes() == checkpoint_of(again).to_bytes()
    assert arc.class_ids == [0, 1, 2, 3]


def test_build_arc_rejects_bad_heads(base_ckpt):
    with pytest.raises(ValueError):
        build_arc(base_ckpt, [HeadConfig(1, class_offset=2)])
    with pytest.raises(ValueError):
        build_arc(base_ckpt, [HeadConfig(1, class_offset=3), HeadConfig(2, class_offset=3)])
    with pytest.raises(CheckpointError):
        build_arc(base_ckpt, [HeadConfig(1, class_offset=3)], num_base=4)


def test_arc_output_shapes(base_ckpt, images):
    out = _arc(base_ckpt).forward(images.images[:3])
    assert out["context"].shape == (3, 8, 8, 8)
    assert out["specialist.0"].shape == (3, 6, 8, 8)


def test_identity_bridge_with_shared_weights_reproduces_context(base_ckpt, images):
    arc = _arc(base_ckpt)
    spec = arc.specialists[0].head
    for name in ("conv1", "conv2"):
        for src, dst in zip(getattr(arc.context_head, name).parameters(), getattr(spec, name).parameters()):
            dst.tensor.values = src.values.copy()
    cw, cb = arc.context_head.pred.parameters()
    sw, sb = spec.pred.parameters()
    sw.tensor.values = cw.values[:6].copy()
    sb.tensor.values = cb.values[:6].copy()
    out = arc.forward(images.images[:4])
    assert np.array_equal(out["specialist.0"].values, out["context"].values[:, :6])


def test_context_detections_match_pretrained(base_ckpt, images):
    pretrained = detector_from_checkpoint(base_ckpt)
    arc = _arc(base_ckpt)
    want = pretrained.predict(images.images, images.image_ids)
    got = [d for d in arc.predict(images.images, images.image_ids) if d.branch is Branch.CONTEXT]
    assert got == want


def test_specialist_loss_leaves_frozen_parameters_without_gradient(base_ckpt, images):
    arc = _arc(base_ckpt, alpha=0.5)
    with Tape() as tape:
        loss, _ = arc.loss(images.images[:4], images.gts[:4])
    T.backward(tape, loss)
    for p in arc.parameters():
        if p.frozen:
            assert p.grad is None, p.name
        else:
            assert p.grad is not None, p.name


def test_verify_frozen_detects_changes(base_ckpt):
    arc = _arc(base_ckpt)
    before = checkpoint_of(arc)
    arc.specialists[0].head.pred.parameters()[0].tensor.values += 1.0
    assert verify_frozen(arc, before, checkpoint_of(arc))
    arc.backbone.parameters()[0].tensor.values[0, 0, 0, 0] += 1e-12
    assert not verify_frozen(arc, before, checkpoint_of(arc))


def test_checkpoint_reload_reproduces_arc(base_ckpt, images):
    arc = _arc(base_ckpt, alpha=0.3)
    ckpt = checkpoint_of(arc)
    again = load_model(ckpt)
    assert checkpoint_of(again).to_bytes() == ckpt.to_bytes()
    assert again.predict(images.images, images.image_ids) == arc.predict(images.images, images.image_ids)


def test_extend_detector_keeps_base_outputs(base_ckpt, images):
    base = detector_from_checkpoint(base_ckpt)
    wider = extend_detector(base_ckpt, 1, seed=2)
    assert wider.class_ids == [0, 1, 2, 3]
    a = base.forward(images.images[:3])["head"].values
    b = wider.forward(images.images[:3])["head"].values
    assert np.array_equal(a, b[:, :8])
