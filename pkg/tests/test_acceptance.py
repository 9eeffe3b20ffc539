"""Acceptance suite: one test per criterion, each at its stated tolerance.

Criteria 2, 3, 4 and 8 share one end-to-end experiment (pretrain, then the
fine-tune, joint and arc adaptations) run through the command-line entry
points with the default configuration and seed 0. A summary line per
criterion is printed at the end of the pytest run.

Run alone with ``pytest tests/test_acceptance.py`` (about 10 minutes on one core).
"""
import sys
import time

import numpy as np
import pytest

from arcdet import cli, gradcheck
from arcdet.bridge import BridgeConfig, BridgeState, bridge_forward
from arcdet.checkpoint import Checkpoint
from arcdet.fusion import BBox, Branch, VetoConfig, iou, veto_fuse
from arcdet.metrics import average_precision, evaluate, report_from_csv
from arcdet.model import detector_from_checkpoint
from arcdet.synth import build_splits
from arcdet.tensor import Parameter, Tensor
from arcdet.trainer import OptimState, RunConfig, build_for_mode, lr_schedule, sgd_step
from brute import brute_evaluate
from gen import jitter, random_dets, random_gts

SEED = 0
MODES = ("finetune", "joint", "arc")


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    start = time.perf_counter()
    timings = {}
    codes = {"pretrained": cli.main(["pretrain", "--seed", str(SEED), "--out", str(root / "pretrained")])}
    timings["pretrained"] = time.perf_counter() - start
    ckpt = str(root / "pretrained" / "checkpoint.arck")
    for mode in MODES:
        t0 = time.perf_counter()
        codes[mode] = cli.main(["adapt", "--mode", mode, "--base-ckpt", ckpt, "--seed", str(SEED),
                                "--out", str(root / mode)])
        timings[mode] = time.perf_counter() - t0
    summaries = {name: cli.read_summary(root / name / "summary.csv") for name in codes}
    return {"root": root, "codes": codes, "summary": summaries, "seconds": time.perf_counter() - start,
            "timings": timings}


def _f(summary, key):
    return float(summary[key])


def test_criterion_1_gradient_suite(record_property):
    start = time.perf_counter()
    results = gradcheck.run(seed=SEED, cases=20)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_err)
    record_property("detail", f"{len(results)} ops x 20 seeds, worst {worst.op} {worst.max_rel_err:.2e} "
                              f"(< 1e-4), {elapsed:.1f}s (< 60s)")
    assert all(r.passed for r in results), [(r.op, r.max_rel_err) for r in results if not r.passed]
    assert {"conv2d", "sigmoid", "relu", "mul", "bridge"} <= {r.op for r in results}
    assert elapsed < 60


def test_criterion_2_identity_at_init(experiment, record_property):
    rng = np.random.default_rng(SEED)
    for _ in range(100):
        c_ctx, c_task = (int(v) for v in rng.integers(1, 12, size=2))
        h, w = (int(v) for v in rng.integers(1, 10, size=2))
        state = BridgeState(BridgeConfig(c_ctx, c_task, reduction_ratio=int(rng.integers(1, 9))), rng)
        f_in = rng.normal(scale=float(rng.uniform(0.1, 100)), size=(2, c_task, h, w))
        out = bridge_forward(Tensor(f_in), Tensor(rng.normal(size=(2, c_ctx, h, w))), state).values
        assert out.tobytes() == f_in.tobytes()

    cfg = RunConfig()
    ckpt = Checkpoint.load(experiment["root"] / "pretrained" / "checkpoint.arck")
    val = build_splits(cli.data_seed(SEED), cfg.base_scenes, "base")["val"]
    want = detector_from_checkpoint(ckpt).predict(val.images, val.image_ids)
    fresh = build_for_mode("arc", ckpt, cfg, SEED)
    got = [d for d in fresh.predict(val.images, val.image_ids) if d.branch is Branch.CONTEXT]
    record_property("detail", f"100 random bridge inputs bit-identical; {len(want)} base detections on "
                              f"{len(val)} validation images identical")
    assert got == want


def test_criterion_3_freeze_invariant(experiment, record_property):
    root = experiment["root"]
    assert experiment["codes"]["arc"] == 0
    pre = Checkpoint.load(root / "pretrained" / "checkpoint.arck")
    arc = Checkpoint.load(root / "arc" / "checkpoint.arck")
    frozen = [n for n in arc.names() if arc[n].frozen]
    assert frozen and all(n.startswith(("backbone.", "context_head.")) for n in frozen)
    diffs = []
    for name in frozen:
        a, b = pre[name.replace("context_head.", "head.", 1)], arc[name]
        if a.values.tobytes() != b.values.tobytes():
            diffs.append(name)
    before = report_from_csv((root / "pretrained" / "report_base.csv").read_text())
    after = report_from_csv((root / "arc" / "report_base.csv").read_text())
    worst = max(abs(before.ap[k] - after.ap[k]) for k in before.ap)
    forgetting = _f(experiment["summary"]["arc"], "forgetting_points")
    record_property("detail", f"{len(frozen)} frozen entries, {len(diffs)} differ; max base AP change "
                              f"{worst:.1e}; forgetting {forgetting:+.1f} pts")
    assert diffs == []
    assert before.ap.keys() == after.ap.keys() and worst <= 1e-12
    assert abs(before.map50 - after.map50) <= 1e-12 and abs(before.map5095 - after.map5095) <= 1e-12
    assert forgetting == 0.0


def test_criterion_4_qualitative_table(experiment, record_property):
    s = experiment["summary"]
    pre_base, pre_task = _f(s["pretrained"], "base_map50"), _f(s["pretrained"], "task_map50")
    ft_base, ft_task = _f(s["finetune"], "base_map50"), _f(s["finetune"], "task_map50")
    arc_base, arc_task = _f(s["arc"], "base_map50"), _f(s["arc"], "task_map50")
    joint_base = _f(s["joint"], "base_map50")
    minutes = experiment["seconds"] / 60
    checks = {
        "a": pre_task < 0.05,
        "b": ft_base < 0.10 * pre_base and ft_task >= 0.70,
        "c": abs(arc_task - ft_task) <= 0.05 and arc_base == pre_base,
        "d": abs(joint_base - pre_base) <= 0.05,
        "time": minutes < 30,
    }
    record_property("detail", (
        f"pretrained base {pre_base:.3f} task {pre_task:.3f} | finetune base {ft_base:.3f} task {ft_task:.3f} | "
        f"arc base {arc_base:.3f} task {arc_task:.3f} | joint base {joint_base:.3f} "
        f"task {_f(s['joint'], 'task_map50'):.3f} | {minutes:.1f} min | "
        + " ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())))
    assert all(code == 0 for code in experiment["codes"].values()), experiment["codes"]
    assert pre_base >= RunConfig().map_floor
    assert all(checks.values()), checks


def test_criterion_5_metrics_oracle(record_property):
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, False], 2) == 0.0
    assert average_precision([True, False, True], 2) == 253 / 303
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(50):
        classes = int(rng.integers(1, 4))
        gts = random_gts(rng, int(rng.integers(0, 16)), classes=classes)
        n_det = int(rng.integers(0, 31))
        near = jitter(rng, gts[: min(len(gts), n_det)])
        dets = near + random_dets(rng, n_det - len(near), classes=classes)
        rep = evaluate(dets, gts, range(classes))
        aps, map50, map5095, precision, recall = brute_evaluate(dets, gts, range(classes))
        for key, v in aps.items():
            assert (v is None) == (rep.ap[key] is None)
            if v is not None:
                worst = max(worst, abs(v - rep.ap[key]))
        for a, b in ((rep.map50, map50), (rep.map5095, map5095), (rep.precision, precision), (rep.recall, recall)):
            worst = max(worst, abs(a - b))
    record_property("detail", f"50 random instances, max deviation from brute force {worst:.1e} (<= 1e-9); "
                              "3 hand AP examples exact")
    assert worst <= 1e-9


def test_criterion_6_fusion_properties(record_property):
    a, b = BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)
    assert abs(iou(a, b) - 1 / 7) <= 1e-12
    assert iou(a, b) == iou(b, a) and iou(a, a) == 1.0 and iou(b, b) == 1.0
    rng = np.random.default_rng(SEED)
    for _ in range(1000):
        ctx = random_dets(rng, int(rng.integers(0, 10)), Branch.CONTEXT, coarse=True)
        spec = random_dets(rng, int(rng.integers(0, 10)), Branch.SPECIALIST, coarse=True)
        t1, t2, f1, f2 = rng.uniform(size=4)
        cfg = VetoConfig(t1, f1)
        fused = veto_fuse(ctx, spec, cfg)
        assert fused[:len(ctx)] == ctx
        assert veto_fuse(ctx, fused[len(ctx):], cfg) == fused
        low_t = veto_fuse(ctx, spec, VetoConfig(min(t1, t2), f1))
        high_t = veto_fuse(ctx, spec, VetoConfig(max(t1, t2), f1))
        assert len(low_t) <= len(high_t)
        low_f = veto_fuse(ctx, spec, VetoConfig(t1, min(f1, f2)))
        high_f = veto_fuse(ctx, spec, VetoConfig(t1, max(f1, f2)))
        assert len(low_f) <= len(high_f)
    record_property("detail", "IoU examples exact, 1/7 to 1e-12; 1000 veto fuzz cases hold")


def test_criterion_7_optimizer_trace(record_property):
    cfg = RunConfig(momentum=0.9, weight_decay=0.0)
    p, state = Parameter("p", np.array([1.0])), OptimState()
    trace = [float(p.values[0])]
    for _ in range(2):
        p.tensor.grad = np.array([1.0])
        sgd_step([p], state, 0.1, cfg)
        trace.append(float(p.values[0]))
    default = RunConfig()
    sched = {e: lr_schedule(e, default) for e in (0, 1, 2, 3, 29)}
    closed = {e: default.lr * min(1.0, (e + 1) / default.warmup_epochs) for e in sched}
    record_property("detail", f"p trace {trace}, lr {sched}")
    assert abs(trace[1] - 0.9) <= 1e-12 and abs(trace[2] - 0.71) <= 1e-12
    assert all(abs(sched[e] - closed[e]) <= 1e-15 for e in sched)


def test_criterion_8_determinism(experiment, tmp_path, record_property):
    first = experiment["root"] / "arc"
    ckpt = experiment["root"] / "pretrained" / "checkpoint.arck"
    assert cli.main(["adapt", "--mode", "arc", "--base-ckpt", str(ckpt), "--seed", str(SEED),
                     "--out", str(tmp_path)]) == 0
    files = ["checkpoint.arck", "train_log.csv", "summary.csv"]
    files += [f"report_{s}.{ext}" for s in ("base", "task", "mixed") for ext in ("csv", "txt")]
    differing = [f for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    record_property("detail", f"second arc run: {len(files) - len(differing)}/{len(files)} artifacts byte-identical")
    assert differing == []


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
