"""The nine acceptance criteria at their stated tolerances; each prints one pass/fail line."""

import math
import resource
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from active.ccfpn import CCFPN, ccfpn_apply
from active.evaluation import ScoredBox, ap50_report, average_precision, match_detections
from active.head import diou_nms, kmeans_anchors
from active.loss import GroundTruth, assign_targets, detection_loss
from active.model import ActiveModel, ModelConfig
from active.synth import SynthSpec, synth_generate
from active.tensor import Tensor
from active.tracking import Track, build_tracks, motility
from active.train import FROZEN_PREFIX, Dataset, PhaseConfig, TrainConfig, train

from gradtools import he_rescale
from oracles import ap_rank_walk, moving_average_scalar, nms_bruteforce, polyline_length
from test_ccfpn import IN_WIDTHS, as_set, random_pyramid, transcribe
from test_cli import pipeline, small_config
from test_evaluation import _match_oracle, _random_case
from test_head import _random_dets
from test_tracking import _build_tracks_oracle, _scene
from test_train import _cfg, _tiny_setup

ROOT = Path(__file__).resolve().parents[1]

# overfit smoke run
SMOKE_IMAGES = 8
SMOKE_PYRAMID_WIDTH = 16
SMOKE_SCHEDULE = TrainConfig(phase1=PhaseConfig(10, 4, 1e-3, "backbone"), phase2=PhaseConfig(400, 4, 1e-3, "none"))
SMOKE_EVAL_CONF = 0.05
SMOKE_BUDGET_S = 30 * 60


def test_1_gradient_suite(criterion):
    c = criterion(1, "gradient suite: ops and blocks < 1e-4, full loss < 1e-3, 20 seeds, < 2 min CPU")
    before = resource.getrusage(resource.RUSAGE_CHILDREN)
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "gradcheck", "-p", "no:cacheprovider",
                           str(ROOT / "tests")], cwd=ROOT, capture_output=True, text=True)
    after = resource.getrusage(resource.RUSAGE_CHILDREN)
    cpu = (after.ru_utime - before.ru_utime) + (after.ru_stime - before.ru_stime)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and cpu < 120
    c.record(ok, f"{summary}; {cpu:.1f} s CPU")
    assert ok, proc.stdout[-3000:]


def test_2_ccfpn_oracle(criterion):
    c = criterion(2, "fusion graph equals the straight-line transcription within 1e-12; nested variants exact")
    worst = 0.0
    for variant in (1, 2, 3, 4):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            net = CCFPN(variant, IN_WIDTHS, 3, rng)
            he_rescale(net, rng)
            pin = random_pyramid(rng, n=2)
            got = ccfpn_apply(net, as_set(pin)).outputs()
            for g, r in zip(got, transcribe(net, pin, variant)):
                worst = max(worst, float(np.max(np.abs(g.data - r))))
    nested = True
    for outer, inner, prefix in ((2, 1, "I"), (4, 3, "III")):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            big, small = CCFPN(outer, IN_WIDTHS, 3, rng), CCFPN(inner, IN_WIDTHS, 3, rng)
            small.load_state_dict({k: v for k, v in big.state_dict().items() if k in dict(small.named_parameters())})
            pin = as_set(random_pyramid(rng))
            rb, rs = ccfpn_apply(big, pin), ccfpn_apply(small, pin)
            nested &= all(np.array_equal(rb[("node", f"{prefix}.P{k}")].data, rs[("out", k)].data) for k in (1, 2, 3))
    ok = worst <= 1e-12 and nested
    c.record(ok, f"max abs diff {worst:.2e} over 400 pyramids; nested exact: {nested}")
    assert ok


def test_3_nms_oracle(criterion):
    c = criterion(3, "DIoU-NMS equals the brute-force greedy oracle on 1000 sets; idempotent")
    rng = np.random.default_rng(3)
    mismatches = not_idempotent = 0
    for _ in range(1000):
        dets = _random_dets(rng, int(rng.integers(0, 11)))
        conf_t = float(rng.choice([0.0, 0.3, 0.5]))
        diou_t = float(rng.choice([0.0, 0.2, 0.45, 0.7]))
        got = diou_nms(dets, conf_t, diou_t)
        ref = nms_bruteforce([(d.class_id, d.confidence, (d.cx, d.cy, d.w, d.h)) for d in dets], conf_t, diou_t)
        mismatches += [(d.class_id, d.confidence, (d.cx, d.cy, d.w, d.h)) for d in got] != ref
        not_idempotent += diou_nms(got, conf_t, diou_t) != got
    ok = mismatches == 0 and not_idempotent == 0
    c.record(ok, f"{mismatches} mismatches, {not_idempotent} non-idempotent")
    assert ok


def test_4_ap_oracle(criterion):
    c = criterion(4, "AP equals the rank-walk oracle within 1e-12 on 500 cases; monotonicity holds")
    rng = np.random.default_rng(4)
    worst, violations = 0.0, 0
    for _ in range(500):
        dets, gts = _random_case(rng)
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0:
            violations += average_precision(dets, gts) is not None
            continue
        flags = _match_oracle(dets, gts)
        violations += list(match_detections(dets, gts)) != flags
        base = average_precision(dets, gts)
        worst = max(worst, abs(base - ap_rank_walk(flags, n_gt)))
        top = max([d.confidence for d in dets], default=0.0) + 1.0
        gts_tp = {k: list(v) for k, v in gts.items()}
        gts_tp[0].append((500.0, 500.0, 5.0, 5.0))
        violations += average_precision([ScoredBox(0, top, (500.0, 500.0, 5.0, 5.0))] + dets, gts_tp) < base - 1e-15
        low = min([d.confidence for d in dets], default=1.0) / 2
        fp = ScoredBox(0, low, (900.0, 900.0, 5.0, 5.0))
        violations += average_precision(dets + [fp], gts) > base + 1e-15
    ok = worst <= 1e-12 and violations == 0
    c.record(ok, f"max diff {worst:.2e}, {violations} violations")
    assert ok


def test_5_motility(criterion):
    c = criterion(5, "straight line VSL=VCL=VAP to 1e-9; VSL <= VCL on 10000 polylines; zigzag oracle to 1e-9")
    line = Track(0, 0, [(t, 5.0 * t, 0.0) for t in range(12)])
    straight = max(abs(v - 125.0) for v in motility(line, 25.0, 1.0))
    rng = np.random.default_rng(5)
    violations = 0
    for _ in range(10_000):
        pts = np.cumsum(rng.normal(0, rng.uniform(0.1, 10), size=(int(rng.integers(2, 30)), 2)), axis=0)
        vsl, vcl, _ = motility(Track(0, 0, [(t, *p) for t, p in enumerate(pts)]), 25.0, 1.0)
        violations += vsl > vcl + 1e-9
    pts = [(float(t), 2.0 * (t % 2)) for t in range(11)]
    fps, scale, duration = 30.0, 0.7, 10 / 30.0
    got = motility(Track(0, 0, [(t, *p) for t, p in enumerate(pts)]), fps, scale)
    ref = (math.dist(pts[0], pts[-1]) / duration * scale, polyline_length(pts) / duration * scale,
           polyline_length(moving_average_scalar(pts, 5)) / duration * scale)
    zigzag = max(abs(a - b) for a, b in zip(got, ref))
    ok = straight <= 1e-9 and violations == 0 and zigzag <= 1e-9
    c.record(ok, f"straight {straight:.1e}, {violations} violations, zigzag {zigzag:.1e}")
    assert ok


def test_6_tracking_oracle(criterion):
    c = criterion(6, "build_tracks equals the exhaustive greedy oracle on 200 scenes")
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(200):
        frames = _scene(rng, int(rng.integers(2, 7)))
        gate = float(rng.choice([5.0, 10.0, 20.0]))
        max_gap, min_len = int(rng.integers(0, 3)), int(rng.integers(1, 4))
        got = build_tracks(frames, gate, max_gap, min_len)
        mismatches += [(t.class_id, [tuple(p) for p in t.points]) for t in got] != \
            _build_tracks_oracle(frames, gate, max_gap, min_len)
    c.record(mismatches == 0, f"{mismatches} mismatches")
    assert mismatches == 0


def test_7_overfit_smoke(criterion):
    c = criterion(7, "8 synthetic images: loss < 10% of initial, then AP50 >= 0.90, within 30 min")
    start = time.process_time()
    video = synth_generate(SynthSpec(n_frames=SMOKE_IMAGES, seed=0))
    images = video.images()
    boxes = [[GroundTruth(cx, cy, w, h, cls) for cls, cx, cy, w, h in frame] for frame in video.annotations]
    wh = np.array([[g.w, g.h] for frame in boxes for g in frame])
    cfg = ModelConfig.micro(variant=4, pyramid_width=SMOKE_PYRAMID_WIDTH, anchors=kmeans_anchors(wh).tolist())
    model = ActiveModel(cfg, seed=0)
    targets = assign_targets(boxes, model.priors, cfg.image_size)

    def full_loss():
        return detection_loss(model(Tensor(images)), targets).data.item()

    initial = full_loss()
    train(Dataset(images, boxes), model, SMOKE_SCHEDULE)
    final = full_loss()
    dets = model.detect(images, conf_thresh=SMOKE_EVAL_CONF)
    report = ap50_report(dict(enumerate(dets)), dict(enumerate(boxes)))
    cpu = time.process_time() - start
    ratio = final / initial
    ok = ratio < 0.1 and report.mean_ap >= 0.90 and cpu < SMOKE_BUDGET_S
    aps = ", ".join(f"{k} {v.ap:.3f}" for k, v in report.classes.items())
    c.record(ok, f"loss {initial:.1f} -> {final:.2f} ({ratio:.2%}); AP50 {report.mean_ap:.3f} [{aps}]; {cpu:.0f} s CPU")
    assert ok


def test_8_freeze_contract(criterion):
    c = criterion(8, "phase 1 leaves the backbone update norm exactly 0; phase 2 updates are nonzero")
    model, data = _tiny_setup()
    init = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith(FROZEN_PREFIX)}
    res = train(data, model, _cfg(p1=3, p2=0))
    untouched = all(np.array_equal(p.data, init[n]) for n, p in model.named_parameters() if n in init)
    phase1 = res.update_norms["phase1"]
    res2 = train(data, model, _cfg(p1=0, p2=2))
    phase2 = res2.update_norms["phase2"]
    ok = phase1["backbone"] == 0.0 and untouched and phase1["rest"] > 0 and phase2["backbone"] > 0 and phase2["rest"] > 0
    c.record(ok, f"phase 1 backbone {phase1['backbone']}, rest {phase1['rest']:.3g}; "
                 f"phase 2 backbone {phase2['backbone']:.3g}, rest {phase2['rest']:.3g}")
    assert ok


def test_9_cli_determinism(criterion, tmp_path):
    c = criterion(9, "synth, train, detect, eval, track, motility byte-identical across two runs")
    cfg_path = tmp_path / "run.json"
    small_config().save(cfg_path)
    a = pipeline(tmp_path / "a", cfg_path)
    b = pipeline(tmp_path / "b", cfg_path)
    same_names = [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
    differing = [str(p.relative_to(tmp_path / "a")) for p, q in zip(a, b) if p.read_bytes() != q.read_bytes()]
    ok = same_names and not differing and len(a) > 0
    c.record(ok, f"{len(a)} files compared, differing: {differing or 'none'}")
    assert ok
