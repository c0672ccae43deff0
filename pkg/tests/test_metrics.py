import numpy as np
import pytest

from coopsim import metrics
from coopsim.config import EvalConfig
from coopsim.kernels import numpy_backend
from coopsim.metrics import (EvalLabel, FrameResult, average_precision,
                             breakdown, l2_at_recall, match_frames,
                             operating_threshold, rotated_iou, tcr)
from coopsim.model import Detection, Forecast

from oracles import pr_curve_reference, raster_iou

CFG = EvalConfig()


def det(x, y, w=4.0, h=2.0, th=0.0, score=0.9):
    return Detection(x, y, w, h, th, score)


def fc_static(x, y, k=6):
    return Forecast(np.tile([x, y], (k, 1)))


def lbl(x, y, w=4.0, h=2.0, th=0.0, wps=None, points=10, speed=0.0):
    return EvalLabel(np.array([x, y, w, h, th]),
                     np.tile([x, y], (6, 1)) if wps is None else np.asarray(wps),
                     points, speed)


def frame(dets, labels):
    return FrameResult([d for d, _ in dets], [f for _, f in dets], labels)


# -- rotated IoU -------------------------------------------------------------


def test_iou_identical_and_offset():
    a = [0, 0, 1, 1, 0.0]
    assert rotated_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    b = [0.5, 0, 1, 1, 0.0]
    assert rotated_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = [*rng.uniform(-5, 5, 2), *rng.uniform(0.5, 6, 2), rng.uniform(-np.pi, np.pi)]
        b = [*rng.uniform(-5, 5, 2), *rng.uniform(0.5, 6, 2), rng.uniform(-np.pi, np.pi)]
        ab = rotated_iou(a, b)
        ba = rotated_iou(b, a)
        assert 0.0 <= ab <= 1.0
        assert ab == pytest.approx(ba, abs=1e-9)


def test_iou_axis_aligned_matches_formula():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ax, ay, bx, by = rng.uniform(-4, 4, 4)
        aw, ah, bw, bh = rng.uniform(0.5, 5, 4)
        a = [ax, ay, aw, ah, 0.0]
        b = [bx, by, bw, bh, 0.0]
        ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
        iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
        inter = ix * iy
        expect = inter / (aw * ah + bw * bh - inter)
        assert abs(rotated_iou(a, b) - expect) < 1e-12


def test_iou_degenerate_box_rejected():
    with pytest.raises(metrics.DegenerateBoxError):
        rotated_iou([0, 0, 0.0, 1, 0], [0, 0, 1, 1, 0])


def test_iou_rotation_about_far_pivot_vs_raster_oracle():
    # 5x2 box rotated 1 degree about a pivot 70 m away, a couple of headings
    pivot = np.array([-70.0, 0.0])
    ang = np.radians(1.0)
    for heading in (0.0, np.pi / 3):
        box = np.array([0.0, 0.0, 5.0, 2.0, heading])
        c, s = np.cos(ang), np.sin(ang)
        rel = box[:2] - pivot
        moved = pivot + np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1]])
        rotated = np.array([moved[0], moved[1], 5.0, 2.0, heading + ang])
        exact = rotated_iou(box, rotated)
        approx = raster_iou(box, rotated, cell=0.01)
        assert abs(exact - approx) < 0.005


# -- average precision ----------------------------------------------------------


def test_ap_perfect_detections():
    frames = [frame([(det(0, 0, score=0.9), fc_static(0, 0))], [lbl(0, 0)]),
              frame([(det(5, 1, score=0.8), fc_static(5, 1))], [lbl(5, 1)])]
    ap, _ = average_precision(frames, 0.7)
    assert ap == pytest.approx(100.0)


def test_ap_single_low_iou_detection_zero():
    frames = [frame([(det(10, 10, score=0.9), fc_static(10, 10))], [lbl(0, 0)])]
    ap, _ = average_precision(frames, 0.5)
    assert ap == 0.0


def test_ap_staircase_hand_case():
    # 2 labels; detections: 0.9 TP, 0.8 FP, 0.7 TP -> all-point AP = 5/6
    labels = [lbl(0, 0), lbl(20, 0)]
    dets = [(det(0, 0, score=0.9), fc_static(0, 0)),
            (det(40, 10, score=0.8), fc_static(40, 10)),
            (det(20, 0, score=0.7), fc_static(20, 0))]
    ap, (rec, prec) = average_precision([frame(dets, labels)], 0.5)
    assert ap == pytest.approx(100.0 * 5.0 / 6.0, abs=1e-9)
    assert rec.tolist() == [0.5, 0.5, 1.0]


def test_ap_zero_labels_reported_none():
    ap, _ = average_precision([frame([(det(0, 0), fc_static(0, 0))], [])], 0.5)
    assert ap is None


def oracle_ap(frames, iou_thr):
    """Independent matching + PR walk using the pure-python IoU backend."""
    pool = []
    for fi, fr in enumerate(frames):
        for di, d in enumerate(fr.detections):
            pool.append((-d.score, d.x, d.y, d.theta, fi, di))
    pool.sort()
    used = [set() for _ in frames]
    recs = []
    for negs, _, _, _, fi, di in pool:
        d = frames[fi].detections[di]
        cand = [(numpy_backend.rotated_iou_pair(d.box(), l.box), li)
                for li, l in enumerate(frames[fi].labels) if li not in used[fi]]
        cand = [c for c in cand if c[0] >= iou_thr]
        if cand:
            iou, li = max(cand)
            used[fi].add(li)
            recs.append((-negs, True))
        else:
            recs.append((-negs, False))
    n = sum(len(fr.labels) for fr in frames)
    return 100.0 * pr_curve_reference(recs, n)[2]


def random_frames(rng, n_frames=6):
    frames = []
    for _ in range(n_frames):
        labels = [lbl(*rng.uniform(-30, 30, 2), th=rng.uniform(-1, 1))
                  for _ in range(int(rng.integers(0, 5)))]
        dets = []
        for l in labels:
            if rng.uniform() < 0.75:  # noisy copy of the label
                dets.append((det(l.box[0] + rng.normal(0, 0.4), l.box[1] + rng.normal(0, 0.4),
                                 th=l.box[4] + rng.normal(0, 0.05),
                                 score=float(rng.uniform(0.2, 1.0))),
                             fc_static(l.box[0], l.box[1])))
        for _ in range(int(rng.integers(0, 3))):  # clutter
            dets.append((det(*rng.uniform(-30, 30, 2), score=float(rng.uniform(0.05, 0.9))),
                         fc_static(0, 0)))
        frames.append(frame(dets, labels))
    return frames


def test_ap_matches_bruteforce_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        frames = random_frames(rng)
        if sum(len(f.labels) for f in frames) == 0:
            continue
        ap, _ = average_precision(frames, 0.5)
        assert ap == pytest.approx(oracle_ap(frames, 0.5), abs=1e-9)


def test_ap_invariant_to_frame_order_and_score_scaling():
    rng = np.random.default_rng(5)
    frames = random_frames(rng)
    ap1, _ = average_precision(frames, 0.5)
    ap2, _ = average_precision(list(reversed(frames)), 0.5)
    assert ap1 == pytest.approx(ap2, abs=1e-12)
    scaled = []
    for fr in frames:
        dets = [Detection(d.x, d.y, d.w, d.h, d.theta, 0.5 * d.score) for d in fr.detections]
        scaled.append(FrameResult(dets, fr.forecasts, fr.labels))
    ap3, _ = average_precision(scaled, 0.5)
    assert ap1 == pytest.approx(ap3, abs=1e-12)


def test_matching_never_reuses_labels():
    rng = np.random.default_rng(6)
    frames = random_frames(rng, n_frames=4)
    records, _ = match_frames(frames, 0.3)
    seen = set()
    for r in records:
        if r.label >= 0:
            key = (r.frame, r.label)
            assert key not in seen
            seen.add(key)


# -- displacement error ------------------------------------------------------------


def test_l2_perfect_forecasts_zero():
    frames = [frame([(det(0, 0, score=0.9), fc_static(0, 0))], [lbl(0, 0)])]
    errs, thr = l2_at_recall(frames, CFG)
    assert all(v == 0.0 for v in errs.values())


def test_l2_constant_offset():
    wps = np.tile([0.5, 0.0], (6, 1)) + np.array([3.0, 0.0])
    frames = [frame([(det(3, 0, score=0.9), Forecast(wps))],
                    [lbl(3, 0, wps=np.tile([3.0, 0.0], (6, 1)))])]
    errs, _ = l2_at_recall(frames, CFG)
    assert all(v == pytest.approx(0.5) for v in errs.values())


def test_l2_known_synthetic_errors():
    # errors grow linearly along the horizon: 0.1 m per waypoint index+1
    base = np.tile([0.0, 0.0], (6, 1))
    wps = base + np.stack([0.1 * np.arange(1, 7), np.zeros(6)], axis=1)
    frames = [frame([(det(0, 0, score=0.9), Forecast(wps))], [lbl(0, 0, wps=base)])]
    errs, _ = l2_at_recall(frames, CFG)
    assert errs[1.0] == pytest.approx(0.2)
    assert errs[2.0] == pytest.approx(0.4)
    assert errs[3.0] == pytest.approx(0.6)


def test_l2_threshold_prefers_high_recall():
    # 10 labels; top-9 scores are TPs, low-score clutter would hurt precision
    frames = []
    for i in range(10):
        d = [(det(0, 0, score=0.99 - 0.01 * i), fc_static(0, 0))]
        if i >= 9:
            d = [(det(50, 10, score=0.2), fc_static(50, 10))]
        frames.append(frame(d, [lbl(0, 0)]))
    thr = operating_threshold(frames, CFG)
    assert thr == pytest.approx(0.91)


# -- trajectory collision rate --------------------------------------------------------


def test_tcr_parallel_lanes_zero():
    dets = [(det(0, 0, score=0.9), fc_static(0, 0)),
            (det(0, 3, score=0.9), fc_static(0, 3))]
    frames = [frame(dets, [lbl(0, 0), lbl(0, 3)])]
    assert tcr(frames, 0.01, 0.5) == 0.0


def test_tcr_crossing_counted_once():
    wps_a = np.stack([np.linspace(1, 6, 6), np.zeros(6)], axis=1)
    wps_b = np.stack([np.linspace(1, 6, 6), np.zeros(6)], axis=1)
    dets = [(det(0, 0, score=0.9), Forecast(wps_a)),
            (det(0, 2, score=0.9), Forecast(wps_b))]
    frames = [frame(dets, [])]
    # both trajectories pass through the same cells at every waypoint: 1 pair
    assert tcr(frames, 0.01, 0.5) == pytest.approx(100.0)


def test_tcr_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    for _ in range(5):
        dets = []
        for _ in range(int(rng.integers(2, 6))):
            x, y = rng.uniform(-10, 10, 2)
            v = rng.uniform(-3, 3, 2)
            wps = np.array([[x + v[0] * 0.5 * k, y + v[1] * 0.5 * k] for k in range(1, 7)])
            dets.append((det(x, y, score=0.9), Forecast(wps)))
        frames = [frame(dets, [])]
        got = tcr(frames, 0.01, 0.5)
        # oracle: exhaustive pair/waypoint loop on the python IoU backend
        hits = pairs = 0
        ds = [d for d, _ in dets]
        fs = [f for _, f in dets]
        for i in range(len(ds)):
            for j in range(i + 1, len(ds)):
                pairs += 1
                if any(numpy_backend.rotated_iou_pair(
                        np.array([*fs[i].waypoints[k], ds[i].w, ds[i].h, ds[i].theta]),
                        np.array([*fs[j].waypoints[k], ds[j].w, ds[j].h, ds[j].theta])) > 0.01
                        for k in range(6)):
                    hits += 1
        assert got == pytest.approx(100.0 * hits / pairs if pairs else 0.0)


# -- breakdowns --------------------------------------------------------------------------


def test_breakdown_point_bins_and_counts():
    frames = [frame([(det(0, 0, score=0.9), fc_static(0, 0))],
                    [lbl(0, 0, points=0), lbl(12, 0, points=3),
                     lbl(24, 0, points=15), lbl(36, 0, points=50)])]
    aps, counts = breakdown(frames, CFG, by="points")
    assert counts == {"0": 1, "1-6": 1, "7-30": 1, ">30": 1}
    assert sum(counts.values()) == 4
    assert aps["0"] is not None


def test_breakdown_static_scene_has_empty_speed_bins():
    frames = [frame([], [lbl(0, 0, speed=0.0), lbl(10, 0, speed=0.0)])]
    aps, counts = breakdown(frames, CFG, by="speed")
    names = list(counts)
    assert counts[names[0]] == 2
    assert all(counts[n] == 0 for n in names[1:])
    assert all(aps[n] is None for n in names[1:])


def test_breakdown_bin_edges_half_open():
    assert metrics.bin_index(0, (1, 7, 31)) == 0
    assert metrics.bin_index(1, (1, 7, 31)) == 1
    assert metrics.bin_index(6, (1, 7, 31)) == 1
    assert metrics.bin_index(7, (1, 7, 31)) == 2
    assert metrics.bin_index(30, (1, 7, 31)) == 2
    assert metrics.bin_index(31, (1, 7, 31)) == 3
