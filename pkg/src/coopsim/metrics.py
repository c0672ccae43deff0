"""Detection and forecasting metrics: rotated-box IoU, average precision and
PR curves, displacement error at a recall operating point, trajectory
collision rate, and per-bin breakdowns."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import EvalConfig


class DegenerateBoxError(ValueError):
    pass


def rotated_iou(box_a, box_b):
    """Exact IoU of two oriented boxes (cx, cy, w, h, theta) via convex
    polygon clipping."""
    box_a = np.asarray(box_a, dtype=np.float64)
    box_b = np.asarray(box_b, dtype=np.float64)
    for b in (box_a, box_b):
        if b[2] <= 0 or b[3] <= 0:
            raise DegenerateBoxError(f"zero-area box {b.tolist()}")
    return float(kernels.rotated_iou_pair(box_a, box_b))


@dataclass
class EvalLabel:
    box: np.ndarray             # ego frame (cx, cy, w, h, theta)
    waypoints: np.ndarray       # [K,2] future centers, ego frame
    point_count: int = 0        # receiver-visible points across input sweeps
    speed: float = 0.0


@dataclass
class FrameResult:
    detections: list = field(default_factory=list)  # Detection
    forecasts: list = field(default_factory=list)   # Forecast
    labels: list = field(default_factory=list)      # EvalLabel


@dataclass
class _Record:
    score: float
    frame: int
    det: int
    label: int   # matched label index within the frame, -1 for false positive
    iou: float


def match_frames(frames, iou_threshold):
    """Greedy score-descending matching, each label claimed at most once.

    Pooled detections are ordered by (-score, x, y, theta) so results do not
    depend on frame order or per-frame detection order.
    """
    pool = []
    for fi, fr in enumerate(frames):
        for di, det in enumerate(fr.detections):
            pool.append((-det.score, det.x, det.y, det.theta, fi, di))
    pool.sort()
    taken = [set() for _ in frames]
    records = []
    for negscore, _, _, _, fi, di in pool:
        det = frames[fi].detections[di]
        dbox = det.box()
        best, best_iou = -1, iou_threshold
        for li, lbl in enumerate(frames[fi].labels):
            if li in taken[fi]:
                continue
            iou = kernels.rotated_iou_pair(dbox, lbl.box)
            if iou >= best_iou:
                best, best_iou = li, iou
        if best >= 0:
            taken[fi].add(best)
            records.append(_Record(-negscore, fi, di, best, best_iou))
        else:
            records.append(_Record(-negscore, fi, di, -1, 0.0))
    n_labels = sum(len(fr.labels) for fr in frames)
    return records, n_labels


def pr_curve(records, n_labels):
    """(recalls, precisions) along the score-descending sweep."""
    tp = fp = 0
    recalls, precisions = [], []
    for r in records:
        if r.label >= 0:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_labels if n_labels else 0.0)
        precisions.append(tp / (tp + fp))
    return np.array(recalls), np.array(precisions)


def ap_from_curve(recalls, precisions):
    """All-point interpolated AP: area under the precision envelope."""
    if len(recalls) == 0:
        return 0.0
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def average_precision(frames, iou_threshold):
    """AP (0-100) and the PR curve at one IoU threshold; None with no labels."""
    records, n_labels = match_frames(frames, iou_threshold)
    if n_labels == 0:
        return None, (np.zeros(0), np.zeros(0))
    recalls, precisions = pr_curve(records, n_labels)
    return 100.0 * ap_from_curve(recalls, precisions), (recalls, precisions)


def operating_threshold(frames, cfg: EvalConfig):
    """Highest score threshold reaching the recall target at the matching
    IoU; falls back to the maximum-recall threshold."""
    records, n_labels = match_frames(frames, cfg.match_iou)
    if n_labels == 0 or not records:
        return 0.0
    tp = 0
    for r in records:
        if r.label >= 0:
            tp += 1
        if tp / n_labels >= cfg.recall_target:
            return r.score
    return records[-1].score


def l2_at_recall(frames, cfg: EvalConfig):
    """Mean forecast center displacement at each horizon over the true
    positives of the recall-target operating point."""
    thr = operating_threshold(frames, cfg)
    records, n_labels = match_frames(frames, cfg.match_iou)
    errs = {h: [] for h in cfg.horizons}
    # horizon h maps to waypoint index h / interval - 1 on the 0.5 s ladder
    for r in records:
        if r.label < 0 or r.score < thr:
            continue
        fr = frames[r.frame]
        wps = fr.forecasts[r.det].waypoints
        lbl = fr.labels[r.label].waypoints
        steps = len(lbl)
        for h in cfg.horizons:
            k = int(round(h / 3.0 * steps)) - 1
            errs[h].append(float(np.hypot(*(wps[k] - lbl[k]))))
    return {h: (float(np.mean(v)) if v else None) for h, v in errs.items()}, thr


def tcr(frames, tau, score_threshold):
    """Trajectory collision rate: fraction of detected-object pairs whose
    forecast-advanced boxes overlap above tau at any waypoint."""
    pairs = 0
    collisions = 0
    for fr in frames:
        keep = [i for i, d in enumerate(fr.detections) if d.score >= score_threshold]
        for a in range(len(keep)):
            for b in range(a + 1, len(keep)):
                i, j = keep[a], keep[b]
                pairs += 1
                di, dj = fr.detections[i], fr.detections[j]
                wi, wj = fr.forecasts[i].waypoints, fr.forecasts[j].waypoints
                for k in range(len(wi)):
                    bi = np.array([wi[k, 0], wi[k, 1], di.w, di.h, di.theta])
                    bj = np.array([wj[k, 0], wj[k, 1], dj.w, dj.h, dj.theta])
                    if kernels.rotated_iou_pair(bi, bj) > tau:
                        collisions += 1
                        break
    return 100.0 * collisions / pairs if pairs else 0.0


POINT_BIN_NAMES = ("0", "1-6", "7-30", ">30")


def bin_index(value, edges):
    """Half-open bins: value < edges[0] is bin 0, edges[i] <= v < edges[i+1]."""
    return int(np.searchsorted(np.asarray(edges, dtype=np.float64), value, side="right"))


def breakdown(frames, cfg: EvalConfig, by="points", iou_threshold=0.7):
    """Per-bin AP: bin labels are positives, detections matched to other bins
    are ignored, unmatched detections count as false positives everywhere.

    Returns {bin_name: AP or None for empty bins} plus per-bin label counts.
    """
    if by == "points":
        edges = cfg.point_bin_edges
        names = POINT_BIN_NAMES if len(edges) == 3 else None
        value = lambda lbl: lbl.point_count
    elif by == "speed":
        edges = cfg.speed_bin_edges
        names = None
        value = lambda lbl: lbl.speed
    else:
        raise ValueError(f"unknown breakdown axis {by!r}")
    n_bins = len(edges) + 1
    if names is None:
        names = []
        lo = None
        for e in list(edges) + [None]:
            names.append(f"{lo if lo is not None else 0}-{e}" if e is not None else f">={lo}")
            lo = e
        names = tuple(names)

    records, _ = match_frames(frames, iou_threshold)
    counts = np.zeros(n_bins, dtype=int)
    for fr in frames:
        for lbl in fr.labels:
            counts[bin_index(value(lbl), edges)] += 1

    aps = {}
    for b in range(n_bins):
        if counts[b] == 0:
            aps[names[b]] = None
            continue
        sub = []
        for r in records:
            if r.label < 0:
                sub.append(_Record(r.score, r.frame, r.det, -1, 0.0))
            else:
                lbl = frames[r.frame].labels[r.label]
                if bin_index(value(lbl), edges) == b:
                    sub.append(r)
        recalls, precisions = pr_curve(sub, int(counts[b]))
        aps[names[b]] = 100.0 * ap_from_curve(recalls, precisions)
    return aps, {names[b]: int(counts[b]) for b in range(n_bins)}
