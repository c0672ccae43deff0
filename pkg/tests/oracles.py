"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (finite
differences, exhaustive enumeration, rasterized areas) and must stay
independent of the library code paths it checks.
"""

import numpy as np


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def ray_segment_hits(origin, direction, segments, max_range):
    """Exact nearest intersection of one ray with a list of segments.

    segments: iterable of ((x0,y0),(x1,y1)).  Returns (dist, seg_index) with
    dist=inf when nothing is hit within max_range.
    """
    ox, oy = origin
    dx, dy = direction
    best = np.inf
    best_i = -1
    for i, ((x0, y0), (x1, y1)) in enumerate(segments):
        ex, ey = x1 - x0, y1 - y0
        denom = dx * ey - dy * ex
        if denom == 0.0:
            continue
        # origin + t*d == p0 + u*e
        t = ((x0 - ox) * ey - (y0 - oy) * ex) / denom
        u = ((x0 - ox) * dy - (y0 - oy) * dx) / denom
        if 0.0 <= u <= 1.0 and 1e-9 < t <= max_range and t < best:
            best = t
            best_i = i
    return best, best_i


def box_segments(cx, cy, w, h, theta):
    """The four boundary segments of an oriented box, w along heading."""
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = 0.5 * w, 0.5 * h
    local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
    pts = [(cx + c * px - s * py, cy + s * px + c * py) for px, py in local]
    return [(pts[i], pts[(i + 1) % 4]) for i in range(4)]


def point_in_box(px, py, box):
    cx, cy, w, h, th = box
    c, s = np.cos(th), np.sin(th)
    rx, ry = px - cx, py - cy
    lx = c * rx + s * ry
    ly = -s * rx + c * ry
    return (abs(lx) <= 0.5 * w) & (abs(ly) <= 0.5 * h)


def raster_iou(box_a, box_b, cell=0.01):
    """Rasterized IoU of two oriented boxes on a `cell`-sized grid."""
    corners = []
    for b in (box_a, box_b):
        cx, cy, w, h, th = b
        r = 0.5 * np.hypot(w, h)
        corners.append((cx - r, cx + r, cy - r, cy + r))
    x0 = min(c[0] for c in corners)
    x1 = max(c[1] for c in corners)
    y0 = min(c[2] for c in corners)
    y1 = max(c[3] for c in corners)
    xs = np.arange(x0 + cell / 2, x1, cell)
    ys = np.arange(y0 + cell / 2, y1, cell)
    gx, gy = np.meshgrid(xs, ys)
    in_a = point_in_box(gx, gy, box_a)
    in_b = point_in_box(gx, gy, box_b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def greedy_nms(boxes, scores, iou_fn, iou_threshold):
    """Exhaustive reference NMS: descending score, suppress IoU >= threshold."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_fn(boxes[i], boxes[j]) < iou_threshold for j in keep):
            keep.append(i)
    return keep


def pr_curve_reference(records, n_labels):
    """Brute-force PR points from (score, is_tp) records, plus all-point AP.

    Returns (recalls, precisions, ap).  Precision envelope / all-point
    interpolation: AP = sum (r_i - r_{i-1}) * max precision at recall >= r_i.
    """
    records = sorted(records, key=lambda r: -r[0])
    tp = fp = 0
    recalls, precisions = [], []
    for _, is_tp in records:
        tp += 1 if is_tp else 0
        fp += 0 if is_tp else 1
        recalls.append(tp / n_labels if n_labels else 0.0)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[i:])
            prev_r = r
    return recalls, precisions, ap
