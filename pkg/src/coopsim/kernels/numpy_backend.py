"""Pure numpy/python reference implementations of the hot kernels.

Semantics here are the contract; the numba backend mirrors them.  Convolution
runs as im2col + BLAS matmul, the range coder and polygon clipping are plain
Python loops (slow but exact).
"""

import numpy as np

# ---------------------------------------------------------------------------
# convolution (channels-last, float64)
# ---------------------------------------------------------------------------


def _im2col(xp, k, stride):
    """Patch matrix of a padded [H,W,C] image: rows are output cells,
    columns ordered (ka, kb, c) to match kernel.reshape(k*k*C, -1)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]  # [Ho, Wo, C, k, k]
    ho, wo = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, k * k * xp.shape[2])
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, stride, pad):
    """x [H,W,Cin], w [k,k,Cin,Cout] -> y [Ho,Wo,Cout]."""
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    cols, ho, wo = _im2col(xp, k, stride)
    y = cols @ w.reshape(k * k * w.shape[2], w.shape[3])
    return y.reshape(ho, wo, w.shape[3])


def conv2d_input_grad(gy, w, stride, pad, h, w_in):
    """Gradient of conv2d_forward w.r.t. x, via the transposed convolution
    identity (dilate gy by stride, full-correlate with the flipped kernel)."""
    k = w.shape[0]
    ho, wo, co = gy.shape
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    gyd = np.zeros((hd, wd, co), dtype=gy.dtype)
    gyd[::stride, ::stride] = gy
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))  # [k,k,Co,Ci]
    full = conv2d_forward(gyd, wf, 1, k - 1)  # [(ho-1)s+k, (wo-1)s+k, Ci]
    gxp = np.zeros((h + 2 * pad, w_in + 2 * pad, w.shape[2]), dtype=gy.dtype)
    gxp[: full.shape[0], : full.shape[1]] = full
    return np.ascontiguousarray(gxp[pad : pad + h, pad : pad + w_in])


def conv2d_kernel_grad(x, gy, k, stride, pad):
    """Gradient of conv2d_forward w.r.t. w."""
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    cols, ho, wo = _im2col(xp, k, stride)
    co = gy.shape[2]
    gw = cols.T @ gy.reshape(ho * wo, co)
    return gw.reshape(k, k, x.shape[2], co)


# ---------------------------------------------------------------------------
# bilinear sampling (coords are (row, col) in pixel space)
# ---------------------------------------------------------------------------


def bilinear_gather(img, coords):
    """img [H,W,C], coords [N,2] -> (out [N,C], valid [N] uint8).

    Samples outside [0,H-1]x[0,W-1] return 0 with valid=0.
    """
    h, w, c = img.shape
    r, cc = coords[:, 0], coords[:, 1]
    valid = (r >= 0.0) & (r <= h - 1.0) & (cc >= 0.0) & (cc <= w - 1.0)
    r = np.clip(r, 0.0, h - 1.0)
    cc = np.clip(cc, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(cc).astype(np.int64), max(w - 2, 0))
    fr = (r - r0)[:, None]
    fc = (cc - c0)[:, None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    out = (
        img[r0, c0] * (1 - fr) * (1 - fc)
        + img[r0, c1] * (1 - fr) * fc
        + img[r1, c0] * fr * (1 - fc)
        + img[r1, c1] * fr * fc
    )
    out[~valid] = 0.0
    return out, valid.astype(np.uint8)


def bilinear_gather_grads(img, coords, gout):
    """Gradients of bilinear_gather w.r.t. img and coords."""
    h, w, c = img.shape
    n = coords.shape[0]
    r, cc = coords[:, 0], coords[:, 1]
    valid = (r >= 0.0) & (r <= h - 1.0) & (cc >= 0.0) & (cc <= w - 1.0)
    r = np.clip(r, 0.0, h - 1.0)
    cc = np.clip(cc, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(cc).astype(np.int64), max(w - 2, 0))
    fr = (r - r0)[:, None]
    fc = (cc - c0)[:, None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    g = np.where(valid[:, None], gout, 0.0)

    gimg = np.zeros_like(img).reshape(-1, c)
    flat = lambda ri, ci: ri * w + ci
    np.add.at(gimg, flat(r0, c0), g * (1 - fr) * (1 - fc))
    np.add.at(gimg, flat(r0, c1), g * (1 - fr) * fc)
    np.add.at(gimg, flat(r1, c0), g * fr * (1 - fc))
    np.add.at(gimg, flat(r1, c1), g * fr * fc)

    d_dr = (
        (img[r1, c0] - img[r0, c0]) * (1 - fc)
        + (img[r1, c1] - img[r0, c1]) * fc
    )
    d_dc = (
        (img[r0, c1] - img[r0, c0]) * (1 - fr)
        + (img[r1, c1] - img[r1, c0]) * fr
    )
    gcoords = np.zeros((n, 2))
    gcoords[:, 0] = np.where(valid, (d_dr * g).sum(axis=1), 0.0)
    gcoords[:, 1] = np.where(valid, (d_dc * g).sum(axis=1), 0.0)
    return gimg.reshape(h, w, c), gcoords


# ---------------------------------------------------------------------------
# 2D raycasting against oriented rectangles (slab test)
# ---------------------------------------------------------------------------

_RAY_EPS = 1e-9


def raycast(ox, oy, dx, dy, bcx, bcy, bcos, bsin, half_len, half_wid, active, max_range):
    """Nearest oriented-rectangle hit per ray.

    ox,oy,dx,dy: per-ray origin and unit direction [R].
    bcx,bcy,bcos,bsin: per-box pose arrays [A,R] (time-varying poses are
    baked in per ray by the caller).  half_len/half_wid/active: [A].
    Returns (dist [R] with +inf for misses beyond max_range, hit index [R],
    int64, -1 for miss).
    """
    a, r = bcx.shape
    relx = ox[None, :] - bcx
    rely = oy[None, :] - bcy
    lx = bcos * relx + bsin * rely
    ly = -bsin * relx + bcos * rely
    dxb = bcos * dx[None, :] + bsin * dy[None, :]
    dyb = -bsin * dx[None, :] + bcos * dy[None, :]

    with np.errstate(divide="ignore", invalid="ignore"):
        t1x = (-half_len[:, None] - lx) / dxb
        t2x = (half_len[:, None] - lx) / dxb
        t1y = (-half_wid[:, None] - ly) / dyb
        t2y = (half_wid[:, None] - ly) / dyb
    par_x = np.abs(dxb) < 1e-15
    inside_x = np.abs(lx) <= half_len[:, None]
    tmin_x = np.where(par_x, np.where(inside_x, -np.inf, np.inf), np.minimum(t1x, t2x))
    tmax_x = np.where(par_x, np.where(inside_x, np.inf, -np.inf), np.maximum(t1x, t2x))
    par_y = np.abs(dyb) < 1e-15
    inside_y = np.abs(ly) <= half_wid[:, None]
    tmin_y = np.where(par_y, np.where(inside_y, -np.inf, np.inf), np.minimum(t1y, t2y))
    tmax_y = np.where(par_y, np.where(inside_y, np.inf, -np.inf), np.maximum(t1y, t2y))

    t_near = np.maximum(tmin_x, tmin_y)
    t_far = np.minimum(tmax_x, tmax_y)
    hit = (t_near <= t_far) & (t_near > _RAY_EPS) & (t_near <= max_range)
    hit &= active.astype(bool)[:, None]
    t = np.where(hit, t_near, np.inf)
    dist = t.min(axis=0)
    idx = np.where(np.isfinite(dist), t.argmin(axis=0), -1).astype(np.int64)
    return dist, idx


# ---------------------------------------------------------------------------
# rotated-rectangle IoU via Sutherland-Hodgman clipping
# ---------------------------------------------------------------------------


def _corners(box):
    cx, cy, w, h, th = box
    c, s = np.cos(th), np.sin(th)
    hl, hw = 0.5 * w, 0.5 * h
    # counterclockwise
    local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
    return [(cx + c * px - s * py, cy + s * px + c * py) for px, py in local]


def _poly_area(poly):
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * abs(area)


def _clip(subject, clip_poly):
    out = subject
    n = len(clip_poly)
    for i in range(n):
        ax, ay = clip_poly[i]
        bx, by = clip_poly[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            p_in = ex * (py - ay) - ey * (px - ax) >= 0.0
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0.0
            if p_in:
                out.append((px, py))
            if p_in != q_in:
                denom = ex * (qy - py) - ey * (qx - px)
                if denom != 0.0:
                    t = (ex * (ay - py) - ey * (ax - px)) / denom
                    out.append((px + t * (qx - px), py + t * (qy - py)))
        if not out:
            return []
    return out


def rotated_iou_pair(box_a, box_b):
    """IoU of two oriented boxes, each (cx, cy, w, h, theta), w along heading."""
    area_a = box_a[2] * box_a[3]
    area_b = box_b[2] * box_b[3]
    inter_poly = _clip(_corners(box_a), _corners(box_b))
    inter = _poly_area(inter_poly) if inter_poly else 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rotated_iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU matrix, boxes [N,5] and [M,5]."""
    n, m = len(boxes_a), len(boxes_b)
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = rotated_iou_pair(boxes_a[i], boxes_b[j])
    return out


# ---------------------------------------------------------------------------
# byte-oriented carryless range coder (Subbotin style, 32-bit state)
# ---------------------------------------------------------------------------

_STATE_BITS = 48
_TOP = 1 << (_STATE_BITS - 8)
_BOT = 1 << (_STATE_BITS - 20)  # renorm floor: keeps division precision high, underflow rare
_MASK = (1 << _STATE_BITS) - 1
_FLUSH_BYTES = 3


def _flush_value(low, rng):
    """In-range code value with the most trailing zero bits; only its top
    _FLUSH_BYTES bytes are informative (the renorm floor guarantees it)."""
    for k in range(_STATE_BITS - 1, 0, -1):
        v = ((low + (1 << k) - 1) >> k) << k
        if v < low + rng:
            return v
    return low


def rc_encode(symbols, table_ids, cum):
    """Encode symbols under static per-table cumulative frequencies.

    symbols, table_ids: int64 [n]; cum: uint32 [T, K+1] with cum[t, K] the
    table total (<= 65536).  Returns a uint8 array; trailing zero bytes are
    trimmed (the decoder reads virtual zeros past the end).
    """
    low, rng = 0, _MASK
    out = []
    for i in range(len(symbols)):
        t = table_ids[i]
        s = symbols[i]
        row = cum[t]
        total = int(row[-1])
        r = rng // total
        low = low + r * int(row[s])
        rng = r * (int(row[s + 1]) - int(row[s]))
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                d = (-low) & (_BOT - 1)
                if d >= rng - d:
                    rng = d
                else:
                    low = low + d
                    rng = rng - d
            else:
                break
            out.append((low >> (_STATE_BITS - 8)) & 0xFF)
            low = (low << 8) & _MASK
            rng = rng << 8
    v = _flush_value(low, rng)
    for _ in range(_FLUSH_BYTES):
        out.append((v >> (_STATE_BITS - 8)) & 0xFF)
        v = (v << 8) & _MASK
    return np.array(out, dtype=np.uint8)


def rc_decode(data, n, table_ids, cum):
    """Inverse of rc_encode; returns int64 symbols [n]."""
    data = np.asarray(data, dtype=np.uint8)
    pos = 0

    def next_byte():
        nonlocal pos
        b = int(data[pos]) if pos < len(data) else 0
        pos += 1
        return b

    low, rng = 0, _MASK
    code = 0
    for _ in range(_STATE_BITS // 8):
        code = ((code << 8) | next_byte()) & _MASK
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = cum[table_ids[i]]
        total = int(row[-1])
        r = rng // total
        value = (code - low) // r
        if value >= total:
            value = total - 1
        s = int(np.searchsorted(row, value, side="right")) - 1
        out[i] = s
        low = low + r * int(row[s])
        rng = r * (int(row[s + 1]) - int(row[s]))
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                d = (-low) & (_BOT - 1)
                if d >= rng - d:
                    rng = d
                else:
                    low = low + d
                    rng = rng - d
            else:
                break
            code = ((code << 8) | next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = rng << 8
    return out


_ADAPT_INC = 24
_ADAPT_LIMIT = (1 << 16) - 256


def rc_encode_adaptive(symbols, alphabet):
    """Adaptive order-0 coder: counts start at 1, bump by a fixed increment,
    halve when the total approaches the coder's frequency ceiling."""
    counts = np.ones(alphabet, dtype=np.int64)
    low, rng = 0, _MASK
    out = []
    for s in symbols:
        s = int(s)
        cum_s = int(counts[:s].sum())
        f = int(counts[s])
        total = int(counts.sum())
        r = rng // total
        low = low + r * cum_s
        rng = r * f
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                d = (-low) & (_BOT - 1)
                if d >= rng - d:
                    rng = d
                else:
                    low = low + d
                    rng = rng - d
            else:
                break
            out.append((low >> (_STATE_BITS - 8)) & 0xFF)
            low = (low << 8) & _MASK
            rng = rng << 8
        counts[s] += _ADAPT_INC
        if counts.sum() >= _ADAPT_LIMIT:
            counts = (counts + 1) // 2
    v = _flush_value(low, rng)
    for _ in range(_FLUSH_BYTES):
        out.append((v >> (_STATE_BITS - 8)) & 0xFF)
        v = (v << 8) & _MASK
    return np.array(out, dtype=np.uint8)


def rc_decode_adaptive(data, n, alphabet):
    data = np.asarray(data, dtype=np.uint8)
    counts = np.ones(alphabet, dtype=np.int64)
    pos = 0

    def next_byte():
        nonlocal pos
        b = int(data[pos]) if pos < len(data) else 0
        pos += 1
        return b

    low, rng = 0, _MASK
    code = 0
    for _ in range(_STATE_BITS // 8):
        code = ((code << 8) | next_byte()) & _MASK
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        cum = np.concatenate(([0], np.cumsum(counts)))
        total = int(cum[-1])
        r = rng // total
        value = (code - low) // r
        if value >= total:
            value = total - 1
        s = int(np.searchsorted(cum, value, side="right")) - 1
        out[i] = s
        low = low + r * int(cum[s])
        rng = r * int(counts[s])
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                d = (-low) & (_BOT - 1)
                if d >= rng - d:
                    rng = d
                else:
                    low = low + d
                    rng = rng - d
            else:
                break
            code = ((code << 8) | next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = rng << 8
        counts[s] += _ADAPT_INC
        if counts.sum() >= _ADAPT_LIMIT:
            counts = (counts + 1) // 2
    return out
