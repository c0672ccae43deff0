"""Numba @njit mirrors of the numpy reference kernels.

Same signatures and semantics as ``numpy_backend``; loop-oriented kernels
(raycast, polygon IoU, range coder) are typically 1-2 orders of magnitude
faster here, while the convolutions compete with BLAS rather than beating it
(see benchmarks/kernel_bench.py).
"""

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    h, w_in, ci = x.shape
    k = w.shape[0]
    co = w.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w_in + 2 * pad - k) // stride + 1
    y = np.zeros((ho, wo, co))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                ii = i * stride + a - pad
                if ii < 0 or ii >= h:
                    continue
                for b in range(k):
                    jj = j * stride + b - pad
                    if jj < 0 or jj >= w_in:
                        continue
                    for c in range(ci):
                        xv = x[ii, jj, c]
                        if xv == 0.0:
                            continue
                        for o in range(co):
                            y[i, j, o] += xv * w[a, b, c, o]
    return y


@njit(cache=True)
def conv2d_input_grad(gy, w, stride, pad, h, w_in):
    k = w.shape[0]
    ci = w.shape[2]
    co = w.shape[3]
    ho, wo = gy.shape[0], gy.shape[1]
    gx = np.zeros((h, w_in, ci))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                ii = i * stride + a - pad
                if ii < 0 or ii >= h:
                    continue
                for b in range(k):
                    jj = j * stride + b - pad
                    if jj < 0 or jj >= w_in:
                        continue
                    for o in range(co):
                        g = gy[i, j, o]
                        if g == 0.0:
                            continue
                        for c in range(ci):
                            gx[ii, jj, c] += g * w[a, b, c, o]
    return gx


@njit(cache=True)
def conv2d_kernel_grad(x, gy, k, stride, pad):
    h, w_in, ci = x.shape
    ho, wo, co = gy.shape
    gw = np.zeros((k, k, ci, co))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                ii = i * stride + a - pad
                if ii < 0 or ii >= h:
                    continue
                for b in range(k):
                    jj = j * stride + b - pad
                    if jj < 0 or jj >= w_in:
                        continue
                    for c in range(ci):
                        xv = x[ii, jj, c]
                        if xv == 0.0:
                            continue
                        for o in range(co):
                            gw[a, b, c, o] += xv * gy[i, j, o]
    return gw


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def bilinear_gather(img, coords):
    h, w, c = img.shape
    n = coords.shape[0]
    out = np.zeros((n, c))
    valid = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        r = coords[i, 0]
        cc = coords[i, 1]
        if r < 0.0 or r > h - 1.0 or cc < 0.0 or cc > w - 1.0:
            continue
        valid[i] = 1
        r0 = int(np.floor(r))
        c0 = int(np.floor(cc))
        if r0 > h - 2:
            r0 = max(h - 2, 0)
        if c0 > w - 2:
            c0 = max(w - 2, 0)
        fr = r - r0
        fc = cc - c0
        r1 = min(r0 + 1, h - 1)
        c1 = min(c0 + 1, w - 1)
        for ch in range(c):
            out[i, ch] = (
                img[r0, c0, ch] * (1 - fr) * (1 - fc)
                + img[r0, c1, ch] * (1 - fr) * fc
                + img[r1, c0, ch] * fr * (1 - fc)
                + img[r1, c1, ch] * fr * fc
            )
    return out, valid


@njit(cache=True)
def bilinear_gather_grads(img, coords, gout):
    h, w, c = img.shape
    n = coords.shape[0]
    gimg = np.zeros((h, w, c))
    gcoords = np.zeros((n, 2))
    for i in range(n):
        r = coords[i, 0]
        cc = coords[i, 1]
        if r < 0.0 or r > h - 1.0 or cc < 0.0 or cc > w - 1.0:
            continue
        r0 = int(np.floor(r))
        c0 = int(np.floor(cc))
        if r0 > h - 2:
            r0 = max(h - 2, 0)
        if c0 > w - 2:
            c0 = max(w - 2, 0)
        fr = r - r0
        fc = cc - c0
        r1 = min(r0 + 1, h - 1)
        c1 = min(c0 + 1, w - 1)
        gr = 0.0
        gc = 0.0
        for ch in range(c):
            g = gout[i, ch]
            gimg[r0, c0, ch] += g * (1 - fr) * (1 - fc)
            gimg[r0, c1, ch] += g * (1 - fr) * fc
            gimg[r1, c0, ch] += g * fr * (1 - fc)
            gimg[r1, c1, ch] += g * fr * fc
            gr += g * (
                (img[r1, c0, ch] - img[r0, c0, ch]) * (1 - fc)
                + (img[r1, c1, ch] - img[r0, c1, ch]) * fc
            )
            gc += g * (
                (img[r0, c1, ch] - img[r0, c0, ch]) * (1 - fr)
                + (img[r1, c1, ch] - img[r1, c0, ch]) * fr
            )
        gcoords[i, 0] = gr
        gcoords[i, 1] = gc
    return gimg, gcoords


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------


@njit(cache=True)
def raycast(ox, oy, dx, dy, bcx, bcy, bcos, bsin, half_len, half_wid, active, max_range):
    a, r = bcx.shape
    dist = np.full(r, np.inf)
    idx = np.full(r, -1, dtype=np.int64)
    for i in range(r):
        best = np.inf
        best_a = -1
        for j in range(a):
            if active[j] == 0:
                continue
            relx = ox[i] - bcx[j, i]
            rely = oy[i] - bcy[j, i]
            co = bcos[j, i]
            si = bsin[j, i]
            lx = co * relx + si * rely
            ly = -si * relx + co * rely
            dxb = co * dx[i] + si * dy[i]
            dyb = -si * dx[i] + co * dy[i]
            if abs(dxb) < 1e-15:
                if abs(lx) > half_len[j]:
                    continue
                tmin_x, tmax_x = -np.inf, np.inf
            else:
                t1 = (-half_len[j] - lx) / dxb
                t2 = (half_len[j] - lx) / dxb
                tmin_x = min(t1, t2)
                tmax_x = max(t1, t2)
            if abs(dyb) < 1e-15:
                if abs(ly) > half_wid[j]:
                    continue
                tmin_y, tmax_y = -np.inf, np.inf
            else:
                t1 = (-half_wid[j] - ly) / dyb
                t2 = (half_wid[j] - ly) / dyb
                tmin_y = min(t1, t2)
                tmax_y = max(t1, t2)
            t_near = max(tmin_x, tmin_y)
            t_far = min(tmax_x, tmax_y)
            if t_near <= t_far and t_near > 1e-9 and t_near <= max_range:
                if t_near < best:
                    best = t_near
                    best_a = j
        dist[i] = best if best_a >= 0 else np.inf
        idx[i] = best_a
    return dist, idx


# ---------------------------------------------------------------------------
# rotated-rectangle IoU
# ---------------------------------------------------------------------------


@njit(cache=True)
def _iou_pair(acx, acy, aw, ah, ath, bcx, bcy, bw, bh, bth):
    sx = np.empty(16)
    sy = np.empty(16)
    tx = np.empty(16)
    ty = np.empty(16)
    cx = np.empty(4)
    cy = np.empty(4)

    ca, sa = np.cos(ath), np.sin(ath)
    hl, hw = 0.5 * aw, 0.5 * ah
    sx[0], sy[0] = acx + ca * hl - sa * hw, acy + sa * hl + ca * hw
    sx[1], sy[1] = acx - ca * hl - sa * hw, acy - sa * hl + ca * hw
    sx[2], sy[2] = acx - ca * hl + sa * hw, acy - sa * hl - ca * hw
    sx[3], sy[3] = acx + ca * hl + sa * hw, acy + sa * hl - ca * hw
    ns = 4

    cb, sb = np.cos(bth), np.sin(bth)
    hl, hw = 0.5 * bw, 0.5 * bh
    cx[0], cy[0] = bcx + cb * hl - sb * hw, bcy + sb * hl + cb * hw
    cx[1], cy[1] = bcx - cb * hl - sb * hw, bcy - sb * hl + cb * hw
    cx[2], cy[2] = bcx - cb * hl + sb * hw, bcy - sb * hl - cb * hw
    cx[3], cy[3] = bcx + cb * hl + sb * hw, bcy + sb * hl - cb * hw

    for e in range(4):
        ax0, ay0 = cx[e], cy[e]
        bx0, by0 = cx[(e + 1) % 4], cy[(e + 1) % 4]
        ex, ey = bx0 - ax0, by0 - ay0
        nt = 0
        for j in range(ns):
            px, py = sx[j], sy[j]
            qx, qy = sx[(j + 1) % ns], sy[(j + 1) % ns]
            p_in = ex * (py - ay0) - ey * (px - ax0) >= 0.0
            q_in = ex * (qy - ay0) - ey * (qx - ax0) >= 0.0
            if p_in:
                tx[nt], ty[nt] = px, py
                nt += 1
            if p_in != q_in:
                denom = ex * (qy - py) - ey * (qx - px)
                if denom != 0.0:
                    t = (ex * (ay0 - py) - ey * (ax0 - px)) / denom
                    tx[nt], ty[nt] = px + t * (qx - px), py + t * (qy - py)
                    nt += 1
        ns = nt
        if ns == 0:
            return 0.0
        for j in range(ns):
            sx[j], sy[j] = tx[j], ty[j]

    inter = 0.0
    for j in range(ns):
        x0, y0 = sx[j], sy[j]
        x1, y1 = sx[(j + 1) % ns], sy[(j + 1) % ns]
        inter += x0 * y1 - x1 * y0
    inter = 0.5 * abs(inter)
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    v = inter / union
    if v < 0.0:
        v = 0.0
    if v > 1.0:
        v = 1.0
    return v


@njit(cache=True)
def rotated_iou_pair(box_a, box_b):
    return _iou_pair(
        box_a[0], box_a[1], box_a[2], box_a[3], box_a[4],
        box_b[0], box_b[1], box_b[2], box_b[3], box_b[4],
    )


@njit(cache=True)
def rotated_iou_matrix(boxes_a, boxes_b):
    n = boxes_a.shape[0]
    m = boxes_b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou_pair(
                boxes_a[i, 0], boxes_a[i, 1], boxes_a[i, 2], boxes_a[i, 3], boxes_a[i, 4],
                boxes_b[j, 0], boxes_b[j, 1], boxes_b[j, 2], boxes_b[j, 3], boxes_b[j, 4],
            )
    return out


# ---------------------------------------------------------------------------
# range coder (identical bit layout to numpy_backend)
# ---------------------------------------------------------------------------

_STATE_BITS = 48
_TOP = 1 << (_STATE_BITS - 8)
_BOT = 1 << (_STATE_BITS - 20)  # renorm floor: keeps division precision high, underflow rare
_MASK = (1 << _STATE_BITS) - 1
_SHIFT_OUT = _STATE_BITS - 8
_FLUSH_BYTES = 3
_INIT_BYTES = _STATE_BITS // 8


@njit(cache=True)
def rc_encode(symbols, table_ids, cum):
    n = symbols.shape[0]
    out = np.empty(4 * n + 64, dtype=np.uint8)
    pos = 0
    low = 0
    rng = _MASK
    for i in range(n):
        row = cum[table_ids[i]]
        s = symbols[i]
        total = np.int64(row[row.shape[0] - 1])
        r = rng // total
        low = low + r * np.int64(row[s])
        rng = r * (np.int64(row[s + 1]) - np.int64(row[s]))
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
            out[pos] = (low >> _SHIFT_OUT) & 0xFF
            pos += 1
            low = (low << 8) & _MASK
            rng = rng << 8
    v = low
    for k in range(_STATE_BITS - 1, 0, -1):
        cand = ((low + (1 << k) - 1) >> k) << k
        if cand < low + rng:
            v = cand
            break
    for _ in range(_FLUSH_BYTES):
        out[pos] = (v >> _SHIFT_OUT) & 0xFF
        pos += 1
        v = (v << 8) & _MASK
    return out[:pos].copy()


@njit(cache=True)
def rc_decode(data, n, table_ids, cum):
    nd = data.shape[0]
    pos = 0
    low = 0
    rng = _MASK
    code = 0
    for _ in range(_INIT_BYTES):
        b = np.int64(data[pos]) if pos < nd else 0
        pos += 1
        code = ((code << 8) | b) & _MASK
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = cum[table_ids[i]]
        k = row.shape[0] - 1
        total = np.int64(row[k])
        r = rng // total
        value = (code - low) // r
        if value >= total:
            value = total - 1
        lo, hi = 0, k
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if np.int64(row[mid]) <= value:
                lo = mid
            else:
                hi = mid
        s = lo
        out[i] = s
        low = low + r * np.int64(row[s])
        rng = r * (np.int64(row[s + 1]) - np.int64(row[s]))
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
            b = np.int64(data[pos]) if pos < nd else 0
            pos += 1
            code = ((code << 8) | b) & _MASK
            low = (low << 8) & _MASK
            rng = rng << 8
    return out


_ADAPT_INC = 24
_ADAPT_LIMIT = (1 << 16) - 256


@njit(cache=True)
def rc_encode_adaptive(symbols, alphabet):
    n = symbols.shape[0]
    counts = np.ones(alphabet, dtype=np.int64)
    total = np.int64(alphabet)
    out = np.empty(4 * n + 64, dtype=np.uint8)
    pos = 0
    low = 0
    rng = _MASK
    for i in range(n):
        s = symbols[i]
        cum_s = np.int64(0)
        for j in range(s):
            cum_s += counts[j]
        f = counts[s]
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
            out[pos] = (low >> _SHIFT_OUT) & 0xFF
            pos += 1
            low = (low << 8) & _MASK
            rng = rng << 8
        counts[s] += _ADAPT_INC
        total += _ADAPT_INC
        if total >= _ADAPT_LIMIT:
            total = 0
            for j in range(alphabet):
                counts[j] = (counts[j] + 1) // 2
                total += counts[j]
    v = low
    for k in range(_STATE_BITS - 1, 0, -1):
        cand = ((low + (1 << k) - 1) >> k) << k
        if cand < low + rng:
            v = cand
            break
    for _ in range(_FLUSH_BYTES):
        out[pos] = (v >> _SHIFT_OUT) & 0xFF
        pos += 1
        v = (v << 8) & _MASK
    return out[:pos].copy()


@njit(cache=True)
def rc_decode_adaptive(data, n, alphabet):
    nd = data.shape[0]
    counts = np.ones(alphabet, dtype=np.int64)
    total = np.int64(alphabet)
    pos = 0
    low = 0
    rng = _MASK
    code = 0
    for _ in range(_INIT_BYTES):
        b = np.int64(data[pos]) if pos < nd else 0
        pos += 1
        code = ((code << 8) | b) & _MASK
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = rng // total
        value = (code - low) // r
        if value >= total:
            value = total - 1
        acc = np.int64(0)
        s = 0
        for j in range(alphabet):
            if acc + counts[j] > value:
                s = j
                break
            acc += counts[j]
        out[i] = s
        low = low + r * acc
        rng = r * counts[s]
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
            b = np.int64(data[pos]) if pos < nd else 0
            pos += 1
            code = ((code << 8) | b) & _MASK
            low = (low << 8) & _MASK
            rng = rng << 8
        counts[s] += _ADAPT_INC
        total += _ADAPT_INC
        if total >= _ADAPT_LIMIT:
            total = 0
            for j in range(alphabet):
                counts[j] = (counts[j] + 1) // 2
                total += counts[j]
    return out
