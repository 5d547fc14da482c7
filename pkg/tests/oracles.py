"""Independent brute-force oracles the tests check the library against.

Everything here is deliberately dumb and slow: plain loops, no shared code
with the library paths under test.
"""

import math

import numpy as np


def conv_brute_force(arr, weights):
    """Triple-loop zero-padded sliding-window correlation, float64 serial sums."""
    arr = np.asarray(arr, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    H, W, L = arr.shape
    kh, kw, kl = w.shape
    rh, rw, rl = kh // 2, kw // 2, kl // 2
    out = np.zeros((H, W, L), dtype=np.float64)
    for h in range(H):
        for ww_ in range(W):
            for l in range(L):
                acc = 0.0
                for dh in range(kh):
                    sh = h + dh - rh
                    if sh < 0 or sh >= H:
                        continue
                    for dw in range(kw):
                        sw = ww_ + dw - rw
                        if sw < 0 or sw >= W:
                            continue
                        for dl in range(kl):
                            sl = l + dl - rl
                            if sl < 0 or sl >= L:
                                continue
                            acc += w[dh, dw, dl] * arr[sh, sw, sl]
                out[h, ww_, l] = acc
    return out


def conv_masked_gather(arr, weights):
    """Bounds-masked gather correlation; no padding, taps applied in row-major
    order so per-voxel accumulation order matches a serial scalar loop."""
    arr = np.asarray(arr, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    H, W, L = arr.shape
    kh, kw, kl = w.shape
    rh, rw, rl = kh // 2, kw // 2, kl // 2
    hh, ww_, ll = np.meshgrid(np.arange(H), np.arange(W), np.arange(L), indexing="ij")
    out = np.zeros((H, W, L), dtype=np.float64)
    for dh in range(kh):
        for dw in range(kw):
            for dl in range(kl):
                sh, sw, sl = hh + dh - rh, ww_ + dw - rw, ll + dl - rl
                valid = (sh >= 0) & (sh < H) & (sw >= 0) & (sw < W) & (sl >= 0) & (sl < L)
                contrib = np.zeros((H, W, L), dtype=np.float64)
                contrib[valid] = w[dh, dw, dl] * arr[sh[valid], sw[valid], sl[valid]]
                out = out + contrib
    return out


def volume_brute_force(probs, mask, spacing):
    """Loop-summed masked volume in mm3."""
    total = 0.0
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    v = spacing[0] * spacing[1] * spacing[2]
    for h in range(probs.shape[0]):
        for w in range(probs.shape[1]):
            for l in range(probs.shape[2]):
                total += probs[h, w, l] * mask[h, w, l] * v
    return total


def dsc_brute_force(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    na = nb = ni = 0
    for h in range(a.shape[0]):
        for w in range(a.shape[1]):
            for l in range(a.shape[2]):
                na += a[h, w, l]
                nb += b[h, w, l]
                ni += a[h, w, l] and b[h, w, l]
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * ni / (na + nb)


def boundary_brute_force(mask):
    """Mask voxels with a face-adjacent background or out-of-grid neighbor."""
    m = np.asarray(mask).astype(bool)
    out = np.zeros_like(m)
    H, W, L = m.shape
    for h in range(H):
        for w in range(W):
            for l in range(L):
                if not m[h, w, l]:
                    continue
                for dh, dw, dl in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nh, nw, nl = h + dh, w + dw, l + dl
                    if not (0 <= nh < H and 0 <= nw < W and 0 <= nl < L) or not m[nh, nw, nl]:
                        out[h, w, l] = True
                        break
    return out


def nsd_brute_force(pred, truth, tolerance_mm, spacing):
    """All-pairs boundary-distance NSD with the same boundary definition."""
    bp = boundary_brute_force(pred)
    bt = boundary_brute_force(truth)
    pts_p = np.argwhere(bp)
    pts_t = np.argwhere(bt)
    if len(pts_p) == 0 and len(pts_t) == 0:
        return 1.0
    if len(pts_p) == 0 or len(pts_t) == 0:
        return 0.0
    s = np.asarray(spacing, dtype=np.float64)

    def min_dist(p, pts):
        best = math.inf
        for q in pts:
            d = math.sqrt(sum(((p[i] - q[i]) * s[i]) ** 2 for i in range(3)))
            best = min(best, d)
        return best

    hits = 0
    for p in pts_p:
        if min_dist(p, pts_t) <= tolerance_mm:
            hits += 1
    for q in pts_t:
        if min_dist(q, pts_p) <= tolerance_mm:
            hits += 1
    return hits / (len(pts_p) + len(pts_t))


def finite_diff_grad(loss_fn, x, step=1e-4):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(x)
        flat[i] = orig - step
        lo = loss_fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def f1_at_threshold(scores, labels, thr):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pred = scores >= thr
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return 2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0
