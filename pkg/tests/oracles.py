"""Slow, independent reference implementations used as test oracles.

Each oracle is written from the definition with scalar loops and shares no
code with the package under test.
"""

import math

import numpy as np


def central_difference(f, x, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def naive_conv2d(x, weight, bias, stride=1):
    """Cross-correlation, zero padding on rows and circular wrap on columns (loop form)."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[oc]
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * stride + di - ph
                                if r < 0 or r >= h:
                                    continue
                                col = (j * stride + dj - pw) % w
                                acc += weight[oc, ic, di, dj] * x[b, ic, r, col]
                    out[b, oc, i, j] = acc
    return out


def naive_maxpool(x, ph, pw):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // ph, w // pw))
    for b in range(n):
        for ch in range(c):
            for i in range(h // ph):
                for j in range(w // pw):
                    out[b, ch, i, j] = max(x[b, ch, i * ph + a, j * pw + d]
                                           for a in range(ph) for d in range(pw))
    return out


def reference_adam(x0, grad, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar ADAM trajectory for a one-parameter problem."""
    x, m, v = float(x0), 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def scalar_triplet(a, s, d, m):
    dp = sum((ai - si) ** 2 for ai, si in zip(a, s))
    dn = sum((ai - di) ** 2 for ai, di in zip(a, d))
    return max(0.0, dp - dn + m)


def brute_force_knn(data, ids, x, k):
    """Sorted linear scan by (squared distance, id)."""
    d2 = [sum((float(a) - float(b)) ** 2 for a, b in zip(row, x)) for row in data]
    order = sorted(range(len(data)), key=lambda i: (d2[i], ids[i]))[:k]
    return [math.sqrt(d2[i]) for i in order], [int(ids[i]) for i in order]


def chamfer_heading(cloud_a, cloud_b, grid_deg=0.5):
    """Rotation phi (radians) that best maps cloud_b's points onto cloud_a's.

    Exhaustive search over a grid, scored by mean nearest-neighbour distance
    in the horizontal plane. The scipy tree is only a distance lookup.
    """
    from scipy.spatial import cKDTree

    tree = cKDTree(cloud_a[:, :2])
    best, best_phi = math.inf, 0.0
    for deg in np.arange(-180.0, 180.0, grid_deg):
        phi = math.radians(deg)
        c, s = math.cos(phi), math.sin(phi)
        xy = cloud_b[:, :2] @ np.array([[c, s], [-s, c]])
        score = tree.query(xy)[0].mean()
        if score < best:
            best, best_phi = score, phi
    return best_phi


def count_within(xy_points, xy, radius):
    return sum(1 for p in xy_points if math.hypot(p[0] - xy[0], p[1] - xy[1]) < radius)
