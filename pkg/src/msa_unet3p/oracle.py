"""Brute-force reference implementations for the boundary and overlap metrics.

Deliberately naive: explicit pixel loops and all-pairs distances. Used by the
``--oracle`` evaluation flag and by the test suite.
"""
import numpy as np


def confusion(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred, bool).ravel().tolist(), np.asarray(truth, bool).ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def surface_points(mask):
    m = np.asarray(mask, bool)
    h, w = m.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not m[r, c]:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < h and 0 <= cc < w) or not m[rr, cc]:
                        break
                else:
                    continue
                pts.append((r, c))
                break
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def _components(m):
    """8-connected components as lists of pixels, by flood fill."""
    h, w = m.shape
    seen = np.zeros_like(m)
    comps = []
    for r in range(h):
        for c in range(w):
            if not m[r, c] or seen[r, c]:
                continue
            stack, comp = [(r, c)], []
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                comp.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and m[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack.append((yy, xx))
            comps.append(comp)
    return comps


def contour_points(mask):
    """Outer border of each 8-component: its pixels 4-adjacent to the region
    outside it (4-connected flood fill from beyond the image edge).

    This is the set a Moore border trace visits, characterised without tracing.
    """
    m = np.asarray(mask, bool)
    h, w = m.shape
    pts = set()
    for comp in _components(m):
        inside = np.zeros((h + 2, w + 2), bool)
        for y, x in comp:
            inside[y + 1, x + 1] = True
        ext = np.zeros_like(inside)
        ext[0, 0] = True
        stack = [(0, 0)]
        while stack:
            y, x = stack.pop()
            for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= yy < h + 2 and 0 <= xx < w + 2 and not inside[yy, xx] and not ext[yy, xx]:
                    ext[yy, xx] = True
                    stack.append((yy, xx))
        for y, x in comp:
            Y, X = y + 1, x + 1
            if ext[Y - 1, X] or ext[Y + 1, X] or ext[Y, X - 1] or ext[Y, X + 1]:
                pts.add((y, x))
    return np.array(sorted(pts), dtype=np.int64).reshape(-1, 2)


def directed_mean(a, b):
    """Mean over points of ``a`` of the minimum Euclidean distance to ``b`` (all pairs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min(axis=1)).mean())


def symmetric(a, b):
    return 0.5 * (directed_mean(a, b) + directed_mean(b, a))


def asd(pred, truth):
    return symmetric(surface_points(pred), surface_points(truth))


def acd(pred, truth):
    return symmetric(contour_points(pred), contour_points(truth))
