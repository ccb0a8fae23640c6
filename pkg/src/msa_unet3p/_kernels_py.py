"""Pure-Python boundary kernels. Same contract as the compiled ``_kernels`` module."""
import numpy as np

# clockwise, starting west; (drow, dcol) with rows growing downwards
OFFSETS = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR = {o: i for i, o in enumerate(OFFSETS)}


def surface_mask(mask):
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    h, w = m.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            if not m[r, c]:
                continue
            edge = False
            for dr, dc in OFFSETS:
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= h or cc < 0 or cc >= w or not m[rr, cc]:
                    edge = True
                    break
            if edge:
                out[r, c] = 1
    return out


def _trace_one(m, h, w, r0, c0, out):
    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and m[r, c]

    out.append((r0, c0))
    pr, pc, back = r0, c0, 0
    first = None
    limit = 4 * h * w + 8
    for _ in range(limit):
        for k in range(1, 9):
            d = (back + k) % 8
            qr, qc = pr + OFFSETS[d][0], pc + OFFSETS[d][1]
            if fg(qr, qc):
                break
        else:
            return  # isolated pixel
        if first is None:
            first = (qr, qc)
        elif (pr, pc) == (r0, c0) and (qr, qc) == first:
            break
        dprev = OFFSETS[(d - 1) % 8]
        back = _DIR[(pr + dprev[0] - qr, pc + dprev[1] - qc)]
        out.append((qr, qc))
        pr, pc = qr, qc
    if len(out) > 1 and out[-1] == (r0, c0):
        out.pop()


def trace_contours(mask, labels):
    """Moore-neighbour trace of the outer border of every labelled component.

    Components are visited in raster order of their first pixel; the returned
    (n, 2) int64 array concatenates the traces.
    """
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    lab = np.ascontiguousarray(labels, dtype=np.int32)
    h, w = m.shape
    seen = set()
    pts = []
    for r in range(h):
        for c in range(w):
            l = int(lab[r, c])
            if l and l not in seen:
                seen.add(l)
                _trace_one(m, h, w, r, c, pts)
    return np.asarray(pts, dtype=np.int64).reshape(-1, 2)
