"""Pure numpy implementations of the geometric hot loops.

Every routine here has a twin in ``_ckernels.pyx`` and both must return
bit-identical results. Squared distances are always accumulated as
``(dx*dx + dy*dy) + dz*dz`` and ties are broken by the lexicographic order
of the candidate coordinates, then by index.
"""
import numpy as np

_CHUNK = 1 << 22  # max pairwise entries materialised at once


def _sqdist(q, s):
    dx = q[:, 0:1] - s[None, :, 0]
    dy = q[:, 1:2] - s[None, :, 1]
    dz = q[:, 2:3] - s[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _lex_best(cands, pts):
    """Index in ``cands`` of the lexicographically smallest point (then smallest index)."""
    order = np.lexsort((cands, pts[cands, 2], pts[cands, 1], pts[cands, 0]))
    return cands[order[0]]


def fps(points, n_out, centroid):
    n = points.shape[0]
    cx, cy, cz = centroid
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    dz = points[:, 2] - cz
    d0 = dx * dx + dy * dy + dz * dz
    out = np.empty(n_out, dtype=np.int64)
    picked = np.zeros(n, dtype=bool)
    cands = np.flatnonzero(d0 == d0.max())
    cur = cands[0] if len(cands) == 1 else _lex_best(cands, points)
    out[0] = cur
    picked[cur] = True
    mind = np.full(n, np.inf)
    for t in range(1, n_out):
        p = points[cur]
        dx = points[:, 0] - p[0]
        dy = points[:, 1] - p[1]
        dz = points[:, 2] - p[2]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        masked = np.where(picked, -1.0, mind)
        cands = np.flatnonzero(masked == masked.max())
        cur = cands[0] if len(cands) == 1 else _lex_best(cands, points)
        out[t] = cur
        picked[cur] = True
    return out


def _sort_rows(d, cand_idx, support):
    """Order candidate columns of each row by (distance, x, y, z, index)."""
    s = support[cand_idx]
    return np.lexsort((cand_idx, s[..., 2], s[..., 1], s[..., 0], d), axis=-1)


def knn(query, support, k):
    nq, ns = query.shape[0], support.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    dist = np.empty((nq, k), dtype=np.float64)
    rows = max(1, _CHUNK // max(ns, 1))
    for lo in range(0, nq, rows):
        hi = min(nq, lo + rows)
        d = _sqdist(query[lo:hi], support)
        if k < ns:
            part = np.argpartition(d, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(ns), d.shape).copy()
        pd = np.take_along_axis(d, part, axis=1)
        kth = pd.max(axis=1)
        n_le = (d <= kth[:, None]).sum(axis=1)
        part.sort(axis=1)
        pd = np.take_along_axis(d, part, axis=1)
        order = _sort_rows(pd, part, support)
        idx[lo:hi] = np.take_along_axis(part, order, axis=1)
        dist[lo:hi] = np.take_along_axis(pd, order, axis=1)
        # rows whose k-th distance is shared by points outside the partition
        for r in np.flatnonzero(n_le > k):
            cand = np.flatnonzero(d[r] <= kth[r])
            o = _sort_rows(d[r, cand], cand, support)[:k]
            idx[lo + r] = cand[o]
            dist[lo + r] = d[r, cand[o]]
    return idx, dist


def scatter_add_rows(out, index, src):
    np.add.at(out, index, src)
