"""Non-learned geometric kernels on point clouds.

All selection rules break ties by comparing coordinates lexicographically
rather than by array position, so every function here is exactly
permutation equivariant (or invariant) in its inputs.
"""
import math

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ContractError

COINCIDENT = 1e-12


def _coords(pc):
    arr = pc.data if isinstance(pc, T.Tensor) else np.asarray(pc, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected an N x 3 point cloud, got shape {arr.shape}")
    return arr


def centroid(points):
    """Order-independent mean: each axis is summed with exact rounding."""
    points = _coords(points)
    n = points.shape[0]
    return tuple(math.fsum(points[:, a]) / n for a in range(3))


def fps(pc, n_out):
    """Greedy farthest-point sampling; returns ``n_out`` indices in pick order.

    The first pick is the point farthest from the centroid.
    """
    pts = _coords(pc)
    n = pts.shape[0]
    if not 1 <= n_out <= n:
        raise ContractError(f"fps needs 1 <= n_out <= N, got n_out={n_out}, N={n}")
    return kernels.fps_indices(pts, n_out, centroid(pts))


def knn(query, support, k, return_distance=False):
    """Indices of the ``k`` nearest support points per query, nearest first."""
    q, s = _coords(query), _coords(support)
    if s.shape[0] == 0:
        raise ContractError("knn support cloud is empty")
    if not 1 <= k <= s.shape[0]:
        raise ContractError(f"knn needs 1 <= k <= N_s, got k={k}, N_s={s.shape[0]}")
    idx, d2 = kernels.knn_indices(q, s, k)
    return (idx, d2) if return_distance else idx


def _idw_weights(dst, src, idx):
    """Normalised inverse-squared-distance weights as a recorded op."""
    dd, sd = dst.data, src.data
    diff = dd[:, None, :] - sd[idx]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    hit = d2 < COINCIDENT * COINCIDENT
    exact = hit.any(axis=1)
    u = np.where(hit, 1.0, 1.0 / np.where(hit, 1.0, d2))
    total = u.sum(axis=1, keepdims=True)
    w = u / total
    if exact.any():
        first = np.argmax(hit[exact], axis=1)
        w[exact] = 0.0
        w[np.flatnonzero(exact), first] = 1.0

    def back(g):
        gu = (g - (g * w).sum(axis=1, keepdims=True)) / total
        gd2 = -gu * u * u
        gd2[exact] = 0.0
        gdiff = 2.0 * gd2[..., None] * diff
        gsrc = np.zeros(sd.shape)
        kernels.scatter_add_rows(gsrc, idx.reshape(-1), -gdiff.reshape(-1, 3))
        return gdiff.sum(axis=1), gsrc

    return T.custom(w, (dst, src), back)


def interpolation_weights(src_coords, dst_coords):
    """Neighbour indices (up to 3) and weights used by :func:`interpolate`."""
    src_coords, dst_coords = T.as_tensor(src_coords), T.as_tensor(dst_coords)
    ns = _coords(src_coords).shape[0]
    _coords(dst_coords)
    if ns == 0:
        raise ContractError("interpolate needs a non-empty source cloud")
    idx = knn(dst_coords, src_coords, min(3, ns))
    return idx, _idw_weights(dst_coords, src_coords, idx)


def interpolate(src_coords, src_feats, dst_coords):
    """Inverse-squared-distance weighted mean of the 3 nearest source features.

    A destination that coincides with a source point (distance < 1e-12)
    receives that source feature exactly.
    """
    src_feats = T.as_tensor(src_feats)
    if src_feats.shape[0] != _coords(src_coords).shape[0]:
        raise ContractError("source coordinates and features are not aligned")
    idx, w = interpolation_weights(src_coords, dst_coords)
    nd, kk = idx.shape
    wf = T.reshape(w, (nd, kk, 1))
    return T.sum(T.mul(wf, T.gather(src_feats, idx)), axis=1)


def _mean(x):
    # exactly rounded, hence independent of point order
    return math.fsum(x) / len(x)


def nearest(a, b):
    """Index into ``b`` of each point of ``a``'s nearest neighbour and the squared distance."""
    idx, d2 = knn(a, b, 1, return_distance=True)
    return idx[:, 0], d2[:, 0]


def chamfer(a, b, variant="CD-L1"):
    """Symmetric Chamfer distance between two clouds, differentiable in both.

    ``CD-L1`` halves the sum of the two mean nearest distances; ``CD-L2``
    sums the two mean nearest squared distances. Nearest-neighbour matches
    are held constant in the gradient.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    ad, bd = _coords(a), _coords(b)
    if ad.shape[0] == 0 or bd.shape[0] == 0:
        raise ContractError("chamfer needs non-empty clouds")
    if variant not in ("CD-L1", "CD-L2"):
        raise ContractError(f"unknown chamfer variant {variant!r}")
    ia, d2a = nearest(ad, bd)
    ib, d2b = nearest(bd, ad)
    na, nb = ad.shape[0], bd.shape[0]
    if variant == "CD-L2":
        value = _mean(d2a) + _mean(d2b)
        ca = np.full(na, 2.0 / na)
        cb = np.full(nb, 2.0 / nb)
    else:
        da, db = np.sqrt(d2a), np.sqrt(d2b)
        value = 0.5 * (_mean(da) + _mean(db))
        # d|x|/dx = x/|x|, with subgradient 0 at coincidence
        ca = np.where(da > 0, 0.5 / (na * np.where(da > 0, da, 1.0)), 0.0)
        cb = np.where(db > 0, 0.5 / (nb * np.where(db > 0, db, 1.0)), 0.0)

    def back(g):
        ra = (ad - bd[ia]) * (g * ca)[:, None]
        rb = (bd - ad[ib]) * (g * cb)[:, None]
        ga = ra.copy()
        gb = rb.copy()
        kernels.scatter_add_rows(gb, ia, -ra)
        kernels.scatter_add_rows(ga, ib, -rb)
        return ga, gb

    return T.custom(np.array(value), (a, b), back)


def fscore(pred, gt, threshold):
    """Harmonic mean of precision and recall at a distance threshold."""
    if not threshold > 0:
        raise ContractError(f"fscore threshold must be positive, got {threshold}")
    p, g = _coords(pred), _coords(gt)
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise ContractError("fscore needs non-empty clouds")
    _, dp = nearest(p, g)
    _, dg = nearest(g, p)
    precision = float(np.mean(np.sqrt(dp) < threshold))
    recall = float(np.mean(np.sqrt(dg) < threshold))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
