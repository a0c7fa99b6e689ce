"""Recursive multi-scale cross-resolution aggregation.

Both clouds are reduced to ``m`` nested FPS levels. Attention runs first at
the coarsest level; its output is interpolated onto the next finer level of
*both* clouds, fused with that level's own features and attended again,
until level 0 is reached. With query == support this is the intra-level
variant.
"""
import dataclasses
import logging
import math

from . import geometry
from . import tensor as T
from .attention import AttentionParams, vector_attention
from .errors import ContractError
from .layers import MLP

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class CrtConfig:
    m: int = 3
    k: int = 16
    ratios: tuple = (0.5, 0.5)
    dim: int = 128
    residual: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ContractError(f"CRT needs m >= 1, got {self.m}")
        if len(self.ratios) != self.m - 1:
            raise ContractError(f"CRT with m={self.m} needs {self.m - 1} ratios, got {len(self.ratios)}")
        if any(not 0 < r < 1 for r in self.ratios):
            raise ContractError(f"CRT ratios must lie in (0, 1), got {self.ratios}")

    @classmethod
    def uniform(cls, m, k, dim, ratio=0.5, residual=False):
        return cls(m=m, k=k, ratios=(ratio,) * (m - 1), dim=dim, residual=residual)


@dataclasses.dataclass
class CrtParams:
    attention: list
    fuse_query: list
    fuse_support: list

    @classmethod
    def init(cls, rng, config):
        d = config.dim
        return cls(
            attention=[AttentionParams.init(rng, d) for _ in range(config.m)],
            fuse_query=[MLP.init(rng, [2 * d, d, d]) for _ in range(config.m - 1)],
            fuse_support=[MLP.init(rng, [2 * d, d, d]) for _ in range(config.m - 1)],
        )


@dataclasses.dataclass
class ScalePyramid:
    coords: list  # level 0 = input
    feats: list
    indices: list  # indices[l] selects level l+1 out of level l
    ratios: tuple

    @property
    def sizes(self):
        return [c.shape[0] for c in self.coords]


def level_sizes(n, ratios):
    sizes = [n]
    for level, r in enumerate(ratios, start=1):
        nxt = max(1, math.floor(sizes[-1] * r))
        if nxt >= sizes[-1]:
            raise ContractError(f"pyramid level {level} would not shrink ({sizes[-1]} -> {nxt} points at ratio {r})")
        sizes.append(nxt)
    return sizes


def build_pyramid(coords, feats, config):
    coords, feats = T.as_tensor(coords), T.as_tensor(feats)
    if coords.shape[0] != feats.shape[0]:
        raise ContractError("pyramid coordinates and features are not aligned")
    sizes = level_sizes(coords.shape[0], config.ratios)
    cs, fs, picks = [coords], [feats], []
    for n in sizes[1:]:
        idx = geometry.fps(cs[-1], n)
        picks.append(idx)
        cs.append(T.gather(cs[-1], idx))
        fs.append(T.gather(fs[-1], idx))
    return ScalePyramid(cs, fs, picks, tuple(config.ratios))


def _check(config, params):
    if len(params.attention) != config.m or len(params.fuse_query) != config.m - 1 or len(params.fuse_support) != config.m - 1:
        raise ContractError(
            f"CRT parameters hold {len(params.attention)} scales but config has m={config.m}"
        )


def _clamped_k(k, n_support, level):
    if k > n_support:
        log.warning("CRT level %d has %d support points; clamping k=%d", level, n_support, k)
        return n_support
    return k


def crt_from_pyramids(qpyr, spyr, config, params):
    _check(config, params)
    top = config.m - 1
    kk = _clamped_k(config.k, spyr.coords[top].shape[0], top)
    h = vector_attention(
        qpyr.coords[top], qpyr.feats[top], spyr.coords[top], spyr.feats[top],
        params.attention[top], kk, config.residual,
    )
    for level in range(top - 1, -1, -1):
        qc, sc = qpyr.coords[level], spyr.coords[level]
        hq = geometry.interpolate(qpyr.coords[level + 1], h, qc)
        hs = geometry.interpolate(qpyr.coords[level + 1], h, sc)
        fq = params.fuse_query[level](T.concat([qpyr.feats[level], hq]))
        fs = params.fuse_support[level](T.concat([spyr.feats[level], hs]))
        kk = _clamped_k(config.k, sc.shape[0], level)
        h = vector_attention(qc, fq, sc, fs, params.attention[level], kk, config.residual)
    return h


def inter_crt(query, support, config, params):
    """Features for the query cloud aggregated from the support cloud over ``m`` scales.

    ``query`` and ``support`` are ``(coords, feats)`` pairs; the result is
    aligned with the query coordinates.
    """
    _check(config, params)
    qpyr = build_pyramid(*query, config)
    spyr = build_pyramid(*support, config)
    return crt_from_pyramids(qpyr, spyr, config, params)


def intra_crt(cloud, config, params):
    _check(config, params)
    pyr = build_pyramid(*cloud, config)
    return crt_from_pyramids(pyr, pyr, config, params)
