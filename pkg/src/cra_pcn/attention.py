"""Vector attention over kNN neighbourhoods.

For query point i and support neighbour j::

    delta_ij = delta_mlp(p_i - p_j)
    logits_ij = alpha(q_i - k_j + delta_ij)
    a_ij = softmax over j, separately per channel
    h_i = sum_j a_ij * (v_j + delta_ij)
"""
import dataclasses

from . import geometry
from . import tensor as T
from .layers import MLP, Linear


@dataclasses.dataclass
class AttentionParams:
    w_q: Linear
    w_k: Linear
    w_v: Linear
    alpha: MLP
    delta: MLP

    @classmethod
    def init(cls, rng, dim, in_q=None, in_s=None):
        in_q = in_q or dim
        in_s = in_s or dim
        return cls(
            w_q=Linear.init(rng, in_q, dim, bias=False),
            w_k=Linear.init(rng, in_s, dim, bias=False),
            w_v=Linear.init(rng, in_s, dim, bias=False),
            alpha=MLP.init(rng, [dim, dim, dim]),
            delta=MLP.init(rng, [3, dim, dim]),
        )

    @property
    def dim(self):
        return self.w_q.weight.shape[1]


def relative_positions(query_coords, support_coords, idx):
    """``p_i - p_j`` for every neighbour, shape ``N_q x k x 3``."""
    nq = query_coords.shape[0]
    return T.sub(T.reshape(query_coords, (nq, 1, 3)), T.gather(support_coords, idx))


def vector_attention(query_coords, query_feats, support_coords, support_feats, params, k, residual=False):
    """Aggregate support features onto each query point; returns ``N_q x D``."""
    query_coords, support_coords = T.as_tensor(query_coords), T.as_tensor(support_coords)
    idx = geometry.knn(query_coords, support_coords, k)
    nq = idx.shape[0]
    dim = params.dim

    q = params.w_q(query_feats)
    keys = T.gather(params.w_k(support_feats), idx)
    values = T.gather(params.w_v(support_feats), idx)
    delta = params.delta(relative_positions(query_coords, support_coords, idx))

    logits = params.alpha(T.add(T.sub(T.reshape(q, (nq, 1, dim)), keys), delta))
    weights = T.softmax_channelwise(logits)
    h = T.sum(T.mul(weights, T.add(values, delta)), axis=1)
    if residual:
        h = T.add(h, query_feats)
    return h
