"""The completion network: encoder, seed generator, three up-sampling blocks and the loss.

Data flow for a partial cloud ``P``::

    encode(P)                 -> shape vector f, pooled points P_p with features F_p
    seed_generator(P_p, F_p, f) -> seeds P_sd with features F_sd
    merge_and_start(P, P_sd)  -> starting points P_0
    upsample_block x3         -> P_1, P_2, P_3  (|P_{i+1}| = |P_i| * r_i)
"""
import dataclasses

import numpy as np

from . import geometry
from . import tensor as T
from .attention import relative_positions
from .config import ModelConfig
from .crt import CrtConfig, CrtParams, inter_crt, intra_crt
from .errors import ContractError
from .layers import MLP, Linear, count_parameters, named_parameters, uniform


@dataclasses.dataclass
class SAParams:
    mlp: MLP


@dataclasses.dataclass
class EncoderParams:
    sa: list
    crt: list
    head: MLP


@dataclasses.dataclass
class SeedParams:
    w_q: Linear
    w_k: Linear
    w_v: Linear
    alpha: MLP
    delta: MLP
    codes: T.Tensor  # one learned query offset per child
    bias: T.Tensor
    head: MLP


@dataclasses.dataclass
class BlockParams:
    pointnet_in: MLP
    pointnet_out: MLP
    inter: list
    intra: list
    codes: T.Tensor  # one learned code per replica
    offsets: MLP


@dataclasses.dataclass
class CraPcnParams:
    encoder: EncoderParams
    seeds: SeedParams
    blocks: list


@dataclasses.dataclass
class CompletionOutput:
    seeds: T.Tensor
    seed_feats: T.Tensor
    start: T.Tensor
    stages: list  # P_1, P_2, P_3
    stage_feats: list  # F_0, F_1, F_2
    shape_vector: T.Tensor
    partial_coords: T.Tensor
    partial_feats: T.Tensor

    @property
    def supervised(self):
        """Point sets entering the loss: seeds, P_1, P_2, P_3."""
        return [self.seeds, *self.stages]

    @property
    def final(self):
        return self.stages[-1]


def encoder_crt_config(cfg, level):
    return CrtConfig.uniform(cfg.enc_m, cfg.enc_k, cfg.enc_dims[level], cfg.pyramid_ratio, cfg.residual)


def inter_config(cfg):
    return CrtConfig.uniform(cfg.inter_m, cfg.k, cfg.dim, cfg.pyramid_ratio, cfg.residual)


def intra_config(cfg):
    return CrtConfig.uniform(cfg.intra_m, cfg.k, cfg.dim, cfg.pyramid_ratio, cfg.residual)


def init_params(cfg: ModelConfig, seed=None):
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    d, c = cfg.dim, cfg.shape_dim
    in_dims = (3, *cfg.enc_dims[:-1])
    encoder = EncoderParams(
        sa=[SAParams(MLP.init(rng, [3 + i, o, o])) for i, o in zip(in_dims, cfg.enc_dims)],
        crt=[CrtParams.init(rng, encoder_crt_config(cfg, lvl)) for lvl in range(2)],
        head=MLP.init(rng, [cfg.partial_dim, c, c]),
    )
    up = cfg.n_seeds // cfg.n_partial_points
    seeds = SeedParams(
        w_q=Linear.init(rng, cfg.partial_dim, d, bias=False),
        w_k=Linear.init(rng, cfg.partial_dim, d, bias=False),
        w_v=Linear.init(rng, cfg.partial_dim, d, bias=False),
        alpha=MLP.init(rng, [d, d, d]),
        delta=MLP.init(rng, [3, d, d]),
        codes=uniform(rng, (up, d), d),
        bias=uniform(rng, (d,), d),
        head=MLP.init(rng, [d + c, d, 3]),
    )
    blocks = []
    for r in cfg.up_ratios:
        blocks.append(
            BlockParams(
                pointnet_in=MLP.init(rng, [3 + c, d, d]),
                pointnet_out=MLP.init(rng, [2 * d, d, d]),
                inter=[CrtParams.init(rng, inter_config(cfg)) for _ in range(cfg.n_inter)],
                intra=[CrtParams.init(rng, intra_config(cfg)) for _ in range(cfg.n_intra)],
                codes=uniform(rng, (r, d), d),
                offsets=MLP.init(rng, [2 * d, d, 3], zero_last=True),
            )
        )
    return CraPcnParams(encoder, seeds, blocks)


def state_dict(params):
    return [(name, t.data) for name, t in named_parameters(params)]


def load_state(params, records):
    """Copy ``(name, array)`` records into ``params``; names and shapes must match exactly."""
    table = dict(named_parameters(params))
    seen = set()
    for name, values in records:
        t = table.get(name)
        if t is None:
            raise ContractError(f"checkpoint has unknown parameter {name!r}")
        if t.shape != values.shape:
            raise ContractError(f"parameter {name!r}: shape {values.shape} != expected {t.shape}")
        t.data = np.array(values, dtype=np.float64)
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return params


def parameter_count(params):
    return count_parameters(params)


# -- encoder -----------------------------------------------------------------


def set_abstraction(coords, feats, n_out, k, params):
    """FPS to ``n_out`` centres, group ``k`` neighbours, shared MLP, max-pool."""
    coords, feats = T.as_tensor(coords), T.as_tensor(feats)
    centers_idx = geometry.fps(coords, n_out)
    centers = T.gather(coords, centers_idx)
    nb = geometry.knn(centers, coords, k)
    rel = T.sub(T.gather(coords, nb), T.reshape(centers, (n_out, 1, 3)))
    grouped = T.concat([rel, T.gather(feats, nb)])
    return centers, T.max(params.mlp(grouped), axis=1)


def encode(partial, cfg, params):
    """Returns ``(f, P_p, F_p)``."""
    x = T.as_tensor(partial)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != 3:
        raise ContractError(f"partial cloud must be N x 3, got {x.shape}")
    if n < cfg.min_input:
        raise ContractError(f"encoder needs at least {cfg.min_input} input points, got {n}")
    enc = params.encoder
    coords, feats = x, x
    for level in range(3):
        k = min(cfg.enc_k, coords.shape[0])
        coords, feats = set_abstraction(coords, feats, cfg.enc_points[level], k, enc.sa[level])
        if level < 2:
            feats = intra_crt((coords, feats), encoder_crt_config(cfg, level), enc.crt[level])
    f = enc.head(T.max(feats, axis=0))
    return f, coords, feats


# -- seeds -------------------------------------------------------------------


def upsample_features(coords, feats, params, k):
    """Attention up-sampler with un-normalised weights.

    Every pooled point spawns one child per learned code; each child's query
    is the parent query plus its code. Weights from the relation MLP are used
    raw (no softmax), and a learned bias is added to every child feature.
    """
    coords, feats = T.as_tensor(coords), T.as_tensor(feats)
    n = coords.shape[0]
    up, d = params.codes.shape
    k = min(k, n)
    idx = geometry.knn(coords, coords, k)
    q = params.w_q(feats)
    keys = T.gather(params.w_k(feats), idx)
    values = T.gather(params.w_v(feats), idx)
    delta = params.delta(relative_positions(coords, coords, idx))
    rel = T.add(
        T.add(T.reshape(q, (n, 1, 1, d)), T.reshape(params.codes, (1, up, 1, d))),
        T.reshape(T.sub(delta, keys), (n, 1, k, d)),
    )
    weights = params.alpha(rel)
    agg = T.sum(T.mul(weights, T.reshape(T.add(values, delta), (n, 1, k, d))), axis=2)
    return T.add(T.reshape(agg, (n * up, d)), params.bias)


def seed_generator(coords, feats, f, cfg, params):
    """Returns ``(P_sd, F_sd)``; the coordinates come from an MLP over ``[F_sd, f]``."""
    if T.as_tensor(feats).shape != (cfg.n_partial_points, cfg.partial_dim):
        raise ContractError(f"seed generator expects {cfg.n_partial_points} x {cfg.partial_dim} features")
    fsd = upsample_features(coords, feats, params.seeds, cfg.k)
    n = fsd.shape[0]
    fb = T.broadcast_to(T.reshape(f, (1, cfg.shape_dim)), (n, cfg.shape_dim))
    return params.seeds.head(T.concat([fsd, fb])), fsd


def merge_and_start(partial, seeds, n_start):
    """FPS subset of ``partial`` + ``seeds`` with ``n_start`` points."""
    merged = T.concat([T.as_tensor(partial), T.as_tensor(seeds)], axis=0)
    if merged.shape[0] < n_start:
        raise ContractError(f"only {merged.shape[0]} points to merge, need {n_start}")
    return T.gather(merged, geometry.fps(merged, n_start))


# -- decoder -----------------------------------------------------------------


def mini_pointnet(coords, f, mlp_in, mlp_out):
    n = coords.shape[0]
    c = f.shape[0]
    h = mlp_in(T.concat([coords, T.broadcast_to(T.reshape(f, (1, c)), (n, c))]))
    d = h.shape[1]
    ctx = T.broadcast_to(T.reshape(T.max(h, axis=0), (1, d)), (n, d))
    return mlp_out(T.concat([h, ctx]))


def deconvolution(coords, feats, codes, mlp, scale):
    """Replicate each point ``r`` times and move every replica by a bounded learned offset."""
    n = coords.shape[0]
    r = codes.shape[0]
    parent = np.repeat(np.arange(n), r)
    child = np.tile(np.arange(r), n)
    x = T.concat([T.gather(feats, parent), T.gather(codes, child)])
    offsets = T.mul(T.tanh(mlp(x)), scale)
    return T.add(T.gather(coords, parent), offsets)


def _crt_sequence(cfg):
    inter = [("inter", j) for j in range(cfg.n_inter)]
    intra = [("intra", j) for j in range(cfg.n_intra)]
    return inter + intra if cfg.crt_order == "inter_first" else intra + inter


def upsample_block(coords, support, f, cfg, params, ratio):
    """One block: ``(P_i, (P_{i-1}, F_{i-1}), f) -> (P_{i+1}, F_i)``."""
    coords = T.as_tensor(coords)
    if params.codes.shape[0] != ratio:
        raise ContractError(f"block parameters are for ratio {params.codes.shape[0]}, not {ratio}")
    feats = mini_pointnet(coords, f, params.pointnet_in, params.pointnet_out)
    for kind, j in _crt_sequence(cfg):
        if kind == "inter":
            feats = inter_crt((coords, feats), support, inter_config(cfg), params.inter[j])
        else:
            feats = intra_crt((coords, feats), intra_config(cfg), params.intra[j])
    return deconvolution(coords, feats, params.codes, params.offsets, cfg.offset_scale), feats


def forward(partial, cfg, params):
    partial = T.as_tensor(partial)
    if len(params.blocks) != len(cfg.up_ratios):
        raise ContractError("parameter blocks do not match the configured ratios")
    f, pp, fp = encode(partial, cfg, params)
    seeds, seed_feats = seed_generator(pp, fp, f, cfg, params)
    start = merge_and_start(partial, seeds, cfg.n_start)
    coords, support = start, (seeds, seed_feats)
    stages, feats = [], []
    for block, ratio in zip(params.blocks, cfg.up_ratios):
        nxt, fi = upsample_block(coords, support, f, cfg, block, ratio)
        stages.append(nxt)
        feats.append(fi)
        support = (coords, fi)
        coords = nxt
    return CompletionOutput(seeds, seed_feats, start, stages, feats, f, pp, fp)


# -- loss --------------------------------------------------------------------


def loss_targets(gt, sizes):
    """``FPS(gt, n)`` for each supervised size (capped at the size of ``gt``).

    Greedy picks do not depend on how many follow, so every target is a
    prefix of one FPS run.
    """
    gt = np.asarray(gt.data if isinstance(gt, T.Tensor) else gt, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[0] == 0:
        raise ContractError("ground truth must be a non-empty N x 3 cloud")
    sizes = [min(n, gt.shape[0]) for n in sizes]
    order = geometry.fps(gt, max(sizes))
    return [gt[order[:n]] for n in sizes]


def supervised_sizes(cfg):
    return [cfg.n_seeds, *cfg.stage_sizes[1:]]


def loss(output, gt, targets=None):
    """Sum of CD-L1 between every supervised set and FPS of ground truth at its size."""
    preds = output.supervised
    if targets is None:
        targets = loss_targets(gt, [p.shape[0] for p in preds])
    total = None
    for pred, target in zip(preds, targets):
        term = geometry.chamfer(pred, target, "CD-L1")
        total = term if total is None else T.add(total, term)
    return total
