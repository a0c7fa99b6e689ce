"""End-to-end finite-difference check of the model gradients.

Every parameter coordinate is perturbed by +-eps and the central
difference of the loss is compared with the tape gradient. Only the part
of the network downstream of the perturbed parameter is re-evaluated;
upstream results are cached from the unperturbed pass, which is exact
because those values do not depend on the parameter.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
floor keeps coordinates whose true gradient is ~0 from being judged on
pure round-off.
"""
import dataclasses

import numpy as np

from . import geometry, model
from . import tensor as T
from .errors import ContractError
from .layers import named_parameters

EPS = 1e-6
FLOOR = 1e-5
TOLERANCE = 1e-4


@dataclasses.dataclass
class BlockReport:
    name: str
    size: int
    checked: int
    max_rel_error: float
    worst_index: tuple


@dataclasses.dataclass
class GradcheckReport:
    max_rel_error: float
    blocks: list
    loss: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)

    @property
    def worst(self):
        return max(self.blocks, key=lambda b: b.max_rel_error)

    def lines(self):
        out = [f"{b.name} size={b.size} checked={b.checked} max_rel_error={b.max_rel_error:.3e}" for b in self.blocks]
        w = self.worst
        out.append(f"worst_block={w.name} worst_index={w.worst_index} max_rel_error={self.max_rel_error:.3e}")
        out.append(f"status={'pass' if self.passed else 'fail'} tolerance={self.tolerance:g}")
        return out


class StagedLoss:
    """Loss evaluation that can restart from the stage owning a parameter.

    Stage 0 is the encoder, 1 the seed generator (with the merge), and
    2 + i up-sampling block i.
    """

    def __init__(self, partial, gt, cfg, params):
        self.partial = T.as_tensor(np.asarray(partial, dtype=np.float64))
        self.cfg = cfg
        self.params = params
        self.targets = model.loss_targets(gt, model.supervised_sizes(cfg))
        self.cache = {}

    def stage_of(self, name):
        head = name.split(".")
        if head[0] == "encoder":
            return 0
        if head[0] == "seeds":
            return 1
        return 2 + int(head[1])

    def __call__(self, from_stage=0):
        c, cfg, p = self.cache, self.cfg, self.params
        if from_stage <= 0:
            c["enc"] = model.encode(self.partial, cfg, p)
        if from_stage <= 1:
            f, pp, fp = c["enc"]
            seeds, seed_feats = model.seed_generator(pp, fp, f, cfg, p)
            c["seeds"] = (seeds, seed_feats)
            c["start"] = model.merge_and_start(self.partial, seeds, cfg.n_start)
            c["term0"] = geometry.chamfer(seeds, self.targets[0], "CD-L1")
        f = c["enc"][0]
        coords, support = c["start"], c["seeds"]
        for i, (block, ratio) in enumerate(zip(p.blocks, cfg.up_ratios)):
            if from_stage <= 2 + i:
                nxt, fi = model.upsample_block(coords, support, f, cfg, block, ratio)
                c[f"block{i}"] = (nxt, fi)
                c[f"term{i + 1}"] = geometry.chamfer(nxt, self.targets[i + 1], "CD-L1")
            nxt, fi = c[f"block{i}"]
            support, coords = (coords, fi), nxt
        total = c["term0"]
        for i in range(1, len(p.blocks) + 1):
            total = T.add(total, c[f"term{i}"])
        return float(total.data)


def analytic_gradients(partial, gt, cfg, params):
    targets = model.loss_targets(gt, model.supervised_sizes(cfg))
    named = list(named_parameters(params))
    with T.Tape() as tape:
        tape.watch([t for _, t in named])
        loss = model.loss(model.forward(partial, cfg, params), gt, targets)
    grads = T.backward(tape, loss)
    return float(loss.data), {name: grads[t] for name, t in named}


def relative_error(a, n, floor=FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def perturb(params, scale, rng):
    """Add uniform noise to every parameter (moves zero-initialised layers off zero)."""
    for _, t in named_parameters(params):
        t.data = t.data + rng.uniform(-scale, scale, size=t.shape)


def gradcheck(partial, gt, cfg, params, eps=EPS, sample=None, rng=None, corrupt=None, floor=FLOOR):
    """Compare tape gradients with central differences.

    ``sample`` limits the check to that many random coordinates per
    parameter tensor (``None`` checks every coordinate). ``corrupt`` names
    a parameter whose analytic gradient is deliberately scaled by 1.5, as a
    negative control.
    """
    rng = rng or np.random.default_rng(0)
    loss0, grads = analytic_gradients(partial, gt, cfg, params)
    if corrupt is not None:
        if corrupt not in grads:
            raise ContractError(f"unknown parameter {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.5
    staged = StagedLoss(partial, gt, cfg, params)
    staged()
    blocks = []
    for name, t in named_parameters(params):
        stage = staged.stage_of(name)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
        worst, worst_at = 0.0, ()
        base = t.data
        for j in coords:
            bumped = base.copy().reshape(-1)
            bumped[j] += eps
            t.data = bumped.reshape(base.shape)
            up = staged(stage)
            bumped[j] = base.reshape(-1)[j] - eps
            t.data = bumped.reshape(base.shape)
            down = staged(stage)
            t.data = base
            numeric = (up - down) / (2 * eps)
            err = relative_error(grads[name].reshape(-1)[j], numeric, floor)
            if err > worst or not worst_at:
                worst, worst_at = err, tuple(int(v) for v in np.unravel_index(j, base.shape))
        staged(stage)  # restore cached stages for the unperturbed parameters
        blocks.append(BlockReport(name, int(flat.size), int(coords.size), float(worst), worst_at))
    return GradcheckReport(max((b.max_rel_error for b in blocks), default=0.0), blocks, loss0)


def tiny_problem(cfg, seed=0):
    """Random partial/complete clouds sized for ``cfg`` plus perturbed parameters."""
    rng = np.random.default_rng(seed)
    partial = rng.uniform(-0.5, 0.5, size=(cfg.min_input, 3))
    gt = rng.uniform(-0.5, 0.5, size=(cfg.stage_sizes[-1], 3))
    params = model.init_params(cfg, seed=seed)
    perturb(params, 0.05, rng)
    return partial, gt, params
