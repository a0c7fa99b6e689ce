"""Adam training loop, held-out evaluation and checkpoints."""
import dataclasses
import math

import numpy as np

from . import config as config_mod
from . import data, geometry, model
from . import tensor as T
from .errors import ContractError, TrainingError
from .layers import named_parameters


@dataclasses.dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        named = list(named_parameters(params))
        return cls({n: np.zeros_like(t.data) for n, t in named}, {n: np.zeros_like(t.data) for n, t in named})


def lr_at(epoch, tcfg):
    """Step decay: ``lr * decay ** (epoch // every)``."""
    return tcfg.lr * tcfg.lr_decay ** (epoch // tcfg.lr_decay_every)


def adam_update(params, grads, state, tcfg, lr):
    state.step += 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    for name, t in named_parameters(params):
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)


@dataclasses.dataclass(frozen=True)
class Sample:
    partial: np.ndarray
    complete: np.ndarray
    targets: tuple
    category: str = ""


def make_sample(partial, complete, cfg, category=""):
    return Sample(partial, complete, tuple(model.loss_targets(complete, model.supervised_sizes(cfg))), category)


def batch_gradients(params, batch, cfg):
    """Mean loss over ``batch`` and its gradient per parameter name."""
    named = list(named_parameters(params))
    total, grads = 0.0, {n: np.zeros_like(t.data) for n, t in named}
    for s in batch:
        with T.Tape() as tape:
            tape.watch([t for _, t in named])
            loss = model.loss(model.forward(s.partial, cfg, params), s.complete, list(s.targets))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value}", diagnostics=_diagnostics(params, s, value))
        g = T.backward(tape, loss)
        for n, t in named:
            grads[n] += g[t]
        total += value
    scale = 1.0 / len(batch)
    return total * scale, {n: g * scale for n, g in grads.items()}


def train_step(params, batch, state, cfg, tcfg, lr=None):
    """One Adam step on the batch-mean loss. Returns ``{"loss": ...}`` measured before the update."""
    if not batch:
        raise ContractError("empty batch")
    loss, grads = batch_gradients(params, batch, cfg)
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient in {bad[0]}", diagnostics={"loss": loss, "blocks": bad})
    adam_update(params, grads, state, tcfg, tcfg.lr if lr is None else lr)
    return {"loss": loss}


def _diagnostics(params, sample, value):
    norms = {n: float(np.abs(t.data).max()) for n, t in named_parameters(params)}
    worst = max(norms, key=norms.get)
    return {
        "loss": value,
        "partial_finite": bool(np.all(np.isfinite(sample.partial))),
        "largest_param_block": worst,
        "largest_param_abs": norms[worst],
    }


def evaluate(params, cfg, samples, variant="CD-L1"):
    """Mean chamfer distance between the final stage and each complete cloud."""
    if not samples:
        return float("nan")
    vals = [float(geometry.chamfer(model.forward(s.partial, cfg, params).final, s.complete, variant).data) for s in samples]
    return math.fsum(vals) / len(vals)


def split(examples, val_fraction):
    """Hold out the last ``val_fraction`` of the manifest (at least one example)."""
    n_val = max(1, int(round(len(examples) * val_fraction))) if val_fraction > 0 else 0
    if n_val >= len(examples):
        raise ContractError(f"need more than {n_val} examples to hold out {n_val}")
    return examples[: len(examples) - n_val], examples[len(examples) - n_val:]


def load_samples(examples, cfg):
    out = []
    for ex in examples:
        partial = data.read_points(ex.partial)
        if partial.shape[0] < cfg.min_input:
            raise ContractError(f"{ex.partial}: {partial.shape[0]} points, model needs >= {cfg.min_input}")
        out.append(make_sample(partial, data.read_points(ex.complete), cfg, ex.category))
    return out


def fit(params, train_samples, val_samples, cfg, tcfg, epochs, seed=0, on_epoch=None):
    """Train for ``epochs`` passes over ``train_samples`` in seeded shuffled order.

    Validation CD-L1 is reported before training (epoch 0) and after each
    epoch. Returns the list of ``(epoch, val_cd_l1, mean_train_loss)``.
    """
    rng = np.random.default_rng(seed)
    state = AdamState.zeros(params)
    history = []

    def report(epoch, train_loss):
        val = evaluate(params, cfg, val_samples)
        history.append((epoch, val, train_loss))
        if on_epoch:
            on_epoch(epoch, val, train_loss)

    report(0, float("nan"))
    for epoch in range(epochs):
        lr = lr_at(epoch, tcfg)
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + tcfg.batch_size]]
            losses.append(train_step(params, batch, state, cfg, tcfg, lr)["loss"])
        report(epoch + 1, math.fsum(losses) / max(1, len(losses)))
    return history


# -- checkpoints -------------------------------------------------------------


def save(path, params, cfg, tcfg=None):
    """Parameters plus the config text, so a checkpoint is self-describing."""
    T.save_checkpoint(path, model.state_dict(params), meta=config_mod.dumps(cfg, tcfg))


def load(path):
    """Returns ``(params, ModelConfig, TrainConfig)``."""
    records, meta = T.load_checkpoint(path)
    cfg, tcfg = config_mod.parse(meta, path=f"{path}[config]")
    params = model.init_params(cfg)
    model.load_state(params, records)
    return params, cfg, tcfg
