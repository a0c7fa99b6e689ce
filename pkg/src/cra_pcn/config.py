"""Model and training configuration, plus the plain-text config file format.

A config file holds one ``key = value`` pair per line. ``#`` starts a
comment. The first setting must be ``version = 1``. Tuples are written as
comma-separated values, booleans as ``true``/``false``. Keys are the field
names of :class:`ModelConfig` and :class:`TrainConfig`; unknown keys are an
error. Keys that are left out keep their defaults.
"""
import dataclasses
import typing

from .errors import ContractError, ParseError

FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    # encoder
    min_input: int = 256
    enc_points: tuple = (256, 192, 128)
    enc_dims: tuple = (64, 128, 256)  # last entry is C_p
    enc_k: int = 16
    enc_m: int = 3
    shape_dim: int = 512  # C
    # decoder
    dim: int = 128  # D
    k: int = 16
    n_seeds: int = 256
    n_start: int = 512
    up_ratios: tuple = (1, 4, 8)
    pyramid_ratio: float = 0.5
    inter_m: int = 3
    intra_m: int = 3
    # ablation switches: how many CRTs of each kind per block, and which runs first
    n_inter: int = 1
    n_intra: int = 1
    crt_order: str = "inter_first"
    residual: bool = False
    offset_scale: float = 0.5
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_partial_points(self):
        return self.enc_points[-1]

    @property
    def partial_dim(self):
        return self.enc_dims[-1]

    @property
    def stage_sizes(self):
        sizes = [self.n_start]
        for r in self.up_ratios:
            sizes.append(sizes[-1] * r)
        return sizes

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ContractError(f"invalid model config: {msg}")

        need(len(self.enc_points) == 3 and len(self.enc_dims) == 3, "encoder needs three SA layers")
        need(all(n > 0 for n in self.enc_points), "encoder point counts must be positive")
        need(all(a >= b for a, b in zip(self.enc_points, self.enc_points[1:])), "encoder point counts must not grow")
        need(self.min_input >= self.enc_points[0], "min_input must cover the first SA layer")
        need(all(x > 0 for x in (self.enc_k, self.enc_m, self.shape_dim, self.dim, self.k)), "sizes must be positive")
        need(self.n_seeds > 0 and self.n_start > 0, "seed and start counts must be positive")
        need(self.n_seeds % self.enc_points[-1] == 0, "n_seeds must be a multiple of the last encoder point count")
        need(len(self.up_ratios) == 3 and all(r >= 1 for r in self.up_ratios), "need three up-sampling ratios >= 1")
        need(0 < self.pyramid_ratio < 1, "pyramid_ratio must lie in (0, 1)")
        need(self.inter_m >= 1 and self.intra_m >= 1, "CRT scale counts must be >= 1")
        need(self.n_inter in (0, 1, 2) and self.n_intra in (0, 1, 2), "n_inter/n_intra must be 0, 1 or 2")
        need(self.crt_order in ("inter_first", "intra_first"), "crt_order must be inter_first or intra_first")
        need(self.offset_scale > 0, "offset_scale must be positive")

    @classmethod
    def tiny(cls, **overrides):
        """Gradient-check scale: 64 input points, D=8, C=16, m=2, k=4, ratios (1, 2, 2)."""
        base = dict(
            min_input=64, enc_points=(32, 24, 16), enc_dims=(8, 8, 8), enc_k=4, enc_m=2,
            shape_dim=16, dim=8, k=4, n_seeds=32, n_start=64, up_ratios=(1, 2, 2),
            inter_m=2, intra_m=2,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides):
        """Toy-training scale: 512 input points, 2048 output points, D=32, m=2."""
        base = dict(
            min_input=256, enc_points=(256, 128, 64), enc_dims=(32, 32, 64), enc_k=8, enc_m=2,
            shape_dim=128, dim=32, k=8, n_seeds=128, n_start=256, up_ratios=(1, 2, 4),
            inter_m=2, intra_m=2,
        )
        base.update(overrides)
        return cls(**base)


# CRT ablation arms: (n_inter, n_intra, order)
ABLATION_ARMS = {
    "A": (0, 0, "inter_first"),
    "B": (0, 1, "inter_first"),
    "C": (1, 0, "inter_first"),
    "D": (0, 2, "inter_first"),
    "E": (2, 0, "inter_first"),
    "F": (1, 1, "intra_first"),
    "G": (1, 1, "inter_first"),
}


def ablation(config, arm):
    """Copy of ``config`` switched to one of the CRT arms ``A``..``G``."""
    try:
        n_inter, n_intra, order = ABLATION_ARMS[arm]
    except KeyError:
        raise ContractError(f"unknown ablation arm {arm!r}") from None
    return dataclasses.replace(config, n_inter=n_inter, n_intra=n_intra, crt_order=order)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.1
    lr_decay_every: int = 100  # epochs
    batch_size: int = 4
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or not 0 <= self.val_fraction < 1 or self.lr_decay_every < 1:
            raise ContractError("invalid training config")

    @classmethod
    def toy(cls, **overrides):
        # 300 steps is short; 3e-3 gave the lowest held-out CD of 1e-3, 3e-3 and 1e-2.
        return cls(**{"lr": 3e-3, **overrides})


def _parse_value(raw, hint, key, line, path):
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) if p.lstrip("-").isdigit() else float(p) for p in parts)
        return raw
    except ValueError:
        raise ParseError(f"bad value for {key!r}: {raw!r}", line=line, path=path) from None


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse(text, path=None):
    """Parse config text into ``(ModelConfig, TrainConfig)``."""
    model_t, train_t = _field_types(ModelConfig), _field_types(TrainConfig)
    model_kw, train_kw = {}, {}
    version = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno, path=path)
        key, raw = (s.strip() for s in line.split("=", 1))
        if version is None:
            if key != "version":
                raise ParseError("first setting must be 'version'", line=lineno, path=path)
            if raw != str(FORMAT_VERSION):
                raise ParseError(f"unsupported config version {raw!r}", line=lineno, path=path)
            version = int(raw)
            continue
        if key in model_t:
            model_kw[key] = _parse_value(raw, model_t[key], key, lineno, path)
        elif key in train_t:
            train_kw[key] = _parse_value(raw, train_t[key], key, lineno, path)
        else:
            raise ParseError(f"unknown key {key!r}", line=lineno, path=path)
    if version is None:
        raise ParseError("missing 'version' line", path=path)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ContractError as exc:
        raise ParseError(str(exc), path=path) from None


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), path=path)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(model, train=None):
    lines = ["# cra-pcn configuration", f"version = {FORMAT_VERSION}"]
    for obj in (model, train or TrainConfig()):
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
