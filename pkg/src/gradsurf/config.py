"""Flat key-value configuration file (`section.key = value`, one per line).

The first non-comment line of a saved file is `config_version = 1`. Unknown keys
are rejected. `--set key=value` overrides use the same keys.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path

from .errors import ConfigInvalid
from .field import FieldConfig
from .inference import AggregationConfig, MeshGrid
from .losses import LossTerms, LossWeights, validate_scales

CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_points: int = 5000
    learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    lr_final: float = 1e-6
    seed: int = 0
    xi: int = 25
    checkpoint_every: int = 0
    grad_clip: float = 10.0
    weight_decay: float = 0.0
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    scales: tuple = (1, 4, 8)
    terms: LossTerms = dc_field(default_factory=LossTerms)

    def validate(self, n_points: int | None = None):
        if self.iterations < 0 or self.batch_points < 1:
            raise ConfigInvalid("iterations must be >= 0 and batch_points >= 1")
        if self.learning_rate <= 0 or self.lr_final < 0:
            raise ConfigInvalid("learning rates must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigInvalid(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.xi < 1 or (n_points is not None and self.xi >= n_points):
            raise ConfigInvalid(f"xi={self.xi} must satisfy 1 <= xi < N")
        if self.checkpoint_every < 0 or self.grad_clip < 0 or self.weight_decay < 0:
            raise ConfigInvalid("checkpoint_every, grad_clip and weight_decay must be >= 0")
        self.field.validate()
        self.weights.validate()
        self.terms.validate()
        validate_scales(self.scales, n_points)


@dataclass(frozen=True)
class Config:
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    inference: AggregationConfig = dc_field(default_factory=AggregationConfig)
    mesh: MeshGrid = dc_field(default_factory=MeshGrid)

    def validate(self, n_points: int | None = None):
        self.train.validate(n_points)
        self.inference.validate()
        self.mesh.validate()


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# flat key -> (attribute path inside Config, parser, help)
KEYS = {
    "field.hidden_width": (("train", "field", "hidden_width"), int, "hidden layer width"),
    "field.hidden_layers": (("train", "field", "hidden_layers"), int, "number of hidden layers"),
    "field.skip_at": (("train", "field", "skip_at"), int, "hidden layer receiving the input skip (0 = none)"),
    "field.beta": (("train", "field", "beta"), float, "softplus sharpness"),
    "field.init_radius": (("train", "field", "init_radius"), float, "radius of the initial sphere"),
    "field.inside_positive": (("train", "field", "inside_positive"), _bool, "field sign: positive inside"),
    "field.dtype": (("train", "field", "dtype"), str, "float32 or float64"),
    "loss.lambda1": (("train", "weights", "lambda1"), float, "weight of the distance-operator term"),
    "loss.lambda2": (("train", "weights", "lambda2"), float, "weight of the gradient-consistency term"),
    "loss.rho": (("train", "weights", "rho"), float, "confidence sharpness"),
    "loss.surface_sd_weight": (("train", "weights", "surface_sd_weight"), float, "weight of f(q')^2"),
    "loss.scales": (("train", "scales"), _ints, "neighborhood scales, comma separated"),
    "loss.use_sd": (("train", "terms", "sd"), _bool, "enable signed-distance term"),
    "loss.use_ld": (("train", "terms", "ld"), _bool, "enable plain distance part"),
    "loss.use_pd": (("train", "terms", "pd"), _bool, "enable projected distance parts"),
    "loss.use_n": (("train", "terms", "n"), _bool, "enable gradient-consistency term"),
    "loss.use_v": (("train", "terms", "v"), _bool, "enable multi-scale orientation term"),
    "sampling.xi": (("train", "xi"), int, "neighbor rank setting the query sigma"),
    "trainer.iterations": (("train", "iterations"), int, "optimizer steps"),
    "trainer.batch_points": (("train", "batch_points"), int, "raw points / queries per step"),
    "trainer.learning_rate": (("train", "learning_rate"), float, "initial Adam learning rate"),
    "trainer.lr_schedule": (("train", "lr_schedule"), str, "cosine or constant"),
    "trainer.lr_final": (("train", "lr_final"), float, "final learning rate (cosine)"),
    "trainer.seed": (("train", "seed"), int, "master seed"),
    "trainer.checkpoint_every": (("train", "checkpoint_every"), int, "checkpoint cadence (0 = final only)"),
    "trainer.grad_clip": (("train", "grad_clip"), float, "global gradient-norm clip (0 = off)"),
    "trainer.weight_decay": (("train", "weight_decay"), float, "Adam weight decay"),
    "inference.kappa": (("inference", "kappa"), int, "neighbors aggregated per normal"),
    "inference.theta": (("inference", "theta"), float, "angle scale of the aggregation weight (radians)"),
    "inference.use_query_augmentation": (("inference", "use_query_augmentation"), _bool,
                                         "search neighbors in raw points plus queries"),
    "inference.aggregate": (("inference", "aggregate"), _bool, "aggregate (false: raw gradients)"),
    "inference.query_count": (("inference", "query_count"), int, "queries sampled for aggregation"),
    "inference.outward": (("inference", "outward"), _bool, "report outward-facing normals"),
    "mesh.resolution": (("mesh", "resolution"), _ints, "grid samples per axis (1 or 3 ints)"),
    "mesh.bounds": (("mesh", "bounds"), _floats, "grid box: lo,hi or 3 lows then 3 highs"),
}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(obj, path, value):
    if len(path) == 1:
        return replace(obj, **{path[0]: value})
    return replace(obj, **{path[0]: _set(getattr(obj, path[0]), path[1:], value)})


def set_key(cfg: Config, key: str, raw) -> Config:
    if key not in KEYS:
        raise ConfigInvalid(f"unknown config key {key!r}")
    path, parse, _ = KEYS[key]
    try:
        value = parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad value for {key}: {raw!r} ({exc})") from None
    return _set(cfg, path, value)


def to_flat(cfg: Config) -> dict:
    return {k: _fmt(_get(cfg, path)) for k, (path, _, _) in KEYS.items()}


def from_flat(values: dict, base: Config | None = None) -> Config:
    cfg = base or Config()
    for k, v in values.items():
        if k == "config_version":
            if int(v) != CONFIG_VERSION:
                raise ConfigInvalid(f"unsupported config_version {v}")
            continue
        cfg = set_key(cfg, k, v)
    return cfg


def parse_text(text: str, source="<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path, base: Config | None = None) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return from_flat(parse_text(text, str(path)), base)


def dump_config(cfg: Config) -> str:
    lines = [f"config_version = {CONFIG_VERSION}"]
    lines += [f"{k} = {v}" for k, v in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def save_config(path, cfg: Config):
    Path(path).write_text(dump_config(cfg))


def apply_overrides(cfg: Config, overrides) -> Config:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg = set_key(cfg, k.strip(), v.strip())
    return cfg


def describe_keys(cfg: Config | None = None) -> str:
    flat = to_flat(cfg or Config())
    width = max(len(k) for k in KEYS)
    return "\n".join(f"  {k:<{width}}  {flat[k]:<22} {KEYS[k][2]}" for k in KEYS)


def desk_config(**train_overrides) -> Config:
    """Reduced network and batch for single-core desk runs (see README)."""
    fcfg = FieldConfig(hidden_width=64, hidden_layers=4, skip_at=2)
    train = replace(TrainConfig(), field=fcfg, batch_points=1000, learning_rate=1e-3,
                    lr_final=1e-5, xi=10, iterations=2000)
    train = replace(train, **train_overrides)
    return Config(train=train)


__all__ = ["Config", "TrainConfig", "KEYS", "load_config", "save_config", "dump_config",
           "apply_overrides", "describe_keys", "to_flat", "from_flat", "set_key", "desk_config"]
