"""Training configuration and its dotted key-value file format.

A config file holds one ``section.key = value`` per line (``#`` starts a
comment). Values are Python literals; bare words are read as strings.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .adaptive import DensifyConfig
from .camera import PoseSamplerConfig


@dataclass
class LossWeights:
    lambda_sds: float = 0.1
    lambda_3d: float = 0.01
    lambda_mean: float = 1.0
    lambda_opacity: float = 100.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


def _default_lrs():
    return {"positions": 1e-3, "color_params": 1e-2, "opacity_logits": 5e-2, "log_scales": 5e-3,
            "rotations": 1e-3, "background": 1e-3}


@dataclass
class StageConfig:
    stage: str = "geometry"
    iterations: int = 500
    batch: int = 4
    resolution: int = 64
    lambda_sds: float = 0.1
    lambda_3d: float = 0.01
    lambda_mean: float = 1.0
    lambda_opacity: float = 100.0
    # deviation: pull toward geometry-stage snapshot; literal: toward the origin
    mean_mode: str = "deviation"
    lr: dict = field(default_factory=_default_lrs)
    position_lr_scale: float = 1.0

    def __post_init__(self):
        if self.stage not in ("geometry", "refine"):
            raise ValueError("stage must be 'geometry' or 'refine'")
        if self.iterations < 0 or self.batch < 1:
            raise ValueError("iterations must be >= 0 and batch >= 1")
        if self.mean_mode not in ("deviation", "literal"):
            raise ValueError("mean_mode must be 'deviation' or 'literal'")
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_sds, self.lambda_3d, self.lambda_mean, self.lambda_opacity)

    def learning_rates(self) -> dict:
        lrs = dict(_default_lrs(), **self.lr)
        lrs["positions"] *= self.position_lr_scale
        return lrs


@dataclass
class GuidanceConfig:
    # dirac | null | external
    image: str = "dirac"
    point: str = "dirac"
    # source of the Dirac targets: a Gaussian PLY path or synthetic:blobs
    target: str = "synthetic:blobs"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    t_range: tuple = (0.02, 0.98)
    host: str = "127.0.0.1"
    port: int = 7860
    point_port: int = 7861


@dataclass
class BackgroundConfig:
    kind: str = "mlp"
    width: int = 16
    color: tuple = (1.0, 1.0, 1.0)


@dataclass
class TrainConfig:
    seed: int = 0
    geometry: StageConfig = field(default_factory=lambda: StageConfig(stage="geometry", iterations=500))
    refine: StageConfig = field(default_factory=lambda: StageConfig(stage="refine", iterations=1000))
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    camera: PoseSamplerConfig = field(default_factory=PoseSamplerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    checkpoint_every: int = 0
    log_every: int = 1


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(current, value):
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def set_key(cfg, dotted: str, value):
    """Assign a dotted key (e.g. ``refine.lambda_opacity``) on a nested dataclass config."""
    parts = dotted.strip().split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
            raise KeyError(f"unknown config section {dotted!r}")
        obj = getattr(obj, p)
    last = parts[-1]
    if isinstance(obj, dict):
        obj[last] = value
        return
    if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
        raise KeyError(f"unknown config key {dotted!r}")
    setattr(obj, last, _coerce(getattr(obj, last), value))


def _revalidate(obj):
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _revalidate(getattr(obj, f.name))
        post = getattr(obj, "__post_init__", None)
        if post:
            post()


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, _, val = line.partition("=")
        set_key(cfg, key, _parse_value(val))
    _revalidate(cfg)
    return cfg


def load(path, overrides=()) -> TrainConfig:
    cfg = loads(Path(path).read_text()) if path else TrainConfig()
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    for item in overrides:
        key, _, val = item.partition("=")
        set_key(cfg, key, _parse_value(val))
    _revalidate(cfg)
    return cfg


def flatten(obj, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        elif isinstance(val, dict):
            for k in sorted(val):
                out[f"{key}.{k}"] = val[k]
        else:
            out[key] = val
    return out


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(flatten(cfg).items()))


def config_hash(cfg: TrainConfig) -> str:
    """Digest of every key that influences the optimization trajectory."""
    skip = {"checkpoint_every", "log_every"}
    items = {k: v for k, v in flatten(cfg).items() if k not in skip}
    text = "".join(f"{k} = {v!r}\n" for k, v in sorted(items.items()))
    return hashlib.sha256(text.encode()).hexdigest()
