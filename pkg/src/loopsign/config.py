"""Run configuration: dataclasses, JSON loading and dotted-path overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError

VARIANTS = ("encoder-decoder", "encoder", "decoder")
INJECTIONS = ("concat", "add", "attention")
EXTRA_FEATURES = ("none", "noise", "temporal")
MANIFOLD_SETTINGS = ("euclidean", "poincare", "lorentz", "adaptive-poincare", "adaptive-lorentz")


@dataclass
class ModelConfig:
    d_gcn: int = 32
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    temporal_kernel: int = 3
    tie_embeddings: bool = False

    def validate(self) -> None:
        for name in ("d_gcn", "d_model", "heads", "d_ff", "temporal_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"model.d_model={self.d_model} is not divisible by model.heads={self.heads}")
        if self.temporal_kernel % 2 == 0:
            raise ConfigError("model.temporal_kernel must be odd")


@dataclass
class LoopConfig:
    variant: str = "encoder-decoder"
    enc_layers: int = 1
    dec_layers: int = 1
    loops: int = 1
    injection: str = "concat"
    extra_feature: str = "none"
    noise_std: float = 0.1
    add_length_align: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"loop.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.injection not in INJECTIONS:
            raise ConfigError(f"loop.injection must be one of {INJECTIONS}, got {self.injection!r}")
        if self.extra_feature not in EXTRA_FEATURES:
            raise ConfigError(f"loop.extra_feature must be one of {EXTRA_FEATURES}, got {self.extra_feature!r}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        if self.loops < 0:
            raise ConfigError("loop.loops must be >= 0 (0 = plain, non-looped pass)")

    @property
    def unique_layers(self) -> int:
        return self.enc_layers + self.dec_layers

    @property
    def effective_depth(self) -> int:
        """Transformer blocks applied per forward pass (initial pass plus refinements)."""
        passes = self.loops + 1
        if self.variant == "encoder":
            return self.enc_layers * passes + self.dec_layers
        if self.variant == "decoder":
            return self.enc_layers + self.dec_layers * passes
        return self.unique_layers * passes


@dataclass
class AlignConfig:
    manifold: str = "adaptive-poincare"
    curvature: float = 1.0
    scale: float = 1.0
    learn_scale: bool = False
    d_hyp: int = 32
    tau: float = 0.07
    margin: float = 0.1
    alpha_mode: str = "learnable"
    alpha: float = 0.5
    w_aux: float = 0.1
    symmetric: bool = False
    uniform_weights: bool = False
    frechet_tol: float = 1e-6
    frechet_max_iter: int = 100

    def validate(self) -> None:
        if self.manifold not in MANIFOLD_SETTINGS:
            raise ConfigError(f"align.manifold must be one of {MANIFOLD_SETTINGS}, got {self.manifold!r}")
        if self.curvature <= 0:
            raise ConfigError("align.curvature must be positive")
        if self.scale <= 0:
            raise ConfigError("align.scale must be positive")
        if self.tau <= 0:
            raise ConfigError("align.tau must be positive")
        if self.margin < 0:
            raise ConfigError("align.margin must be >= 0")
        if self.alpha_mode not in ("learnable", "fixed"):
            raise ConfigError("align.alpha_mode must be 'learnable' or 'fixed'")
        if not 0 < self.alpha < 1:
            raise ConfigError("align.alpha must lie in (0, 1)")
        if self.w_aux < 0:
            raise ConfigError("align.w_aux must be >= 0")
        if self.d_hyp < 1 or self.frechet_max_iter < 1:
            raise ConfigError("align.d_hyp and align.frechet_max_iter must be positive")

    @property
    def geometry(self) -> str:
        return self.manifold.replace("adaptive-", "")

    @property
    def adaptive(self) -> bool:
        return self.manifold.startswith("adaptive-")


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup: int = 20
    schedule: str = "cosine"
    seed: int = 0
    eval_every: int = 0
    log_every: int = 1
    grad_clip: float = 1.0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("train.schedule must be 'cosine' or 'constant'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be 'float32' or 'float64'")


@dataclass
class DataConfig:
    manifest: str = ""
    train_split: str = "train"
    eval_split: str = "test"
    max_train: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loop.validate()
        self.align.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        return _build(cls, payload, "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(payload)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    def with_overrides(self, overrides: dict[str, Any] | list[str]) -> "RunConfig":
        """Apply ``{"loop.loops": 3}`` or ``["loop.loops=3"]`` style overrides."""
        if isinstance(overrides, list):
            parsed = {}
            for item in overrides:
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not of the form key=value")
                key, raw = item.split("=", 1)
                try:
                    parsed[key.strip()] = json.loads(raw)
                except json.JSONDecodeError:
                    parsed[key.strip()] = raw
            overrides = parsed
        payload = self.to_dict()
        for key, value in overrides.items():
            node = payload
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(payload)


def _build(cls, payload: dict, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in payload:
            continue
        value = payload[name]
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, current, prefix + name)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value
