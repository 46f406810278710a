"""Strict JSON experiment configuration.

Unknown keys, duplicate keys, wrong types and constraint violations are
rejected with the dotted path of the offending key. Every omitted field takes
its default, and :func:`config_to_dict` echoes the complete, defaulted
configuration back out.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_args, get_origin, get_type_hints

from ..errors import ConfigError

ENV_OUTPUT_ROOT = "FEDLDI_OUTPUT_ROOT"


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n_classes: int = 10
    dim: int = 32
    per_class: int = 5000
    sep: float = 5.0
    noise: float = 1.0
    images: Optional[str] = None
    labels: Optional[str] = None
    seed: Optional[int] = None

    def validate(self, path):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"{path}.source", "must be 'synthetic' or 'idx'")
        if self.source == "idx":
            for key in ("images", "labels"):
                value = getattr(self, key)
                if not value:
                    raise ConfigError(f"{path}.{key}", "required for idx datasets")
                if not Path(value).exists():
                    raise ConfigError(f"{path}.{key}", f"file not found: {value}")
        _positive(self, path, "n_classes", "dim", "per_class", "sep", "noise")
        if self.n_classes < 2:
            raise ConfigError(f"{path}.n_classes", "need at least 2 classes")


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32])
    activation: str = "relu"

    def validate(self, path):
        if self.activation not in ("relu", "tanh", "identity"):
            raise ConfigError(f"{path}.activation", "must be relu, tanh or identity")
        for i, h in enumerate(self.hidden):
            if not isinstance(h, int) or isinstance(h, bool) or h < 1:
                raise ConfigError(f"{path}.hidden[{i}]", "must be a positive integer")


@dataclass
class RegimeConfig:
    kind: str = "iid"
    delta: Optional[float] = None
    c_f: Optional[int] = None
    alpha: Optional[float] = None

    def validate(self, path):
        if self.kind == "iid":
            d = 0.1 if self.delta is None else self.delta
            if not 0 <= d < 1:
                raise ConfigError(f"{path}.delta", "must lie in [0, 1)")
        elif self.kind == "quantity":
            if self.c_f is None or self.c_f < 1:
                raise ConfigError(f"{path}.c_f", "must be a positive integer")
        elif self.kind == "dirichlet":
            if self.alpha is None or not self.alpha > 0:
                raise ConfigError(f"{path}.alpha", "must be positive")
        else:
            raise ConfigError(f"{path}.kind", "must be iid, quantity or dirichlet")
        for key, kind in (("delta", "iid"), ("c_f", "quantity"), ("alpha", "dirichlet")):
            if getattr(self, key) is not None and self.kind != kind:
                raise ConfigError(f"{path}.{key}", f"not a parameter of the {self.kind} regime")

    def build(self):
        from ..datasets import DirichletRegime, IidRegime, QuantityRegime
        if self.kind == "iid":
            return IidRegime(0.1 if self.delta is None else self.delta)
        if self.kind == "quantity":
            return QuantityRegime(self.c_f)
        return DirichletRegime(self.alpha)


@dataclass
class VictimConfig:
    size: int = 2000
    regime: RegimeConfig = field(default_factory=lambda: RegimeConfig("iid", delta=0.1))
    seed: Optional[int] = None

    def validate(self, path):
        _positive(self, path, "size")


@dataclass
class ClientsConfig:
    count: int = 4  # including the victim
    size: int = 2000
    regime: RegimeConfig = field(default_factory=lambda: RegimeConfig("iid", delta=0.1))

    def validate(self, path):
        _positive(self, path, "count", "size")


@dataclass
class LocalTrainConfig:
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05

    def validate(self, path):
        _positive(self, path, "batch_size", "lr")
        if self.local_epochs < 0:
            raise ConfigError(f"{path}.local_epochs", "must be non-negative")


@dataclass
class LdpSection:
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    apply_to: str = "all"
    mirror: bool = True

    def validate(self, path):
        _positive(self, path, "epsilon", "clip_norm")
        if not 0 < self.delta < 1:
            raise ConfigError(f"{path}.delta", "must lie in (0, 1)")
        if self.apply_to not in ("all", "victim"):
            raise ConfigError(f"{path}.apply_to", "must be 'all' or 'victim'")

    def build(self):
        from ..flsim import LdpConfig
        return LdpConfig(self.epsilon, self.delta, self.clip_norm)


@dataclass
class ServerConfig:
    eval_per_class: int = 100
    aux_fraction: float = 0.5

    def validate(self, path):
        _positive(self, path, "eval_per_class")
        if not 0 < self.aux_fraction < 1:
            raise ConfigError(f"{path}.aux_fraction", "must lie in (0, 1)")


@dataclass
class SizeSearchSection:
    enabled: bool = True
    tolerance: Optional[float] = None
    tolerance_frac: float = 0.05
    s_init: int = 500
    s_min: int = 50
    s_max: int = 8000
    probe_rounds: int = 3
    probe_repeats: int = 5
    max_iters: int = 30

    def validate(self, path):
        if not 0 < self.s_min <= self.s_init <= self.s_max:
            raise ConfigError(f"{path}.s_init", "need 0 < s_min <= s_init <= s_max")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ConfigError(f"{path}.tolerance", "must be positive")
        _positive(self, path, "tolerance_frac", "probe_rounds", "probe_repeats", "max_iters")


@dataclass
class ClusterSection:
    train: dict = field(default_factory=lambda: {"iid": 40, "quantity": 40, "dirichlet": 40})
    test: dict = field(default_factory=lambda: {"iid": 14, "quantity": 13, "dirichlet": 13})
    delta: float = 0.1
    c_f: list = field(default_factory=lambda: [3])
    alpha: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    jitter: list = field(default_factory=lambda: [0.8, 1.2])

    def validate(self, path):
        for split in ("train", "test"):
            counts = getattr(self, split)
            for k, v in counts.items():
                if k not in ("iid", "quantity", "dirichlet"):
                    raise ConfigError(f"{path}.{split}.{k}", "unknown regime")
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ConfigError(f"{path}.{split}.{k}", "must be a non-negative integer")
        if sum(self.train.values()) < 1:
            raise ConfigError(f"{path}.train", "need at least one training virtual client")
        if not 0 <= self.delta < 1:
            raise ConfigError(f"{path}.delta", "must lie in [0, 1)")
        for i, a in enumerate(self.alpha):
            if not a > 0:
                raise ConfigError(f"{path}.alpha[{i}]", "must be positive")
        for i, c in enumerate(self.c_f):
            if not isinstance(c, int) or c < 1:
                raise ConfigError(f"{path}.c_f[{i}]", "must be a positive integer")
        if len(self.jitter) != 2 or not 0 < self.jitter[0] <= self.jitter[1]:
            raise ConfigError(f"{path}.jitter", "must be [low, high] with 0 < low <= high")


@dataclass
class AttackerSection:
    epochs: int = 200
    lr: float = 3e-3
    batch_size: int = 8
    loss: str = "kl"
    val_fraction: float = 0.2
    hidden: int = 64
    weight_decay: float = 1.0
    input_noise: float = 0.0
    select: str = "best_val"
    seed: Optional[int] = None

    def validate(self, path):
        _positive(self, path, "epochs", "lr", "batch_size", "hidden")
        if self.loss not in ("kl", "mse"):
            raise ConfigError(f"{path}.loss", "must be 'kl' or 'mse'")
        if not 0 < self.val_fraction <= 0.5:
            raise ConfigError(f"{path}.val_fraction", "must lie in (0, 0.5]")
        if self.select not in ("best_val", "last"):
            raise ConfigError(f"{path}.select", "must be 'best_val' or 'last'")
        if self.weight_decay < 0 or self.input_noise < 0:
            raise ConfigError(path, "weight_decay and input_noise must be non-negative")


@dataclass
class FLRunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rounds: int = 30
    victim: VictimConfig = field(default_factory=VictimConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    local_train: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    ldp: Optional[LdpSection] = None
    server: ServerConfig = field(default_factory=ServerConfig)
    size_search: SizeSearchSection = field(default_factory=SizeSearchSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    attacker: AttackerSection = field(default_factory=AttackerSection)
    dp_sweep: list = field(default_factory=lambda: [40.0, 10.0, 5.0, 2.0, 1.0])
    output_dir: Optional[str] = None
    seed: int = 0

    def validate(self, path=""):
        if self.rounds < 1:
            raise ConfigError(_join(path, "rounds"), "must be at least 1")
        for i, e in enumerate(self.dp_sweep):
            if not e > 0:
                raise ConfigError(_join(path, f"dp_sweep[{i}]"), "must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(_join(path, "seed"), "must be an unsigned 64-bit integer")


def _join(path, key):
    return f"{path}.{key}" if path else key


def _positive(obj, path, *keys):
    for key in keys:
        if not getattr(obj, key) > 0:
            raise ConfigError(f"{path}.{key}", "must be positive")


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(k, "duplicate key")
        out[k] = v
    return out


def _check_type(value, tp, path):
    origin = get_origin(tp)
    if origin is Optional or (origin is not None and type(None) in get_args(tp)):
        if value is None:
            return None
        inner = [a for a in get_args(tp) if a is not type(None)][0]
        return _check_type(value, inner, path)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {type(value).__name__}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return list(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return dict(value)
    return value


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(_join(path, key), "unknown key")
    kwargs = {k: _check_type(v, hints[k], _join(path, k)) for k, v in data.items()}
    obj = cls(**kwargs)
    for f in dataclasses.fields(cls):
        child = getattr(obj, f.name)
        if dataclasses.is_dataclass(child):
            child.validate(_join(path, f.name))
    if cls is FLRunConfig:
        obj.validate(path)
    return obj


def config_from_dict(data) -> FLRunConfig:
    return _from_dict(FLRunConfig, data, "")


def parse_config(path) -> FLRunConfig:
    """Load and validate a JSON config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from None
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: FLRunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: FLRunConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def write_config(cfg: FLRunConfig, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def replace(cfg: FLRunConfig, **changes) -> FLRunConfig:
    """Copy with dotted-path overrides, e.g. ``replace(cfg, **{"ldp.epsilon": 2.0})``."""
    data = config_to_dict(cfg)
    for dotted, value in changes.items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            if node.get(k) is None:
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
    return config_from_dict(data)


__all__ = ["FLRunConfig", "parse_config", "config_from_dict", "config_to_dict", "config_hash",
           "write_config", "replace"]
