"""Experiment configuration: flat ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ParameterError
from .privacy import DpConfig, calibrate_sigma

METHODS = ("p4", "local", "local_hc", "fedavg", "p4_random_groups", "p4_no_proxy", "p4_raw_images")
GROUPED_METHODS = ("p4", "p4_random_groups", "p4_no_proxy", "p4_raw_images")


@dataclass
class ExperimentConfig:
    # data
    dataset: str | None = None  # "synthetic" or a path
    dataset_format: str = "idx"
    labels_path: str | None = None
    num_classes: int = 4
    image_size: int = 8
    separation: float = 6.0
    clusters: int = 1
    partition: str = "alpha"  # alpha | shard
    clients: int = 25
    samples_per_client: int = 200
    iid_fraction: float = 0.5
    classes_per_client: int = 2
    shards_per_class: int = 2
    eval_fraction: float = 0.2
    features: bool = True
    # privacy
    epsilon: float = 15.0
    delta: float | None = None
    clip: float = 1.0
    sample_ratio: float = 1.0
    local_steps: int = 1
    rounds: int = 100
    c_sigma: float = 1.0
    sigma_g: float | None = None
    # grouping and aggregation
    probe_peers: int = 10
    group_size_max: int = 8
    rotation_period: int = 10
    drop_probability: float = 0.0
    # training
    lr0: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    user_ratio: float = 1.0
    method: str = "p4"
    seed: int = 0
    repeats: int = 1
    eval_interval: int = 5
    output: str | None = None
    grid_lr0: tuple = (0.1, 0.3, 1.0, 3.0, 10.0)
    grid_clip: tuple = (0.1, 0.3, 1.0, 3.0, 10.0)

    # -- derived quantities -------------------------------------------------

    @property
    def lr_local(self) -> float:
        return self.lr0 / (self.sample_ratio * self.local_steps)

    @property
    def resolved_delta(self) -> float:
        return self.delta if self.delta is not None else 1.0 / self.samples_per_client

    @property
    def dp(self) -> DpConfig:
        return DpConfig(self.epsilon, self.resolved_delta, self.clip, self.sample_ratio,
                        self.local_steps, self.rounds, self.c_sigma)

    @property
    def sigma(self) -> float:
        if self.sigma_g is not None:
            return self.sigma_g
        return calibrate_sigma(self.dp)

    @property
    def eval_clients(self) -> int:
        return int(math.floor(self.eval_fraction * self.clients + 1e-9))

    @property
    def train_clients(self) -> int:
        return self.clients - self.eval_clients

    @property
    def uses_features(self) -> bool:
        if self.method in ("local", "p4_raw_images"):
            return False
        if self.method == "local_hc":
            return True
        return self.features

    def replace(self, **changes) -> "ExperimentConfig":
        return validate(dataclasses.replace(self, **changes))

    def resolved(self) -> dict:
        """Every field plus the derived learning rate, delta and noise multiplier."""
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out.update(lr_local=self.lr_local, delta=self.resolved_delta, sigma_g=self.sigma,
                   train_clients=self.train_clients, eval_clients=self.eval_clients)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"local_steps_k": "local_steps", "T": "rounds", "H": "probe_peers", "eta0": "lr0"}


def _coerce(name: str, raw: str):
    text = raw.strip()
    kind = _FIELDS[name].type
    if text.lower() in ("none", "") and "None" in kind:
        return None
    try:
        if name.startswith("grid_"):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            if "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind}") from None
    return text


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, raw)
    return values


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.dataset is None or not str(cfg.dataset).strip():
        raise ConfigError("dataset", "missing dataset (a path or 'synthetic')")
    if cfg.dataset != "synthetic" and not Path(cfg.dataset).exists():
        raise ConfigError("dataset", f"no such file: {cfg.dataset}")
    if cfg.dataset_format not in ("idx", "csv"):
        raise ConfigError("dataset_format", "must be idx or csv")
    if cfg.method not in METHODS:
        raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
    if cfg.partition not in ("alpha", "shard"):
        raise ConfigError("partition", "must be alpha or shard")
    if cfg.partition == "shard" and (cfg.num_classes * cfg.shards_per_class) % cfg.classes_per_client:
        raise ConfigError("classes_per_client", "num_classes * shards_per_class must be divisible by it")
    if not 0.0 <= cfg.iid_fraction <= 1.0:
        raise ConfigError("iid_fraction", "must be in [0, 1]")
    if not 0.0 <= cfg.eval_fraction < 1.0:
        raise ConfigError("eval_fraction", "must be in [0, 1)")
    if cfg.clusters < 1:
        raise ConfigError("clusters", "must be at least 1")
    if cfg.samples_per_client < 5:
        raise ConfigError("samples_per_client", "need at least 5 samples per client")
    if cfg.rounds < 1 or cfg.local_steps < 1 or cfg.eval_interval < 1:
        raise ConfigError("rounds", "rounds, local_steps and eval_interval must be positive")
    if not 0.0 < cfg.user_ratio <= 1.0:
        raise ConfigError("user_ratio", "must be in (0, 1]")
    if cfg.group_size_max < 1:
        raise ConfigError("group_size_max", "must be at least 1")
    if cfg.rotation_period < 1:
        raise ConfigError("rotation_period", "must be at least 1")
    if cfg.sigma_g is not None and cfg.sigma_g < 0:
        raise ConfigError("sigma_g", "must be non-negative")
    if cfg.method in GROUPED_METHODS and cfg.method != "p4_random_groups" and cfg.train_clients > 1:
        if not 1 <= cfg.probe_peers <= cfg.train_clients - 1:
            raise ConfigError("probe_peers", f"must be in [1, {cfg.train_clients - 1}] "
                                             f"for {cfg.train_clients} training clients")
    for name in ("alpha", "beta"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(name, "must be in [0, 1]")
    if not cfg.lr0 > 0:
        raise ConfigError("lr0", "must be positive")
    try:
        cfg.dp
    except ParameterError as exc:
        raise ConfigError("epsilon/delta/clip/sample_ratio", str(exc)) from None
    return cfg


def parse_config(path=None, **overrides) -> ExperimentConfig:
    """Read a config file (optional), apply non-``None`` overrides, validate."""
    values = parse_text(Path(path).read_text()) if path is not None else {}
    for key, value in overrides.items():
        if value is None:
            continue
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return validate(ExperimentConfig(**values))
