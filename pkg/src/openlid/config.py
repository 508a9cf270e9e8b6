"""Pipeline configuration: defaults < config file < environment < flags."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

from .backend.ensemble import BackendConfig
from .corpus.audio import DEFAULT_RATE, DEFAULT_SEGMENT_S
from .corpus.registry import LanguageRegistry
from .errors import ConfigError
from .features import MfccConfig
from .nn.tdnn import TdnnConfig
from .nn.train import TrainConfig
from .openset import DEFAULT_TAU

ENV_DATASET_ROOT = "OPENLID_DATASET_ROOT"

DEFAULT_HIDDEN = (256, 256, 256, 256, 256)
DEFAULT_CONTEXTS = (3, 3, 3, 1, 1, 1)


def _without_seed(d: dict) -> dict:
    # the pipeline-wide seed is the single source of randomness
    return {k: v for k, v in d.items() if k != "seed"}


@dataclass
class PipelineConfig:
    dataset_root: str = ""
    registry: dict = field(default_factory=lambda: LanguageRegistry.cu_multilang_default().to_dict())
    segment_s: float = DEFAULT_SEGMENT_S
    rate: int = DEFAULT_RATE
    mfcc: dict = field(default_factory=lambda: MfccConfig().to_dict())
    # hidden layer widths; the output layer always has one unit per in-set language
    hidden_dims: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    contexts: list[int] = field(default_factory=lambda: list(DEFAULT_CONTEXTS))
    train: dict = field(default_factory=lambda: _without_seed(TrainConfig().to_dict()))
    backend: dict = field(default_factory=lambda: _without_seed(BackendConfig().to_dict()))
    tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # typed views -----------------------------------------------------------
    def language_registry(self) -> LanguageRegistry:
        return LanguageRegistry.from_dict(self.registry)

    def mfcc_config(self) -> MfccConfig:
        return MfccConfig.from_dict(self.mfcc)

    def tdnn_config(self) -> TdnnConfig:
        n_out = len(self.registry["in_set"])
        return TdnnConfig(layer_dims=tuple(self.hidden_dims) + (n_out,), contexts=tuple(self.contexts),
                          dilations=(1,) * len(self.contexts), strides=(1,) * len(self.contexts),
                          bn_eps=float(self.train.get("bn_eps", 1e-5)))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed})

    def backend_config(self) -> BackendConfig:
        return BackendConfig(**{**self.backend, "seed": self.seed})

    def validate(self) -> None:
        if self.segment_s <= 0:
            raise ConfigError("segment_s must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if len(self.contexts) != len(self.hidden_dims) + 1:
            raise ConfigError("need one context per layer (hidden layers plus the output layer)")
        for name, known in (("train", TrainConfig().to_dict()), ("backend", BackendConfig().to_dict())):
            unknown = set(getattr(self, name)) - set(known) | ({"seed"} & set(getattr(self, name)))
            if unknown:
                raise ConfigError(f"unknown {name} settings: {sorted(unknown)}")
        if self.mfcc.get("sample_rate", self.rate) != self.rate:
            raise ConfigError("mfcc.sample_rate must equal the pipeline rate")
        self.language_registry()
        self.mfcc_config().validate()
        self.train_config()
        self.tdnn_config()

    def require_dataset_root(self) -> str:
        if not self.dataset_root:
            raise ConfigError(f"no dataset root: pass --dataset-root or set {ENV_DATASET_ROOT}")
        if not os.path.isdir(self.dataset_root):
            raise ConfigError(f"dataset root {self.dataset_root!r} is not a directory")
        return self.dataset_root

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return copy.deepcopy(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls().to_dict()
        for key, value in d.items():
            if isinstance(base.get(key), dict) and key != "registry":
                base[key] = {**base[key], **value}
            else:
                base[key] = value
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                environ: dict | None = None) -> PipelineConfig:
    """Merge the layers. ``overrides`` use dotted keys for nested fields,
    e.g. ``{"train.epochs": 3, "tau": 0.81}``."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    environ = os.environ if environ is None else environ
    if environ.get(ENV_DATASET_ROOT):
        data["dataset_root"] = environ[ENV_DATASET_ROOT]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            data.setdefault(head, {})[tail] = value
        else:
            data[head] = value
    return PipelineConfig.from_dict(data)
