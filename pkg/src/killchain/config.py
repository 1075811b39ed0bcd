"""Run configuration: TOML files layered over per-scenario defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import toml

from .data import DEFAULT_TSR_CLASSES
from .model import ArchitectureSpec, TrainConfig
from .oracle import LABEL_MODES
from .querygen import NOISE_KINDS, QueryStrategy

SCENARIOS = ("tsr", "pd", "toy2d")
ROLE_SEED = {"victim": 1, "substitute": 101}


class ConfigError(Exception):
    """The run configuration is malformed or inconsistent."""


@dataclass
class DatasetConfig:
    root: str = ""  # GTSRB root; empty means the synthetic stand-in
    classes: list[int] = field(default_factory=lambda: list(DEFAULT_TSR_CLASSES))
    image_size: list[int] = field(default_factory=lambda: [32, 32])
    test_fraction: float = 0.2
    n_train: int = 2000
    n_test: int = 500
    synthetic_tracks: int = 20
    synthetic_frames: int = 15
    cache_dir: str = ""


@dataclass
class ModelConfig:
    filters: list[int] = field(default_factory=lambda: [16, 32])
    dense: list[int] = field(default_factory=lambda: [64])
    activation: str = "softplus"
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class OracleConfig:
    mode: str = "soft"
    budget: int | None = 20000
    endpoint: str = ""


@dataclass
class QueryConfig:
    kind: str = "blob"
    blob_count_range: list[int] = field(default_factory=lambda: [1, 5])
    blob_size_range: list[float] = field(default_factory=lambda: [0.1, 0.5])
    fraction: float = 0.03
    noise_kinds: list[str] = field(default_factory=lambda: list(NOISE_KINDS))
    noise_params: dict = field(default_factory=dict)
    include_originals: bool = False


@dataclass
class ExtractionConfig:
    budget: int = 20000
    checkpoints: list[int] = field(default_factory=lambda: [1000, 5000, 20000])
    min_steps: int = 600
    topk: int = 5


@dataclass
class EvasionConfig:
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07,
                                                           0.08, 0.1, 0.12, 0.15])
    damage_threshold: float = 0.5
    metric: str = "accuracy"
    iou_threshold: float = 0.5
    topk: int = 5


@dataclass
class RunConfig:
    scenario: str = "tsr"
    seed: int = 0
    out: str = "runs/tsr"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    victim: ModelConfig = field(default_factory=ModelConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    substitute: ModelConfig = field(default_factory=ModelConfig)
    evasion: EvasionConfig = field(default_factory=EvasionConfig)

    # ------------------------------------------------------------------ derived

    @property
    def input_shape(self) -> tuple[int, int, int]:
        if self.scenario == "toy2d":
            return (1, 1, 2)
        h, w = self.dataset.image_size
        return (h, w, 3)

    @property
    def num_classes(self) -> int | None:
        if self.scenario == "pd":
            return None
        return 3 if self.scenario == "toy2d" else len(self.dataset.classes)

    def arch(self, which: str) -> ArchitectureSpec:
        mc: ModelConfig = getattr(self, which)
        if self.scenario == "pd":
            return ArchitectureSpec.localizer(self.input_shape, mc.filters, mc.dense, activation=mc.activation)
        return ArchitectureSpec.classifier(self.input_shape, self.num_classes, mc.filters, mc.dense,
                                           activation=mc.activation)

    def train_config(self, which: str) -> TrainConfig:
        # distinct per role so the substitute never starts from the victim's initial weights
        tc: TrainConfig = getattr(self, which).train
        return TrainConfig(**{**asdict(tc), "seed": self.seed * 1000 + tc.seed + ROLE_SEED[which]})

    def strategy(self) -> QueryStrategy:
        q = self.query
        return QueryStrategy(q.kind, {
            "blob_count_range": tuple(q.blob_count_range),
            "blob_size_range": tuple(q.blob_size_range),
            "fraction": q.fraction,
            "noise_kinds": list(q.noise_kinds),
            "noise_params": dict(q.noise_params),
            "include_originals": q.include_originals,
        }, seed=self.seed * 1000 + 7)

    # --------------------------------------------------------------- (de)serial

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("out", None)
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        d = self.to_dict()
        if d["oracle"]["budget"] is None:
            d["oracle"]["budget"] = -1
        return toml.dumps(d)

    def validate(self) -> "RunConfig":
        try:
            if self.scenario not in SCENARIOS:
                raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
            if self.oracle.mode not in LABEL_MODES:
                raise ConfigError(f"oracle.mode must be one of {LABEL_MODES}")
            if (self.oracle.mode == "box") != (self.scenario == "pd"):
                raise ConfigError(f"oracle.mode {self.oracle.mode!r} does not fit scenario {self.scenario!r}")
            ex = self.extraction
            if ex.checkpoints != sorted(ex.checkpoints) or not ex.checkpoints or ex.checkpoints[-1] != ex.budget:
                raise ConfigError("extraction.checkpoints must be ascending and end at extraction.budget")
            if self.oracle.budget is not None and ex.budget > self.oracle.budget:
                raise ConfigError("extraction.budget exceeds oracle.budget")
            eps = self.evasion.epsilons
            if eps != sorted(eps) or any(not 0.0 <= e <= 1.0 for e in eps):
                raise ConfigError("evasion.epsilons must be sorted and within [0, 1]")
            if self.scenario == "tsr" and not self.dataset.classes:
                raise ConfigError("dataset.classes must not be empty")
            # building these runs every per-module validator
            self.arch("victim")
            self.arch("substitute")
            self.train_config("victim")
            self.train_config("substitute")
            self.strategy()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self


SCENARIO_DEFAULTS: dict[str, dict] = {
    "tsr": {
        "victim": {"train": {"epochs": 20, "batch_size": 64, "learning_rate": 0.02, "momentum": 0.9}},
        "substitute": {"train": {"epochs": 5, "batch_size": 64, "learning_rate": 0.002, "optimizer": "adam"}},
    },
    "pd": {
        "out": "runs/pd",
        "dataset": {"image_size": [64, 64], "n_train": 3000, "n_test": 500},
        "victim": {"filters": [8, 16, 32], "dense": [64], "activation": "relu",
                   "train": {"epochs": 30, "batch_size": 64, "learning_rate": 0.003, "optimizer": "adam"}},
        "substitute": {"filters": [8, 16, 32], "dense": [64], "activation": "relu",
                       "train": {"epochs": 20, "batch_size": 64, "learning_rate": 0.003, "optimizer": "adam"}},
        "oracle": {"mode": "box", "budget": 5000},
        "query": {"kind": "mixed", "blob_count_range": [1, 2]},
        "extraction": {"budget": 5000, "checkpoints": [1000, 5000], "min_steps": 600},
        "evasion": {"metric": "iou", "epsilons": [0.0, 0.01, 0.02, 0.03, 0.05, 0.07, 0.1]},
    },
    "toy2d": {
        "out": "runs/toy2d",
        "dataset": {"n_train": 1000, "n_test": 500},
        "victim": {"filters": [], "dense": [16],
                   "train": {"epochs": 60, "batch_size": 32, "learning_rate": 0.01, "optimizer": "adam"}},
        "substitute": {"filters": [], "dense": [16],
                       "train": {"epochs": 150, "batch_size": 32, "learning_rate": 0.01, "optimizer": "adam"}},
        "oracle": {"budget": 500},
        "query": {"kind": "uniform_noise"},
        "extraction": {"budget": 500, "checkpoints": [100, 250, 500], "min_steps": 0, "topk": 1},
        "evasion": {"epsilons": [0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3], "topk": 1},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, where: str):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k == "train":
            kwargs[k] = TrainConfig(**v)
        elif k in ("dataset", "oracle", "query", "extraction", "evasion"):
            kwargs[k] = _build(_SECTIONS[k], v, k)
        elif k in ("victim", "substitute"):
            kwargs[k] = _build(ModelConfig, v, k)
        else:
            kwargs[k] = v
    return cls(**kwargs)


_SECTIONS = {"dataset": DatasetConfig, "oracle": OracleConfig, "query": QueryConfig,
             "extraction": ExtractionConfig, "evasion": EvasionConfig}


def default_dict(scenario: str) -> dict:
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    base = RunConfig(scenario=scenario).to_dict()
    return _merge(base, SCENARIO_DEFAULTS[scenario])


def config_from_dict(data: dict) -> RunConfig:
    """Resolve a (possibly partial) config mapping against its scenario defaults."""
    scenario = data.get("scenario", "tsr")
    merged = _merge(default_dict(scenario), data)
    if merged["oracle"].get("budget", 0) is not None and merged["oracle"]["budget"] < 0:
        merged["oracle"]["budget"] = None
    try:
        cfg = _build(RunConfig, merged, "top level")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path=None, **overrides) -> RunConfig:
    """Read a TOML run config; ``overrides`` (e.g. seed, out) win over the file."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = toml.load(path)
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data)
