"""Run configuration: one YAML file per run, validated before any data is touched."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from qksttn import ttn
from qksttn.data import SOURCES
from qksttn.encoding import EXACT
from qksttn.errors import ConfigError
from qksttn.training import TrainConfig

PIPELINES = ("qks-svm", "qks-ttn", "qks-ttn-fo", "ablate")
TTN_PIPELINES = ("qks-ttn", "qks-ttn-fo", "ablate")
INPUT_DIM = 784


@dataclass
class TaskConfig:
    dataset: str = "mnist"
    labels: tuple = (3, 5)
    fraction: float = 1.0
    deskew: bool | None = None  # None: deskew only multi-class tasks
    train_limit: int | None = None
    test_limit: int | None = None

    def __post_init__(self):
        self.labels = tuple(int(c) for c in self.labels)

    @property
    def multiclass(self) -> bool:
        return len(self.labels) > 2

    @property
    def apply_deskew(self) -> bool:
        return self.multiclass if self.deskew is None else bool(self.deskew)

    def validate(self) -> None:
        if self.dataset not in SOURCES:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {sorted(SOURCES)}")
        if len(self.labels) < 2 or len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"task needs at least two distinct labels, got {list(self.labels)}")
        if any(not 0 <= c <= 9 for c in self.labels):
            raise ConfigError(f"labels must be digits 0..9, got {list(self.labels)}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        for name in ("train_limit", "test_limit"):
            value = getattr(self, name)
            if value is not None and value < len(self.labels):
                raise ConfigError(f"{name}={value} is smaller than the number of classes")


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    pipeline: str = "qks-svm"
    E: int = 100
    chi: int = 2
    tied: bool = False
    r: int | None = None  # nonzeros per episode; None means dense
    sigma: float = 0.1
    shots: int | str = EXACT
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: str = "runs/default"
    realizations: int = 1
    C: float | None = None  # None: randomized search
    c_search: dict = field(default_factory=lambda: {"n_draws": 20, "folds": 5,
                                                   "low": 1e-3, "high": 1e3})
    multiclass: str = "ovo"  # ovo | direct
    grid: dict = field(default_factory=dict)  # e.g. {"sigma": [...], "E": [...]}
    folds: int = 5
    fractions: list = field(default_factory=list)
    workers: int = 1

    def validate(self) -> "RunConfig":
        self.task.validate()
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}; choose from {PIPELINES}")
        if self.E < 1:
            raise ConfigError(f"E must be positive, got {self.E}")
        if self.chi not in (2, 4):
            raise ConfigError(f"chi must be 2 or 4, got {self.chi}")
        if self.r is not None and not 1 <= self.r <= INPUT_DIM:
            raise ConfigError(f"r={self.r} outside [1, {INPUT_DIM}]")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.shots != EXACT and (not isinstance(self.shots, int) or self.shots < 1):
            raise ConfigError(f"shots must be a positive integer or {EXACT!r}, got {self.shots!r}")
        if self.realizations < 1 or self.workers < 1:
            raise ConfigError("realizations and workers must be positive")
        if self.C is not None and self.C <= 0:
            raise ConfigError(f"C must be positive, got {self.C}")
        if self.folds < 2:
            raise ConfigError(f"need at least 2 folds, got {self.folds}")
        if self.multiclass not in ("ovo", "direct"):
            raise ConfigError(f"multiclass must be 'ovo' or 'direct', got {self.multiclass!r}")
        for key in self.grid:
            if key not in ("sigma", "E"):
                raise ConfigError(f"grid axes are 'sigma' and 'E', got {key!r}")
        if self.pipeline == "ablate" and self.task.multiclass:
            raise ConfigError("the ablate pipeline compares binary models only")
        if self.pipeline in TTN_PIPELINES:
            for E in self.grid.get("E", [self.E]):
                ttn.build_topology(E, self.chi)
            if self.task.multiclass and self.multiclass == "direct":
                ttn.direct_readout(self.chi, len(self.task.labels))
            if self.train.optimizer == "cg-sweeps" and self.tied:
                raise ConfigError("cg-sweeps needs an untied model")
        elif self.multiclass == "direct" and self.task.multiclass:
            raise ConfigError("direct multi-class readout needs a tensor-network pipeline")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"]["labels"] = list(self.task.labels)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        _reject_unknown(cls, raw, "run")
        task = dict(raw.pop("task", {}) or {})
        _reject_unknown(TaskConfig, task, "task")
        train = dict(raw.pop("train", {}) or {})
        _reject_unknown(TrainConfig, train, "train")
        if "shots" in raw and isinstance(raw["shots"], str) and raw["shots"].lower() == EXACT:
            raw["shots"] = EXACT
        try:
            return cls(task=TaskConfig(**task), train=TrainConfig(**train), **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "RunConfig":
        raw = self.to_dict()
        for key, value in changes.items():
            if key == "task":
                raw["task"].update(value)
            elif key == "train":
                raw["train"].update(value)
            else:
                raw[key] = value
        return RunConfig.from_dict(raw)


def _reject_unknown(cls, raw: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"unknown {where} keys: {extra}")


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw).validate()


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
