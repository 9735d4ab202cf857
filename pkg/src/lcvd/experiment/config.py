"""Flat experiment configuration mirrored by JSON config files and CLI flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..detectors import DETECTORS, KL_OUTPUT_UNIFORM, DetectorConfig
from ..model import TrainConfig
from ..numerics import InvalidArgument
from ..vicinity import ANY_SAMPLE, VicinityConfig

OOD_SETS = ("ring", "shifted", "uniform")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    # in-distribution benchmark
    num_classes: int = 10
    dim: int = 2
    class_radius: float = 2.0
    sigma: float = 0.35
    n_train_per_class: int = 500
    n_test_per_class: int = 500
    train_csv: str | None = None
    test_csv: str | None = None

    # OOD sets
    ood_sets: list = field(default_factory=lambda: ["ring", "shifted"])
    ring_inner: float = 4.0
    ring_outer: float = 5.0
    n_ring: int = 5000
    shift_offset: list = field(default_factory=lambda: [1.0, 0.0])
    uniform_low: float = -6.0
    uniform_high: float = 6.0
    n_uniform: int = 5000

    # model and pretraining
    hidden: list = field(default_factory=lambda: [64, 64])
    batch_size: int = 128
    lr: float = 0.1
    epochs: int = 40
    milestones: list = field(default_factory=lambda: [20, 30])
    decay: float = 0.1

    # finetuning
    finetune_lr: float | None = None
    finetune_epochs: int = 20
    plateau_tol: float = 1e-4
    plateau_patience: int = 3
    M: int = 10
    companion_policy: str = ANY_SAMPLE
    ood_pool_size: int = 0

    # detectors
    detectors: list = field(default_factory=lambda: list(DETECTORS))
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0014
    energy_temperature: float = 1.0
    ra_percentile: float = 90.0
    maha_ridge: float = 1e-3
    gradnorm_temperature: float = 1.0
    gradnorm_order: float = 1.0
    gradnorm_kl: str = KL_OUTPUT_UNIFORM

    def __post_init__(self):
        unknown = [s for s in self.ood_sets if s not in OOD_SETS]
        if unknown:
            raise ConfigError(f"unknown OOD sets {unknown}; choose from {list(OOD_SETS)}")
        bad = [d for d in self.detectors if d not in DETECTORS]
        if bad:
            raise ConfigError(f"unknown detectors {bad}; choose from {list(DETECTORS)}")
        if self.finetune_lr is not None and not self.finetune_lr > 0:
            raise ConfigError("finetune_lr must be positive")
        try:
            self.train_config()
            self.vicinity_config()
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.lr, self.epochs, tuple(self.milestones), self.decay, self.seed)

    def vicinity_config(self, M: int | None = None) -> VicinityConfig:
        return VicinityConfig(M=self.M if M is None else M, companion_policy=self.companion_policy)

    @property
    def effective_finetune_lr(self) -> float:
        # Defaults to the last rate of the pretraining schedule.
        return self.finetune_lr if self.finetune_lr is not None else self.train_config().final_lr

    def detector_config(self, kind: str) -> DetectorConfig:
        temps = {"odin": self.odin_temperature, "energy": self.energy_temperature,
                 "ra": self.energy_temperature, "gradnorm": self.gradnorm_temperature}
        return DetectorConfig(kind=kind, temperature=temps.get(kind, 1.0), epsilon=self.odin_epsilon,
                              percentile=self.ra_percentile, ridge=self.maha_ridge,
                              gradnorm_order=self.gradnorm_order, gradnorm_kl=self.gradnorm_kl)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def run_id(self, command: str) -> str:
        blob = json.dumps({"command": command, "config": self.to_dict()}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
