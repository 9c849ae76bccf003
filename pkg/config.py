# config.py
from __future__ import annotations
import os
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import (
    InvalidClassCount, InvalidCoefficient, SpecError, UsageError,
    check_alpha, check_temperature, check_unit_interval,
)

# Load .env when present; the environment always wins over the file.
try:
    from dotenv import load_dotenv
    env_path = Path(__file__).resolve().parent / ".env"
    if env_path.exists():
        load_dotenv(dotenv_path=env_path)
    else:
        load_dotenv()  # fallback: load from CWD if present
except ImportError:
    pass

OUTPUT_ROOT_ENV = "LSDISTILL_OUTPUT_ROOT"


def _env(name: str, default: Optional[str] = None) -> Optional[str]:
    val = os.getenv(name, default)
    return val if val else default


class Settings(BaseModel):
    project_root: Path = Path(__file__).resolve().parent
    # The only environment knob: where runs land when no --out is given.
    output_root: Path = Field(default_factory=lambda: Path(_env(OUTPUT_ROOT_ENV, "runs")))

    csv_decimals: int = 6
    log_floor: float = 1e-12
    default_workers: int = 1

    def output_dir_for(self, subcommand: str, override: Optional[str] = None) -> Path:
        """--out wins; otherwise <output_root>/<subcommand>."""
        return Path(override) if override else self.output_root / subcommand


settings = Settings()


# =============================================================================
# Config-file schemas. One JSON file per experiment; see DESIGN.md for an example.
# =============================================================================

class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class TrainConfig(_Frozen):
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    schedule: Literal["step", "linear"] = "step"
    decay_epochs: List[int] = Field(default_factory=lambda: [12, 24])
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecError(f"epochs and batch_size must be positive, got {self.epochs}/{self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidCoefficient(f"learning_rate must be > 0, got {self.learning_rate}")
        check_unit_interval("decay_factor", self.decay_factor)
        if not (0.0 <= self.momentum < 1.0):
            raise InvalidCoefficient(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidCoefficient(f"weight_decay must be >= 0, got {self.weight_decay}")
        if list(self.decay_epochs) != sorted(self.decay_epochs) or any(e < 0 for e in self.decay_epochs):
            raise SpecError(f"decay_epochs must be sorted and non-negative, got {self.decay_epochs}")
        return self


class DistillConfig(_Frozen):
    lam: float = Field(default=0.0, alias="lambda")  # hard-label weight
    temperature: float = 1.0
    rescale_grad_by_T2: bool = False

    @field_validator("lam")
    @classmethod
    def _lam(cls, v: float) -> float:
        return check_unit_interval("lambda", v)

    @field_validator("temperature")
    @classmethod
    def _temperature(cls, v: float) -> float:
        return check_temperature(v)

    @property
    def label(self) -> str:
        return f"lam{self.lam:g}_T{self.temperature:g}"


class ClusterSpec(_Frozen):
    num_classes: int = 10
    dim: int = 32
    sigma: float = 1.0
    similar_pair: Tuple[int, int] = (0, 1)
    near_distance: float = 2.0
    far_distance: float = 8.0
    n_per_class: int = 200
    means: Optional[List[List[float]]] = None  # explicit means skip placement
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ClusterSpec":
        a, b = self.similar_pair
        if self.num_classes < 2:
            raise InvalidClassCount(f"need at least 2 classes, got {self.num_classes}")
        if self.dim < 1 or self.sigma < 0:
            raise SpecError(f"dim must be >= 1 and sigma >= 0, got {self.dim}/{self.sigma}")
        if a == b or not (0 <= a < self.num_classes and 0 <= b < self.num_classes):
            raise SpecError(f"similar_pair must be two distinct classes, got {self.similar_pair}")
        if not (0 < self.near_distance < self.far_distance):
            raise SpecError(
                f"need 0 < near_distance < far_distance, got {self.near_distance}/{self.far_distance}")
        if self.n_per_class < 2:
            raise SpecError(f"n_per_class must be >= 2, got {self.n_per_class}")
        if self.means is not None and (
                len(self.means) != self.num_classes or any(len(m) != self.dim for m in self.means)):
            raise SpecError("explicit means must be num_classes vectors of length dim")
        return self


class LongTailSpec(_Frozen):
    pareto_power: float = 6.0
    max_per_class: int = 160
    min_per_class: int = 8
    balanced: bool = False  # power -> infinity: keep every class at its source size
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "LongTailSpec":
        if not (self.max_per_class >= self.min_per_class >= 1):
            raise SpecError(
                f"need max_per_class >= min_per_class >= 1, got {self.max_per_class}/{self.min_per_class}")
        if not self.pareto_power > 0:
            raise InvalidCoefficient(f"pareto_power must be > 0, got {self.pareto_power}")
        return self


class DataConfig(_Frozen):
    clusters: Optional[ClusterSpec] = None
    file: Optional[str] = None
    long_tail: Optional[LongTailSpec] = None
    curate_classes: Optional[int] = None
    val_fraction: float = 0.2

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.clusters is not None and self.file is not None:
            raise SpecError("data takes either clusters or file, not both")
        if not (0.0 < self.val_fraction < 1.0):
            raise InvalidCoefficient(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        return self

    @property
    def cluster_spec(self) -> Optional[ClusterSpec]:
        if self.file is not None:
            return None
        return self.clusters or ClusterSpec()


Activation = Literal["relu", "tanh", "none", "binary-sign"]


class ArchitectureConfig(_Frozen):
    hidden: List[int] = Field(default_factory=lambda: [128, 128])
    activation: Activation = "relu"
    binary_weights: bool = False  # inner layers only
    clip_bound: float = 1.0

    @model_validator(mode="after")
    def _check(self) -> "ArchitectureConfig":
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise SpecError(f"need at least one positive hidden width, got {self.hidden}")
        if not self.clip_bound > 0:
            raise InvalidCoefficient(f"clip_bound must be > 0, got {self.clip_bound}")
        return self


class TeacherConfig(_Frozen):
    network: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    alphas: List[float] = Field(default_factory=lambda: [0.0, 0.1])

    @field_validator("alphas")
    @classmethod
    def _alphas(cls, v: List[float]) -> List[float]:
        if not v:
            raise SpecError("teacher.alphas must not be empty")
        return [check_alpha(a) for a in v]


class StudentConfig(_Frozen):
    network: ArchitectureConfig = Field(default_factory=lambda: ArchitectureConfig(hidden=[64]))
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=60, decay_epochs=[24, 48]))
    init_from_teacher: bool = False


class AnalysisConfig(_Frozen):
    split: Literal["train", "val"] = "train"
    topk: int = 5
    alg1_ddof: Literal[0, 1] = 1
    similar_pair: Optional[Tuple[int, int]] = None
    reference_class: Optional[int] = None
    ls_tolerance: float = 0.005  # student top-1 may trail by this much and still count as "no worse"


class StudyConfig(_Frozen):
    class_counts: List[int] = Field(default_factory=lambda: [10, 50])
    long_tail: LongTailSpec = Field(default_factory=LongTailSpec)
    alpha: float = 0.1

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v: float) -> float:
        return check_alpha(v)

    @field_validator("class_counts")
    @classmethod
    def _counts(cls, v: List[int]) -> List[int]:
        if any(k < 2 for k in v):
            raise InvalidClassCount(f"class counts must be >= 2, got {v}")
        return v


class ExperimentConfig(_Frozen):
    name: str = "default"
    data: DataConfig = Field(default_factory=DataConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    student: StudentConfig = Field(default_factory=StudentConfig)
    distill: List[DistillConfig] = Field(default_factory=lambda: [DistillConfig()])
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    seeds: List[int] = Field(default_factory=lambda: list(range(10)))
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.seeds:
            raise SpecError("seeds must not be empty")
        if not self.distill:
            raise SpecError("distill must list at least one setting")
        return self

    def resolved(self) -> dict:
        """Canonical JSON-able form; manifests hash it together with the subcommand flags."""
        return self.model_dump(mode="json", by_alias=True)

    def with_seeds(self, seeds: Iterable[int]) -> "ExperimentConfig":
        # revalidated so an empty seed list is rejected like in a config file
        return ExperimentConfig.model_validate({**self.model_dump(), "seeds": list(seeds)})


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    return ExperimentConfig.model_validate_json(p.read_text(encoding="utf-8"))
