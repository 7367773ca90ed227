"""Pydantic schemas for experiment configuration and run documents."""
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

Method = Literal["finetune", "ewc", "csqn-b", "csqn-s"]
Strategy = Literal["none", "ct", "btree", "mrt"]

CSQN_METHODS = ("csqn-b", "csqn-s")


class DatasetSpec(BaseModel):
    """Which task sequence to generate and how."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["rotated_mnist", "permuted_mnist", "synthetic"] = "synthetic"
    tasks: int = Field(5, ge=1, description="Task count T")
    angle_step: float = Field(10.0, description="Rotation in degrees per task step")
    train_cap: Optional[int] = Field(None, ge=1, description="Per-task training sample cap")
    validation_size: int = Field(5000, ge=1)
    split_seed: int = 0
    permutation_seed: int = 0
    shuffle_tasks: bool = False
    task_order_seed: int = 0
    # synthetic blobs
    dim: int = Field(20, ge=2)
    classes: int = Field(10, ge=2)
    shift: float = 1.0
    separation: float = 5.0
    samples_per_class: int = Field(200, ge=2)
    eval_samples_per_class: int = Field(50, ge=1)
    synthetic_seed: int = 0


class ArchitectureSettings(BaseModel):
    """Hidden layer widths and dropout of the MLP."""
    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [256, 256], min_length=1)
    dropout: float = Field(0.25, ge=0.0, lt=1.0)


class OptimizerSettings(BaseModel):
    """Optimizer kind and hyperparameters."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


class CurvatureSettings(BaseModel):
    """Curvature harvesting knobs shared by every task."""
    model_config = ConfigDict(extra="forbid")

    eps: float = Field(1e-4, gt=0.0, description="Covariance damping")
    kappa: float = Field(1e-12, gt=0.0, description="Pair acceptance threshold")
    h: float = Field(1e-3, gt=0.0, description="Finite-difference step")
    y_mode: Literal["fd-hvp", "grad-diff"] = "fd-hvp"
    batch_size: int = Field(2048, ge=1, description="Fixed curvature/Fisher batch")


class SamplingConfig(CurvatureSettings):
    """Curvature settings plus the requested pair count M."""

    M: int = Field(10, ge=1)


class ExperimentConfig(BaseModel):
    """Complete, validated description of one continual-learning run."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    method: Method = "csqn-s"
    M: int = Field(10, ge=1)
    strategy: Strategy = "none"
    lam: float = Field(1e4, ge=0.0, alias="lambda")
    curvature: CurvatureSettings = Field(default_factory=CurvatureSettings)
    architecture: ArchitectureSettings = Field(default_factory=ArchitectureSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    epochs: int = Field(3, ge=1)
    batch_size: int = Field(64, ge=1)
    eval_batch_size: int = Field(1000, ge=1)
    seed: int = 0
    threads: int = Field(1, ge=1)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_strategy(self) -> "ExperimentConfig":
        if self.strategy != "none" and self.method not in CSQN_METHODS:
            raise ValueError(
                f"strategy '{self.strategy}' requires a CSQN method, got '{self.method}'"
            )
        return self

    @property
    def is_csqn(self) -> bool:
        return self.method in CSQN_METHODS

    @property
    def reduction_columns(self) -> int:
        """Column budget of reduced factors: M for SR1, 2M for BFGS."""
        return self.M if self.method == "csqn-s" else 2 * self.M

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(M=self.M, **self.curvature.model_dump())

    def echo(self) -> Dict[str, Any]:
        """Effective configuration as written to metrics.json."""
        return self.model_dump(by_alias=True, mode="json")


class RunManifest(BaseModel):
    """Provenance record written next to every run's artifacts."""
    config_hash: str
    group_hash: str = Field(..., description="Hash ignoring seed and output paths")
    label: str
    started_at: str
    finished_at: Optional[str] = None
    status: str = "pending"  # pending, processing, completed, failed
    artifacts: Dict[str, str] = Field(default_factory=dict)
    version: str


class MemoryVectors(BaseModel):
    """Stored-vector counts after one task."""
    task: int
    factor_columns: int
    factors: int
    diagonal_vectors: int


class MetricsDocument(BaseModel):
    """Contents of metrics.json."""
    config: Dict[str, Any]
    acc: Optional[float] = None
    bwt: Optional[float] = None
    validation_acc: Optional[float] = None
    tasks_completed: int = 0
    per_task_time_s: List[float] = Field(default_factory=list)
    memory_vectors: List[MemoryVectors] = Field(default_factory=list)
    status: str = "processing"
    error: Optional[str] = None


class SweepPoint(BaseModel):
    """One grid point of a sweep."""
    value: Any
    run_dir: str
    validation_acc: Optional[float] = None
    acc: Optional[float] = None
    bwt: Optional[float] = None
    winner: bool = False


class SweepSummary(BaseModel):
    """Contents of summary.json."""
    key: str
    points: List[SweepPoint]
    winner: Any = None
