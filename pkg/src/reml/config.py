"""Experiment configuration: one YAML file with six sections.

Unknown keys are errors. Validation failures carry the YAML line of the
offending field so the CLI can point at it.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .optim import TrainerConfig
from .storage import StoragePolicy
from .tasks import SyntheticTaskSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TaskSection(_Section):
    kind: Literal["neighbor_regression", "hidden_rotation", "toy_next_token"] = "neighbor_regression"
    corpus_size: int = Field(1000, ge=1)
    dimension: int = Field(16, ge=1)
    k_true: int = Field(5, ge=1)
    noise_std: float = Field(0.05, ge=0)
    seed: int = 0
    n_examples: int = Field(1000, ge=3)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    rotation_angle: float = 1.0
    context_length: int = Field(3, ge=1)
    n_patterns: int = Field(20, ge=1)
    pattern_length: int = Field(6, ge=2)
    pattern_rate: float = Field(0.05, ge=0, lt=1)

    @model_validator(mode="after")
    def _check(self) -> TaskSection:
        if self.k_true > self.corpus_size:
            raise ValueError(f"k_true ({self.k_true}) exceeds corpus_size ({self.corpus_size})")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split must be three positive fractions summing to 1")
        return self

    def spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(**self.model_dump())


class ModelSection(_Section):
    kind: Literal["augmented_linear", "knn_interpolated"] = "augmented_linear"
    model_id: str = "model"
    lam: float = Field(0.5, alias="lambda", ge=0, le=1)
    beta: float = Field(1.0, gt=0)
    memory: bool = False
    feedback: bool = False
    init_scale: float = Field(0.0, ge=0)


class StorageSection(_Section):
    capacity: int | None = Field(None, ge=1)
    eviction: Literal["lru", "lowest_utility"] = "lru"
    ttl: int | None = Field(None, ge=0)
    quota: int | None = Field(None, ge=0)
    quantize: bool = False

    def policy(self) -> StoragePolicy:
        return StoragePolicy(**self.model_dump())


class RetrievalSection(_Section):
    retriever: Literal["dense", "oracle", "random"] = "dense"
    scoring: Literal["inner_product", "cosine"] = "inner_product"
    trainable_projection: bool = True
    k: int = Field(5, ge=1)
    processor: Literal["weighted_mean", "concat_topk", "score_distribution"] = "weighted_mean"
    m: int = Field(1, ge=1)
    append_label: bool = True
    query: Literal["identity", "linear"] = "identity"
    noise_probability: float = Field(0.0, ge=0, le=1)
    adversarial: bool = False
    storage: StorageSection | None = None


class OptimizationSection(_Section):
    regime: Literal["independent", "conditional", "joint"] = "independent"
    learning_rate: float = Field(0.1, ge=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    momentum: float = Field(0.0, ge=0, lt=1)
    conditional_rounds: int = Field(10, ge=1)
    skip_retriever_step: bool = False
    tau_start: float = Field(1.0, gt=0)
    tau_end: float = Field(0.1, gt=0)
    patience: int | None = Field(None, ge=1)
    freeze: list[str] = Field(default_factory=list)

    def trainer(self) -> TrainerConfig:
        d = self.model_dump()
        d["freeze"] = frozenset(d["freeze"])
        return TrainerConfig(**d)


class EvaluationSection(_Section):
    intrinsic_k: int = Field(5, ge=1)
    intrinsic_queries: int = Field(100, ge=1)
    lambda_grid: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _grid(self) -> EvaluationSection:
        bad = [v for v in self.lambda_grid if not 0.0 <= v <= 1.0]
        if bad:
            raise ValueError(f"lambda_grid values must lie in [0, 1], got {bad}")
        return self


class ServiceSection(_Section):
    listen: str = "127.0.0.1:7341"
    index: str | None = None
    log: str | None = None
    dimension: int = Field(16, ge=1)
    scoring: Literal["inner_product", "cosine"] = "cosine"
    personalization_rate: float = Field(0.01, ge=0)
    storage: StorageSection = Field(default_factory=StorageSection)


class ExperimentConfig(_Section):
    task: TaskSection = Field(default_factory=TaskSection)
    model: ModelSection = Field(default_factory=ModelSection)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    optimization: OptimizationSection = Field(default_factory=OptimizationSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    service: ServiceSection = Field(default_factory=ServiceSection)

    @model_validator(mode="after")
    def _compatible(self) -> ExperimentConfig:
        if self.model.kind == "knn_interpolated" and self.task.kind != "toy_next_token":
            raise ValueError("knn_interpolated needs the toy_next_token task")
        if self.optimization.regime != "independent" and self.retrieval.retriever != "dense":
            raise ValueError(f"{self.optimization.regime} training needs the dense retriever")
        if self.optimization.regime != "independent" and not self.retrieval.trainable_projection:
            if self.optimization.regime == "conditional" and not self.optimization.skip_retriever_step:
                raise ValueError("conditional training needs trainable_projection or skip_retriever_step")
        return self

    def with_seed(self, seed: int) -> ExperimentConfig:
        return self.model_copy(
            update={
                "task": self.task.model_copy(update={"seed": seed}),
                "optimization": self.optimization.model_copy(update={"seed": seed}),
            }
        )


class ConfigError(ValueError):
    """Validation failure; ``problems`` is a list of (line, field, message)."""

    def __init__(self, path: str, problems: list[tuple[int | None, str, str]]):
        self.path = path
        self.problems = problems
        super().__init__("\n".join(self.lines()))

    def lines(self) -> list[str]:
        out = []
        for line, fld, msg in self.problems:
            where = f"{self.path}:{line}" if line is not None else self.path
            out.append(f"{where}: {fld or '<root>'}: {msg}")
        return out


def _line_of(node: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """1-based line of the deepest YAML node matching a pydantic location."""
    line = None if node is None else node.start_mark.line + 1
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(part)), None)
            if nxt is None:
                key = next((k for k, _ in node.value if k.value == str(part)), None)
                return key.start_mark.line + 1 if key is not None else line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            break
        line = node.start_mark.line + 1
    return line


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(path, [(None if mark is None else mark.line + 1, "", f"invalid YAML: {exc}")]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, [(1, "", "top level must be a mapping of sections")])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
            problems.append((_line_of(node, loc), ".".join(str(p) for p in loc), err["msg"]))
        raise ConfigError(path, problems) from None


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(str(path), [(None, "", "file not found")])
    return parse_config(p.read_text(encoding="utf-8"), str(path))


def bundled_quickstart() -> Path:
    return Path(__file__).with_name("data") / "quickstart.yaml"
