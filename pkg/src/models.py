"""
Pydantic models for configuration, protocol messages, model documents and API bodies.

Protocol messages only ever carry sketches, counts, sums, sums of squares, category
counts and gains; no schema here has a field able to hold a raw (x, y) row.
"""
import math
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigError

ImpurityKind = Literal["variance", "gini", "entropy"]
SplitKind = Literal["numeric", "categorical", "client_set"]
ForestMode = Literal["exact_quantiles", "avgimp_topl"]
CandidateRule = Literal["quantile", "midpoint", "histogram"]
QuantileRule = Literal["inverted_cdf", "linear"]
ScenarioKind = Literal[
    "homogeneous",
    "covariate_shift",
    "outcome_shift",
    "full_hetero",
    "disjoint_step",
    "overlap_linear",
]

METHODS = [
    "fedforest_quantiles_x",
    "fedforest_quantiles_xh",
    "fedforest_avgimp_x",
    "fedforest_avgimp_xh",
    "fed_histogram",
    "local_learning",
    "local_ensemble",
    "centralized_x",
    "centralized_xh",
]


def _split_list(value):
    """Comma-separated text (as found in KEY=VALUE files) to a list"""
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


# ─── Task ────────────────────────────────────────────────────────────────────

class TaskKind(BaseModel):
    """Regression, or classification over num_categories labels 0..C-1"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["regression", "classification"] = "regression"
    num_categories: Optional[int] = None

    @model_validator(mode="after")
    def _check_categories(self):
        if self.kind == "classification":
            if self.num_categories is None or self.num_categories < 2:
                raise ValueError("classification needs num_categories >= 2")
        elif self.num_categories is not None:
            raise ValueError("regression takes no num_categories")
        return self

    @classmethod
    def regression(cls) -> "TaskKind":
        return cls(kind="regression")

    @classmethod
    def classification(cls, num_categories: int) -> "TaskKind":
        return cls(kind="classification", num_categories=num_categories)

    @property
    def is_regression(self) -> bool:
        return self.kind == "regression"

    @property
    def width(self) -> int:
        """Number of scalars S in one summary"""
        return 3 if self.is_regression else int(self.num_categories)

    def default_impurity(self) -> str:
        return "variance" if self.is_regression else "gini"

    def check_impurity(self, impurity: str) -> str:
        if self.is_regression and impurity != "variance":
            raise ValueError(f"impurity '{impurity}' is not defined for regression")
        if not self.is_regression and impurity == "variance":
            raise ValueError("variance impurity is not defined for classification")
        return impurity


# ─── Configuration ───────────────────────────────────────────────────────────

class ForestConfig(BaseModel):
    """Everything that shapes a trained forest"""
    model_config = ConfigDict(extra="forbid")

    trees: int = Field(50, ge=1)
    max_depth: int = Field(8, ge=1)
    min_leaf: int = Field(5, ge=1)
    mtry: Optional[Union[int, Literal["sqrt", "third"]]] = None
    sketch_size: int = Field(32, ge=2)
    shortlist_size: int = Field(3, ge=1)
    mode: ForestMode = "exact_quantiles"
    candidate_rule: CandidateRule = "quantile"
    quantile_rule: QuantileRule = "inverted_cdf"
    bin_count: int = Field(16, ge=2)
    include_h: bool = False
    client_subsample_ratio: float = Field(1.0, gt=0.0, le=1.0)
    min_impurity_decrease: float = Field(0.0, ge=0.0)
    seed: int = 0
    task: TaskKind = Field(default_factory=TaskKind.regression)
    impurity: Optional[ImpurityKind] = None
    categorical_features: List[int] = Field(default_factory=list)
    bootstrap: bool = True
    dedup_candidates: bool = True
    n_jobs: int = 1
    serialize_messages: bool = True

    @field_validator("mtry", mode="before")
    @classmethod
    def _parse_mtry(cls, value):
        if isinstance(value, str) and value.strip().isdigit():
            return int(value)
        return value

    @model_validator(mode="after")
    def _check_combination(self):
        if isinstance(self.mtry, int) and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.impurity is not None:
            self.task.check_impurity(self.impurity)
        if self.candidate_rule != "quantile" and self.mode != "exact_quantiles":
            raise ValueError(f"candidate_rule '{self.candidate_rule}' needs mode exact_quantiles")
        if self.candidate_rule == "histogram" and self.include_h:
            raise ValueError("histogram candidates do not support client splits")
        return self

    @property
    def impurity_kind(self) -> str:
        return self.impurity or self.task.default_impurity()

    def resolve_mtry(self, num_features: int) -> int:
        rule = self.mtry
        if rule is None:
            rule = "third" if self.task.is_regression else "sqrt"
        if rule == "sqrt":
            return max(1, min(num_features, math.ceil(math.sqrt(num_features))))
        if rule == "third":
            return max(1, num_features // 3)
        if rule > num_features:
            raise ConfigError(f"mtry={rule} exceeds the {num_features} available features")
        return int(rule)

    def resolve_shortlist(self, num_features: int) -> int:
        return min(self.shortlist_size, num_features)


class ScenarioConfig(BaseModel):
    """Synthetic scenario; unset gamma/alpha/delta take the scenario's published values"""
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioKind = "homogeneous"
    num_clients: int = Field(10, ge=1)
    samples_per_client: List[int] = Field(default_factory=lambda: [200])
    num_features: int = Field(20, ge=1)
    gamma: Optional[float] = Field(None, ge=0.0)
    alpha: List[float] = Field(default_factory=list)
    delta: Optional[float] = None
    sigma: float = Field(1.0, ge=0.0)
    seed: int = 0
    test_fraction: float = Field(0.3, ge=0.0, lt=1.0)
    task: Literal["regression", "classification"] = "regression"
    n_aux: int = Field(10_000, ge=10)
    f_depth: int = Field(8, ge=1)
    f_seed: int = 0

    @field_validator("samples_per_client", "alpha", mode="before")
    @classmethod
    def _split(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_lengths(self):
        if len(self.samples_per_client) not in (1, self.num_clients):
            raise ValueError("samples_per_client must hold 1 or num_clients values")
        if any(n < 1 for n in self.samples_per_client):
            raise ValueError("every client needs at least one sample")
        if len(self.alpha) not in (0, 1, self.num_clients):
            raise ValueError("alpha must hold 0, 1 or num_clients values")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha values must be positive")
        return self

    def client_sizes(self) -> List[int]:
        if len(self.samples_per_client) == 1:
            return self.samples_per_client * self.num_clients
        return list(self.samples_per_client)


class BenchmarkConfig(BaseModel):
    """Sweep axes of one benchmark run; empty gammas/deltas mean the scenario preset"""
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioKind = "homogeneous"
    gammas: List[float] = Field(default_factory=list)
    deltas: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    methods: List[str] = Field(default_factory=lambda: list(METHODS), min_length=1)
    n_jobs: int = 1

    @field_validator("gammas", "deltas", "seeds", "methods", mode="before")
    @classmethod
    def _split(cls, value):
        return _split_list(value)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: List[str]) -> List[str]:
        unknown = [m for m in value if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods: {', '.join(unknown)}")
        return value

    def cells(self):
        """(gamma, delta, seed, method) in a fixed order"""
        for gamma in self.gammas or [None]:
            for delta in self.deltas or [None]:
                for seed in self.seeds:
                    for method in self.methods:
                        yield gamma, delta, seed, method


class RunConfig(BaseModel):
    """Flat key set of a run-config file: forest, scenario, sweep and diagnostics keys"""
    model_config = ConfigDict(extra="forbid")

    # forest
    trees: int = 50
    max_depth: int = 8
    min_leaf: int = 5
    mtry: Optional[str] = None
    sketch_size: int = 32
    shortlist_size: int = 3
    mode: ForestMode = "exact_quantiles"
    candidate_rule: CandidateRule = "quantile"
    quantile_rule: QuantileRule = "inverted_cdf"
    bin_count: int = 16
    include_h: bool = False
    client_subsample_ratio: float = 1.0
    min_impurity_decrease: float = 0.0
    seed: int = 0
    impurity: Optional[ImpurityKind] = None
    categorical_features: List[int] = Field(default_factory=list)
    bootstrap: bool = True
    dedup_candidates: bool = True
    n_jobs: int = 1

    # scenario
    scenario: ScenarioKind = "homogeneous"
    num_clients: int = 10
    samples_per_client: List[int] = Field(default_factory=lambda: [200])
    num_features: int = 20
    gamma: Optional[float] = None
    alpha: List[float] = Field(default_factory=list)
    delta: Optional[float] = None
    sigma: float = 1.0
    data_seed: Optional[int] = None
    test_fraction: float = 0.3
    task: Literal["regression", "classification"] = "regression"
    n_aux: int = 10_000
    f_seed: int = 0

    # benchmark sweep
    gammas: List[float] = Field(default_factory=list)
    deltas: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    benchmark_jobs: int = 1

    # diagnostics
    site_trees: int = 25
    site_depth: int = 4
    validation_fraction: float = 0.3
    diagnostic_repeats: int = 3
    auc_threshold: float = 0.6

    @field_validator(
        "categorical_features", "samples_per_client", "alpha", "gammas", "deltas", "seeds", "methods",
        mode="before",
    )
    @classmethod
    def _split(cls, value):
        return _split_list(value)

    def benchmark_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            scenario=self.scenario,
            gammas=self.gammas,
            deltas=self.deltas,
            seeds=self.seeds,
            methods=self.methods,
            n_jobs=self.benchmark_jobs,
        )

    def forest_config(self, task: Optional[TaskKind] = None, **overrides) -> ForestConfig:
        values = dict(
            trees=self.trees,
            max_depth=self.max_depth,
            min_leaf=self.min_leaf,
            mtry=self.mtry,
            sketch_size=self.sketch_size,
            shortlist_size=self.shortlist_size,
            mode=self.mode,
            candidate_rule=self.candidate_rule,
            quantile_rule=self.quantile_rule,
            bin_count=self.bin_count,
            include_h=self.include_h,
            client_subsample_ratio=self.client_subsample_ratio,
            min_impurity_decrease=self.min_impurity_decrease,
            seed=self.seed,
            impurity=self.impurity,
            categorical_features=self.categorical_features,
            bootstrap=self.bootstrap,
            dedup_candidates=self.dedup_candidates,
            n_jobs=self.n_jobs,
        )
        if task is not None:
            values["task"] = task
        values.update(overrides)
        return ForestConfig(**values)

    def scenario_config(self, **overrides) -> ScenarioConfig:
        values = dict(
            scenario=self.scenario,
            num_clients=self.num_clients,
            samples_per_client=self.samples_per_client,
            num_features=self.num_features,
            gamma=self.gamma,
            alpha=self.alpha,
            delta=self.delta,
            sigma=self.sigma,
            seed=self.seed if self.data_seed is None else self.data_seed,
            test_fraction=self.test_fraction,
            task=self.task,
            n_aux=self.n_aux,
            f_seed=self.f_seed,
        )
        values.update(overrides)
        return ScenarioConfig(**values)


# ─── Protocol messages ───────────────────────────────────────────────────────

class SplitSpec(BaseModel):
    """Wire form of a split candidate"""
    kind: SplitKind
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left_set: List[int] = Field(default_factory=list)

    def scalar_count(self) -> int:
        if self.kind == "numeric":
            return 2
        if self.kind == "categorical":
            return 1 + len(self.left_set)
        return len(self.left_set)


class SplitBroadcast(BaseModel):
    """A decided split, sent so clients can update their node membership"""
    tree_id: int
    path: str
    split: SplitSpec


class NodeTaskSpec(BaseModel):
    tree_id: int
    path: str
    features: List[int] = Field(default_factory=list)


class InitRequest(BaseModel):
    seed: int
    tree_ids: List[int]
    bootstrap: bool = True
    want_ranges: bool = False
    task: TaskKind = Field(default_factory=TaskKind.regression)

    def scalar_count(self) -> int:
        return 1 + len(self.tree_ids)


class InitReply(BaseModel):
    client_id: int
    n_rows: int
    n_features: int
    ranges: List[List[float]] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return 2 + sum(len(r) for r in self.ranges)


class SketchRequest(BaseModel):
    decisions: List[SplitBroadcast] = Field(default_factory=list)
    tasks: List[NodeTaskSpec]
    sketch_size: int
    quantile_rule: QuantileRule = "inverted_cdf"
    categorical_features: List[int] = Field(default_factory=list)
    send_values: bool = False
    include_node_stats: bool = True


class CategorySummary(BaseModel):
    category: int
    stats: List[float]


class FeatureSketch(BaseModel):
    """One feature at one node: a sketch, per-category summaries, or distinct values"""
    feature: int
    breakpoints: List[float] = Field(default_factory=list)
    categories: List[CategorySummary] = Field(default_factory=list)
    values: List[float] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return (
            len(self.breakpoints)
            + sum(1 + len(c.stats) for c in self.categories)
            + len(self.values)
        )


class TaskSketch(BaseModel):
    tree_id: int
    path: str
    node_stats: List[float] = Field(default_factory=list)
    features: List[FeatureSketch] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return len(self.node_stats) + sum(f.scalar_count() for f in self.features)


class SketchReply(BaseModel):
    client_id: int
    tasks: List[TaskSketch] = Field(default_factory=list)


class ShortlistRequest(BaseModel):
    decisions: List[SplitBroadcast] = Field(default_factory=list)
    tasks: List[NodeTaskSpec]
    shortlist_size: int
    impurity: ImpurityKind
    categorical_features: List[int] = Field(default_factory=list)


class ShortlistEntry(BaseModel):
    feature: int
    gain: float


class TaskShortlist(BaseModel):
    tree_id: int
    path: str
    node_stats: List[float]
    entries: List[ShortlistEntry] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return len(self.node_stats) + 2 * len(self.entries)


class ShortlistReply(BaseModel):
    client_id: int
    tasks: List[TaskShortlist] = Field(default_factory=list)


class CandidateBatch(BaseModel):
    """Numeric candidates of one node as parallel feature/threshold arrays"""
    tree_id: int
    path: str
    features: List[int] = Field(default_factory=list)
    thresholds: List[float] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return len(self.features) + len(self.thresholds)


class EvalRequest(BaseModel):
    decisions: List[SplitBroadcast] = Field(default_factory=list)
    batches: List[CandidateBatch]
    reply: Literal["left_stats", "local_gain", "left_count"] = "left_stats"
    include_node_stats: bool = False
    impurity: ImpurityKind = "variance"


class TaskEval(BaseModel):
    tree_id: int
    path: str
    node_stats: List[float] = Field(default_factory=list)
    left_stats: List[List[float]] = Field(default_factory=list)
    local_gains: List[float] = Field(default_factory=list)
    left_counts: List[int] = Field(default_factory=list)

    def scalar_count(self) -> int:
        return (
            len(self.node_stats)
            + sum(len(row) for row in self.left_stats)
            + len(self.local_gains)
            + len(self.left_counts)
        )


class EvalReply(BaseModel):
    client_id: int
    tasks: List[TaskEval] = Field(default_factory=list)


# ─── Ledger / model documents ────────────────────────────────────────────────

class LedgerRow(BaseModel):
    tree_id: int
    path: str
    phase: str
    client_id: int
    scalars_up: int = 0
    scalars_down: int = 0
    features: int = 0
    candidates: int = 0


class LedgerSummary(BaseModel):
    scalars_up: int = 0
    scalars_down: int = 0
    rounds: int = 0
    per_phase: Dict[str, Dict[str, int]] = Field(default_factory=dict)


class NodeDocument(BaseModel):
    path: str
    stats: List[float]
    value: float
    split: Optional[SplitSpec] = None
    gain: Optional[float] = None
    known: List[int] = Field(default_factory=list)
    left: Optional[int] = None
    right: Optional[int] = None


class TreeDocument(BaseModel):
    tree_id: int
    clients: List[int] = Field(default_factory=list)
    nodes: List[NodeDocument]


class ModelDocument(BaseModel):
    """Serialized forest; see docs/model-format.md"""
    format: Literal["fedforest-model"] = "fedforest-model"
    version: Literal[1] = 1
    method: str = "fedforest"
    task: TaskKind
    impurity: ImpurityKind
    n_features: int
    sites: List[int] = Field(default_factory=list)
    site_map: Dict[int, int] = Field(default_factory=dict)
    config: Dict = Field(default_factory=dict)
    ledger: LedgerSummary = Field(default_factory=LedgerSummary)
    trees: List[TreeDocument]


# ─── Diagnostics ─────────────────────────────────────────────────────────────

class DiagnosticsReport(BaseModel):
    covariate_shift_gain: float = Field(..., ge=0.0)
    site_auc: float = Field(..., ge=0.0, le=1.0)
    per_feature_site_gains: List[float] = Field(default_factory=list)
    outcome_shift_delta: float
    outcome_shift_band: float = Field(..., ge=0.0)
    metric_name: str = "r2"
    recommendation: Literal["robust_mode", "fast_mode"]
    scalars_up: int = 0


# ─── API bodies ──────────────────────────────────────────────────────────────

class PredictRequest(BaseModel):
    """Request model for /api/predict"""
    modelId: str
    rows: List[List[float]]
    sites: Optional[List[Optional[int]]] = None
    siteFallback: bool = True


class PredictResponse(BaseModel):
    status: str = "success"
    modelId: str
    predictions: List[float]


class ModelUploadResponse(BaseModel):
    status: str = "success"
    modelId: str
    trees: int


class ModelInfo(BaseModel):
    modelId: str
    method: str
    task: TaskKind
    trees: int
    nFeatures: int
    sites: List[int] = Field(default_factory=list)
    site_map: Dict[int, int] = Field(default_factory=dict)
    ledger: LedgerSummary = Field(default_factory=LedgerSummary)
    loadedAt: float
