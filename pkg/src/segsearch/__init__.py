"""Architecture-search engine for compact segmentation networks.

A recurrent controller trained with PPO samples template-based genotypes;
genotypes compile to dataflow graphs with deterministic channel and
resolution rules; pluggable evaluators score them; analysis tooling digests
the search logs.
"""

from .genotype import (
    AggKind,
    BlockDecision,
    Genotype,
    GenotypeParseError,
    OpKind,
    SpaceConfig,
    Template,
    decision_count,
    deserialize,
    sample_uniform,
    serialize,
    template_universe,
    validate,
)
from .graph import GraphInvariantError, GraphIR, compile, downsample_factor, export_dot
from .cost import CostReport, cost_report, count_flops, count_params, summarize
from .policy import Controller, ControllerConfig, Trajectory
from .rl import Baseline, PpoConfig, SearchRecord, train_controller
from .evaluators import (
    EvaluationFailed,
    EvaluatorUnavailable,
    ExternalConfig,
    ExternalEvaluator,
    MetricError,
    MetricTriple,
    ProtocolError,
    SurrogateConfig,
    SurrogateEvaluator,
    longer_variant,
    reward,
)
from .search import (
    RerankResult,
    SearchSettings,
    SearchSummary,
    rerank_experiment,
    run_random,
    run_search,
)

__version__ = "0.1.0"
