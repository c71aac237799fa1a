"""Open-vocabulary emotion description pipelines and set-overlap scoring."""

from .dataset import (
    DatasetHandle,
    SplitSpec,
    dataset_stats,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .gateway import BackendSpec, DecodeParams, Gateway, PromptTemplate, mock_backend
from .harness import (
    ExperimentConfig,
    ReportRow,
    compare_baselines,
    render_table,
    run_experiment,
)
from .label_space import (
    EmotionLabel,
    GroupedLabelSet,
    GroupMap,
    LexiconGrouper,
    LlmGrouper,
    build_group_map,
    map_to_groups,
    normalize_label,
)
from .metrics import MetricResult, RunAggregate, aggregate_runs, score_corpus, score_pair
from .pipeline import Pipeline, PipelineConfig, SampleRecord, load_manifest, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BackendSpec",
    "DatasetHandle",
    "DecodeParams",
    "EmotionLabel",
    "ExperimentConfig",
    "Gateway",
    "GroupMap",
    "GroupedLabelSet",
    "LexiconGrouper",
    "LlmGrouper",
    "MetricResult",
    "Pipeline",
    "PipelineConfig",
    "PromptTemplate",
    "ReportRow",
    "RunAggregate",
    "SampleRecord",
    "SplitSpec",
    "aggregate_runs",
    "build_group_map",
    "compare_baselines",
    "dataset_stats",
    "load_dataset",
    "load_manifest",
    "map_to_groups",
    "mock_backend",
    "normalize_label",
    "render_table",
    "run_experiment",
    "run_pipeline",
    "save_dataset",
    "score_corpus",
    "score_pair",
    "split_dataset",
]
