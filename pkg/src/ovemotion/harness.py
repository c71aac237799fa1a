"""Scoring experiments and results reporting.

An experiment scores one system's predictions against a labeled dataset
for one language and split, repeated n_runs times (default two) so backend
nondeterminism shows up as a standard deviation instead of hiding. Rows
render into aligned-text, markdown, or CSV tables, and baseline deltas are
computed for regression dashboards.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DatasetHandle, load_dataset, load_split_manifest
from .errors import (
    ConfigError,
    PredictionsMissing,
    SchemaViolation,
    UnknownBaseline,
)
from .gateway import Gateway
from .label_space import (
    EmotionLabel,
    LexiconGrouper,
    LlmGrouper,
    build_group_map,
    map_to_groups,
    normalize_all,
)
from .metrics import RunAggregate, aggregate_runs, score_corpus
from .pipeline import LexiconExtractor, LlmExtractor

METRICS = ("avg", "accuracy_s", "recall_s")

VARIANCE_NOTE = (
    "per-run variation comes only from backend nondeterminism in grouping or "
    "label extraction; with deterministic groupers and extractors all runs "
    "are identical and std is 0"
)


@dataclass
class ExperimentConfig:
    system_name: str
    predictions_path: str
    dataset_path: str = ""
    split: str = "whole"  # whole, train, test
    language: str = "en"
    n_runs: int = 2
    grouper: str = "lexicon"  # "lexicon" or a backend name
    extractor: str = "lexicon"  # "lexicon" or a backend name
    split_manifest: str | None = None

    def digest(self) -> str:
        payload = json.dumps(
            {
                "system_name": self.system_name,
                "predictions_path": str(self.predictions_path),
                "dataset_path": str(self.dataset_path),
                "split": self.split,
                "language": self.language,
                "n_runs": self.n_runs,
                "grouper": self.grouper,
                "extractor": self.extractor,
                "split_manifest": str(self.split_manifest or ""),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ExperimentResult:
    system: str
    language: str
    split: str
    n_runs: int
    aggregates: dict[str, RunAggregate]
    coverage: dict
    run_log: dict


def load_predictions(path: str | Path) -> dict[str, str | list[str]]:
    """Load per-sample predictions.

    JSONL, one object per line: {"sample_id": ..., "output": ...} where
    output is either free text (labels get extracted) or a list of label
    strings (used directly). The shape is auto-detected per record.
    """
    path = Path(path)
    if not path.exists():
        raise PredictionsMissing(f"predictions file not found: {path}")
    predictions: dict[str, str | list[str]] = {}
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(
                    f"line {line_no}: invalid JSON: {exc.msg}", line=line_no
                ) from exc
            if not isinstance(obj, dict) or "sample_id" not in obj or "output" not in obj:
                raise SchemaViolation(
                    f"line {line_no}: prediction needs sample_id and output",
                    line=line_no,
                    field="output",
                )
            output = obj["output"]
            if not isinstance(output, str) and not (
                isinstance(output, list) and all(isinstance(x, str) for x in output)
            ):
                raise SchemaViolation(
                    f"line {line_no}: output must be a string or list of strings",
                    line=line_no,
                    field="output",
                )
            predictions[str(obj["sample_id"])] = output
    return predictions


def _select_split(dataset: DatasetHandle, cfg: ExperimentConfig) -> list:
    if cfg.split == "whole":
        return list(dataset.records)
    if cfg.split not in ("train", "test"):
        raise ConfigError(f"unknown split {cfg.split!r}", key="eval.split")
    if not cfg.split_manifest:
        raise ConfigError(
            f"split {cfg.split!r} requires a split_manifest", key="eval.split_manifest"
        )
    manifest = load_split_manifest(cfg.split_manifest)
    wanted = set(manifest[cfg.split])
    return [r for r in dataset.records if r.sample_id in wanted]


def _resolve_grouper(name: str, language: str, gateway: Gateway | None):
    if name == "lexicon":
        return LexiconGrouper(language)
    if gateway is None:
        raise ConfigError(f"grouper backend {name!r} needs a gateway", key="eval.grouper")
    return LlmGrouper(gateway, name)


def _resolve_extractor(name: str, language: str, gateway: Gateway | None):
    if name == "lexicon":
        return LexiconExtractor(language)
    if gateway is None:
        raise ConfigError(f"extractor backend {name!r} needs a gateway", key="eval.extractor")
    from .prompts import default_templates

    return LlmExtractor(gateway, name, language, default_templates()["extract_labels"])


def run_experiment(
    cfg: ExperimentConfig,
    dataset: DatasetHandle | None = None,
    gateway: Gateway | None = None,
) -> ExperimentResult:
    """Score one system on one language and split, n_runs times.

    Every run extracts predicted labels, builds a group map over the union
    of annotated and predicted vocabulary, freezes it, maps both sides to
    group IDs, and macro-averages the per-sample scores. Samples without a
    prediction are scored as empty predictions so abstaining never helps;
    their count is surfaced in the coverage block.
    """
    if dataset is None:
        if not cfg.dataset_path:
            raise ConfigError("dataset_path is required", key="eval.dataset")
        dataset = load_dataset(cfg.dataset_path, kind="fine")
    records = _select_split(dataset, cfg)
    if not records:
        raise ConfigError(f"split {cfg.split!r} selected no samples", key="eval.split")
    predictions = load_predictions(cfg.predictions_path)
    lang = cfg.language
    annotated_by_id: dict[str, list[EmotionLabel]] = {}
    for record in records:
        labels = record.labels_en if lang == "en" else record.labels_zh
        annotated_by_id[record.sample_id] = normalize_all(
            [l.text for l in labels or []], lang
        )

    missing_ids = sorted(r.sample_id for r in records if r.sample_id not in predictions)
    per_run_scores: dict[str, list[float]] = {metric: [] for metric in METRICS}
    run_entries = []

    for _ in range(cfg.n_runs):
        extractor = _resolve_extractor(cfg.extractor, lang, gateway)
        predicted_by_id: dict[str, list[EmotionLabel]] = {}
        for record in records:
            raw = predictions.get(record.sample_id)
            if raw is None:
                predicted_by_id[record.sample_id] = []
            elif isinstance(raw, list):
                predicted_by_id[record.sample_id] = normalize_all(raw, lang)
            elif raw.strip():
                predicted_by_id[record.sample_id] = extractor.extract(raw)
            else:
                predicted_by_id[record.sample_id] = []

        vocabulary = set()
        for labels in annotated_by_id.values():
            vocabulary.update(labels)
        for labels in predicted_by_id.values():
            vocabulary.update(labels)
        grouper = _resolve_grouper(cfg.grouper, lang, gateway)
        group_map = build_group_map(vocabulary, grouper, language=lang)

        pairs = [
            (
                map_to_groups(annotated_by_id[r.sample_id], group_map, "annotated"),
                map_to_groups(predicted_by_id[r.sample_id], group_map, "predicted"),
            )
            for r in records
        ]
        corpus = score_corpus(pairs)
        per_run_scores["avg"].append(corpus.avg * 100.0)
        per_run_scores["accuracy_s"].append(corpus.accuracy_s * 100.0)
        per_run_scores["recall_s"].append(corpus.recall_s * 100.0)
        run_entries.append(
            {
                "avg": corpus.avg * 100.0,
                "accuracy_s": corpus.accuracy_s * 100.0,
                "recall_s": corpus.recall_s * 100.0,
                "group_map_digest": group_map.digest(),
                "group_count": len(group_map),
                "oov_extensions": list(group_map.extensions),
            }
        )

    aggregates = {metric: aggregate_runs(values) for metric, values in per_run_scores.items()}
    coverage = {
        "total": len(records),
        "scored": len(records) - len(missing_ids),
        "missing_predictions": len(missing_ids),
        "missing_ids": missing_ids,
    }
    run_log = {
        "system": cfg.system_name,
        "language": lang,
        "split": cfg.split,
        "n_runs": cfg.n_runs,
        "config_digest": cfg.digest(),
        "grouper": cfg.grouper,
        "extractor": cfg.extractor,
        "grouping_scope": "union of annotated and predicted vocabulary, per run",
        "runs": run_entries,
        "coverage": coverage,
        "variance_note": VARIANCE_NOTE,
    }
    return ExperimentResult(
        system=cfg.system_name,
        language=lang,
        split=cfg.split,
        n_runs=cfg.n_runs,
        aggregates=aggregates,
        coverage=coverage,
        run_log=run_log,
    )


# -- report rows and rendering -----------------------------------------------


@dataclass
class ReportRow:
    system: str
    language_flag: bool = True
    video_flag: bool = False
    audio_flag: bool = False
    split: str = "whole"
    cells: dict[str, dict[str, RunAggregate]] = field(default_factory=dict)

    def set_cell(self, language: str, metric: str, aggregate: RunAggregate) -> None:
        self.cells.setdefault(language, {})[metric] = aggregate


def row_from_results(
    results: list[ExperimentResult],
    language_flag: bool = True,
    video_flag: bool = False,
    audio_flag: bool = False,
) -> ReportRow:
    """Combine per-language results for one system into one table row."""
    if not results:
        raise ValueError("no results to combine")
    systems = {r.system for r in results}
    if len(systems) != 1:
        raise ValueError(f"results span several systems: {sorted(systems)}")
    row = ReportRow(
        system=results[0].system,
        language_flag=language_flag,
        video_flag=video_flag,
        audio_flag=audio_flag,
        split=results[0].split,
    )
    for result in results:
        for metric, aggregate in result.aggregates.items():
            row.set_cell(result.language, metric, aggregate)
    return row


def _languages(rows: list[ReportRow]) -> list[str]:
    present = {lang for row in rows for lang in row.cells}
    return [lang for lang in ("en", "zh") if lang in present] or sorted(present)


def _flag(value: bool) -> str:
    return "+" if value else "-"


def _cell_text(row: ReportRow, language: str, metric: str) -> str:
    aggregate = row.cells.get(language, {}).get(metric)
    return aggregate.formatted() if aggregate else "-"


def render_table(rows: list[ReportRow], format: str = "text") -> str:
    """Render report rows as a stable, diff-friendly document."""
    if not rows:
        raise ValueError("no rows to render")
    if format == "csv":
        return rows_to_csv(rows)
    languages = _languages(rows)
    header = ["Model", "L", "V", "A"]
    for lang in languages:
        for metric in ("Avg", "Accuracy_s", "Recall_s"):
            header.append(f"{lang}:{metric}")
    table = [header]
    for row in rows:
        line = [row.system, _flag(row.language_flag), _flag(row.video_flag), _flag(row.audio_flag)]
        for lang in languages:
            for metric in METRICS:
                line.append(_cell_text(row, lang, metric))
        table.append(line)

    if format == "markdown":
        out = ["| " + " | ".join(table[0]) + " |"]
        out.append("|" + "|".join(" --- " for _ in table[0]) + "|")
        for line in table[1:]:
            out.append("| " + " | ".join(line) + " |")
        return "\n".join(out) + "\n"
    if format == "text":
        widths = [max(len(line[i]) for line in table) for i in range(len(header))]
        out = []
        for line in table:
            out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip())
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown format {format!r}")


CSV_COLUMNS = ("system", "language", "split", "metric", "mean", "std", "n_runs")


def rows_to_csv(rows: list[ReportRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        for language in sorted(row.cells):
            for metric in METRICS:
                aggregate = row.cells[language].get(metric)
                if aggregate is None:
                    continue
                writer.writerow(
                    [
                        row.system,
                        language,
                        row.split,
                        metric,
                        repr(aggregate.mean),
                        repr(aggregate.std),
                        aggregate.n_runs,
                    ]
                )
    return buffer.getvalue()


def rows_from_csv(text: str) -> list[ReportRow]:
    """Rebuild rows from the CSV export (modality flags are not in CSV)."""
    reader = csv.DictReader(io.StringIO(text))
    by_system: dict[tuple[str, str], ReportRow] = {}
    for entry in reader:
        key = (entry["system"], entry["split"])
        row = by_system.setdefault(key, ReportRow(system=entry["system"], split=entry["split"]))
        mean = float(entry["mean"])
        std = float(entry["std"])
        n_runs = int(entry["n_runs"])
        row.set_cell(
            entry["language"],
            entry["metric"],
            RunAggregate(mean=mean, std=std, n_runs=n_runs, per_run=(mean,)),
        )
    return list(by_system.values())


@dataclass(frozen=True)
class BaselineDelta:
    system: str
    baseline: str
    language: str
    metric: str
    delta: float

    def formatted(self) -> str:
        return f"{self.delta:+.2f}"


def compare_baselines(rows: list[ReportRow], baseline_names: list[str]) -> list[BaselineDelta]:
    """Per-metric score deltas (system minus baseline), signed."""
    by_name = {row.system: row for row in rows}
    for name in baseline_names:
        if name not in by_name:
            raise UnknownBaseline(f"baseline {name!r} not found among rows")
    deltas = []
    for row in rows:
        if row.system in baseline_names:
            continue
        for baseline_name in baseline_names:
            baseline = by_name[baseline_name]
            for language in row.cells:
                if language not in baseline.cells:
                    continue
                for metric in METRICS:
                    mine = row.cells[language].get(metric)
                    theirs = baseline.cells[language].get(metric)
                    if mine is None or theirs is None:
                        continue
                    deltas.append(
                        BaselineDelta(
                            system=row.system,
                            baseline=baseline_name,
                            language=language,
                            metric=metric,
                            delta=mine.mean - theirs.mean,
                        )
                    )
    return deltas
