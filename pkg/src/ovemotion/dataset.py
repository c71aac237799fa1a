"""Dataset storage, validation, splitting, and statistics.

Datasets are JSONL, one record per line in the canonical schema from
records.py. "fine" datasets are fully labeled evaluation data and must
carry labels in both languages; "coarse" datasets come out of the
construction pipeline and may have any subset of fields populated.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import CountMismatch, SchemaViolation
from .records import RECORD_FIELDS, SampleRecord

KINDS = ("fine", "coarse")

_OPTIONAL_TEXT_FIELDS = ("audio_desc", "video_desc", "merged_desc_en", "merged_desc_zh")
_LABEL_FIELDS = ("labels_en", "labels_zh")


@dataclass
class DatasetHandle:
    name: str
    records: list[SampleRecord]
    kind: str = "coarse"

    def __len__(self) -> int:
        return len(self.records)

    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}


def _validate_obj(obj: dict, line_no: int, kind: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"line {line_no}: record is not a JSON object", line=line_no)
    for key in obj:
        if key not in RECORD_FIELDS:
            raise SchemaViolation(
                f"line {line_no}: unknown field {key!r}", line=line_no, field=key
            )
    for key in ("sample_id", "media_ref"):
        value = obj.get(key)
        if not isinstance(value, str) or not value:
            raise SchemaViolation(
                f"line {line_no}: field {key!r} must be a non-empty string",
                line=line_no,
                field=key,
            )
    for key in ("subtitle_zh", "subtitle_en"):
        if key in obj and not isinstance(obj[key], str):
            raise SchemaViolation(
                f"line {line_no}: field {key!r} must be a string", line=line_no, field=key
            )
    for key in _OPTIONAL_TEXT_FIELDS:
        value = obj.get(key)
        if value is not None and not isinstance(value, str):
            raise SchemaViolation(
                f"line {line_no}: field {key!r} must be a string or null",
                line=line_no,
                field=key,
            )
    for key in _LABEL_FIELDS:
        value = obj.get(key)
        if value is None:
            if kind == "fine":
                raise SchemaViolation(
                    f"line {line_no}: field {key!r} is required for fine datasets",
                    line=line_no,
                    field=key,
                )
            continue
        if not isinstance(value, list) or not all(
            isinstance(x, str) and x.strip() for x in value
        ):
            raise SchemaViolation(
                f"line {line_no}: field {key!r} must be a list of non-empty strings",
                line=line_no,
                field=key,
            )
        if kind == "fine" and not value:
            raise SchemaViolation(
                f"line {line_no}: field {key!r} must be non-empty for fine datasets",
                line=line_no,
                field=key,
            )
    provenance = obj.get("provenance", [])
    if not isinstance(provenance, list) or not all(isinstance(p, dict) for p in provenance):
        raise SchemaViolation(
            f"line {line_no}: field 'provenance' must be a list of objects",
            line=line_no,
            field="provenance",
        )


def load_dataset(path: str | Path, kind: str = "coarse", name: str | None = None) -> DatasetHandle:
    """Load and validate a JSONL dataset file."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    records: list[SampleRecord] = []
    seen: set[str] = set()
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
            _validate_obj(obj, line_no, kind)
            sample_id = obj["sample_id"]
            if sample_id in seen:
                raise SchemaViolation(
                    f"line {line_no}: duplicate sample_id {sample_id!r}",
                    line=line_no,
                    field="sample_id",
                )
            seen.add(sample_id)
            records.append(SampleRecord.from_json_obj(obj))
    return DatasetHandle(name=name or path.stem, records=records, kind=kind)


def save_dataset(handle: DatasetHandle, path: str | Path) -> None:
    """Write a dataset as canonical JSONL (byte-stable round trips)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as out:
        for record in handle.records:
            out.write(record.to_json_line())
            out.write("\n")


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    test_count: int
    seed: int = 0


def split_dataset(
    handle: DatasetHandle, spec: SplitSpec
) -> tuple[DatasetHandle, DatasetHandle, dict]:
    """Partition a dataset by seeded shuffle then prefix split.

    Deterministic for a fixed seed. Returns (train, test, manifest); the
    manifest lists member ids per side so the split is reproducible and
    publishable.
    """
    total = len(handle.records)
    if spec.train_count < 0 or spec.test_count < 0:
        raise CountMismatch("split counts must be non-negative")
    if spec.train_count + spec.test_count != total:
        raise CountMismatch(
            f"train {spec.train_count} + test {spec.test_count} != dataset size {total}"
        )
    indices = list(range(total))
    random.Random(spec.seed).shuffle(indices)
    train_idx = sorted(indices[: spec.train_count])
    test_idx = sorted(indices[spec.train_count :])
    train = DatasetHandle(
        name=f"{handle.name}.train",
        records=[handle.records[i] for i in train_idx],
        kind=handle.kind,
    )
    test = DatasetHandle(
        name=f"{handle.name}.test",
        records=[handle.records[i] for i in test_idx],
        kind=handle.kind,
    )
    manifest = {
        "seed": spec.seed,
        "train": train.sample_ids(),
        "test": test.sample_ids(),
    }
    return train, test, manifest


def save_split_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def load_split_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class DatasetStats:
    count: int
    label_histogram: dict[str, int]
    field_population: dict[str, float]


def dataset_stats(handle: DatasetHandle) -> DatasetStats:
    """Count records, tally labels, and report field-population rates."""
    histogram: Counter[str] = Counter()
    populated: Counter[str] = Counter()
    tracked = _OPTIONAL_TEXT_FIELDS + _LABEL_FIELDS
    for record in handle.records:
        for labels in (record.labels_en, record.labels_zh):
            if labels:
                histogram.update(label.text for label in labels)
        for field_name in tracked:
            if getattr(record, field_name) is not None:
                populated[field_name] += 1
    count = len(handle.records)
    rates = {
        field_name: (populated[field_name] / count if count else 0.0)
        for field_name in tracked
    }
    return DatasetStats(count=count, label_histogram=dict(histogram), field_population=rates)
