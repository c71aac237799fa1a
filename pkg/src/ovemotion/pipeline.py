"""Coarse dataset construction: the four automated annotation stages.

Per sample: two-step pre-labeling for audio and for video (clue extraction
followed by subtitle reconciliation), merging the clues into one English
description, an optional disambiguation rewrite, translation into the
other language, and label extraction. There is deliberately no manual
review stage anywhere in the graph; the point of the pipeline is running
unattended at six-figure sample counts, so failures quarantine into a
sidecar report instead of aborting the batch, and every stage result is
committed atomically so an interrupted run resumes without repeating
backend calls.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping
from urllib.parse import quote

from .dataset import DatasetHandle
from .errors import ManifestInvalid, MissingPrerequisite, PipelineAbort
from .gateway import Gateway, PromptTemplate
from .label_space import (
    EmotionLabel,
    builtin_lexicon,
    normalize_label,
    parse_label_reply,
)
from .records import ProvenanceEntry, SampleRecord, iso_ts

LANGUAGE_NAMES = {"en": "English", "zh": "Chinese"}


@dataclass
class PipelineConfig:
    audio_backend: str
    video_backend: str
    merge_backend: str
    disambiguate_backend: str
    translate_backend: str
    parallelism: int = 1
    resume: bool = False
    run_disambiguation: bool = True
    # step 2 of two-step pre-labeling is pure text work, so it defaults to
    # the disambiguation backend; set to "modality" to keep it on the MLLM
    two_step_backend: str = "disambiguate"
    extractor: str = "lexicon"  # "lexicon" or a backend name

    def backend_names(self) -> list[str]:
        names = [
            self.audio_backend,
            self.video_backend,
            self.merge_backend,
            self.disambiguate_backend,
            self.translate_backend,
        ]
        if self.extractor != "lexicon":
            names.append(self.extractor)
        return names

    def validate(self, gateway: Gateway) -> None:
        for name in self.backend_names():
            gateway.backend(name)  # raises UnknownBackend
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.two_step_backend not in ("disambiguate", "modality"):
            raise ValueError("two_step_backend must be 'disambiguate' or 'modality'")


# -- label extraction -------------------------------------------------------


class LexiconExtractor:
    """Returns every lexicon label whose surface form occurs in the text."""

    name = "lexicon"
    prompt_id = "surface-scan"
    version = "builtin-1"

    def __init__(self, language: str, lexicon: list[list[str]] | None = None):
        self.language = language
        entries = lexicon if lexicon is not None else builtin_lexicon(language)
        self.labels = [label for group in entries for label in group]

    def extract(self, description: str) -> list[EmotionLabel]:
        if not description.strip():
            raise ValueError("description is empty")
        haystack = description.lower() if self.language == "en" else description
        found = []
        for label in self.labels:
            if self.language == "en":
                match = re.search(rf"\b{re.escape(label)}\b", haystack)
                pos = match.start() if match else -1
            else:
                pos = haystack.find(label)
            if pos >= 0:
                found.append((pos, label))
        found.sort()
        return [normalize_label(label, self.language) for _, label in found]


class LlmExtractor:
    """Asks a text backend to list the labels a description supports."""

    def __init__(self, gateway: Gateway, backend: str, language: str, template: PromptTemplate):
        self.gateway = gateway
        self.backend = backend
        self.language = language
        self.template = template
        self.name = backend
        self.prompt_id = template.id
        self.version = template.version

    def extract(self, description: str) -> list[EmotionLabel]:
        if not description.strip():
            raise ValueError("description is empty")
        reply = self.gateway.complete(self.backend, self.template, {"description": description})
        return [normalize_label(text, self.language) for text in parse_label_reply(reply)]


def extract_labels(description: str, extractor) -> list[EmotionLabel]:
    """Extract open-vocabulary labels from a free-text description."""
    return extractor.extract(description)


# -- state stores ------------------------------------------------------------


class MemoryState:
    def __init__(self):
        self._records: dict[str, SampleRecord] = {}

    def load(self, sample_id: str) -> SampleRecord | None:
        record = self._records.get(sample_id)
        return copy.deepcopy(record) if record else None

    def save(self, record: SampleRecord) -> None:
        self._records[record.sample_id] = copy.deepcopy(record)


class DirState:
    """One JSON file per sample; writes go through temp-then-rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, sample_id: str) -> Path:
        return self.root / (quote(sample_id, safe="") + ".json")

    def load(self, sample_id: str) -> SampleRecord | None:
        path = self._path(sample_id)
        if not path.exists():
            return None
        return SampleRecord.from_json_obj(json.loads(path.read_text(encoding="utf-8")))

    def save(self, record: SampleRecord) -> None:
        path = self._path(record.sample_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(
            json.dumps(record.to_json_obj(), ensure_ascii=False), encoding="utf-8"
        )
        os.replace(tmp, path)


# -- manifest -----------------------------------------------------------------


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Read sample stubs from CSV or JSONL.

    Columns/keys: sample_id, media_ref, subtitle_zh, subtitle_en (the
    subtitles are optional and default to empty).
    """
    path = Path(path)
    stubs: list[SampleRecord] = []
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            fields = set(reader.fieldnames or ())
            for required in ("sample_id", "media_ref"):
                if required not in fields:
                    raise ManifestInvalid(f"manifest is missing column {required!r}")
            for row in reader:
                stubs.append(_stub_from_obj(row))
    else:
        with path.open(encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestInvalid(f"manifest line {line_no}: invalid JSON") from exc
                if "sample_id" not in obj or "media_ref" not in obj:
                    raise ManifestInvalid(
                        f"manifest line {line_no}: sample_id and media_ref are required"
                    )
                stubs.append(_stub_from_obj(obj))
    _check_unique_ids(stubs)
    return stubs


def _stub_from_obj(obj: Mapping) -> SampleRecord:
    return SampleRecord(
        sample_id=str(obj["sample_id"]),
        media_ref=str(obj["media_ref"]),
        subtitle_zh=str(obj.get("subtitle_zh") or ""),
        subtitle_en=str(obj.get("subtitle_en") or ""),
    )


def _check_unique_ids(stubs: Iterable[SampleRecord]) -> None:
    seen: set[str] = set()
    for stub in stubs:
        if stub.sample_id in seen:
            raise ManifestInvalid(f"duplicate sample_id {stub.sample_id!r} in manifest")
        seen.add(stub.sample_id)


# -- pipeline -----------------------------------------------------------------


@dataclass
class FailureEntry:
    sample_id: str
    stage: str
    error: str
    ts: str

    def to_json_obj(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "stage": self.stage,
            "error": self.error,
            "ts": self.ts,
        }


@dataclass
class PipelineResult:
    dataset: DatasetHandle
    failures: list[FailureEntry]
    out_path: Path | None = None
    failures_path: Path | None = None


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Pipeline:
    """Runs the construction stages against a gateway."""

    STAGES = (
        "prelabel_audio",
        "prelabel_video",
        "merge",
        "disambiguate",
        "translate",
        "extract_labels",
    )

    def __init__(
        self,
        gateway: Gateway,
        cfg: PipelineConfig,
        templates: Mapping[str, PromptTemplate] | None = None,
        clock: Callable[[], float] = time.time,
        lexicons: Mapping[str, list[list[str]]] | None = None,
    ):
        from .prompts import default_templates

        self.gateway = gateway
        self.cfg = cfg
        self.templates = dict(default_templates())
        if templates:
            self.templates.update(templates)
        self.clock = clock
        cfg.validate(gateway)
        self._extractors = {
            lang: self._build_extractor(lang, (lexicons or {}).get(lang))
            for lang in ("en", "zh")
        }

    def _build_extractor(self, language: str, lexicon):
        if self.cfg.extractor == "lexicon":
            return LexiconExtractor(language, lexicon)
        return LlmExtractor(
            self.gateway, self.cfg.extractor, language, self.templates["extract_labels"]
        )

    def _provenance(
        self,
        record: SampleRecord,
        field: str,
        backend: str,
        template: PromptTemplate,
        note: str | None = None,
        pre_digest: str | None = None,
        post_digest: str | None = None,
    ) -> None:
        record.add_provenance(
            ProvenanceEntry(
                field=field,
                backend=backend,
                prompt_id=template.id,
                prompt_version=template.version,
                step=record.next_step(),
                ts=iso_ts(self.clock()),
                note=note,
                pre_digest=pre_digest,
                post_digest=post_digest,
            )
        )

    # -- stages -------------------------------------------------------------

    def prelabel_modality(self, record: SampleRecord, modality: str) -> str:
        """Two-step pre-labeling for one modality.

        Step 1 asks the modality backend for emotion clues from the media;
        step 2 reconciles the clues with the subtitle (empty subtitles are
        bound as empty strings, never an error). The field is only written
        once both calls succeed.
        """
        if modality not in ("audio", "video"):
            raise ValueError(f"unknown modality {modality!r}")
        modality_backend = (
            self.cfg.audio_backend if modality == "audio" else self.cfg.video_backend
        )
        clue_template = self.templates[f"prelabel_{modality}"]
        clues = self.gateway.complete(modality_backend, clue_template, {"media": record.media_ref})

        step2_backend = (
            modality_backend
            if self.cfg.two_step_backend == "modality"
            else self.cfg.disambiguate_backend
        )
        reconcile_template = self.templates["two_step"]
        description = self.gateway.complete(
            step2_backend,
            reconcile_template,
            {"clues": clues, "subtitle": record.subtitle()},
        )

        field = f"{modality}_desc"
        setattr(record, field, description)
        self._provenance(record, field, modality_backend, clue_template, note="step 1: clues")
        self._provenance(
            record, field, step2_backend, reconcile_template, note="step 2: reconcile subtitle"
        )
        return description

    def merge_clues(self, record: SampleRecord) -> str:
        """Fuse audio clues, video clues, and the subtitle into one description."""
        if record.audio_desc is None or record.video_desc is None:
            raise MissingPrerequisite(
                f"{record.sample_id}: merge requires audio_desc and video_desc"
            )
        template = self.templates["merge"]
        merged = self.gateway.complete(
            self.cfg.merge_backend,
            template,
            {
                "audio_desc": record.audio_desc,
                "video_desc": record.video_desc,
                "subtitle": record.subtitle(),
            },
        )
        record.merged_desc_en = merged
        self._provenance(record, "merged_desc_en", self.cfg.merge_backend, template)
        return merged

    def disambiguate(self, record: SampleRecord) -> str:
        """Rewrite the merged description so the subtitle reading is explicit.

        Provenance keeps digests of the text before and after the rewrite;
        a backend that returns its input unchanged is a valid fixed point.
        """
        if record.merged_desc_en is None:
            raise MissingPrerequisite(f"{record.sample_id}: disambiguate requires merged_desc_en")
        template = self.templates["disambiguate"]
        if not self.cfg.run_disambiguation:
            self._provenance(
                record,
                "merged_desc_en",
                "",
                template,
                note="skipped: disambiguation disabled in config",
            )
            return record.merged_desc_en
        before = record.merged_desc_en
        revised = self.gateway.complete(
            self.cfg.disambiguate_backend,
            template,
            {"description": before, "subtitle": record.subtitle()},
        )
        record.merged_desc_en = revised
        self._provenance(
            record,
            "merged_desc_en",
            self.cfg.disambiguate_backend,
            template,
            pre_digest=_digest(before),
            post_digest=_digest(revised),
        )
        return revised

    def translate(self, record: SampleRecord, target: str = "zh") -> str:
        """Translate the merged description into the other language slot."""
        if target not in LANGUAGE_NAMES:
            raise ValueError(f"unknown target language {target!r}")
        source = record.merged_desc_zh if target == "en" else record.merged_desc_en
        if source is None:
            raise MissingPrerequisite(
                f"{record.sample_id}: translate requires the source-language description"
            )
        template = self.templates["translate"]
        translated = self.gateway.complete(
            self.cfg.translate_backend,
            template,
            {"target_language": LANGUAGE_NAMES[target], "text": source},
        )
        field = f"merged_desc_{target}"
        setattr(record, field, translated)
        self._provenance(record, field, self.cfg.translate_backend, template)
        return translated

    def extract_sample_labels(self, record: SampleRecord) -> None:
        """Populate labels_en / labels_zh from the merged descriptions."""
        if record.labels_en is None:
            if record.merged_desc_en is None:
                raise MissingPrerequisite(
                    f"{record.sample_id}: label extraction requires merged_desc_en"
                )
            extractor = self._extractors["en"]
            record.labels_en = extractor.extract(record.merged_desc_en)
            self._extract_provenance(record, "labels_en", extractor)
        if record.labels_zh is None and record.merged_desc_zh is not None:
            extractor = self._extractors["zh"]
            record.labels_zh = extractor.extract(record.merged_desc_zh)
            self._extract_provenance(record, "labels_zh", extractor)

    def _extract_provenance(self, record: SampleRecord, field: str, extractor) -> None:
        record.add_provenance(
            ProvenanceEntry(
                field=field,
                backend=extractor.name,
                prompt_id=extractor.prompt_id,
                prompt_version=extractor.version,
                step=record.next_step(),
                ts=iso_ts(self.clock()),
            )
        )

    # -- orchestration -------------------------------------------------------

    def _disambiguation_done(self, record: SampleRecord) -> bool:
        template = self.templates["disambiguate"]
        return any(p.prompt_id == template.id for p in record.provenance)

    def process_sample(self, stub: SampleRecord, state) -> SampleRecord:
        """Run every pending stage for one sample, committing after each."""
        record = state.load(stub.sample_id) if self.cfg.resume else None
        if record is None:
            record = copy.deepcopy(stub)
        if record.audio_desc is None:
            _attempt("prelabel_audio", lambda: self.prelabel_modality(record, "audio"))
            state.save(record)
        if record.video_desc is None:
            _attempt("prelabel_video", lambda: self.prelabel_modality(record, "video"))
            state.save(record)
        if record.merged_desc_en is None:
            _attempt("merge", lambda: self.merge_clues(record))
            state.save(record)
        if not self._disambiguation_done(record):
            _attempt("disambiguate", lambda: self.disambiguate(record))
            state.save(record)
        if record.merged_desc_zh is None:
            _attempt("translate", lambda: self.translate(record, "zh"))
            state.save(record)
        if record.labels_en is None or (
            record.labels_zh is None and record.merged_desc_zh is not None
        ):
            _attempt("extract_labels", lambda: self.extract_sample_labels(record))
            state.save(record)
        return record

    def run(
        self,
        manifest: list[SampleRecord],
        out_path: str | Path | None = None,
        state_dir: str | Path | None = None,
        dataset_name: str = "coarse",
    ) -> PipelineResult:
        """Process a manifest with bounded parallelism across samples.

        Per-sample failures are collected into the failure report and never
        abort the batch. PipelineAbort (and KeyboardInterrupt) do abort,
        leaving committed state behind for a resume run.
        """
        _check_unique_ids(manifest)
        state = DirState(state_dir) if state_dir is not None else MemoryState()
        completed: dict[str, SampleRecord] = {}
        failures: dict[str, FailureEntry] = {}

        def work(stub: SampleRecord):
            try:
                return stub.sample_id, self.process_sample(stub, state), None
            except _StageFailure as exc:
                cause = exc.original
                failure = FailureEntry(
                    sample_id=stub.sample_id,
                    stage=exc.stage,
                    error=f"{type(cause).__name__}: {cause}",
                    ts=iso_ts(self.clock()),
                )
                return stub.sample_id, None, failure

        if self.cfg.parallelism <= 1:
            for stub in manifest:
                sample_id, record, failure = work(stub)
                if record is not None:
                    completed[sample_id] = record
                else:
                    failures[sample_id] = failure
        else:
            with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
                futures = [pool.submit(work, stub) for stub in manifest]
                try:
                    for future in futures:
                        sample_id, record, failure = future.result()
                        if record is not None:
                            completed[sample_id] = record
                        else:
                            failures[sample_id] = failure
                except (PipelineAbort, KeyboardInterrupt):
                    for future in futures:
                        future.cancel()
                    raise

        ordered_records = [completed[s.sample_id] for s in manifest if s.sample_id in completed]
        ordered_failures = [failures[s.sample_id] for s in manifest if s.sample_id in failures]
        dataset = DatasetHandle(name=dataset_name, records=ordered_records, kind="coarse")

        result = PipelineResult(dataset=dataset, failures=ordered_failures)
        if out_path is not None:
            out_path = Path(out_path)
            _atomic_write_lines(out_path, (r.to_json_line() for r in ordered_records))
            failures_path = failure_report_path(out_path)
            _atomic_write_lines(
                failures_path, (json.dumps(f.to_json_obj(), ensure_ascii=False) for f in ordered_failures)
            )
            result.out_path = out_path
            result.failures_path = failures_path
        return result


class _StageFailure(Exception):
    """Internal: carries which stage a per-sample failure happened in."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"{stage}: {original}")
        self.stage = stage
        self.original = original


def _attempt(stage: str, fn):
    try:
        return fn()
    except (PipelineAbort, KeyboardInterrupt):
        raise
    except Exception as exc:
        raise _StageFailure(stage, exc) from exc


def failure_report_path(out_path: Path) -> Path:
    if out_path.suffix == ".jsonl":
        return out_path.with_name(out_path.stem + ".failures.jsonl")
    return out_path.with_name(out_path.name + ".failures.jsonl")


def _atomic_write_lines(path: Path, lines: Iterable[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as out:
        for line in lines:
            out.write(line)
            out.write("\n")
    os.replace(tmp, path)


def run_pipeline(
    manifest: list[SampleRecord],
    cfg: PipelineConfig,
    gateway: Gateway,
    out_path: str | Path | None = None,
    state_dir: str | Path | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
    clock: Callable[[], float] = time.time,
) -> PipelineResult:
    """One-call entry point used by the CLI."""
    pipeline = Pipeline(gateway, cfg, templates=templates, clock=clock)
    return pipeline.run(manifest, out_path=out_path, state_dir=state_dir)
