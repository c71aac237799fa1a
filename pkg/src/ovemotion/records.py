"""Sample record schema shared by the pipeline and the dataset store.

One record describes one clip: identifiers, subtitles, the per-modality
clue descriptions, the merged bilingual description, extracted labels, and
a provenance trail naming the backend and prompt that produced every
populated field. Serialization is canonical (fixed key order, all keys
present) so dataset files are byte-stable under load/save round trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .label_space import EmotionLabel

RECORD_FIELDS = (
    "sample_id",
    "media_ref",
    "subtitle_zh",
    "subtitle_en",
    "audio_desc",
    "video_desc",
    "merged_desc_en",
    "merged_desc_zh",
    "labels_en",
    "labels_zh",
    "provenance",
)


@dataclass
class ProvenanceEntry:
    field: str
    backend: str
    prompt_id: str
    prompt_version: str
    step: int
    ts: str
    note: str | None = None
    pre_digest: str | None = None
    post_digest: str | None = None

    def to_json_obj(self) -> dict:
        obj = {
            "field": self.field,
            "backend": self.backend,
            "prompt_id": self.prompt_id,
            "prompt_version": self.prompt_version,
            "step": self.step,
            "ts": self.ts,
        }
        if self.note is not None:
            obj["note"] = self.note
        if self.pre_digest is not None:
            obj["pre_digest"] = self.pre_digest
        if self.post_digest is not None:
            obj["post_digest"] = self.post_digest
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ProvenanceEntry":
        return cls(
            field=obj["field"],
            backend=obj["backend"],
            prompt_id=obj["prompt_id"],
            prompt_version=obj["prompt_version"],
            step=int(obj["step"]),
            ts=obj["ts"],
            note=obj.get("note"),
            pre_digest=obj.get("pre_digest"),
            post_digest=obj.get("post_digest"),
        )


def iso_ts(epoch_seconds: float) -> str:
    return datetime.fromtimestamp(epoch_seconds, tz=timezone.utc).isoformat()


@dataclass
class SampleRecord:
    sample_id: str
    media_ref: str
    subtitle_zh: str = ""
    subtitle_en: str = ""
    audio_desc: str | None = None
    video_desc: str | None = None
    merged_desc_en: str | None = None
    merged_desc_zh: str | None = None
    labels_en: list[EmotionLabel] | None = None
    labels_zh: list[EmotionLabel] | None = None
    provenance: list[ProvenanceEntry] = field(default_factory=list)

    def subtitle(self) -> str:
        """The subtitle to bind into prompts; English preferred when present."""
        return self.subtitle_en or self.subtitle_zh or ""

    def add_provenance(self, entry: ProvenanceEntry) -> None:
        self.provenance.append(entry)

    def next_step(self) -> int:
        return max((p.step for p in self.provenance), default=0) + 1

    def to_json_obj(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "media_ref": self.media_ref,
            "subtitle_zh": self.subtitle_zh,
            "subtitle_en": self.subtitle_en,
            "audio_desc": self.audio_desc,
            "video_desc": self.video_desc,
            "merged_desc_en": self.merged_desc_en,
            "merged_desc_zh": self.merged_desc_zh,
            "labels_en": None if self.labels_en is None else [l.text for l in self.labels_en],
            "labels_zh": None if self.labels_zh is None else [l.text for l in self.labels_zh],
            "provenance": [p.to_json_obj() for p in self.provenance],
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_obj(), ensure_ascii=False)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SampleRecord":
        labels_en = obj.get("labels_en")
        labels_zh = obj.get("labels_zh")
        return cls(
            sample_id=obj["sample_id"],
            media_ref=obj["media_ref"],
            subtitle_zh=obj.get("subtitle_zh", ""),
            subtitle_en=obj.get("subtitle_en", ""),
            audio_desc=obj.get("audio_desc"),
            video_desc=obj.get("video_desc"),
            merged_desc_en=obj.get("merged_desc_en"),
            merged_desc_zh=obj.get("merged_desc_zh"),
            labels_en=None
            if labels_en is None
            else [EmotionLabel(text, "en") for text in labels_en],
            labels_zh=None
            if labels_zh is None
            else [EmotionLabel(text, "zh") for text in labels_zh],
            provenance=[ProvenanceEntry.from_json_obj(p) for p in obj.get("provenance", [])],
        )

    @classmethod
    def from_json_line(cls, line: str) -> "SampleRecord":
        return cls.from_json_obj(json.loads(line))
