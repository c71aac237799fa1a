"""Label normalization and synonym grouping.

Open-vocabulary systems emit free-form emotion words, so scoring never
compares raw strings. Labels are normalized, then partitioned into synonym
groups, and all set arithmetic happens on group IDs. The partition comes
either from a text-generation backend asked to group the vocabulary, or
from the deterministic synonym lexicon shipped with the package.
"""

from __future__ import annotations

import ast
import json
import re
import threading
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .errors import EmptyLabel, GrouperUnavailable, ParseFailure

LANGUAGES = ("en", "zh")

_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class EmotionLabel:
    """A normalized open-vocabulary emotion label."""

    text: str
    language: str  # "en" or "zh"


def normalize_label(raw: str, language: str) -> EmotionLabel:
    """Normalize a raw label string.

    Applies Unicode NFC, strips surrounding whitespace, collapses internal
    whitespace runs to single spaces, and lowercases English labels.
    Normalization is idempotent.

    Raises EmptyLabel if the input is whitespace-only.
    """
    if language not in LANGUAGES:
        raise ValueError(f"unsupported language {language!r}")
    text = unicodedata.normalize("NFC", raw)
    text = _WS_RE.sub(" ", text).strip()
    if not text:
        raise EmptyLabel(f"label is empty after normalization: {raw!r}")
    if language == "en":
        text = text.lower()
    return EmotionLabel(text=text, language=language)


def normalize_all(raws: Iterable[str], language: str) -> list[EmotionLabel]:
    """Normalize a batch, silently dropping whitespace-only entries."""
    out = []
    for raw in raws:
        try:
            out.append(normalize_label(raw, language))
        except EmptyLabel:
            continue
    return out


@dataclass(frozen=True)
class GroupedLabelSet:
    """The set of group IDs a label list maps to."""

    group_ids: frozenset[int]
    origin: str = "annotated"  # "annotated" or "predicted"

    def __len__(self) -> int:
        return len(self.group_ids)


class GroupMap:
    """Mapping from labels to synonym-group IDs for one language.

    Immutable after build except for the out-of-vocabulary extension path:
    a label never seen at build time is assigned a fresh singleton group.
    Extensions are serialized under a lock and recorded; lookups read an
    index snapshot that is swapped atomically, so scoring threads never
    block each other.
    """

    def __init__(
        self,
        groups: Sequence[Sequence[str]],
        language: str,
        source: str,
        version: str = "1",
    ):
        if language not in LANGUAGES:
            raise ValueError(f"unsupported language {language!r}")
        if source not in ("llm", "lexicon", "merged"):
            raise ValueError(f"unsupported source {source!r}")
        self.language = language
        self.source = source
        self.version = version
        self._groups: list[list[str]] = [list(g) for g in groups]
        self.extensions: list[str] = []
        self._lock = threading.Lock()
        index: dict[str, int] = {}
        for gid, members in enumerate(self._groups):
            if not members:
                raise ValueError(f"group {gid} has no members")
            for text in members:
                if text in index:
                    raise ValueError(f"label {text!r} appears in more than one group")
                index[text] = gid
        self._index = index

    # -- lookups ----------------------------------------------------------

    @property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(self._index)

    @property
    def groups(self) -> list[list[str]]:
        return [list(g) for g in self._groups]

    def __len__(self) -> int:
        return len(self._groups)

    def lookup(self, label: EmotionLabel) -> int | None:
        """Return the group ID for a label, or None if out of vocabulary."""
        return self._index.get(label.text)

    def group_id(self, label: EmotionLabel) -> int:
        """Return the group ID, extending the map for unseen labels.

        Out-of-vocabulary labels become singleton groups so they can never
        spuriously match another label. The extension is recorded.
        """
        gid = self._index.get(label.text)
        if gid is not None:
            return gid
        with self._lock:
            gid = self._index.get(label.text)
            if gid is not None:
                return gid
            gid = len(self._groups)
            self._groups.append([label.text])
            self.extensions.append(label.text)
            new_index = dict(self._index)
            new_index[label.text] = gid
            self._index = new_index
            return gid

    # -- serialization ----------------------------------------------------

    def to_json_obj(self) -> dict:
        return {
            "version": self.version,
            "language": self.language,
            "source": self.source,
            "groups": self.groups,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "GroupMap":
        return cls(
            groups=obj["groups"],
            language=obj.get("language", "en"),
            source=obj.get("source", "merged"),
            version=str(obj.get("version", "1")),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_obj(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "GroupMap":
        return cls.from_json_obj(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        import hashlib

        payload = json.dumps(self.to_json_obj(), ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def map_to_groups(
    labels: Iterable[EmotionLabel],
    group_map: GroupMap,
    origin: str = "annotated",
) -> GroupedLabelSet:
    """Map labels to the set of their group IDs.

    Duplicates collapse; unseen labels extend the map as singletons.
    """
    return GroupedLabelSet(
        group_ids=frozenset(group_map.group_id(label) for label in labels),
        origin=origin,
    )


# -- grouping reply parsing ------------------------------------------------

_GROUP_SPLIT_RE = re.compile(r"[,;、，；]")


def parse_group_reply(reply: str) -> list[list[str]]:
    """Parse a grouping reply into a list of label groups.

    The expected shape is a list of lists. Real replies vary: strict JSON,
    Python-style quoting, bare words inside brackets, surrounding prose or
    code fences. All of those parse; anything without a recognizable
    list-of-lists raises ParseFailure carrying the raw reply.
    """
    candidate = _strip_fences(reply)
    start = candidate.find("[")
    end = candidate.rfind("]")
    if start == -1 or end == -1 or end <= start:
        raise ParseFailure("no bracketed list found in grouping reply", reply)
    candidate = candidate[start : end + 1]

    for loader in (json.loads, ast.literal_eval):
        try:
            parsed = loader(candidate)
        except (ValueError, SyntaxError):
            continue
        groups = _coerce_groups(parsed)
        if groups is None:
            # structurally a list, but members are not label strings
            raise ParseFailure("grouping reply members are not strings", reply)
        return groups

    groups = _parse_loose_brackets(candidate)
    if groups is not None:
        return groups
    raise ParseFailure("grouping reply is not a parseable list of lists", reply)


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n?", "", text)
        text = re.sub(r"\n?```$", "", text)
    return text.strip()


def _coerce_groups(parsed: object) -> list[list[str]] | None:
    if not isinstance(parsed, list) or not parsed:
        return None
    groups: list[list[str]] = []
    for entry in parsed:
        if isinstance(entry, str):
            # flat list: every entry is its own group
            groups.append([entry])
        elif isinstance(entry, (list, tuple)):
            members = [m for m in entry if isinstance(m, str)]
            if len(members) != len(entry):
                return None
            if members:
                groups.append(list(members))
        else:
            return None
    return groups or None


def _parse_loose_brackets(candidate: str) -> list[list[str]] | None:
    """Fallback for unquoted members, e.g. [[happy, joyful], [angry]]."""
    inner = candidate.strip()
    if not (inner.startswith("[") and inner.endswith("]")):
        return None
    inner = inner[1:-1]
    chunks = re.findall(r"\[([^\[\]]*)\]", inner)
    if chunks:
        groups = []
        for chunk in chunks:
            members = [_strip_quotes(m) for m in _GROUP_SPLIT_RE.split(chunk)]
            members = [m for m in members if m]
            if members:
                groups.append(members)
        return groups or None
    # single flat bracket: treat every member as a singleton group
    members = [_strip_quotes(m) for m in _GROUP_SPLIT_RE.split(inner)]
    members = [m for m in members if m]
    return [[m] for m in members] or None


def _strip_quotes(text: str) -> str:
    return text.strip().strip("\"'“”‘’").strip()


def parse_label_reply(reply: str) -> list[str]:
    """Parse an extraction reply into a flat list of label strings.

    Accepts a JSON/Python-style list (nested lists are flattened) or a
    bare comma-separated line. Raises ParseFailure when nothing label-like
    survives, preserving the raw reply.
    """
    candidate = _strip_fences(reply)
    if "[" in candidate and "]" in candidate:
        try:
            groups = parse_group_reply(candidate)
        except ParseFailure:
            groups = None
        if groups is not None:
            flat = [member for group in groups for member in group]
            if flat:
                return flat
    parts = [_strip_quotes(p) for p in _GROUP_SPLIT_RE.split(candidate)]
    parts = [p for p in parts if p]
    if not parts:
        raise ParseFailure("no labels found in extraction reply", reply)
    return parts


# -- groupers --------------------------------------------------------------


class GrouperBackend(Protocol):
    """Anything that can partition a vocabulary into synonym groups."""

    def group(self, labels: Sequence[str]) -> list[list[str]]: ...


def load_lexicon(path: str | Path) -> list[list[str]]:
    """Load a synonym lexicon file.

    UTF-8 text, one group per line, members separated by commas, '#' starts
    a comment.
    """
    groups = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        members = [m.strip() for m in _GROUP_SPLIT_RE.split(line)]
        members = [m for m in members if m]
        if members:
            groups.append(members)
    return groups


def builtin_lexicon(language: str) -> list[list[str]]:
    """The synonym table shipped with the package, per language."""
    if language not in LANGUAGES:
        raise ValueError(f"unsupported language {language!r}")
    ref = resources.files("ovemotion.data") / f"lexicon_{language}.txt"
    with resources.as_file(ref) as path:
        return load_lexicon(path)


@dataclass
class LexiconGrouper:
    """Deterministic grouper backed by a synonym table."""

    language: str = "en"
    lexicon: list[list[str]] = field(default_factory=list)
    version: str = "builtin-1"

    def __post_init__(self):
        if not self.lexicon:
            self.lexicon = builtin_lexicon(self.language)

    def group(self, labels: Sequence[str]) -> list[list[str]]:
        wanted = set(labels)
        groups = []
        for entry in self.lexicon:
            members = [m for m in entry if m in wanted]
            if members:
                groups.append(members)
        return groups


class LlmGrouper:
    """Grouper that asks a text-generation backend to partition the labels.

    The vocabulary is sorted before rendering so the gateway cache key is a
    pure function of (vocabulary, prompt version, model). Decoding must be
    deterministic (temperature 0) for the frozen-map protocol to hold.
    """

    def __init__(self, gateway, backend: str, template=None):
        from .prompts import default_templates

        self.gateway = gateway
        self.backend = backend
        self.template = template or default_templates()["group"]

    @property
    def version(self) -> str:
        return f"{self.template.id}-{self.template.version}@{self.backend}"

    def group(self, labels: Sequence[str]) -> list[list[str]]:
        from .errors import GatewayError

        rendered_labels = json.dumps(sorted(labels), ensure_ascii=False)
        try:
            reply = self.gateway.complete(
                self.backend, self.template, {"labels": rendered_labels}
            )
        except GatewayError as exc:
            raise GrouperUnavailable(f"grouping backend failed: {exc}") from exc
        return parse_group_reply(reply)


def build_group_map(
    vocabulary: Iterable[EmotionLabel],
    grouper: GrouperBackend,
    language: str | None = None,
) -> GroupMap:
    """Build a GroupMap covering every label in the vocabulary.

    Grouper output is taken as the partition, with two repairs: a label
    listed in several groups goes to the first-listed one, and labels the
    grouper omitted (or invented members outside the vocabulary) become
    fresh singleton groups appended in sorted order.
    """
    vocab = {label.text: label for label in vocabulary}
    if not vocab:
        raise ValueError("vocabulary is empty")
    languages = {label.language for label in vocab.values()}
    if language is None:
        if len(languages) != 1:
            raise ValueError("mixed-language vocabulary; pass language explicitly")
        language = next(iter(languages))

    raw_groups = grouper.group(sorted(vocab))
    assigned: set[str] = set()
    groups: list[list[str]] = []
    for entry in raw_groups:
        members = []
        for text in entry:
            if text in vocab and text not in assigned:
                members.append(text)
                assigned.add(text)
        if members:
            groups.append(members)
    for text in sorted(set(vocab) - assigned):
        groups.append([text])

    source = "lexicon" if isinstance(grouper, LexiconGrouper) else "llm"
    version = getattr(grouper, "version", "1")
    return GroupMap(groups=groups, language=language, source=source, version=version)
