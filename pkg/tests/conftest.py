"""Shared fixtures: deterministic mock gateways and dataset builders."""

from __future__ import annotations

import json

import pytest

from ovemotion.gateway import Gateway, mock_backend, prompt_digest
from ovemotion.pipeline import PipelineConfig
from ovemotion.records import SampleRecord

PIPELINE_BACKENDS = ("audio", "video", "merge", "disambiguate", "translate")


def echo_default(name: str):
    """Reply that is a pure function of the rendered prompt."""

    def reply(prompt: str) -> str:
        return f"{name}:{prompt_digest(prompt)[:8]}"

    return reply


def build_pipeline_mocks(gateway: Gateway, overrides: dict | None = None, latency: float = 0.0):
    """Register one deterministic mock per pipeline backend name.

    overrides maps backend name to mock_backend kwargs (script/default).
    Returns the mocks keyed by name so tests can inspect calls and prompts.
    """
    overrides = overrides or {}
    mocks = {}
    for name in PIPELINE_BACKENDS:
        kwargs = {"default": echo_default(name), "latency": latency}
        kwargs.update(overrides.get(name, {}))
        mock = mock_backend(name=name, **kwargs)
        gateway.register_mock(mock)
        mocks[name] = mock
    return mocks


def pipeline_config(**kwargs) -> PipelineConfig:
    defaults = dict(
        audio_backend="audio",
        video_backend="video",
        merge_backend="merge",
        disambiguate_backend="disambiguate",
        translate_backend="translate",
    )
    defaults.update(kwargs)
    return PipelineConfig(**defaults)


def make_stub(i: int, subtitle_en: str = "", subtitle_zh: str = "") -> SampleRecord:
    return SampleRecord(
        sample_id=f"sample_{i:05d}",
        media_ref=f"media/clip_{i:05d}.mp4",
        subtitle_en=subtitle_en,
        subtitle_zh=subtitle_zh,
    )


def make_manifest(n: int) -> list[SampleRecord]:
    return [make_stub(i, subtitle_en=f"line {i}") for i in range(n)]


@pytest.fixture
def mock_gateway():
    """Uncached gateway so mock call counters reflect real stage calls."""
    return Gateway(cache=None, retry_base_delay=0.0, sleep=lambda _: None)


def write_fine_dataset(path, samples: list[tuple[str, list[str], list[str]]]):
    """Write a labeled dataset file: (sample_id, labels_en, labels_zh)."""
    with open(path, "w", encoding="utf-8") as out:
        for sample_id, labels_en, labels_zh in samples:
            record = SampleRecord(
                sample_id=sample_id,
                media_ref=f"media/{sample_id}.mp4",
                labels_en=[_lab(t, "en") for t in labels_en],
                labels_zh=[_lab(t, "zh") for t in labels_zh],
            )
            out.write(record.to_json_line() + "\n")
    return path


def _lab(text, language):
    from ovemotion.label_space import EmotionLabel

    return EmotionLabel(text=text, language=language)


def write_predictions(path, outputs: dict):
    with open(path, "w", encoding="utf-8") as out:
        for sample_id, output in outputs.items():
            out.write(json.dumps({"sample_id": sample_id, "output": output}, ensure_ascii=False))
            out.write("\n")
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" not in nodeid or getattr(report, "when", "") != "call":
                continue
            name = nodeid.split("::")[-1]
            lines.append((name, "PASS" if status == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}")
