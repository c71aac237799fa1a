"""Command-line entry point.

Thin driver over the library modules: every subcommand delegates to one
operation, side effects are files, and runtime failures exit 1 with a
machine-readable JSON error on stderr (usage errors exit 2 via click).
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import dataset as dataset_mod
from . import harness as harness_mod
from .errors import ConfigError, OvemotionError
from .gateway import Gateway, PromptTemplate, backend_spec_from_config, mock_backend, prompt_digest
from .label_space import (
    LexiconGrouper,
    LlmGrouper,
    build_group_map,
    load_lexicon,
    normalize_all,
)
from .pipeline import PipelineConfig, failure_report_path, load_manifest, run_pipeline
from .prompts import default_templates

ENV_PREFIX = "OVEMOTION_"

KNOWN_SECTIONS = ("backends", "pipeline", "eval", "cache", "templates")


def load_config(path: str | Path, environ=None) -> dict:
    """Load a TOML config file and apply environment overrides.

    An environment variable OVEMOTION_<SECTION>__<KEY> overrides the value
    at config[section][key]; values parse as JSON when possible, else as
    plain strings.
    """
    import os

    path = Path(path)
    try:
        config = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", key=str(path)) from exc
    for section in config:
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}", key=section)
    environ = environ if environ is not None else os.environ
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) < 2:
            continue
        node = config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {name} does not address a table", key=name)
        try:
            node[parts[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[parts[-1]] = value
    return config


def _template_overrides(config: dict) -> dict[str, PromptTemplate]:
    overrides = {}
    defaults = default_templates()
    for key, entry in config.get("templates", {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown template role {key!r}", key=f"templates.{key}")
        base = defaults[key]
        overrides[key] = PromptTemplate(
            id=str(entry.get("id", base.id)),
            version=str(entry.get("version", base.version)),
            body=str(entry.get("body", base.body)),
            role=base.role,
        )
    return overrides


def _build_gateway(config: dict, mock_path: str | None, extra_names=()) -> Gateway:
    cache = config.get("cache", {}).get("dir", "memory")
    gateway = Gateway(cache=cache)
    if mock_path:
        script, default_fn = _load_mock_rules(mock_path)
        names = set(config.get("backends", {}))
        names.update(_pipeline_backend_names(config))
        names.update(_eval_backend_names(config))
        names.update(extra_names)
        if not names:
            names = {"mock"}
        for name in sorted(names):
            gateway.register_mock(mock_backend(script=dict(script), default=default_fn, name=name))
        return gateway
    for name, entry in config.get("backends", {}).items():
        gateway.register(backend_spec_from_config(name, entry))
    return gateway


def _pipeline_backend_names(config: dict) -> set[str]:
    section = config.get("pipeline", {})
    names = set()
    for key in (
        "audio_backend",
        "video_backend",
        "merge_backend",
        "disambiguate_backend",
        "translate_backend",
    ):
        if key in section:
            names.add(section[key])
    extractor = section.get("extractor", "lexicon")
    if extractor != "lexicon":
        names.add(extractor)
    return names


def _eval_backend_names(config: dict) -> set[str]:
    section = config.get("eval", {})
    names = set()
    for key in ("grouper", "extractor"):
        value = section.get(key, "lexicon")
        if value != "lexicon":
            names.add(value)
    return names


def _load_mock_rules(path: str):
    """Read a mock fixtures file: scripted replies plus fallback rules."""
    mock_file = Path(path)
    if mock_file.is_dir():
        mock_file = mock_file / "mock.json"
    fixture = json.loads(mock_file.read_text(encoding="utf-8")) if mock_file.exists() else {}
    script = dict(fixture.get("replies", {}))
    rules = list(fixture.get("rules", []))
    default = fixture.get("default", "digest")

    def default_fn(prompt: str) -> str:
        for rule in rules:
            if rule.get("contains", "") in prompt:
                return rule["reply"]
        if default == "digest":
            return "mock:" + prompt_digest(prompt)[:12]
        return default

    return script, default_fn


def capture_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except OvemotionError as exc:
            payload = {"error": type(exc).__name__, "message": str(exc)}
            for attr in ("line", "field", "key", "status"):
                value = getattr(exc, attr, None)
                if value:
                    payload[attr] = value
            click.echo(json.dumps(payload, ensure_ascii=False), err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(
                json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True
            )
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Open-vocabulary emotion dataset construction and scoring."""


# -- pipeline ------------------------------------------------------------


@main.group()
def pipeline():
    """Dataset construction pipeline."""


@pipeline.command("run")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--mock", "mock_path", type=click.Path(), help="Mock fixtures file or directory.")
@click.option("--state-dir", type=click.Path(), help="Stage checkpoint directory.")
@click.option("--resume/--no-resume", default=False)
@click.option("--parallelism", type=int, default=None)
@capture_errors
def pipeline_run(manifest_path, out_path, config_path, mock_path, state_dir, resume, parallelism):
    """Annotate a manifest of clips into a coarse dataset."""
    config = load_config(config_path) if config_path else {}
    section = dict(config.get("pipeline", {}))
    if mock_path and not section:
        section = {
            "audio_backend": "audio",
            "video_backend": "video",
            "merge_backend": "merge",
            "disambiguate_backend": "disambiguate",
            "translate_backend": "translate",
        }
    try:
        cfg = PipelineConfig(
            audio_backend=section["audio_backend"],
            video_backend=section["video_backend"],
            merge_backend=section["merge_backend"],
            disambiguate_backend=section["disambiguate_backend"],
            translate_backend=section["translate_backend"],
            parallelism=parallelism or int(section.get("parallelism", 1)),
            resume=resume or bool(section.get("resume", False)),
            run_disambiguation=bool(section.get("run_disambiguation", True)),
            two_step_backend=str(section.get("two_step_backend", "disambiguate")),
            extractor=str(section.get("extractor", "lexicon")),
        )
    except KeyError as exc:
        raise ConfigError(f"pipeline config missing {exc.args[0]!r}", key=f"pipeline.{exc.args[0]}")
    gateway = _build_gateway(config, mock_path, extra_names=cfg.backend_names())
    manifest = load_manifest(manifest_path)
    state = state_dir or (str(out_path) + ".state")
    # mock runs pin the provenance clock so fixture outputs are byte-stable
    clock = (lambda: 0.0) if mock_path else time.time
    result = run_pipeline(
        manifest,
        cfg,
        gateway,
        out_path=out_path,
        state_dir=state,
        templates=_template_overrides(config),
        clock=clock,
    )
    click.echo(
        json.dumps(
            {
                "completed": len(result.dataset.records),
                "failed": len(result.failures),
                "out": str(result.out_path),
                "failures": str(result.failures_path),
            }
        )
    )


# -- grouping ------------------------------------------------------------


@main.group()
def group():
    """Synonym group maps."""


@group.command("build")
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True))
@click.option("--language", type=click.Choice(["en", "zh"]), default="en")
@click.option("--grouper", "grouper_name", default="lexicon", show_default=True)
@click.option("--lexicon-file", type=click.Path(exists=True), help="Custom synonym table.")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--mock", "mock_path", type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@capture_errors
def group_build(labels_path, language, grouper_name, lexicon_file, config_path, mock_path, out_path):
    """Group a label vocabulary (one label per line) into synonym groups."""
    raw = Path(labels_path).read_text(encoding="utf-8").splitlines()
    vocabulary = set(normalize_all(raw, language))
    if not vocabulary:
        raise ConfigError("label file contains no labels", key=str(labels_path))
    if grouper_name == "lexicon":
        lexicon = load_lexicon(lexicon_file) if lexicon_file else None
        grouper = LexiconGrouper(language, lexicon) if lexicon else LexiconGrouper(language)
    else:
        config = load_config(config_path) if config_path else {}
        gateway = _build_gateway(config, mock_path)
        grouper = LlmGrouper(gateway, grouper_name)
    group_map = build_group_map(vocabulary, grouper, language=language)
    group_map.save(out_path)
    click.echo(json.dumps({"labels": len(vocabulary), "groups": len(group_map), "out": str(out_path)}))


# -- evaluation ----------------------------------------------------------


@main.group("eval")
def eval_group():
    """Scoring experiments."""


@eval_group.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(), default=".")
@click.option("--mock", "mock_path", type=click.Path())
@click.option("--dry-run", is_flag=True, help="Validate config and inputs; no calls, no writes.")
@capture_errors
def eval_run(config_path, out_dir, mock_path, dry_run):
    """Score a system's predictions against a labeled dataset."""
    config = load_config(config_path)
    section = config.get("eval", {})
    for required in ("system_name", "predictions", "dataset"):
        if required not in section:
            raise ConfigError(f"eval config missing {required!r}", key=f"eval.{required}")
    cfg = harness_mod.ExperimentConfig(
        system_name=str(section["system_name"]),
        predictions_path=str(section["predictions"]),
        dataset_path=str(section["dataset"]),
        split=str(section.get("split", "whole")),
        language=str(section.get("language", "en")),
        n_runs=int(section.get("n_runs", 2)),
        grouper=str(section.get("grouper", "lexicon")),
        extractor=str(section.get("extractor", "lexicon")),
        split_manifest=section.get("split_manifest"),
    )
    if cfg.split not in ("whole", "train", "test"):
        raise ConfigError(f"unknown split {cfg.split!r}", key="eval.split")
    if cfg.language not in ("en", "zh"):
        raise ConfigError(f"unknown language {cfg.language!r}", key="eval.language")
    if dry_run:
        for label, path in (("predictions", cfg.predictions_path), ("dataset", cfg.dataset_path)):
            if not Path(path).exists():
                raise ConfigError(f"{label} file not found: {path}", key=f"eval.{label}")
        if cfg.split != "whole" and not cfg.split_manifest:
            raise ConfigError("split requires split_manifest", key="eval.split_manifest")
        click.echo(json.dumps({"dry_run": True, "valid": True, "config_digest": cfg.digest()}))
        return
    needs_gateway = cfg.grouper != "lexicon" or cfg.extractor != "lexicon"
    gateway = _build_gateway(config, mock_path) if (needs_gateway or mock_path) else None
    result = harness_mod.run_experiment(cfg, gateway=gateway)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.system_name}.{cfg.language}.{cfg.split}"
    (out / f"{stem}.runlog.json").write_text(
        json.dumps(result.run_log, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    row = harness_mod.row_from_results([result])
    (out / f"{stem}.scores.csv").write_text(harness_mod.rows_to_csv([row]), encoding="utf-8")
    summary = {metric: agg.formatted() for metric, agg in result.aggregates.items()}
    summary["coverage"] = result.coverage
    click.echo(json.dumps(summary, ensure_ascii=False))


# -- dataset -------------------------------------------------------------


@main.group("dataset")
def dataset_group():
    """Dataset files."""


@dataset_group.command("split")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--train", "train_count", required=True, type=int)
@click.option("--test", "test_count", required=True, type=int)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--kind", type=click.Choice(["fine", "coarse"]), default="coarse")
@click.option("--out-prefix", type=click.Path(), help="Defaults to the input path stem.")
@capture_errors
def dataset_split(in_path, train_count, test_count, seed, kind, out_prefix):
    """Split a dataset into train/test plus a membership manifest."""
    handle = dataset_mod.load_dataset(in_path, kind=kind)
    spec = dataset_mod.SplitSpec(train_count=train_count, test_count=test_count, seed=seed)
    train, test, manifest = dataset_mod.split_dataset(handle, spec)
    prefix = Path(out_prefix) if out_prefix else Path(in_path).with_suffix("")
    train_path = prefix.with_name(prefix.name + ".train.jsonl")
    test_path = prefix.with_name(prefix.name + ".test.jsonl")
    manifest_path = prefix.with_name(prefix.name + ".split.json")
    dataset_mod.save_dataset(train, train_path)
    dataset_mod.save_dataset(test, test_path)
    dataset_mod.save_split_manifest(manifest, manifest_path)
    click.echo(
        json.dumps(
            {
                "train": {"path": str(train_path), "count": len(train)},
                "test": {"path": str(test_path), "count": len(test)},
                "manifest": str(manifest_path),
            }
        )
    )


@dataset_group.command("stats")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--kind", type=click.Choice(["fine", "coarse"]), default="coarse")
@capture_errors
def dataset_stats(in_path, kind):
    """Record count, label histogram, and field population rates."""
    handle = dataset_mod.load_dataset(in_path, kind=kind)
    stats = dataset_mod.dataset_stats(handle)
    click.echo(
        json.dumps(
            {
                "count": stats.count,
                "label_histogram": stats.label_histogram,
                "field_population": stats.field_population,
            },
            ensure_ascii=False,
        )
    )


# -- reports -------------------------------------------------------------


@main.group("report")
def report_group():
    """Result tables."""


@report_group.command("render")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True))
@click.option(
    "--format",
    "format_",
    type=click.Choice(["text", "markdown", "csv"]),
    default="text",
    show_default=True,
)
@click.option("--out", "out_path", type=click.Path(), help="Write here instead of stdout.")
@capture_errors
def report_render(scores_path, format_, out_path):
    """Render a scores CSV as an aligned-text, markdown, or CSV table."""
    rows = harness_mod.rows_from_csv(Path(scores_path).read_text(encoding="utf-8"))
    if not rows:
        raise ConfigError("scores file has no rows", key=str(scores_path))
    rows.sort(key=lambda row: row.system)
    document = harness_mod.render_table(rows, format=format_)
    if out_path:
        Path(out_path).write_text(document, encoding="utf-8")
        click.echo(json.dumps({"out": str(out_path)}))
    else:
        click.echo(document, nl=False)


if __name__ == "__main__":
    main()
