"""Run orchestration: dataset x techniques x model, with caching and resume.

A run executes one task per (record, technique) pair, plus one untriggered
"plain" completion per record for the standalone hallucination column. Every
transcript and metric bundle is persisted under the output directory:

    manifest.json
    transcripts/<record>/<technique>.json
    metrics/<record>/<technique>.json
    scorecard.json / scorecard.csv / scorecard.md
    aggregates.json
    cache/<first2hex>/<digest>.json

Aggregation always reads the persisted bundles back from disk, so a resumed
run and an uninterrupted run produce byte-identical scorecards.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from bell import __version__, dataset, elicit, metrics, score
from bell.backend import AuthError, Backend, BackendProfile, ScriptRule
from bell.core import (
    BENCHMARK_TECHNIQUES,
    PLAIN_LABEL,
    REPORT_SCALE,
    EvalRecord,
    MetricBundle,
    Scorecard,
    TechniqueKind,
    canonical_dumps,
    mean_of,
    parse_technique,
    pretty_dumps,
    technique_label,
)

log = logging.getLogger(__name__)

STATUS_PENDING = "pending"
STATUS_DONE = "done"
STATUS_PARTIAL = "partial"
STATUS_FAILED = "failed"

RUN_COMPLETE = "complete"
RUN_PARTIAL = "partial"
RUN_FAILED = "failed"

FAILED_RUN_FRACTION = 0.5


class ConfigurationError(Exception):
    """The run configuration is unusable."""


class FatalRunError(Exception):
    """The run had to abort (for example on an authentication failure)."""


class ResumeError(Exception):
    """The manifest does not match the current configuration."""

    def __init__(self, changed_settings: list[str]):
        super().__init__(
            "configuration changed since the manifest was written: "
            + ", ".join(changed_settings)
        )
        self.changed_settings = changed_settings


@dataclass(frozen=True)
class RunConfig:
    dataset_path: str
    out_dir: str
    model: BackendProfile
    judge: BackendProfile
    embedder: BackendProfile
    techniques: tuple[TechniqueKind, ...]
    mode: str = "printed"
    category_rules: tuple[str, ...] = dataset.MATH_CATEGORY_RULES
    category_tag: str = "math"
    sample_k: int | None = None
    seed: int = 0
    workers: int = 4
    include_plain: bool = True
    elicit_config: elicit.ElicitConfig = field(default_factory=elicit.ElicitConfig)
    metric_config: metrics.MetricConfig = field(default_factory=metrics.MetricConfig)
    scripts: Mapping[str, tuple[ScriptRule, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.techniques:
            raise ConfigurationError("technique set must be non-empty")
        if self.mode not in score.MODES:
            raise ConfigurationError(f"unknown aggregation mode {self.mode!r}")
        problems = elicit.validate_plan(self.elicit_config.got_plan)
        if problems:
            raise ConfigurationError("invalid graph plan: " + "; ".join(problems))

    def determinism_snapshot(self) -> dict[str, Any]:
        """Every setting that can change results. Operational limits
        (workers, timeouts, retries, key names) stay out on purpose."""

        def profile_identity(p: BackendProfile) -> dict[str, Any]:
            return {
                "kind": p.kind,
                "base_url": p.base_url,
                "model_id": p.model_id,
                "temperature": p.temperature,
                "embedding_dim": p.embedding_dim,
            }

        return {
            "dataset": {
                "path": self.dataset_path,
                "category_rules": list(self.category_rules),
                "category_tag": self.category_tag,
                "sample_k": self.sample_k,
                "seed": self.seed,
            },
            "profiles": {
                "model": profile_identity(self.model),
                "judge": profile_identity(self.judge),
                "embedder": profile_identity(self.embedder),
            },
            "techniques": [t.value for t in self.techniques],
            "mode": self.mode,
            "include_plain": self.include_plain,
            "elicit": self.elicit_config.to_dict(),
            "metrics": self.metric_config.to_dict(),
            "scripts": {
                name: [[r.contains, r.reply] for r in rules]
                for name, rules in sorted(self.scripts.items())
            },
        }

    def config_hash(self) -> str:
        return hashlib.sha256(
            canonical_dumps(self.determinism_snapshot()).encode("utf-8")
        ).hexdigest()


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from the JSON configuration document."""
    profiles_raw = raw.get("profiles", {})
    profiles: dict[str, BackendProfile] = {}
    for role in ("model", "judge", "embedder"):
        if role not in profiles_raw:
            raise ConfigurationError(f"config is missing the {role!r} profile")
        spec = dict(profiles_raw[role])
        spec.setdefault("name", role)
        try:
            profiles[role] = BackendProfile.from_dict(spec)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"profile {role!r}: {exc}") from exc

    dataset_raw = raw.get("dataset", {})
    if "path" not in dataset_raw:
        raise ConfigurationError("config is missing dataset.path")

    techniques_raw = raw.get("techniques")
    if not techniques_raw:
        raise ConfigurationError("config is missing a non-empty technique list")
    try:
        techniques = tuple(parse_technique(t) for t in techniques_raw)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc

    scripts = {
        name: tuple(
            ScriptRule(rule["contains"], rule["reply"]) for rule in rules
        )
        for name, rules in raw.get("scripts", {}).items()
    }

    try:
        return RunConfig(
            dataset_path=dataset_raw["path"],
            out_dir=raw.get("out_dir", "run"),
            model=profiles["model"],
            judge=profiles["judge"],
            embedder=profiles["embedder"],
            techniques=techniques,
            mode=raw.get("mode", "printed"),
            category_rules=tuple(dataset_raw.get("category_rules", dataset.MATH_CATEGORY_RULES)),
            category_tag=dataset_raw.get("category_tag", "math"),
            sample_k=dataset_raw.get("sample_k"),
            seed=dataset_raw.get("seed", 0),
            workers=raw.get("workers", 4),
            include_plain=raw.get("include_plain", True),
            elicit_config=elicit.ElicitConfig.from_dict(raw.get("elicit", {})),
            metric_config=metrics.MetricConfig.from_dict(raw.get("metrics", {})),
            scripts=scripts,
        )
    except elicit.PlanError as exc:
        raise ConfigurationError(str(exc)) from exc


def _flatten(prefix: str, value: Any, out: dict[str, Any]) -> None:
    if isinstance(value, Mapping):
        for key, sub in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), sub, out)
    else:
        out[prefix] = value


def snapshot_diff(old: Mapping[str, Any], new: Mapping[str, Any]) -> list[str]:
    """Names of determinism-relevant settings that differ (dotted paths)."""
    flat_old: dict[str, Any] = {}
    flat_new: dict[str, Any] = {}
    _flatten("", dict(old), flat_old)
    _flatten("", dict(new), flat_new)
    changed = [k for k in sorted(set(flat_old) | set(flat_new))
               if flat_old.get(k) != flat_new.get(k)]
    return changed


@dataclass
class RunManifest:
    config_hash: str
    settings: dict[str, Any]
    dataset_manifest: dataset.DatasetManifest
    statuses: dict[str, dict[str, str]]
    harness_version: str = __version__
    created_at: str = ""
    updated_at: str = ""
    run_state: str = RUN_PARTIAL
    # per-technique scores under both aggregation modes, filled once the run
    # completes
    score_summary: dict[str, Any] = field(default_factory=dict)

    def count(self, status: str) -> int:
        return sum(1 for per_record in self.statuses.values()
                   for s in per_record.values() if s == status)

    def total_tasks(self) -> int:
        return sum(len(per_record) for per_record in self.statuses.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "settings": self.settings,
            "dataset_manifest": self.dataset_manifest.to_dict(),
            "statuses": self.statuses,
            "harness_version": self.harness_version,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "run_state": self.run_state,
            "score_summary": self.score_summary,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunManifest":
        return cls(
            config_hash=d["config_hash"],
            settings=dict(d["settings"]),
            dataset_manifest=dataset.DatasetManifest.from_dict(d["dataset_manifest"]),
            statuses={rid: dict(labels) for rid, labels in d["statuses"].items()},
            harness_version=d.get("harness_version", ""),
            created_at=d.get("created_at", ""),
            updated_at=d.get("updated_at", ""),
            run_state=d.get("run_state", RUN_PARTIAL),
            score_summary=dict(d.get("score_summary", {})),
        )


@dataclass
class RunResult:
    scorecard: Scorecard | None
    manifest: RunManifest
    out_dir: Path
    n_failed: int
    n_partial: int
    engine_calls: int
    failed_ids: list[str] = field(default_factory=list)


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + f".tmp.{os.getpid()}.{threading.get_ident()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def save_manifest(manifest: RunManifest, out_dir: Path) -> None:
    manifest.updated_at = _now()
    write_atomic(out_dir / "manifest.json", pretty_dumps(manifest.to_dict()))


def load_manifest(out_dir: Path) -> RunManifest:
    import json

    path = out_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _select_records(config: RunConfig) -> tuple[list[EvalRecord], dataset.DatasetManifest, list[dataset.LineViolation]]:
    records, violations = dataset.load(config.dataset_path)
    filtered = dataset.filter_category(records, config.category_rules)
    if config.sample_k is not None:
        selected = dataset.sample(filtered, config.sample_k, config.seed)
    else:
        selected = list(filtered)
    manifest = dataset.DatasetManifest(
        source_path=str(config.dataset_path),
        total_rows=len(records) + len(violations),
        selected_ids=tuple(r.id for r in selected),
        category_filter=config.category_tag,
        sample_seed=config.seed,
    )
    return selected, manifest, violations


def _task_labels(config: RunConfig) -> list[str]:
    labels = [t.value for t in config.techniques]
    if config.include_plain:
        labels.append(PLAIN_LABEL)
    return labels


def _execute_task(
    backend: Backend,
    config: RunConfig,
    record: EvalRecord,
    label: str,
    out_dir: Path,
) -> str:
    if label == PLAIN_LABEL:
        transcript = elicit.run_plain(backend, config.model, record, config.elicit_config)
    else:
        transcript = elicit.run_technique(
            backend, config.model, record, parse_technique(label), config.elicit_config
        )
    profiles = metrics.MetricProfiles(judge=config.judge, embedder=config.embedder)
    bundle = metrics.score_explanation(
        backend, profiles, transcript, record, config.metric_config
    )
    write_atomic(
        out_dir / "transcripts" / record.id / f"{label}.json",
        pretty_dumps(transcript.to_dict()),
    )
    write_atomic(
        out_dir / "metrics" / record.id / f"{label}.json",
        pretty_dumps(bundle.to_dict()),
    )
    return STATUS_PARTIAL if bundle.partial else STATUS_DONE


def _load_bundle(out_dir: Path, record_id: str, label: str) -> MetricBundle | None:
    import json

    path = out_dir / "metrics" / record_id / f"{label}.json"
    try:
        return MetricBundle.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        return None


def aggregate_from_disk(config: RunConfig, manifest: RunManifest) -> tuple[Scorecard, list[score.TechniqueAggregate]]:
    """Rebuild the scorecard from the persisted metric bundles.

    Reading back from disk (rather than trusting in-memory state) keeps
    interrupted-and-resumed runs byte-identical to uninterrupted ones.
    Aggregates are computed under both modes (the quotient form and the
    metric mean); the scorecard carries the configured one.
    """
    out_dir = Path(config.out_dir)
    record_ids = sorted(manifest.statuses.keys())

    aggregates: list[score.TechniqueAggregate] = []
    per_technique: dict[TechniqueKind, float] = {}
    for technique in config.techniques:
        pairs = [(rid, _load_bundle(out_dir, rid, technique.value)) for rid in record_ids]
        for mode in score.MODES:
            aggregate = score.aggregate_technique(technique, pairs, mode)
            aggregates.append(aggregate)
            if mode == config.mode:
                per_technique[technique] = aggregate.overall_score_pct

    if config.include_plain:
        hallucination_bundles = [
            b for rid in record_ids
            if (b := _load_bundle(out_dir, rid, PLAIN_LABEL)) is not None and not b.partial
        ]
    else:
        hallucination_bundles = [
            b for rid in record_ids for technique in config.techniques
            if (b := _load_bundle(out_dir, rid, technique.value)) is not None and not b.partial
        ]
    if not hallucination_bundles:
        raise score.EmptyAggregateError("no complete bundles for the hallucination column")
    hallucination_pct = REPORT_SCALE * mean_of(b.hallucination for b in hallucination_bundles)

    model_score_value: float | None = None
    if all(t in per_technique for t in BENCHMARK_TECHNIQUES):
        model_score_value = score.model_score(per_technique, hallucination_pct)

    scorecard = Scorecard(
        model_id=config.model.model_id,
        per_technique=per_technique,
        hallucination_pct=hallucination_pct,
        model_score=model_score_value,
        n_records=len(record_ids),
    )
    return scorecard, aggregates


def write_scorecard_files(out_dir: Path, scorecard: Scorecard,
                          aggregates: list[score.TechniqueAggregate]) -> None:
    write_atomic(out_dir / "scorecard.json", pretty_dumps(scorecard.to_dict()))
    write_atomic(out_dir / "scorecard.csv", score.scorecard_csv([scorecard]))
    write_atomic(out_dir / "scorecard.md", score.scorecard_markdown([scorecard]))
    write_atomic(
        out_dir / "aggregates.json",
        pretty_dumps([a.to_dict() for a in aggregates]),
    )


def _execute_tasks(
    backend: Backend,
    config: RunConfig,
    records_by_id: Mapping[str, EvalRecord],
    manifest: RunManifest,
    tasks: list[tuple[str, str]],
    out_dir: Path,
) -> None:
    """Run the given (record_id, label) tasks on a bounded worker pool,
    updating manifest statuses in place. Auth failures abort the whole run."""
    if not tasks:
        return
    auth_failure: list[AuthError] = []
    lock = threading.Lock()

    def worker(record_id: str, label: str) -> None:
        try:
            status = _execute_task(backend, config, records_by_id[record_id], label, out_dir)
        except AuthError as exc:
            with lock:
                auth_failure.append(exc)
            raise
        except Exception as exc:  # per-task failures are recorded, not fatal
            log.warning("task (%s, %s) failed: %s", record_id, label, exc)
            status = STATUS_FAILED
        with lock:
            manifest.statuses[record_id][label] = status

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(worker, rid, label) for rid, label in tasks]
        while futures:
            finished, pending = wait(futures, return_when=FIRST_EXCEPTION)
            if auth_failure:
                for future in pending:
                    future.cancel()
                save_manifest(manifest, out_dir)
                raise FatalRunError(f"authentication failure: {auth_failure[0]}") from auth_failure[0]
            futures = list(pending)


def _finalize(config: RunConfig, manifest: RunManifest, out_dir: Path,
              backend: Backend) -> RunResult:
    n_failed = manifest.count(STATUS_FAILED)
    n_partial = manifest.count(STATUS_PARTIAL)
    n_pending = manifest.count(STATUS_PENDING)
    total = manifest.total_tasks()

    if total and n_failed / total > FAILED_RUN_FRACTION:
        manifest.run_state = RUN_FAILED
    elif n_pending:
        manifest.run_state = RUN_PARTIAL
    else:
        manifest.run_state = RUN_COMPLETE

    scorecard = None
    aggregates: list[score.TechniqueAggregate] = []
    if manifest.run_state == RUN_COMPLETE:
        try:
            scorecard, aggregates = aggregate_from_disk(config, manifest)
            write_scorecard_files(out_dir, scorecard, aggregates)
            manifest.score_summary = {
                mode: {
                    a.technique.value: a.overall_score_pct
                    for a in aggregates if a.mode == mode
                }
                for mode in score.MODES
            }
            manifest.score_summary["hallucination_pct"] = scorecard.hallucination_pct
        except score.EmptyAggregateError as exc:
            log.error("cannot aggregate: %s", exc)
            manifest.run_state = RUN_FAILED

    save_manifest(manifest, out_dir)
    failed_ids = sorted(
        {rid for rid, labels in manifest.statuses.items()
         if any(s == STATUS_FAILED for s in labels.values())}
    )
    return RunResult(
        scorecard=scorecard,
        manifest=manifest,
        out_dir=out_dir,
        n_failed=n_failed,
        n_partial=n_partial,
        engine_calls=backend.engine_calls,
        failed_ids=failed_ids,
    )


def run(config: RunConfig, max_tasks: int | None = None) -> RunResult:
    """Execute a full run.

    max_tasks caps how many tasks are scheduled (the rest stay pending);
    it exists so interruption and resumption can be exercised
    deterministically.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    selected, dataset_manifest, violations = _select_records(config)
    for violation in violations:
        log.warning("dataset: %s", violation)

    labels = _task_labels(config)
    statuses = {record.id: {label: STATUS_PENDING for label in labels} for record in selected}
    manifest = RunManifest(
        config_hash=config.config_hash(),
        settings=config.determinism_snapshot(),
        dataset_manifest=dataset_manifest,
        statuses=statuses,
        created_at=_now(),
    )
    save_manifest(manifest, out_dir)

    backend = Backend(cache_dir=out_dir / "cache", scripts=config.scripts)
    records_by_id = {record.id: record for record in selected}
    tasks = [(rid, label) for rid in sorted(records_by_id) for label in labels]
    if max_tasks is not None:
        tasks = tasks[:max_tasks]

    _execute_tasks(backend, config, records_by_id, manifest, tasks, out_dir)
    return _finalize(config, manifest, out_dir, backend)


def resume(config: RunConfig) -> RunResult:
    """Continue a previous run: only pending and failed tasks execute; done
    work is loaded from disk. Refuses to run if any determinism-relevant
    setting changed, naming the offending settings."""
    out_dir = Path(config.out_dir)
    manifest = load_manifest(out_dir)

    current = config.determinism_snapshot()
    if manifest.config_hash != config.config_hash():
        raise ResumeError(snapshot_diff(manifest.settings, current))

    records, _ = dataset.load(config.dataset_path)
    records_by_id = {record.id: record for record in records}
    missing = [rid for rid in manifest.statuses if rid not in records_by_id]
    if missing:
        raise ResumeError([f"dataset no longer contains record {rid}" for rid in missing])

    backend = Backend(cache_dir=out_dir / "cache", scripts=config.scripts)
    tasks = [
        (rid, label)
        for rid in sorted(manifest.statuses)
        for label, status in manifest.statuses[rid].items()
        if status in (STATUS_PENDING, STATUS_FAILED)
    ]
    _execute_tasks(backend, config, records_by_id, manifest, tasks, out_dir)
    return _finalize(config, manifest, out_dir, backend)
