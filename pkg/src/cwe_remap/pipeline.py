"""
Pipeline commands: load the inputs, run one stage, write artifacts and a manifest.

Each command writes into ``<out>/<command>/`` and finishes with a
``manifest.json`` that records the config digest and the SHA-256 of every
input and output file. An exclusive lock file guards the output directory
while a command runs.
"""

import hashlib
import io
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterator, Sequence

import requests

from lib.fetcher import EXPLOITDB_URL, KEV_URL, NvdClient, fetch_cached

from .candidates import CandidateStrategy, tailored_strategy_table
from .config import RunConfig, nvd_api_key
from .embed import EmbeddingModel, load_model, save_model, train
from .errors import ConfigError, FetchError, OutputLockedError
from .evaluate import (
    MatchOutcome,
    RankReport,
    classify_cases,
    compare_fixed_graphs,
    coverage_report,
    exploit_analysis,
    outcome_metrics,
    outcomes_by_status,
    split_closed_world,
)
from .kg import EntityId, KnowledgeGraph, MappingStatus, RelationKind, Triple
from .logs import get_logger
from .longitudinal import (
    distance_distribution_variants,
    events_between,
    invalid_mapping_counts,
    mapping_status_breakdown,
    remap_pair_frequencies,
    top_added_removed,
    yearly_snapshots,
)
from .parsers import (
    ChangeEvent,
    CveRecord,
    CweCatalog,
    ExploitEvent,
    dump_cve_feed,
    parse_change_history,
    parse_cve_feed,
    parse_cwe_catalog,
    parse_exploits,
    parse_view_csv,
)
from .remap import RemapCase, apply_fixes, determine_invalid, fix_v2w, remap_history
from .reports import (
    coverage_rows,
    distance_rows,
    exploit_rows,
    histogram_rows,
    metrics_rows,
    pair_rows,
    status_rows,
    write_csv,
    write_json,
    write_predictions,
)
from .snapshot import Snapshot, build_snapshot, build_test_set, save_snapshot

logger = get_logger(__name__)

ARTIFACT_FORMAT = 1
LOCK_NAME = ".lock"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """Hold ``<directory>/.lock`` for the duration of the block.

    Raises:
        OutputLockedError: Another process holds the lock.
    """
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(f"{directory} is locked by another run ({lock})", path=str(lock)) from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(
    directory: Path,
    command: str,
    config: RunConfig,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    parameters: dict | None = None,
) -> Path:
    """Write ``manifest.json`` linking the outputs to the inputs and config."""
    manifest = {
        "command": command,
        "format": ARTIFACT_FORMAT,
        "config_digest": config.digest(),
        "parameters": parameters or {},
        "inputs": {str(p): sha256_file(p) for p in sorted(set(inputs))},
        "outputs": {p.relative_to(directory).as_posix(): sha256_file(p) for p in sorted(set(outputs))},
    }
    return write_json(directory / "manifest.json", manifest)


# -- inputs ----------------------------------------------------------------------


def read_input(path: Path) -> bytes:
    """File bytes; a zip archive yields its single (or first) member."""
    data = Path(path).read_bytes()
    if zipfile.is_zipfile(io.BytesIO(data)):
        with zipfile.ZipFile(io.BytesIO(data)) as archive:
            names = sorted(archive.namelist())
            if not names:
                raise ConfigError(f"{path} is an empty archive", path=str(path))
            return archive.read(names[0])
    return data


@dataclass
class Inputs:
    feed: list[CveRecord] = field(default_factory=list)
    history: list[ChangeEvent] = field(default_factory=list)
    catalog: CweCatalog = field(default_factory=CweCatalog)
    top25: list[EntityId] = field(default_factory=list)
    exploits: list[ExploitEvent] = field(default_factory=list)
    paths: list[Path] = field(default_factory=list)


def load_inputs(config: RunConfig) -> Inputs:
    """Parse every configured input file.

    Raises:
        ConfigError: A configured file is missing, or no feed/catalog is set.
    """
    config.check_files()
    data = config.data
    if not data.feed or data.catalog is None:
        raise ConfigError("data.feed and data.catalog are required")
    inputs = Inputs(paths=data.inputs())
    for path in data.feed:
        inputs.feed.extend(parse_cve_feed(read_input(path)))
    for path in data.history:
        inputs.history.extend(parse_change_history(read_input(path)))
    inputs.history.sort(key=lambda e: (e.timestamp, e.cve.sort_key, e.change_id))
    view = parse_view_csv(read_input(data.view_1003)) if data.view_1003 else None
    inputs.catalog = parse_cwe_catalog(read_input(data.catalog), view_1003=view)
    if data.top25:
        inputs.top25 = parse_view_csv(read_input(data.top25))
    if data.kev or data.exploitdb:
        inputs.exploits = parse_exploits(
            read_input(data.kev) if data.kev else None,
            read_input(data.exploitdb) if data.exploitdb else None,
        )
    logger.info(
        "loaded %d CVEs, %d change events, %d catalog nodes, %d exploit events",
        len(inputs.feed),
        len(inputs.history),
        len(inputs.catalog.nodes),
        len(inputs.exploits),
    )
    return inputs


def snapshot_at(config: RunConfig, inputs: Inputs, as_of: date) -> Snapshot:
    return build_snapshot(
        inputs.feed,
        inputs.history,
        inputs.catalog,
        as_of,
        config.dates.feed_state,
        config.dates.history_until,
    )


def _command_dir(config: RunConfig, name: str) -> Path:
    directory = config.out / name
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _executor(config: RunConfig) -> ThreadPoolExecutor | None:
    return ThreadPoolExecutor(max_workers=config.training.threads) if config.training.threads > 1 else None


# -- commands ------------------------------------------------------------------------


def run_ingest(config: RunConfig, fetch: bool = False, start: date | None = None, end: date | None = None) -> list[Path]:
    """Optionally download the NVD data, then parse everything and write a normalized feed."""
    directory = _command_dir(config, "ingest")
    if fetch:
        if start is None or end is None:
            raise ConfigError("--fetch needs --from and --to")
        downloads = fetch_sources(config, directory, start, end)
        config = config.model_copy(update={"data": config.data.model_copy(update=downloads)})

    inputs = load_inputs(config)
    feed_path = directory / "feed.json"
    feed_path.write_bytes(dump_cve_feed(inputs.feed))
    summary = {
        "cves": len(inputs.feed),
        "change_events": len(inputs.history),
        "catalog_version": inputs.catalog.version,
        "cwe_nodes": len(inputs.catalog.nodes),
        "cwe_triples": len(inputs.catalog.triples),
        "view_1003": sum(1 for n in inputs.catalog.nodes if n.is_candidate),
        "top25": len(inputs.top25),
        "exploit_events": len(inputs.exploits),
    }
    outputs = [feed_path, write_json(directory / "summary.json", summary)]
    write_manifest(directory, "ingest", config, inputs.paths, outputs)
    return outputs


def fetch_sources(config: RunConfig, directory: Path, start: date, end: date) -> dict:
    """Download CVEs, change history, KEV and Exploit-DB into ``directory``.

    Returns:
        dict: ``data`` fields pointing at the downloaded files.

    Raises:
        FetchError: A download failed.
    """
    cache = config.data.cache_dir
    client = NvdClient(cache, api_key=nvd_api_key())
    try:
        feed = directory / "nvd_cves.json"
        feed.write_bytes(client.fetch_cves(start, end))
        history = directory / "nvd_history.json"
        history.write_bytes(client.fetch_history(start, end))
        kev = directory / "kev.json"
        kev.write_bytes(fetch_cached(KEV_URL, cache)[0])
        exploitdb = directory / "files_exploits.csv"
        exploitdb.write_bytes(fetch_cached(EXPLOITDB_URL, cache)[0])
    except requests.RequestException as exc:
        raise FetchError(f"download failed: {exc}") from exc
    return {"feed": [feed], "history": [history], "kev": kev, "exploitdb": exploitdb}


def run_snapshot(config: RunConfig, as_of: date | None = None) -> list[Path]:
    as_of = as_of or config.dates.train
    inputs = load_inputs(config)
    directory = _command_dir(config, f"snapshot-{as_of.isoformat()}")
    outputs = save_snapshot(snapshot_at(config, inputs, as_of), directory)
    write_manifest(directory, "snapshot", config, inputs.paths, outputs, {"as_of": as_of.isoformat()})
    return outputs


def run_longitudinal(config: RunConfig, start: date | None = None, end: date | None = None) -> list[Path]:
    """Remap distances, pair frequencies, yearly invalid counts and status shares.

    Change events are taken from [start, end]; ``end`` defaults to the
    validation date and an open ``start`` means the whole history. Yearly
    snapshots cover the years from ``start`` (or the first CVE) to ``end``.
    """
    end = end or config.dates.validate_
    if start is not None and start > end:
        raise ConfigError(f"--from {start} is after --to {end}", start=start.isoformat(), end=end.isoformat())
    inputs = load_inputs(config)
    directory = _command_dir(config, "longitudinal")
    events = events_between(inputs.history, start=start, end=end)
    latest = snapshot_at(config, inputs, end)
    kg = latest.graph

    outputs = []
    variants = distance_distribution_variants(events, kg)
    variants.update(
        {f"{k}_allowed_only": v for k, v in distance_distribution_variants(events, kg, allowed_only=True).items()}
    )
    outputs.append(write_csv(directory / "hop_distances.csv", *distance_rows(variants)))
    outputs.append(
        write_json(
            directory / "hop_distances.json",
            {name: {"counts": d.counts, "diagnostics": d.diagnostics} for name, d in variants.items()},
        )
    )
    outputs.append(write_csv(directory / "remap_pairs.csv", *pair_rows(remap_pair_frequencies(events, kg))))

    first_year = start.year if start else min((r.published.year for r in inputs.feed), default=end.year)
    snapshots = yearly_snapshots(
        inputs.feed, inputs.history, inputs.catalog, range(first_year, end.year), config.dates.feed_state
    )
    snapshots[end.year] = latest
    cumulative = [
        [year, s.as_of.isoformat(), counts["Discouraged"], counts["Prohibited"]]
        for year, s in sorted(snapshots.items())
        for counts in [invalid_mapping_counts(s)]
    ]
    outputs.append(write_csv(directory / "invalid_by_year.csv", ["year", "as_of", "Discouraged", "Prohibited"], cumulative))
    outputs.append(
        write_csv(directory / "status_breakdown.csv", *status_rows(mapping_status_breakdown(s) for _, s in sorted(snapshots.items())))
    )
    added, removed = top_added_removed(events, 10)
    outputs.append(
        write_csv(
            directory / "top_added_removed.csv",
            ["direction", "cwe", "count"],
            [["added", c.key, n] for c, n in added] + [["removed", c.key, n] for c, n in removed],
        )
    )
    parameters = {"from": start.isoformat() if start else None, "to": end.isoformat()}
    write_manifest(directory, "longitudinal", config, inputs.paths, outputs, parameters)
    return outputs


def obtain_model(config: RunConfig, kg: KnowledgeGraph, model_path: Path | None = None) -> EmbeddingModel:
    """Load ``model_path`` when given, otherwise train on ``kg``."""
    if model_path is not None:
        return load_model(model_path)
    return train(kg, config.training)


def run_train(config: RunConfig) -> list[Path]:
    inputs = load_inputs(config)
    directory = _command_dir(config, "train")
    snapshot = snapshot_at(config, inputs, config.dates.train)
    model = train(snapshot.graph, config.training)
    model_path = directory / "model.bin"
    save_model(model, model_path)
    loss = write_csv(
        directory / "loss.csv", ["epoch", "loss"], [[i, f"{v:.8f}"] for i, v in enumerate(model.loss_history)]
    )
    outputs = [model_path, loss, *save_snapshot(snapshot, directory / "snapshot")]
    write_manifest(directory, "train", config, inputs.paths, outputs)
    return outputs


def strategy_for(config: RunConfig, status: MappingStatus, override: str | None = None) -> CandidateStrategy:
    if override:
        return CandidateStrategy.from_name(override)
    name = config.candidates.prohibited if status is MappingStatus.PROHIBITED else config.candidates.discouraged
    return CandidateStrategy.from_name(name)


def _tailored_table(config: RunConfig, inputs: Inputs, kg: KnowledgeGraph) -> dict:
    cutoff = config.candidates.tailored_cutoff or config.dates.train
    history = remap_history(inputs.history, kg, before=cutoff)
    return tailored_strategy_table(history, kg, inputs.top25)


def rank_population(
    config: RunConfig,
    inputs: Inputs,
    kg: KnowledgeGraph,
    model: EmbeddingModel,
    cases: Sequence[RemapCase],
    strategy: CandidateStrategy,
) -> list[RemapCase]:
    tailored = _tailored_table(config, inputs, kg) if strategy is CandidateStrategy.PER_CWE_TAILORED else None
    executor = _executor(config)
    try:
        return fix_v2w(
            kg, model, cases, strategy, inputs.top25, config.candidates.threshold, tailored, executor
        )
    finally:
        if executor is not None:
            executor.shutdown()


def _statuses(status: str | None) -> list[MappingStatus]:
    if status is None:
        return [MappingStatus.DISCOURAGED, MappingStatus.PROHIBITED]
    try:
        found = MappingStatus(status.capitalize())
    except ValueError:
        raise ConfigError(f"unknown status {status!r}", status=status) from None
    if found is MappingStatus.ALLOWED:
        raise ConfigError("status must be prohibited or discouraged", status=status)
    return [found]


def run_fix(
    config: RunConfig,
    status: str | None = None,
    strategy: str | None = None,
    top_n: int | None = None,
    model_path: Path | None = None,
) -> list[Path]:
    """Rank every invalid mapping of the training snapshot and write the fixed graph."""
    inputs = load_inputs(config)
    directory = _command_dir(config, "fix")
    snapshot = snapshot_at(config, inputs, config.dates.train)
    kg = snapshot.graph
    model = obtain_model(config, kg, model_path)
    top_n = top_n or config.evaluation.top_n

    ranked: list[RemapCase] = []
    for wanted in _statuses(status):
        cases = determine_invalid(kg, wanted)
        logger.info("%d %s mappings to fix", len(cases), wanted.value)
        ranked.extend(rank_population(config, inputs, kg, model, cases, strategy_for(config, wanted, strategy)))

    outputs = write_predictions(directory, ranked)
    fixed = apply_fixes(kg, ranked, top_n)
    fixed_path = directory / f"fixed_top{top_n}.tsv"
    with open(fixed_path, "wb") as f:
        fixed.dump_triples(f)
    outputs.append(fixed_path)
    parameters = {"status": status, "strategy": strategy, "top_n": top_n}
    write_manifest(directory, "fix", config, [*inputs.paths, *([model_path] if model_path else [])], outputs, parameters)
    return outputs


@dataclass
class Evaluation:
    outcomes: list[MatchOutcome]
    reports: dict[str, RankReport]
    coverage: dict


def evaluate_test_sets(
    config: RunConfig,
    inputs: Inputs,
    train_snapshot: Snapshot,
    valid_snapshot: Snapshot,
    model: EmbeddingModel,
    status: str | None = None,
    strategy: str | None = None,
) -> tuple[list[RemapCase], Evaluation]:
    kg = train_snapshot.graph
    ranked: list[RemapCase] = []
    for wanted in _statuses(status):
        cases = build_test_set(train_snapshot, valid_snapshot, wanted)
        ranked.extend(rank_population(config, inputs, kg, model, cases, strategy_for(config, wanted, strategy)))

    evaluation = config.evaluation
    outcomes = classify_cases(ranked, kg, evaluation.cutoff)
    reports = {
        label: outcome_metrics(group, evaluation.hits_at, evaluation.unfound, evaluation.cutoff)
        for label, group in outcomes_by_status(outcomes).items()
        if group
    }
    return ranked, Evaluation(outcomes, reports, coverage_report(outcomes))


def run_evaluate(
    config: RunConfig,
    status: str | None = None,
    strategy: str | None = None,
    model_path: Path | None = None,
) -> tuple[list[Path], Evaluation]:
    """Rank the labelled test set and score it against the validation snapshot."""
    inputs = load_inputs(config)
    directory = _command_dir(config, "evaluate")
    train_snapshot = snapshot_at(config, inputs, config.dates.train)
    valid_snapshot = snapshot_at(config, inputs, config.dates.validate_)
    model = obtain_model(config, train_snapshot.graph, model_path)
    ranked, result = evaluate_test_sets(config, inputs, train_snapshot, valid_snapshot, model, status, strategy)

    outputs = write_predictions(directory, ranked)
    outputs.append(write_csv(directory / "metrics.csv", *metrics_rows(result.reports)))
    outputs.append(write_csv(directory / "coverage.csv", *coverage_rows(result.coverage)))
    for label, report in result.reports.items():
        outputs.append(write_csv(directory / f"rank_histogram_{label.lower()}.csv", *histogram_rows(report.histograms)))
    outputs.append(
        write_json(
            directory / "evaluation.json",
            {
                "ranking": "per old CWE",
                "cutoff": config.evaluation.cutoff,
                "reports": {label: r.to_dict() for label, r in result.reports.items()},
                "coverage": result.coverage,
                "outcomes": [
                    {"cve": o.case.cve.key, "old_cwe": o.case.old_cwe.key, "match": o.kind.value, "rank": o.rank}
                    for o in result.outcomes
                ],
            },
        )
    )
    parameters = {"status": status, "strategy": strategy}
    write_manifest(
        directory, "evaluate", config, [*inputs.paths, *([model_path] if model_path else [])], outputs, parameters
    )
    return outputs, result


def open_world_triples(train_kg: KnowledgeGraph, valid_kg: KnowledgeGraph) -> list[Triple]:
    """MatchingCWE triples added after training for CVEs and CWEs the training graph knows."""
    pool = set(train_kg.view_1003())
    return [
        t
        for t in valid_kg.triples(relation=RelationKind.MATCHING_CWE)
        if t not in train_kg and train_kg.has_entity(t.head) and t.tail in pool
    ]


def run_retrain_eval(config: RunConfig, mode: str = "open", strategy: str | None = None) -> tuple[list[Path], dict]:
    """Fix every invalid mapping, retrain on each fixed graph and compare graph completion."""
    inputs = load_inputs(config)
    directory = _command_dir(config, "retrain-eval")
    train_snapshot = snapshot_at(config, inputs, config.dates.train)
    kg = train_snapshot.graph
    if mode == "open":
        valid = snapshot_at(config, inputs, config.dates.validate_)
        eval_triples = open_world_triples(kg, valid.graph)
    elif mode == "closed":
        kg, eval_triples = split_closed_world(kg, config.evaluation.closed_world_fraction, config.training.seed)
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}", mode=mode)

    model = train(kg, config.training)
    ranked: list[RemapCase] = []
    for wanted in _statuses(None):
        cases = determine_invalid(kg, wanted)
        ranked.extend(rank_population(config, inputs, kg, model, cases, strategy_for(config, wanted, strategy)))

    reports = compare_fixed_graphs(
        kg, ranked, eval_triples, config.training, config.evaluation.compare_top_n, mode, config.evaluation.hits_at
    )
    outputs = [
        write_csv(directory / f"completion_{mode}.csv", *metrics_rows(reports)),
        write_json(
            directory / f"completion_{mode}.json",
            {"mode": mode, "ranking": "filtered", "eval_triples": len(eval_triples), "reports": {k: r.to_dict() for k, r in reports.items()}},
        ),
    ]
    write_manifest(directory, "retrain-eval", config, inputs.paths, outputs, {"mode": mode, "strategy": strategy})
    return outputs, reports


def run_exploits(config: RunConfig, strategy: str | None = None, model_path: Path | None = None) -> tuple[list[Path], dict]:
    """Relate the ranked test set to exploitation dates from KEV and Exploit-DB."""
    inputs = load_inputs(config)
    if not inputs.exploits:
        raise ConfigError("exploit analysis needs data.kev or data.exploitdb")
    directory = _command_dir(config, "exploits")
    train_snapshot = snapshot_at(config, inputs, config.dates.train)
    valid_snapshot = snapshot_at(config, inputs, config.dates.validate_)
    model = obtain_model(config, train_snapshot.graph, model_path)
    ranked, _ = evaluate_test_sets(config, inputs, train_snapshot, valid_snapshot, model, None, strategy)

    report = exploit_analysis(
        ranked,
        inputs.exploits,
        inputs.history,
        train_snapshot.graph,
        config.evaluation.cutoff,
        start=config.dates.train,
        end=config.dates.validate_,
    )
    summary = report.summary()
    outputs = [
        write_csv(directory / "exploits.csv", *exploit_rows(report)),
        write_json(directory / "exploits.json", {"summary": summary, "rows": [r.to_dict() for r in report.rows]}),
    ]
    write_manifest(
        directory,
        "exploits",
        config,
        [*inputs.paths, *([model_path] if model_path else [])],
        outputs,
        {"strategy": strategy},
    )
    return outputs, summary
