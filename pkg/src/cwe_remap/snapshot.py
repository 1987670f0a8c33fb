"""
Point-in-time snapshots of the NVD mapping state.

A snapshot is the CVE feed with every CWE change event up to a date replayed on
it, combined with the CWE catalog overlay into one frozen knowledge graph.
Snapshots can be saved to a directory and loaded back with the same dense
entity indices.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Literal

from .errors import ConfigError, DateOutOfRangeError, MalformedDocumentError
from .kg import (
    CweKind,
    CweNode,
    EntityId,
    KnowledgeGraph,
    MappingStatus,
    Abstraction,
    RelationKind,
    Triple,
    load_triples,
    placeholder_nodes,
)
from .logs import get_logger
from .parsers import ChangeEvent, CveRecord, CweCatalog
from .remap import RemapCase

logger = get_logger(__name__)

FeedState = Literal["initial", "current"]
SNAPSHOT_FORMAT = 1


@dataclass
class Snapshot:
    """Frozen graph of the mappings valid at ``as_of``.

    ``published`` holds every CVE of the snapshot, including CVEs without any
    CWE or CPE edge.
    """

    as_of: date
    graph: KnowledgeGraph
    published: dict[EntityId, date] = field(default_factory=dict)

    def mappings(self, cve: EntityId) -> set[EntityId]:
        return self.graph.mappings(cve)


def replay_mappings(
    feed: Iterable[CveRecord],
    history: Iterable[ChangeEvent],
    as_of: date,
    feed_state: FeedState = "initial",
) -> dict[EntityId, set[EntityId]]:
    """Replay change events onto the feed's CWE tags.

    With ``feed_state="initial"`` the feed holds each CVE as first published
    and events up to ``as_of`` are applied forward. With ``"current"`` the feed
    is the latest state and events after ``as_of`` are undone newest first.
    """
    mappings = {record.id: {EntityId.parse(tag) for tag in record.cwe_ids} for record in feed}
    by_cve: dict[EntityId, list[ChangeEvent]] = defaultdict(list)
    for event in history:
        by_cve[event.cve].append(event)

    orphans = 0
    for cve, events in by_cve.items():
        state = mappings.get(cve)
        if state is None:
            orphans += 1
            continue
        events.sort(key=lambda e: (e.timestamp, e.change_id))
        if feed_state == "initial":
            for event in events:
                if event.timestamp.date() > as_of:
                    break
                state.difference_update(event.removed_cwes)
                state.update(event.added_cwes)
        else:
            for event in reversed(events):
                if event.timestamp.date() <= as_of:
                    break
                state.difference_update(event.added_cwes)
                state.update(event.removed_cwes)
    if orphans:
        logger.warning("%d CVEs in the change history are missing from the feed", orphans)
    return mappings


def build_snapshot(
    feed: list[CveRecord],
    history: list[ChangeEvent],
    catalog: CweCatalog,
    as_of: date,
    feed_state: FeedState = "initial",
    history_until: date | None = None,
) -> Snapshot:
    """Build the frozen graph of the NVD state at ``as_of``.

    CVEs published after ``as_of`` are left out.

    Args:
        feed: CVE records.
        history: CWE change events.
        catalog: CWE catalog nodes and hierarchy triples.
        as_of: Snapshot date.
        feed_state: Whether the feed is the initial or the current NVD state.
        history_until: Last date the change history covers, when known.

    Returns:
        Snapshot: The frozen snapshot.

    Raises:
        DateOutOfRangeError: ``as_of`` precedes every CVE of the feed or lies
            after ``history_until``.
    """
    if feed and as_of < min(record.published for record in feed):
        raise DateOutOfRangeError(f"{as_of} precedes every CVE of the feed", as_of=as_of.isoformat())
    if history_until is not None and as_of > history_until:
        raise DateOutOfRangeError(
            f"{as_of} is after the end of the change history ({history_until})",
            as_of=as_of.isoformat(),
        )

    visible = {record.id: record for record in feed if record.published <= as_of}
    mappings = replay_mappings(visible.values(), history, as_of, feed_state)

    kg = KnowledgeGraph()
    for node in sorted([*catalog.nodes, *placeholder_nodes()], key=lambda n: n.id):
        kg.add_node(node)
    for triple in catalog.triples:
        kg.add_triple(triple)

    uncatalogued: set[EntityId] = set()
    for cve in sorted(visible):
        for cwe in sorted(mappings[cve]):
            if cwe not in kg.cwe_nodes:
                uncatalogued.add(cwe)
            kg.add_triple(Triple(cve, RelationKind.MATCHING_CWE, cwe))
        for uri in sorted(visible[cve].cpe_uris):
            kg.add_triple(Triple(cve, RelationKind.MATCHING_CPE, EntityId.cpe(uri)))
    if uncatalogued:
        logger.warning(
            "%d mapped CWEs are not in the catalog: %s",
            len(uncatalogued),
            ", ".join(str(c) for c in sorted(uncatalogued)[:10]),
        )

    logger.info("snapshot %s: %d CVEs, %d triples", as_of, len(visible), len(kg))
    return Snapshot(
        as_of=as_of,
        graph=kg.freeze(),
        published={cve: visible[cve].published for cve in sorted(visible)},
    )


def invalid_statuses(status_filter: MappingStatus) -> set[MappingStatus]:
    if status_filter is MappingStatus.ALLOWED:
        raise ConfigError("the test set is built for Prohibited or Discouraged mappings")
    return {status_filter}


def build_test_set(train: Snapshot, valid: Snapshot, status_filter: MappingStatus) -> list[RemapCase]:
    """Collect the CVEs whose invalid training mapping was fixed by validation time.

    A case is one (CVE, old CWE) pair where the old CWE has ``status_filter`` in
    the training catalog, is no longer mapped at validation time, and the CVE
    gained at least one Allowed CWE. Every such new CWE is a truth label.
    Placeholder CWEs are not part of the Prohibited population.
    """
    wanted = invalid_statuses(status_filter)
    cases = []
    for cve in train.graph.cves():
        before = train.mappings(cve)
        after = valid.mappings(cve)
        truth = {
            cwe
            for cwe in after - before
            if (valid.graph.status_of(cwe) or train.graph.status_of(cwe)) is MappingStatus.ALLOWED
        }
        if not truth:
            continue
        for old in sorted(before - after):
            node = train.graph.cwe_nodes.get(old)
            if node is None or node.is_placeholder or node.status not in wanted:
                continue
            cases.append(RemapCase(cve=cve, old_cwe=old, status=node.status, truth=frozenset(truth)))
    logger.info("%d %s cases between %s and %s", len(cases), status_filter.value, train.as_of, valid.as_of)
    return cases


# -- persistence ---------------------------------------------------------------


def _node_to_dict(node: CweNode) -> dict:
    return {
        "id": node.id.key,
        "kind": node.kind.value,
        "status": node.status.value,
        "abstraction": node.abstraction.value if node.abstraction and node.is_weakness else None,
        "in_view_1003": node.in_view_1003,
        "name": node.name,
    }


def _node_from_dict(payload: dict) -> CweNode:
    return CweNode(
        id=EntityId.parse(payload["id"]),
        kind=CweKind(payload["kind"]),
        status=MappingStatus(payload["status"]),
        abstraction=Abstraction(payload["abstraction"]) if payload.get("abstraction") else None,
        in_view_1003=bool(payload.get("in_view_1003", False)),
        name=payload.get("name", ""),
    )


def save_snapshot(snapshot: Snapshot, directory: Path) -> list[Path]:
    """Write a snapshot as ``triples.tsv``, ``entities.tsv``, ``cwe_nodes.jsonl`` and ``meta.json``.

    Returns:
        list: The written files.
    """
    directory.mkdir(parents=True, exist_ok=True)
    kg = snapshot.graph
    with open(directory / "triples.tsv", "wb") as f:
        kg.dump_triples(f)
    with open(directory / "entities.tsv", "wb") as f:
        kg.dump_entities(f)
    with open(directory / "cwe_nodes.jsonl", "w", encoding="utf-8", newline="\n") as f:
        for cwe in sorted(kg.cwe_nodes):
            f.write(json.dumps(_node_to_dict(kg.cwe_nodes[cwe]), sort_keys=True) + "\n")
    meta = {
        "format": SNAPSHOT_FORMAT,
        "as_of": snapshot.as_of.isoformat(),
        "published": {cve.key: day.isoformat() for cve, day in snapshot.published.items()},
    }
    with open(directory / "meta.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return [directory / name for name in ("triples.tsv", "entities.tsv", "cwe_nodes.jsonl", "meta.json")]


def load_snapshot(directory: Path) -> Snapshot:
    """Load a snapshot written by ``save_snapshot``; the graph comes back frozen."""
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedDocumentError(f"cannot read snapshot metadata in {directory}: {exc}") from exc
    if meta.get("format") != SNAPSHOT_FORMAT:
        raise MalformedDocumentError(f"unsupported snapshot format {meta.get('format')!r}", offset=0)

    with open(directory / "cwe_nodes.jsonl", encoding="utf-8") as f:
        nodes = [_node_from_dict(json.loads(line)) for line in f if line.strip()]
    with open(directory / "triples.tsv", "rb") as triples, open(directory / "entities.tsv", "rb") as entities:
        kg = load_triples(triples, nodes=nodes, entities=entities)
    return Snapshot(
        as_of=date.fromisoformat(meta["as_of"]),
        graph=kg.freeze(),
        published={EntityId.cve(k): date.fromisoformat(v) for k, v in sorted(meta["published"].items())},
    )
