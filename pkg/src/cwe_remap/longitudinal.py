"""
Historical statistics over CWE change events.

Remap pairs come from the cross product of the CWEs an event removes and the
CWEs it adds. The statistics here are pure functions of the events, the graph
and the snapshots they are given.
"""

from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping

from .kg import CweKind, EntityId, KnowledgeGraph, MappingStatus, RelationKind
from .logs import get_logger
from .parsers import ChangeEvent, CveRecord, CweCatalog
from .snapshot import FeedState, Snapshot, build_snapshot

logger = get_logger(__name__)

HOP_BUCKETS = ("1", "2", "3", "4+", "no-path")
HOP_CAP = 4
ANY_CWE = "CWE-Any"


@dataclass(frozen=True)
class RemapPair:
    """How often CVEs moved from ``old_cwe`` to ``new_cwe``.

    ``old_cwe`` is None on the aggregated row of remaps into a placeholder
    (reported as "CWE-Any").
    """

    old_cwe: EntityId | None
    new_cwe: EntityId
    count: int
    same_branch: bool = False
    is_member: bool | None = None
    share: float = 0.0

    @property
    def old_label(self) -> str:
        return self.old_cwe.key if self.old_cwe is not None else ANY_CWE


@dataclass
class DistanceDistribution:
    counts: dict[str, int] = field(default_factory=lambda: {bucket: 0 for bucket in HOP_BUCKETS})
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        total = self.total
        return {bucket: (count / total if total else 0.0) for bucket, count in self.counts.items()}


def remap_pairs(events: Iterable[ChangeEvent]) -> list[tuple[EntityId, EntityId]]:
    """Cross product of removed x added CWEs per event, self pairs included."""
    return [(old, new) for event in events for old in event.removed_cwes for new in event.added_cwes]


def events_between(events: Iterable[ChangeEvent], start: date | None = None, end: date | None = None) -> list[ChangeEvent]:
    return [
        event
        for event in events
        if (start is None or event.timestamp.date() >= start) and (end is None or event.timestamp.date() <= end)
    ]


def _bucket(distance: int | None) -> str:
    if distance is None:
        return "no-path"
    return str(distance) if distance < HOP_CAP else "4+"


def remap_distance_distribution(
    events: Iterable[ChangeEvent],
    kg: KnowledgeGraph,
    include_placeholders: bool = False,
    allowed_only: bool = False,
) -> DistanceDistribution:
    """Histogram of hop distances between old and new CWEs of remaps.

    Self remaps are left out. Placeholder remaps are left out unless
    ``include_placeholders`` is set, in which case they land in "no-path".
    Pairs involving a CWE missing from the catalog also land in "no-path".
    Distances of 5 or more are counted in "4+" and listed under
    ``diagnostics["beyond_cap"]``.

    Args:
        events: CWE change events.
        kg: Graph carrying the CWE catalog.
        include_placeholders: Count remaps from or to CWE-Other/CWE-noinfo.
        allowed_only: Count only remaps whose old and new CWEs are both Allowed.
    """
    distribution = DistanceDistribution()
    beyond_cap: Counter = Counter()
    skipped = Counter()
    for old, new in remap_pairs(events):
        if old == new:
            skipped["self_remaps"] += 1
            continue
        if old.is_placeholder or new.is_placeholder:
            if not include_placeholders:
                skipped["placeholder_remaps"] += 1
                continue
            distribution.counts["no-path"] += 1
            continue
        if allowed_only and not (
            kg.status_of(old) is MappingStatus.ALLOWED and kg.status_of(new) is MappingStatus.ALLOWED
        ):
            skipped["not_allowed"] += 1
            continue
        if old not in kg.cwe_nodes or new not in kg.cwe_nodes:
            skipped["uncatalogued"] += 1
            distribution.counts["no-path"] += 1
            continue
        distance = kg.hop_distance(old, new)
        if distance is not None and distance > HOP_CAP:
            beyond_cap[distance] += 1
        distribution.counts[_bucket(distance)] += 1
    distribution.diagnostics = {
        "beyond_cap": {str(d): n for d, n in sorted(beyond_cap.items())},
        "self_remaps": skipped["self_remaps"],
        "placeholder_remaps": skipped["placeholder_remaps"],
        "not_allowed": skipped["not_allowed"],
        "uncatalogued": skipped["uncatalogued"],
        "include_placeholders": include_placeholders,
        "allowed_only": allowed_only,
    }
    return distribution


def distance_distribution_variants(events: list[ChangeEvent], kg: KnowledgeGraph, allowed_only: bool = False) -> dict[str, DistanceDistribution]:
    """Both populations: with and without placeholder remaps."""
    return {
        "without_placeholders": remap_distance_distribution(events, kg, False, allowed_only),
        "with_placeholders": remap_distance_distribution(events, kg, True, allowed_only),
    }


def _pair_sort_key(old: EntityId | None, new: EntityId) -> tuple:
    return ((-1,) if old is None else old.sort_key, new.sort_key)


def remap_pair_frequencies(events: Iterable[ChangeEvent], kg: KnowledgeGraph | None = None) -> list[RemapPair]:
    """Rank remap pairs by frequency.

    Remaps into a placeholder are merged into one row per placeholder with
    an "any" old CWE. Ties are broken by (old, new) ascending.

    Args:
        events: CWE change events.
        kg: When given, fills the ``same_branch`` and ``is_member`` columns.
    """
    counts: Counter = Counter()
    for old, new in remap_pairs(events):
        if old == new:
            continue
        counts[(None if new.is_placeholder else old, new)] += 1
    total = sum(counts.values())

    pairs = []
    for (old, new), count in counts.items():
        same_branch, is_member = False, None
        if kg is not None and old is not None:
            old_node, new_node = kg.cwe_nodes.get(old), kg.cwe_nodes.get(new)
            if old_node and new_node and old_node.is_weakness and new_node.is_weakness:
                same_branch = kg.same_branch(old, new)
            if old_node and old_node.is_grouping:
                is_member = new in kg.members_of(old)
        pairs.append(RemapPair(old, new, count, same_branch, is_member, count / total))
    pairs.sort(key=lambda p: (-p.count, _pair_sort_key(p.old_cwe, p.new_cwe)))
    return pairs


def invalid_mapping_counts(snapshot: Snapshot) -> dict[str, int]:
    """Number of Discouraged and Prohibited MatchingCWE edges (placeholders excluded)."""
    counts = {MappingStatus.DISCOURAGED.value: 0, MappingStatus.PROHIBITED.value: 0}
    kg = snapshot.graph
    for triple in kg.triples(relation=RelationKind.MATCHING_CWE):
        node = kg.cwe_nodes.get(triple.tail)
        if node is None or node.is_placeholder or node.status is MappingStatus.ALLOWED:
            continue
        counts[node.status.value] += 1
    return counts


def cumulative_invalid_counts(snapshots: Mapping[int, Snapshot]) -> dict[int, dict[str, int]]:
    """Discouraged/Prohibited mapping counts of each yearly snapshot."""
    return {year: invalid_mapping_counts(snapshots[year]) for year in sorted(snapshots)}


def yearly_snapshots(
    feed: list[CveRecord],
    history: list[ChangeEvent],
    catalog: CweCatalog,
    years: Iterable[int],
    feed_state: FeedState = "initial",
) -> dict[int, Snapshot]:
    """End-of-year snapshots; years before the first CVE are skipped."""
    first = min((record.published for record in feed), default=None)
    snapshots = {}
    for year in sorted(years):
        as_of = date(year, 12, 31)
        if first is None or as_of < first:
            logger.info("no CVEs published by %s, skipping", as_of)
            continue
        snapshots[year] = build_snapshot(feed, history, catalog, as_of, feed_state)
    return snapshots


def top_added_removed(
    events: Iterable[ChangeEvent], n: int = 10
) -> tuple[list[tuple[EntityId, int]], list[tuple[EntityId, int]]]:
    """The ``n`` CWEs most often added and most often removed by change events.

    Returns:
        tuple: (added, removed), each a list of (cwe, count) by count descending
        then id ascending.
    """
    added: Counter = Counter()
    removed: Counter = Counter()
    for event in events:
        added.update(event.added_cwes)
        removed.update(event.removed_cwes)

    def rank(counter: Counter) -> list[tuple[EntityId, int]]:
        return sorted(counter.items(), key=lambda item: (-item[1], item[0].sort_key))[:n]

    return rank(added), rank(removed)


@dataclass
class StatusBreakdown:
    """Mapping counts of one snapshot by status of the mapped CWE.

    "Empty" counts CVEs without any CWE; every other column counts
    MatchingCWE edges.
    """

    as_of: date
    counts: dict[str, int]

    COLUMNS = ("Allowed", "Discouraged", "Prohibited", "CWE-Other", "CWE-noinfo", "Empty", "Uncatalogued")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def shares(self) -> dict[str, float]:
        total = self.total
        return {column: (self.counts[column] / total if total else 0.0) for column in self.COLUMNS}

    @property
    def invalid(self) -> int:
        return sum(self.counts[c] for c in ("Discouraged", "Prohibited", "CWE-Other", "CWE-noinfo", "Empty"))


def mapping_status_breakdown(snapshot: Snapshot) -> StatusBreakdown:
    kg = snapshot.graph
    counts = dict.fromkeys(StatusBreakdown.COLUMNS, 0)
    for cve in snapshot.published:
        mapped = kg.mappings(cve)
        if not mapped:
            counts["Empty"] += 1
        for cwe in mapped:
            node = kg.cwe_nodes.get(cwe)
            if node is None:
                counts["Uncatalogued"] += 1
            elif node.kind is CweKind.PLACEHOLDER:
                counts[cwe.key] += 1
            else:
                counts[node.status.value] += 1
    return StatusBreakdown(as_of=snapshot.as_of, counts=counts)
