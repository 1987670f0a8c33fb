"""
Tests for the historical remap statistics.
"""

from collections import Counter, deque
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest

from ..kg import MappingStatus, RelationKind
from ..longitudinal import (
    ANY_CWE,
    cumulative_invalid_counts,
    distance_distribution_variants,
    events_between,
    invalid_mapping_counts,
    mapping_status_breakdown,
    remap_distance_distribution,
    remap_pair_frequencies,
    remap_pairs,
    top_added_removed,
    yearly_snapshots,
)
from ..parsers import ChangeEvent, CveRecord
from ..snapshot import build_snapshot
from .conftest import TRAIN_DATE, cve, cwe


def event(key, removed, added, day=date(2022, 1, 1)):
    stamp = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
    return ChangeEvent(cve(key), stamp, tuple(cwe(c) for c in removed), tuple(cwe(c) for c in added))


def test_remap_pairs_cross_product():
    """Test that every removed CWE pairs with every added CWE."""
    pairs = remap_pairs([event("CVE-2020-0001", [138, 20], [140, 141])])
    assert sorted(pairs) == [(cwe(20), cwe(140)), (cwe(20), cwe(141)), (cwe(138), cwe(140)), (cwe(138), cwe(141))]


def test_events_between(history):
    """Test the inclusive date filter."""
    assert len(events_between(history, start=TRAIN_DATE)) == 4
    assert len(events_between(history, end=date(2021, 1, 15))) == 1


def test_distance_distribution(history, catalog_graph):
    """Test hop buckets of the fixture remaps."""
    distribution = remap_distance_distribution(history, catalog_graph)
    assert distribution.counts == {"1": 2, "2": 1, "3": 0, "4+": 0, "no-path": 2}
    assert distribution.total == 5
    assert distribution.fractions["1"] == pytest.approx(0.4)
    assert distribution.diagnostics["placeholder_remaps"] == 1


def test_distance_variants(history, catalog_graph):
    """Test the population with placeholder remaps counted as no-path."""
    variants = distance_distribution_variants(history, catalog_graph)
    assert variants["with_placeholders"].counts["no-path"] == 3
    assert variants["without_placeholders"].counts["no-path"] == 2


def test_distance_allowed_only(catalog_graph):
    """Test that only Allowed-to-Allowed remaps are counted."""
    events = [
        event("CVE-2020-0001", [140], [1284]),
        event("CVE-2020-0002", [141], [228]),
        event("CVE-2020-0003", [138], [140]),
        event("CVE-2020-0004", [140], [140]),
    ]
    distribution = remap_distance_distribution(events, catalog_graph, allowed_only=True)
    assert distribution.counts == {"1": 0, "2": 0, "3": 1, "4+": 1, "no-path": 0}
    assert distribution.diagnostics["not_allowed"] == 1
    assert distribution.diagnostics["self_remaps"] == 1


def test_distance_uncatalogued_is_no_path(catalog_graph):
    """Test that a CWE missing from the catalog lands in no-path."""
    distribution = remap_distance_distribution([event("CVE-2020-0001", [140], [79])], catalog_graph)
    assert distribution.counts["no-path"] == 1
    assert distribution.diagnostics["uncatalogued"] == 1


def test_pair_frequencies(history, catalog_graph):
    """Test pair ranking, tie order and the branch/member columns."""
    pairs = remap_pair_frequencies(history, catalog_graph)
    assert [(p.old_label, p.new_cwe.key, p.count) for p in pairs] == [
        ("CWE-189", "CWE-190", 2),
        ("CWE-138", "CWE-140", 1),
        ("CWE-682", "CWE-191", 1),
        ("CWE-707", "CWE-140", 1),
        ("CWE-Other", "CWE-228", 1),
    ]
    assert pairs[0].is_member is True
    assert pairs[0].same_branch is False
    assert pairs[0].share == pytest.approx(2 / 6)
    assert pairs[1].same_branch is True
    assert pairs[1].is_member is None


def test_pairs_into_placeholder_are_merged():
    """Test that remaps into a placeholder collapse into one any-CWE row."""
    pairs = remap_pair_frequencies(
        [event("CVE-2020-0001", [140], ["CWE-noinfo"]), event("CVE-2020-0002", [190], ["CWE-noinfo"])]
    )
    assert len(pairs) == 1
    assert pairs[0].old_label == ANY_CWE
    assert pairs[0].count == 2


def test_invalid_counts_and_breakdown(feed, history, catalog):
    """Test the invalid-mapping counts of the training snapshot."""
    snapshot = build_snapshot(feed, history, catalog, TRAIN_DATE)
    assert invalid_mapping_counts(snapshot) == {"Discouraged": 2, "Prohibited": 3}
    breakdown = mapping_status_breakdown(snapshot)
    assert breakdown.counts["Allowed"] == 4
    assert breakdown.total == 9
    assert breakdown.invalid == 5


def test_breakdown_counts_placeholders(feed, history, catalog):
    """Test that a placeholder mapping is its own column."""
    snapshot = build_snapshot(feed, history, catalog, date(2020, 12, 31))
    breakdown = mapping_status_breakdown(snapshot)
    assert breakdown.counts["CWE-Other"] == 1
    assert breakdown.counts["Allowed"] == 2
    assert set(breakdown.shares) == set(breakdown.COLUMNS)


def test_yearly_snapshots(feed, history, catalog):
    """Test that years before the first CVE are skipped."""
    snapshots = yearly_snapshots(feed, history, catalog, [2020, 2013, 2014])
    assert list(snapshots) == [2014, 2020]
    assert cumulative_invalid_counts(snapshots) == {
        2014: {"Discouraged": 0, "Prohibited": 1},
        2020: {"Discouraged": 2, "Prohibited": 2},
    }


def test_top_added_removed(history):
    """Test the most added and most removed CWEs."""
    added, removed = top_added_removed(history, n=2)
    assert added == [(cwe(140), 2), (cwe(190), 2)]
    assert removed == [(cwe(189), 2), (cwe(138), 1)]

POOL = [707, 138, 140, 141, 228, 20, 1284, 682, 190, 680, 191, 193, 369, 128, 681, 189, 264, 71, 79, "CWE-noinfo"]
YEARS = list(range(2015, 2025))


@pytest.fixture
def generated_history():
    """Twenty CVEs published in 2015 and 100 seeded change events over ten years."""
    rng = np.random.default_rng(42)
    feed = [
        CveRecord(cve(f"CVE-2015-{n:04d}"), date(2015, 1, 1), (cwe(POOL[rng.integers(len(POOL))]).key,))
        for n in range(20)
    ]
    events = []
    for number in range(100):
        day = date(2015, 1, 2) + timedelta(days=int(rng.integers(3650)))
        picks = rng.choice(len(POOL), size=int(rng.integers(2, 5)), replace=False)
        split = int(rng.integers(1, len(picks)))
        events.append(
            ChangeEvent(
                feed[rng.integers(20)].id,
                datetime(day.year, day.month, day.day, tzinfo=timezone.utc),
                tuple(cwe(POOL[i]) for i in picks[:split]),
                tuple(cwe(POOL[i]) for i in picks[split:]),
                change_id=f"{number:03d}",
            )
        )
    return feed, events


def scan_statistics(events, kg):
    """Hop buckets and pair counts by one pass over the events with a BFS per pair."""
    edges = {}
    for triple in kg.triples(relation=RelationKind.CHILD_OF):
        edges.setdefault(triple.head, set()).add(triple.tail)
        edges.setdefault(triple.tail, set()).add(triple.head)

    def hops(a, b):
        seen, queue = {a: 0}, deque([a])
        while queue:
            current = queue.popleft()
            if current == b:
                return seen[current]
            for nxt in edges.get(current, ()):
                if nxt not in seen:
                    seen[nxt] = seen[current] + 1
                    queue.append(nxt)
        return None

    buckets = {"1": 0, "2": 0, "3": 0, "4+": 0, "no-path": 0}
    pairs = Counter()
    for e in events:
        for old in e.removed_cwes:
            for new in e.added_cwes:
                if old == new:
                    continue
                pairs[(None if new.is_placeholder else old, new)] += 1
                if old.is_placeholder or new.is_placeholder:
                    continue
                if old not in kg.cwe_nodes or new not in kg.cwe_nodes:
                    buckets["no-path"] += 1
                    continue
                distance = hops(old, new)
                if distance is None:
                    buckets["no-path"] += 1
                else:
                    buckets[str(distance) if distance < 4 else "4+"] += 1
    return buckets, pairs


def test_statistics_match_scan_of_generated_history(generated_history, catalog_graph):
    """Test distances and pair counts of a generated history against a direct scan."""
    _, events = generated_history
    buckets, pairs = scan_statistics(events, catalog_graph)

    assert remap_distance_distribution(events, catalog_graph).counts == buckets
    frequencies = remap_pair_frequencies(events)
    assert {(p.old_cwe, p.new_cwe): p.count for p in frequencies} == dict(pairs)
    assert [p.count for p in frequencies] == sorted(pairs.values(), reverse=True)
    assert sum(p.share for p in frequencies) == pytest.approx(1.0)


def test_cumulative_counts_match_replay_of_generated_history(generated_history, catalog, catalog_graph):
    """Test year-end invalid counts against replaying the generated history in order."""
    feed, events = generated_history
    state = {record.id: {cwe(tag) for tag in record.cwe_ids} for record in feed}
    ordered = sorted(events, key=lambda e: (e.timestamp, e.change_id))
    expected = {}
    position = 0
    for year in YEARS:
        while position < len(ordered) and ordered[position].timestamp.date() <= date(year, 12, 31):
            change = ordered[position]
            state[change.cve] -= set(change.removed_cwes)
            state[change.cve] |= set(change.added_cwes)
            position += 1
        counts = {MappingStatus.DISCOURAGED.value: 0, MappingStatus.PROHIBITED.value: 0}
        for mapped in state.values():
            for target in mapped:
                node = catalog_graph.cwe_nodes.get(target)
                if node is not None and not node.is_placeholder and node.status is not MappingStatus.ALLOWED:
                    counts[node.status.value] += 1
        expected[year] = counts

    snapshots = yearly_snapshots(feed, events, catalog, YEARS)
    assert cumulative_invalid_counts(snapshots) == expected
