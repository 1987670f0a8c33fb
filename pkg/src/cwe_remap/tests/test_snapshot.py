"""
Tests for change-history replay, snapshots and test-set extraction.
"""

from datetime import date, datetime, timezone

import pytest

from ..errors import ConfigError, DateOutOfRangeError, MalformedDocumentError
from ..kg import EntityId, MappingStatus, RelationKind, Triple
from ..parsers import ChangeEvent, CveRecord
from ..snapshot import build_snapshot, build_test_set, load_snapshot, replay_mappings, save_snapshot
from .conftest import TRAIN_DATE, VALIDATE_DATE, cve, cwe


def test_snapshot_visibility(train_snapshot):
    """Test that CVEs published after the snapshot date are left out."""
    assert cve("CVE-2022-0009") not in train_snapshot.published
    assert len(train_snapshot.published) == 9
    assert train_snapshot.published[cve("CVE-2020-0005")] == date(2020, 5, 5)
    assert train_snapshot.graph.frozen


def test_snapshot_replays_events(train_snapshot, valid_snapshot):
    """Test mappings before and after the remap events."""
    assert train_snapshot.mappings(cve("CVE-2021-0008")) == {cwe(140)}
    assert train_snapshot.mappings(cve("CVE-2020-0005")) == {cwe(228)}
    assert train_snapshot.mappings(cve("CVE-2020-0001")) == {cwe(138)}
    assert train_snapshot.mappings(cve("CVE-2014-0160")) == {cwe(189)}
    assert valid_snapshot.mappings(cve("CVE-2020-0001")) == {cwe(140)}
    assert valid_snapshot.mappings(cve("CVE-2020-0003")) == {cwe(191)}
    assert valid_snapshot.mappings(cve("CVE-2014-0160")) == {cwe(190)}


def test_snapshot_holds_cpes_and_catalog(train_snapshot):
    """Test that CPE edges and the catalog overlay are present."""
    kg = train_snapshot.graph
    cpe = EntityId.cpe("cpe:2.3:a:openssl:openssl:1.0.1:*:*:*:*:*:*:*")
    assert Triple(cve("CVE-2014-0160"), RelationKind.MATCHING_CPE, cpe) in kg
    assert Triple(cwe(140), RelationKind.CHILD_OF, cwe(138)) in kg
    assert kg.status_of(cwe("CWE-Other")) is MappingStatus.PROHIBITED


def test_snapshot_date_range(feed, history, catalog):
    """Test dates before the first CVE and after the history coverage."""
    with pytest.raises(DateOutOfRangeError):
        build_snapshot(feed, history, catalog, date(2010, 1, 1))
    with pytest.raises(DateOutOfRangeError):
        build_snapshot(feed, history, catalog, date(2025, 1, 1), history_until=VALIDATE_DATE)


def test_replay_from_current_feed():
    """Test undoing later events when the feed holds the latest mappings."""
    record = CveRecord(cve("CVE-2020-0001"), date(2020, 1, 10), ("CWE-140",))
    event = ChangeEvent(
        cve("CVE-2020-0001"),
        datetime(2022, 3, 1, tzinfo=timezone.utc),
        removed_cwes=(cwe(138),),
        added_cwes=(cwe(140),),
    )
    assert replay_mappings([record], [event], date(2021, 1, 1), "current") == {cve("CVE-2020-0001"): {cwe(138)}}
    assert replay_mappings([record], [event], date(2023, 1, 1), "current") == {cve("CVE-2020-0001"): {cwe(140)}}


def test_build_test_sets(train_snapshot, valid_snapshot):
    """Test the Discouraged and Prohibited populations and their labels."""
    discouraged = build_test_set(train_snapshot, valid_snapshot, MappingStatus.DISCOURAGED)
    assert [(c.cve, c.old_cwe, c.truth) for c in discouraged] == [
        (cve("CVE-2020-0001"), cwe(138), frozenset({cwe(140)})),
        (cve("CVE-2020-0003"), cwe(682), frozenset({cwe(191)})),
    ]
    prohibited = build_test_set(train_snapshot, valid_snapshot, MappingStatus.PROHIBITED)
    assert [(c.cve, c.old_cwe) for c in prohibited] == [
        (cve("CVE-2014-0160"), cwe(189)),
        (cve("CVE-2020-0002"), cwe(189)),
    ]
    assert all(c.status is MappingStatus.PROHIBITED for c in prohibited)


def test_test_set_rejects_allowed(train_snapshot, valid_snapshot):
    """Test that Allowed is not a valid population."""
    with pytest.raises(ConfigError):
        build_test_set(train_snapshot, valid_snapshot, MappingStatus.ALLOWED)


def test_save_and_load_snapshot(train_snapshot, tmp_path):
    """Test that a saved snapshot loads with the same graph and indices."""
    written = save_snapshot(train_snapshot, tmp_path / "snap")
    assert [p.name for p in written] == ["triples.tsv", "entities.tsv", "cwe_nodes.jsonl", "meta.json"]
    loaded = load_snapshot(tmp_path / "snap")
    assert loaded.as_of == TRAIN_DATE
    assert set(loaded.graph) == set(train_snapshot.graph)
    assert loaded.graph.entities == train_snapshot.graph.entities
    assert loaded.graph.cwe_nodes == train_snapshot.graph.cwe_nodes
    assert loaded.published == train_snapshot.published


def test_saved_snapshot_is_byte_stable(train_snapshot, tmp_path):
    """Test that saving twice gives identical files."""
    first = save_snapshot(train_snapshot, tmp_path / "a")
    second = save_snapshot(train_snapshot, tmp_path / "b")
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_load_snapshot_rejects_other_format(train_snapshot, tmp_path):
    """Test the format check of the snapshot metadata."""
    save_snapshot(train_snapshot, tmp_path)
    (tmp_path / "meta.json").write_text('{"format": 99}', encoding="utf-8")
    with pytest.raises(MalformedDocumentError):
        load_snapshot(tmp_path)
