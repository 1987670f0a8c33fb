"""
Tests for the NVD, CWE catalog and exploit parsers.
"""

import logging
from datetime import date, datetime, timezone

import pytest

from ..errors import MalformedDocumentError
from ..kg import Abstraction, CweKind, MappingStatus, RelationKind, Triple
from ..parsers import (
    ExploitSource,
    dump_cve_feed,
    parse_change_history,
    parse_cve_feed,
    parse_cwe_catalog,
    parse_exploits,
    parse_view_csv,
)
from .conftest import FIXTURES, cve, cwe


def test_parse_v2_feed(feed):
    """Test the API 2.0 layout with nested CPE nodes and duplicate tags."""
    by_id = {record.id: record for record in feed}
    assert len(feed) == 10
    heartbleed = by_id[cve("CVE-2014-0160")]
    assert heartbleed.published == date(2014, 4, 7)
    assert heartbleed.cwe_ids == ("CWE-189",)
    assert heartbleed.cpe_uris == ("cpe:2.3:a:openssl:openssl:1.0.1:*:*:*:*:*:*:*",)
    assert by_id[cve("CVE-2020-0001")].cpe_uris == ("cpe:2.3:a:example:parser:2.1:*:*:*:*:*:*:*",)
    assert by_id[cve("CVE-2020-0005")].cwe_ids == ("NVD-CWE-Other",)
    assert by_id[cve("CVE-2020-0005")].cpe_uris == ()
    assert by_id[cve("CVE-2020-0006")].cwe_ids == ("CWE-190",)


def test_parse_v11_feed_salvages_records(caplog):
    """Test the legacy layout; a broken entry is skipped with a warning."""
    with caplog.at_level(logging.WARNING, logger="cwe_remap"):
        records = parse_cve_feed((FIXTURES / "nvd_v11.json").read_bytes())
    assert [r.id for r in records] == [cve("CVE-2019-1000"), cve("CVE-2019-1001")]
    assert records[0].cwe_ids == ("CWE-190", "NVD-CWE-noinfo")
    assert records[0].published == date(2019, 7, 1)
    assert records[1].cwe_ids == ()
    assert "skipping CVE entry #2" in caplog.text


def test_feed_dump_parses_back(feed):
    """Test that the feed written by ingest reads back to the same records."""
    assert parse_cve_feed(dump_cve_feed(feed)) == feed


def test_invalid_json_reports_offset():
    """Test the byte offset of a JSON syntax error."""
    with pytest.raises(MalformedDocumentError) as info:
        parse_cve_feed(b'{"vulnerabilities": ]}')
    assert info.value.offset == 20


def test_unknown_document_is_rejected():
    """Test that JSON without a known top-level key is refused."""
    with pytest.raises(MalformedDocumentError):
        parse_cve_feed(b'{"items": []}')


def test_parse_change_history(history):
    """Test CWE event extraction, ordering and self-change cancellation."""
    assert [e.cve for e in history] == [
        cve("CVE-2020-0005"),
        cve("CVE-2021-0008"),
        cve("CVE-2020-0001"),
        cve("CVE-2020-0003"),
        cve("CVE-2014-0160"),
        cve("CVE-2020-0002"),
    ]
    first = history[0]
    assert first.removed_cwes == (cwe("CWE-Other"),)
    assert first.added_cwes == (cwe(228),)
    assert first.timestamp == datetime(2021, 1, 15, 9, 0, tzinfo=timezone.utc)
    assert history[1].removed_cwes == (cwe(707),)
    assert history[1].added_cwes == (cwe(140),)


def test_change_history_requires_changes_key():
    """Test that a CVE feed is not accepted as a change history."""
    with pytest.raises(MalformedDocumentError):
        parse_change_history(b'{"vulnerabilities": []}')


def test_parse_catalog_statuses(catalog):
    """Test mapping usage, defaults for missing notes and node kinds."""
    nodes = {node.id: node for node in catalog.nodes}
    assert catalog.version == "4.5"
    assert nodes[cwe(140)].status is MappingStatus.ALLOWED
    assert nodes[cwe(228)].status is MappingStatus.ALLOWED
    assert nodes[cwe(138)].status is MappingStatus.DISCOURAGED
    assert nodes[cwe(707)].status is MappingStatus.DISCOURAGED
    assert nodes[cwe(704)].status is MappingStatus.DISCOURAGED
    assert nodes[cwe(1284)].status is MappingStatus.ALLOWED
    assert nodes[cwe(189)].kind is CweKind.CATEGORY
    assert nodes[cwe(189)].status is MappingStatus.PROHIBITED
    assert nodes[cwe(1003)].kind is CweKind.VIEW
    assert nodes[cwe(71)].kind is CweKind.DEPRECATED
    assert nodes[cwe(71)].status is MappingStatus.PROHIBITED
    assert nodes[cwe(680)].abstraction is Abstraction.BASE
    assert nodes[cwe(707)].abstraction is Abstraction.PILLAR


def test_parse_catalog_view_membership(catalog):
    """Test CWE-1003 membership from the view element and view-tagged parents."""
    in_view = {node.id for node in catalog.nodes if node.is_candidate}
    assert in_view == {cwe(n) for n in (140, 141, 190, 191, 193, 228, 369, 680, 681, 1284)}
    nodes = {node.id: node for node in catalog.nodes}
    assert nodes[cwe(138)].in_view_1003
    assert not nodes[cwe(138)].is_candidate
    assert not nodes[cwe(189)].in_view_1003


def test_parse_catalog_relations(catalog):
    """Test that other views and dangling targets are dropped."""
    triples = set(catalog.triples)
    assert Triple(cwe(140), RelationKind.CHILD_OF, cwe(138)) in triples
    assert Triple(cwe(140), RelationKind.CHILD_OF, cwe(20)) not in triples
    assert Triple(cwe(680), RelationKind.RELATED_TO, cwe(190)) in triples
    assert Triple(cwe(128), RelationKind.RELATED_TO, cwe(190)) in triples
    assert Triple(cwe(190), RelationKind.MEMBER_OF, cwe(189)) in triples
    assert not any(t.tail.key in ("CWE-119", "CWE-1135", "CWE-1139") for t in triples)
    assert not any(t.head.key in ("CWE-1135", "CWE-1139") for t in triples)


def test_parse_catalog_view_override():
    """Test that an explicit CWE-1003 list replaces the catalog's own view."""
    parsed = parse_cwe_catalog((FIXTURES / "catalog.xml").read_bytes(), view_1003=[cwe(140)])
    assert {node.id for node in parsed.nodes if node.in_view_1003} == {cwe(140)}


def test_parse_catalog_other_hierarchy_view():
    """Test reading ChildOf records of another view."""
    parsed = parse_cwe_catalog((FIXTURES / "catalog.xml").read_bytes(), hierarchy_view="699")
    triples = set(parsed.triples)
    assert Triple(cwe(140), RelationKind.CHILD_OF, cwe(20)) in triples
    assert Triple(cwe(140), RelationKind.CHILD_OF, cwe(138)) not in triples


def test_parse_catalog_empty_and_broken():
    """Test an empty export and an XML syntax error."""
    assert parse_cwe_catalog(b"  \n").nodes == []
    with pytest.raises(MalformedDocumentError) as info:
        parse_cwe_catalog(b"<Weakness_Catalog>\n<Weaknesses></Weakness_Catalog>")
    assert info.value.offset is not None


def test_parse_view_csv(top25):
    """Test the MITRE CSV export reader."""
    assert top25 == [cwe(190), cwe(20), cwe(369)]
    assert parse_view_csv(b"CWE-ID,Name\nCWE-79,XSS\n79,XSS\n") == [cwe(79)]
    with pytest.raises(MalformedDocumentError):
        parse_view_csv(b"Name,Rank\nXSS,1\n")


def test_parse_exploits(exploits):
    """Test KEV and Exploit-DB merging, verification and earliest dates."""
    rows = [(e.cve, e.source, e.exploit_date) for e in exploits]
    assert rows == [
        (cve("CVE-2014-0160"), ExploitSource.EXPLOIT_DB, date(2014, 4, 8)),
        (cve("CVE-2014-0160"), ExploitSource.KEV, date(2022, 5, 4)),
        (cve("CVE-2020-0001"), ExploitSource.KEV, date(2021, 12, 1)),
        (cve("CVE-2020-0003"), ExploitSource.EXPLOIT_DB, date(2023, 1, 1)),
    ]


def test_parse_kev_csv():
    """Test the CSV flavour of the KEV catalog."""
    events = parse_exploits(kev=b"cveID,vendorProject,dateAdded\nCVE-2021-44228,Apache,2021-12-10\n")
    assert [(e.cve, e.exploit_date) for e in events] == [(cve("CVE-2021-44228"), date(2021, 12, 10))]


def test_exploitdb_requires_columns():
    """Test that an Exploit-DB index without the needed columns is refused."""
    with pytest.raises(MalformedDocumentError):
        parse_exploits(exploitdb=b"id,file\n1,x.py\n")


@pytest.mark.parametrize(
    "read, offset",
    [
        (lambda: parse_view_csv(b"CWE-ID\n79\n\xff\n"), 10),
        (lambda: parse_exploits(kev=b"cveID,dateAdded\n\xff,2021-12-10\n"), 16),
        (lambda: parse_exploits(exploitdb=b"codes,verified,date_published\nCVE-\xff,1,2020-01-01\n"), 34),
    ],
    ids=["view-csv", "kev-csv", "exploitdb-csv"],
)
def test_csv_inputs_reject_invalid_utf8(read, offset):
    """Test that undecodable bytes in a CSV input report their offset."""
    with pytest.raises(MalformedDocumentError) as info:
        read()
    assert info.value.offset == offset
