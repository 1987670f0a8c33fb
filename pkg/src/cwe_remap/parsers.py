"""
Parsers for the external data sources.

- NVD CVE feeds (API 2.0 JSON, legacy 1.1 JSON feeds)
- NVD CVE change history (API 2.0 JSON)
- MITRE CWE catalog (XML export) and CSV view exports (CWE-1003, Top-25)
- CISA KEV (JSON or CSV) and the Exploit-DB CSV index

All parsers take raw bytes so they work the same on cached downloads and on
local files. A bad record is skipped with a warning; a document that cannot be
read at all raises MalformedDocumentError with the byte offset of the failure.
"""

import csv
import io
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from typing import Any, Iterable

from .errors import CweRemapError, MalformedDocumentError
from .kg import (
    Abstraction,
    CweKind,
    CweNode,
    EntityId,
    MappingStatus,
    PLACEHOLDER_TOKENS,
    RelationKind,
    Triple,
)
from .logs import get_logger

logger = get_logger(__name__)

CWE_TOKEN = re.compile(r"NVD-CWE-(?:Other|noinfo)|CWE-[1-9]\d*")


@dataclass(frozen=True)
class CveRecord:
    """One vulnerability entry of an NVD feed.

    ``cwe_ids`` keeps the raw tags, placeholder tokens included; an empty tuple
    means the entry carries no weakness at all.
    """

    id: EntityId
    published: date
    cwe_ids: tuple[str, ...] = ()
    cpe_uris: tuple[str, ...] = ()


@dataclass(frozen=True)
class ChangeEvent:
    cve: EntityId
    timestamp: datetime
    removed_cwes: tuple[EntityId, ...]
    added_cwes: tuple[EntityId, ...]
    change_id: str = ""


class ExploitSource(str, Enum):
    KEV = "KEV"
    EXPLOIT_DB = "ExploitDB"


@dataclass(frozen=True)
class ExploitEvent:
    cve: EntityId
    source: ExploitSource
    exploit_date: date
    verified: bool = True


@dataclass
class CweCatalog:
    """Nodes and CWE-to-CWE triples read from a catalog export."""

    nodes: list[CweNode] = field(default_factory=list)
    triples: list[Triple] = field(default_factory=list)
    version: str = ""


# -- helpers -------------------------------------------------------------------


def _decode_text(data: bytes) -> str:
    try:
        return data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedDocumentError(f"document is not UTF-8: {exc.reason}", offset=exc.start) from exc


def _load_json(data: bytes) -> Any:
    text = _decode_text(data)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise MalformedDocumentError(f"invalid JSON: {exc.msg}", offset=offset) from exc


def _parse_date(value: str) -> date:
    return date.fromisoformat(value.strip()[:10])


def _parse_timestamp(value: str) -> datetime:
    stamp = datetime.fromisoformat(value.strip().replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def _unique(values: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(values))


def _cwe_tags(values: Iterable[str], cve: str) -> tuple[str, ...]:
    tags = []
    for value in values:
        value = value.strip()
        if CWE_TOKEN.fullmatch(value):
            tags.append(value)
        else:
            logger.warning("%s: ignoring weakness value %r", cve, value)
    return _unique(tags)


def _walk_cpe_nodes(nodes: list[dict], match_key: str, uri_key: str) -> Iterable[str]:
    for node in nodes:
        for match in node.get(match_key, []):
            uri = match.get(uri_key)
            if uri:
                yield uri
        yield from _walk_cpe_nodes(node.get("children", []), match_key, uri_key)


# -- CVE feeds -----------------------------------------------------------------


def _record_from_v2(item: dict) -> CveRecord:
    cve = item["cve"]
    key = cve["id"]
    values = [
        description["value"]
        for weakness in cve.get("weaknesses", [])
        for description in weakness.get("description", [])
    ]
    uris = [
        uri
        for configuration in cve.get("configurations", [])
        for uri in _walk_cpe_nodes(configuration.get("nodes", []), "cpeMatch", "criteria")
    ]
    return CveRecord(
        id=EntityId.cve(key),
        published=_parse_date(cve["published"]),
        cwe_ids=_cwe_tags(values, key),
        cpe_uris=_unique(uris),
    )


def _record_from_v11(item: dict) -> CveRecord:
    key = item["cve"]["CVE_data_meta"]["ID"]
    values = [
        description["value"]
        for problem in item["cve"].get("problemtype", {}).get("problemtype_data", [])
        for description in problem.get("description", [])
    ]
    uris = _walk_cpe_nodes(item.get("configurations", {}).get("nodes", []), "cpe_match", "cpe23Uri")
    return CveRecord(
        id=EntityId.cve(key),
        published=_parse_date(item["publishedDate"]),
        cwe_ids=_cwe_tags(values, key),
        cpe_uris=_unique(uris),
    )


def parse_cve_feed(data: bytes) -> list[CveRecord]:
    """Parse an NVD CVE document into records.

    The API 2.0 layout (``vulnerabilities``) and the legacy 1.1 feed layout
    (``CVE_Items``) are told apart by their top-level key.

    Args:
        data: Raw JSON bytes.

    Returns:
        list: One CveRecord per readable vulnerability entry, in document order.
    """
    document = _load_json(data)
    if isinstance(document, dict) and "vulnerabilities" in document:
        items, extract = document["vulnerabilities"], _record_from_v2
    elif isinstance(document, dict) and "CVE_Items" in document:
        items, extract = document["CVE_Items"], _record_from_v11
    else:
        raise MalformedDocumentError("not an NVD CVE document (no 'vulnerabilities' or 'CVE_Items')", offset=0)

    records = []
    for position, item in enumerate(items):
        try:
            records.append(extract(item))
        except (KeyError, TypeError, ValueError, AttributeError, CweRemapError) as exc:
            logger.warning("skipping CVE entry #%d: %s", position, exc)
    logger.debug("parsed %d of %d CVE entries", len(records), len(items))
    return records


def cve_record_to_feed(record: CveRecord) -> dict:
    """Render a record as one ``vulnerabilities`` item of the API 2.0 schema."""
    cve: dict[str, Any] = {
        "id": record.id.key,
        "published": f"{record.published.isoformat()}T00:00:00.000",
        "weaknesses": [],
        "configurations": [],
    }
    if record.cwe_ids:
        cve["weaknesses"].append(
            {
                "source": "nvd@nist.gov",
                "type": "Primary",
                "description": [{"lang": "en", "value": value} for value in record.cwe_ids],
            }
        )
    if record.cpe_uris:
        cve["configurations"].append(
            {
                "nodes": [
                    {
                        "operator": "OR",
                        "negate": False,
                        "cpeMatch": [{"vulnerable": True, "criteria": uri} for uri in record.cpe_uris],
                    }
                ]
            }
        )
    return {"cve": cve}


def dump_cve_feed(records: Iterable[CveRecord]) -> bytes:
    items = [cve_record_to_feed(record) for record in records]
    document = {"format": "NVD_CVE", "version": "2.0", "totalResults": len(items), "vulnerabilities": items}
    return json.dumps(document, indent=2, sort_keys=True).encode("utf-8")


# -- change history ------------------------------------------------------------


def _to_cwe(token: str) -> EntityId:
    return EntityId.cwe(PLACEHOLDER_TOKENS.get(token, token))


def parse_change_history(data: bytes) -> list[ChangeEvent]:
    """Extract the CWE-affecting events of an NVD change-history document.

    "Changed" details count their old value as removed and their new value as
    added. A CWE present on both sides of one event is not a change and is
    dropped from both.

    Returns:
        list: Events sorted by (timestamp, cve, change id).
    """
    document = _load_json(data)
    if not isinstance(document, dict) or "cveChanges" not in document:
        raise MalformedDocumentError("not an NVD change-history document (no 'cveChanges')", offset=0)

    events = []
    for position, item in enumerate(document["cveChanges"]):
        try:
            change = item["change"]
            removed: set[str] = set()
            added: set[str] = set()
            for detail in change.get("details", []):
                if detail.get("type") != "CWE":
                    continue
                action = detail.get("action", "")
                old = CWE_TOKEN.findall(detail.get("oldValue") or "")
                new = CWE_TOKEN.findall(detail.get("newValue") or "")
                if action == "Removed":
                    removed.update(old or new)
                elif action == "Added":
                    added.update(new or old)
                else:
                    removed.update(old)
                    added.update(new)
            common = removed & added
            removed -= common
            added -= common
            if not removed and not added:
                continue
            events.append(
                ChangeEvent(
                    cve=EntityId.cve(change["cveId"]),
                    timestamp=_parse_timestamp(change["created"]),
                    removed_cwes=tuple(sorted(_to_cwe(t) for t in removed)),
                    added_cwes=tuple(sorted(_to_cwe(t) for t in added)),
                    change_id=str(change.get("cveChangeId", "")),
                )
            )
        except (KeyError, TypeError, ValueError, AttributeError, CweRemapError) as exc:
            logger.warning("skipping change entry #%d: %s", position, exc)
    events.sort(key=lambda e: (e.timestamp, e.cve.sort_key, e.change_id))
    return events


# -- CWE catalog -----------------------------------------------------------------

_USAGE = {
    "allowed": MappingStatus.ALLOWED,
    "allowed-with-review": MappingStatus.ALLOWED,
    "discouraged": MappingStatus.DISCOURAGED,
    "prohibited": MappingStatus.PROHIBITED,
}
_RELATED_NATURES = {"PeerOf", "CanAlsoBe", "CanPrecede", "CanFollow", "Requires", "RequiredBy", "StartsWith"}
VIEW_1003 = "1003"
_ABSTRACTIONS = {a.value for a in Abstraction}


def _xml_offset(data: bytes, line: int, column: int) -> int:
    lines = data.splitlines(keepends=True)
    return sum(len(chunk) for chunk in lines[: max(line - 1, 0)]) + column


def _usage(element: ET.Element, ns: str, cwe: str) -> MappingStatus | None:
    usage = element.find(f"{ns}Mapping_Notes/{ns}Usage")
    if usage is None or not (usage.text or "").strip():
        return None
    value = usage.text.strip()
    status = _USAGE.get(value.lower())
    if status is None:
        logger.warning("%s: unknown mapping usage %r, treating as Allowed", cwe, value)
        return MappingStatus.ALLOWED
    return status


def parse_cwe_catalog(
    data: bytes,
    view_1003: Iterable[EntityId] | None = None,
    hierarchy_view: str = "1000",
) -> CweCatalog:
    """Parse a MITRE CWE XML catalog into nodes and CWE-to-CWE triples.

    Weaknesses without mapping notes are Discouraged when they are Pillars and
    Allowed otherwise. Categories, views and deprecated entries are always
    Prohibited.

    Args:
        data: Raw XML bytes (``cwec_vX.Y.xml``).
        view_1003: Ids of the CWE-1003 view; overrides the membership read from
            the catalog's own View 1003 element.
        hierarchy_view: ChildOf records of other views are ignored; records
            without a ``View_ID`` are always kept.

    Returns:
        CweCatalog: Nodes sorted by id plus ChildOf, MemberOf and RelatedTo triples.
    """
    if not data.strip():
        return CweCatalog()
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        raise MalformedDocumentError(f"invalid CWE XML: {exc}", offset=_xml_offset(data, line, column)) from exc

    ns = root.tag[: root.tag.index("}") + 1] if root.tag.startswith("{") else ""

    raw: dict[str, dict[str, Any]] = {}
    child_of: list[tuple[str, str]] = []
    related: list[tuple[str, str]] = []
    members: list[tuple[str, str]] = []
    view_members: set[str] = set()

    for weakness in root.iter(f"{ns}Weakness"):
        cwe_id = weakness.get("ID")
        key = f"CWE-{cwe_id}"
        abstraction = weakness.get("Abstraction")
        raw[cwe_id] = {
            "kind": CweKind.DEPRECATED if weakness.get("Status") == "Deprecated" else CweKind.WEAKNESS,
            "abstraction": Abstraction(abstraction) if abstraction in _ABSTRACTIONS else None,
            "usage": _usage(weakness, ns, key),
            "name": weakness.get("Name", ""),
        }
        for rel in weakness.iter(f"{ns}Related_Weakness"):
            nature, target, view = rel.get("Nature"), rel.get("CWE_ID"), rel.get("View_ID")
            if nature == "ChildOf":
                if view == VIEW_1003:
                    view_members.add(cwe_id)
                if view is None or view == hierarchy_view:
                    child_of.append((cwe_id, target))
            elif nature in _RELATED_NATURES:
                related.append((cwe_id, target))

    for tag, kind, member_path in (
        ("Category", CweKind.CATEGORY, f"{ns}Relationships/{ns}Has_Member"),
        ("View", CweKind.VIEW, f"{ns}Members/{ns}Has_Member"),
    ):
        for element in root.iter(f"{ns}{tag}"):
            cwe_id = element.get("ID")
            raw[cwe_id] = {
                "kind": CweKind.DEPRECATED if element.get("Status") == "Deprecated" else kind,
                "abstraction": None,
                "usage": MappingStatus.PROHIBITED,
                "name": element.get("Name", ""),
            }
            for member in element.findall(member_path):
                members.append((member.get("CWE_ID"), cwe_id))
                if kind is CweKind.VIEW and cwe_id == VIEW_1003:
                    view_members.add(member.get("CWE_ID"))

    if view_1003 is not None:
        view_members = {e.key.removeprefix("CWE-") for e in view_1003}

    nodes = []
    for cwe_id, info in raw.items():
        kind = info["kind"]
        if kind is CweKind.WEAKNESS:
            status = info["usage"]
            if status is None:
                status = MappingStatus.DISCOURAGED if info["abstraction"] is Abstraction.PILLAR else MappingStatus.ALLOWED
            abstraction = info["abstraction"]
        else:
            status, abstraction = MappingStatus.PROHIBITED, None
        in_view = cwe_id in view_members and status is not MappingStatus.PROHIBITED
        nodes.append(
            CweNode(
                id=EntityId.cwe(int(cwe_id)),
                kind=kind,
                status=status,
                abstraction=abstraction,
                in_view_1003=in_view,
                name=info["name"],
            )
        )
    nodes.sort(key=lambda n: n.id)

    triples = []
    dropped = 0
    for pairs, relation in ((child_of, RelationKind.CHILD_OF), (members, RelationKind.MEMBER_OF), (related, RelationKind.RELATED_TO)):
        for head, tail in pairs:
            if head not in raw or tail not in raw:
                dropped += 1
                continue
            triples.append(Triple(EntityId.cwe(int(head)), relation, EntityId.cwe(int(tail))))
    if dropped:
        logger.warning("dropped %d catalog relations pointing outside the catalog", dropped)
    triples = sorted(set(triples), key=lambda t: (t.head.sort_key, t.relation.value, t.tail.sort_key))
    return CweCatalog(nodes=nodes, triples=triples, version=root.get("Version", ""))


def parse_view_csv(data: bytes) -> list[EntityId]:
    """Read the CWE ids of a MITRE CSV view export (CWE-1003, Top-25).

    Returns:
        list: Ids in file order, duplicates removed.
    """
    reader = csv.DictReader(io.StringIO(_decode_text(data)))
    column = next((c for c in ("CWE-ID", "CWE_ID", "ID") if c in (reader.fieldnames or [])), None)
    if column is None:
        raise MalformedDocumentError("CSV view export has no CWE-ID column", offset=0)
    ids = []
    for row in reader:
        value = (row.get(column) or "").strip()
        if value:
            ids.append(EntityId.cwe(value))
    return list(dict.fromkeys(ids))


# -- exploits ------------------------------------------------------------------


def _kev_rows(data: bytes) -> list[dict]:
    if data.lstrip()[:1] == b"{":
        document = _load_json(data)
        if not isinstance(document, dict) or "vulnerabilities" not in document:
            raise MalformedDocumentError("KEV JSON has no 'vulnerabilities' list", offset=0)
        return document["vulnerabilities"]
    reader = csv.DictReader(io.StringIO(_decode_text(data)))
    if "cveID" not in (reader.fieldnames or []):
        raise MalformedDocumentError("KEV CSV has no cveID column", offset=0)
    return list(reader)


def parse_exploits(kev: bytes | None = None, exploitdb: bytes | None = None) -> list[ExploitEvent]:
    """Merge KEV and Exploit-DB entries into exploit events.

    Only verified Exploit-DB rows are kept. Duplicates per (cve, source) keep the
    earliest date.

    Args:
        kev: CISA KEV catalog as JSON or CSV.
        exploitdb: Exploit-DB ``files_exploits.csv``.

    Returns:
        list: Events sorted by (cve, source).
    """
    earliest: dict[tuple[EntityId, ExploitSource], ExploitEvent] = {}

    def keep(event: ExploitEvent):
        current = earliest.get((event.cve, event.source))
        if current is None or event.exploit_date < current.exploit_date:
            earliest[(event.cve, event.source)] = event

    if kev:
        for position, row in enumerate(_kev_rows(kev)):
            try:
                keep(ExploitEvent(EntityId.cve(row["cveID"].strip()), ExploitSource.KEV, _parse_date(row["dateAdded"])))
            except (KeyError, TypeError, ValueError, AttributeError, CweRemapError) as exc:
                logger.warning("skipping KEV row #%d: %s", position, exc)

    if exploitdb:
        reader = csv.DictReader(io.StringIO(_decode_text(exploitdb)))
        if not {"codes", "verified", "date_published"} <= set(reader.fieldnames or []):
            raise MalformedDocumentError("Exploit-DB CSV lacks codes/verified/date_published", offset=0)
        for position, row in enumerate(reader):
            if (row.get("verified") or "").strip() != "1":
                continue
            try:
                published = _parse_date(row["date_published"])
                for code in re.findall(r"CVE-\d{4}-\d{4,}", row.get("codes") or ""):
                    keep(ExploitEvent(EntityId.cve(code), ExploitSource.EXPLOIT_DB, published))
            except (ValueError, CweRemapError) as exc:
                logger.warning("skipping Exploit-DB row #%d: %s", position, exc)

    return sorted(earliest.values(), key=lambda e: (e.cve.sort_key, e.source.value))
