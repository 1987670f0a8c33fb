"""
Knowledge graph core.

Entities are CVEs, CWEs and CPEs; facts are (head, relation, tail) triples held
in an indexed triple store. CWE nodes carry their catalog metadata (kind,
abstraction, mapping status, CWE-1003 membership) and the store answers the
hierarchy questions the rest of the pipeline asks: hop distances, branch roots,
in-view descendants and category members.

The graph is built by a single writer and then frozen; a frozen graph is
immutable and may be shared by any number of readers.
"""

import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from functools import total_ordering
from typing import IO, Iterable, Iterator

import networkx as nx

from .errors import (
    CweKindError,
    GraphFrozenError,
    MalformedDocumentError,
    TripleValidationError,
    UnknownCweError,
)
from .logs import get_logger

logger = get_logger(__name__)


class Namespace(str, Enum):
    CVE = "CVE"
    CWE = "CWE"
    CPE = "CPE"


# Sentinel CWE keys for the NVD placeholder tokens.
CWE_OTHER = "CWE-Other"
CWE_NOINFO = "CWE-noinfo"
PLACEHOLDER_TOKENS = {"NVD-CWE-Other": CWE_OTHER, "NVD-CWE-noinfo": CWE_NOINFO}

_KEY_PATTERNS = {
    Namespace.CVE: re.compile(r"^CVE-\d{4}-\d{4,}$"),
    Namespace.CWE: re.compile(r"^CWE-(?:[1-9]\d*|Other|noinfo)$"),
    # cpe:2.3:<part> followed by ten more colon-separated components, "\:" escapes a colon
    Namespace.CPE: re.compile(r"^cpe:2\.3:[aho*\-](?::(?:[^:\\]|\\.)*){10}$"),
}
_NAMESPACE_ORDER = {Namespace.CVE: 0, Namespace.CWE: 1, Namespace.CPE: 2}
_PLACEHOLDER_RANK = 10**12


@total_ordering
@dataclass(frozen=True, slots=True)
class EntityId:
    """Canonical identifier of a CVE, CWE or CPE entity."""

    namespace: Namespace
    key: str

    def __post_init__(self):
        if not isinstance(self.namespace, Namespace):
            object.__setattr__(self, "namespace", Namespace(self.namespace))
        if not _KEY_PATTERNS[self.namespace].match(self.key):
            raise TripleValidationError(
                f"{self.key!r} is not a valid {self.namespace.value} identifier",
                entity=self.key,
            )

    @classmethod
    def parse(cls, raw: str) -> "EntityId":
        """Build an id from its string form, inferring the namespace.

        NVD placeholder tokens ("NVD-CWE-Other", "NVD-CWE-noinfo") map to the
        sentinel CWE entities.
        """
        raw = raw.strip()
        if raw in PLACEHOLDER_TOKENS:
            return cls(Namespace.CWE, PLACEHOLDER_TOKENS[raw])
        if raw.startswith("cpe:"):
            return cls(Namespace.CPE, raw)
        prefix = raw.split("-", 1)[0].upper()
        if prefix not in Namespace.__members__:
            raise TripleValidationError(f"cannot infer namespace of {raw!r}", entity=raw)
        return cls(Namespace(prefix), raw)

    @classmethod
    def cwe(cls, value: int | str) -> "EntityId":
        """CWE id from a number (``79``) or a key (``"CWE-79"``)."""
        if isinstance(value, int) or str(value).isdigit():
            return cls(Namespace.CWE, f"CWE-{int(value)}")
        return cls.parse(str(value))

    @classmethod
    def cve(cls, key: str) -> "EntityId":
        return cls(Namespace.CVE, key)

    @classmethod
    def cpe(cls, uri: str) -> "EntityId":
        return cls(Namespace.CPE, uri)

    @property
    def is_placeholder(self) -> bool:
        return self.namespace is Namespace.CWE and self.key in (CWE_OTHER, CWE_NOINFO)

    @property
    def sort_key(self) -> tuple:
        # numeric ordering inside CVE/CWE, so CWE-79 sorts before CWE-119
        if self.namespace is Namespace.CPE:
            numbers: tuple = ()
        elif self.is_placeholder:
            numbers = (_PLACEHOLDER_RANK,)
        else:
            numbers = tuple(int(n) for n in re.findall(r"\d+", self.key))
        return (_NAMESPACE_ORDER[self.namespace], numbers, self.key)

    def __lt__(self, other: "EntityId") -> bool:
        if not isinstance(other, EntityId):
            return NotImplemented
        return self.sort_key < other.sort_key

    def __str__(self) -> str:
        return self.key


class RelationKind(str, Enum):
    MATCHING_CWE = "MatchingCWE"
    MATCHING_CPE = "MatchingCPE"
    CHILD_OF = "ChildOf"
    PARENT_OF = "ParentOf"
    MEMBER_OF = "MemberOf"
    HAS_MEMBER = "HasMember"
    RELATED_TO = "RelatedTo"

    @property
    def inverse(self) -> "RelationKind | None":
        return _INVERSES.get(self)

    @property
    def is_cwe_link(self) -> bool:
        return self not in (RelationKind.MATCHING_CWE, RelationKind.MATCHING_CPE)


_INVERSES = {
    RelationKind.CHILD_OF: RelationKind.PARENT_OF,
    RelationKind.PARENT_OF: RelationKind.CHILD_OF,
    RelationKind.MEMBER_OF: RelationKind.HAS_MEMBER,
    RelationKind.HAS_MEMBER: RelationKind.MEMBER_OF,
}
RELATION_ORDER = list(RelationKind)


@dataclass(frozen=True, slots=True)
class Triple:
    head: EntityId
    relation: RelationKind
    tail: EntityId

    def validate(self) -> "Triple":
        """Check the namespace rules and return the triple unchanged."""
        if self.relation is RelationKind.MATCHING_CWE:
            expected = (Namespace.CVE, Namespace.CWE)
        elif self.relation is RelationKind.MATCHING_CPE:
            expected = (Namespace.CVE, Namespace.CPE)
        else:
            expected = (Namespace.CWE, Namespace.CWE)
        if (self.head.namespace, self.tail.namespace) != expected:
            raise TripleValidationError(
                f"{self.relation.value} needs {expected[0].value} head and "
                f"{expected[1].value} tail, got ({self.head}, {self.tail})",
                triple=self.to_line(),
            )
        return self

    def inverse(self) -> "Triple | None":
        inverse = self.relation.inverse
        return Triple(self.tail, inverse, self.head) if inverse else None

    def to_line(self) -> str:
        return f"{self.head.key}\t{self.relation.value}\t{self.tail.key}"

    @classmethod
    def from_line(cls, line: str) -> "Triple":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise TripleValidationError(f"expected 3 tab-separated fields, got {len(parts)}", line=line)
        head, relation, tail = parts
        try:
            kind = RelationKind(relation)
        except ValueError:
            raise TripleValidationError(f"unknown relation {relation!r}", line=line) from None
        return cls(EntityId.parse(head), kind, EntityId.parse(tail)).validate()


class CweKind(str, Enum):
    WEAKNESS = "Weakness"
    CATEGORY = "Category"
    VIEW = "View"
    DEPRECATED = "Deprecated"
    PLACEHOLDER = "Placeholder"


class Abstraction(str, Enum):
    PILLAR = "Pillar"
    CLASS = "Class"
    BASE = "Base"
    VARIANT = "Variant"


class MappingStatus(str, Enum):
    ALLOWED = "Allowed"
    DISCOURAGED = "Discouraged"
    PROHIBITED = "Prohibited"


@dataclass(frozen=True, slots=True)
class CweNode:
    """Catalog entry of one CWE.

    Weaknesses with no abstraction in the source default to Base.
    """

    id: EntityId
    kind: CweKind
    status: MappingStatus
    abstraction: Abstraction | None = None
    in_view_1003: bool = False
    name: str = ""

    def __post_init__(self):
        if self.id.namespace is not Namespace.CWE:
            raise TripleValidationError(f"{self.id} is not a CWE id", entity=self.id.key)
        if self.kind is CweKind.WEAKNESS:
            if self.abstraction is None:
                object.__setattr__(self, "abstraction", Abstraction.BASE)
        elif self.abstraction is not None:
            raise TripleValidationError(
                f"{self.id}: only weaknesses carry an abstraction level", entity=self.id.key
            )
        if self.kind is not CweKind.WEAKNESS and self.status is not MappingStatus.PROHIBITED:
            raise TripleValidationError(
                f"{self.id}: a {self.kind.value} entry must be Prohibited", entity=self.id.key
            )
        if self.in_view_1003 and self.status is MappingStatus.PROHIBITED:
            raise TripleValidationError(
                f"{self.id}: Prohibited entries cannot be in the CWE-1003 view", entity=self.id.key
            )

    @property
    def is_weakness(self) -> bool:
        return self.kind is CweKind.WEAKNESS

    @property
    def is_grouping(self) -> bool:
        return self.kind in (CweKind.CATEGORY, CweKind.VIEW)

    @property
    def is_placeholder(self) -> bool:
        return self.kind is CweKind.PLACEHOLDER

    @property
    def is_candidate(self) -> bool:
        """Allowed and part of the CWE-1003 view."""
        return self.in_view_1003 and self.status is MappingStatus.ALLOWED


def placeholder_nodes() -> list[CweNode]:
    return [
        CweNode(EntityId.cwe(CWE_OTHER), CweKind.PLACEHOLDER, MappingStatus.PROHIBITED, name="Other"),
        CweNode(EntityId.cwe(CWE_NOINFO), CweKind.PLACEHOLDER, MappingStatus.PROHIBITED, name="Insufficient Information"),
    ]


class KnowledgeGraph:
    """Indexed triple store over CVE/CWE/CPE entities with the CWE ontology overlay.

    Triples are indexed by head, tail, (head, relation) and (relation, tail).
    Inserting a ChildOf/ParentOf or MemberOf/HasMember triple stores its inverse
    too, so either direction is queryable.
    """

    def __init__(self, triples: Iterable[Triple] = (), nodes: Iterable[CweNode] = ()):
        self._index: dict[EntityId, int] = {}
        self._entities: list[EntityId] = []
        self._triples: set[Triple] = set()
        self._by_head: dict[EntityId, set[Triple]] = defaultdict(set)
        self._by_tail: dict[EntityId, set[Triple]] = defaultdict(set)
        self._by_head_rel: dict[tuple[EntityId, RelationKind], set[Triple]] = defaultdict(set)
        self._by_rel_tail: dict[tuple[RelationKind, EntityId], set[Triple]] = defaultdict(set)
        self.cwe_nodes: dict[EntityId, CweNode] = {}
        self._frozen = False
        self._hierarchy: nx.DiGraph | None = None
        for node in nodes:
            self.add_node(node)
        for triple in triples:
            self.add_triple(triple)

    # -- building -----------------------------------------------------------

    def _check_mutable(self):
        if self._frozen:
            raise GraphFrozenError("the knowledge graph is frozen")

    def intern(self, entity: EntityId) -> int:
        """Return the dense index of an entity, assigning the next one if new."""
        index = self._index.get(entity)
        if index is None:
            self._check_mutable()
            index = len(self._entities)
            self._index[entity] = index
            self._entities.append(entity)
        return index

    def add_node(self, node: CweNode) -> "KnowledgeGraph":
        self._check_mutable()
        self.intern(node.id)
        self.cwe_nodes[node.id] = node
        self._hierarchy = None
        return self

    def add_triple(self, triple: Triple) -> "KnowledgeGraph":
        """Insert a triple (and its inverse for hierarchy/membership links).

        Duplicates are ignored.

        Raises:
            TripleValidationError: head/tail namespaces do not fit the relation.
            GraphFrozenError: the graph has been frozen.
        """
        triple.validate()
        self._check_mutable()
        self._insert(triple)
        inverse = triple.inverse()
        if inverse is not None:
            self._insert(inverse)
        if triple.relation.is_cwe_link:
            self._hierarchy = None
        return self

    def _insert(self, triple: Triple):
        if triple in self._triples:
            return
        self.intern(triple.head)
        self.intern(triple.tail)
        self._triples.add(triple)
        self._by_head[triple.head].add(triple)
        self._by_tail[triple.tail].add(triple)
        self._by_head_rel[(triple.head, triple.relation)].add(triple)
        self._by_rel_tail[(triple.relation, triple.tail)].add(triple)

    def remove_triple(self, triple: Triple) -> "KnowledgeGraph":
        """Remove a triple (and its inverse). Interned indices are kept."""
        self._check_mutable()
        for item in (triple, triple.inverse()):
            if item is None or item not in self._triples:
                continue
            self._triples.discard(item)
            self._by_head[item.head].discard(item)
            self._by_tail[item.tail].discard(item)
            self._by_head_rel[(item.head, item.relation)].discard(item)
            self._by_rel_tail[(item.relation, item.tail)].discard(item)
        if triple.relation.is_cwe_link:
            self._hierarchy = None
        return self

    def freeze(self) -> "KnowledgeGraph":
        """Make the graph immutable; hierarchy caches are built eagerly."""
        if not self._frozen:
            self._hierarchy_graph()
            self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def copy(self) -> "KnowledgeGraph":
        """Unfrozen copy with the same entity indices, nodes and triples."""
        clone = KnowledgeGraph()
        for entity in self._entities:
            clone.intern(entity)
        clone.cwe_nodes = dict(self.cwe_nodes)
        for triple in self.iter_sorted():
            clone._insert(triple)
        return clone

    # -- lookups ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, triple: object) -> bool:
        return triple in self._triples

    def __iter__(self) -> Iterator[Triple]:
        return iter(self._triples)

    def iter_sorted(self) -> list[Triple]:
        return sorted(self._triples, key=lambda t: (t.head.sort_key, RELATION_ORDER.index(t.relation), t.tail.sort_key))

    @property
    def entities(self) -> list[EntityId]:
        """Entities in interning order (index i is entity i)."""
        return list(self._entities)

    def index_of(self, entity: EntityId) -> int | None:
        return self._index.get(entity)

    def has_entity(self, entity: EntityId) -> bool:
        return entity in self._index

    def relations(self) -> list[RelationKind]:
        present = {key[1] for key, triples in self._by_head_rel.items() if triples}
        return [r for r in RELATION_ORDER if r in present]

    def triples(
        self,
        head: EntityId | None = None,
        relation: RelationKind | None = None,
        tail: EntityId | None = None,
    ) -> list[Triple]:
        """Triples matching the given pattern, in sorted order.

        Picks the narrowest index for the bound positions.
        """
        if head is not None and relation is not None:
            found: Iterable[Triple] = self._by_head_rel.get((head, relation), ())
        elif relation is not None and tail is not None:
            found = self._by_rel_tail.get((relation, tail), ())
        elif head is not None:
            found = self._by_head.get(head, ())
        elif tail is not None:
            found = self._by_tail.get(tail, ())
        else:
            found = self._triples
        matches = [
            t
            for t in found
            if (head is None or t.head == head)
            and (relation is None or t.relation is relation)
            and (tail is None or t.tail == tail)
        ]
        return sorted(matches, key=lambda t: (t.head.sort_key, RELATION_ORDER.index(t.relation), t.tail.sort_key))

    def tails(self, head: EntityId, relation: RelationKind) -> set[EntityId]:
        return {t.tail for t in self._by_head_rel.get((head, relation), ())}

    def heads(self, relation: RelationKind, tail: EntityId) -> set[EntityId]:
        return {t.head for t in self._by_rel_tail.get((relation, tail), ())}

    def mappings(self, cve: EntityId) -> set[EntityId]:
        """CWEs a CVE is mapped to."""
        return self.tails(cve, RelationKind.MATCHING_CWE)

    def cves(self) -> list[EntityId]:
        return sorted(e for e in self._entities if e.namespace is Namespace.CVE and self._by_head.get(e))

    def node(self, cwe: EntityId) -> CweNode:
        try:
            return self.cwe_nodes[cwe]
        except KeyError:
            raise UnknownCweError(f"{cwe} is not in the CWE catalog", entity=str(cwe)) from None

    def status_of(self, cwe: EntityId) -> MappingStatus | None:
        node = self.cwe_nodes.get(cwe)
        return node.status if node else None

    def view_1003(self) -> list[EntityId]:
        """All Allowed CWEs of the CWE-1003 view, ascending."""
        return sorted(cwe for cwe, node in self.cwe_nodes.items() if node.is_candidate)

    # -- CWE hierarchy ------------------------------------------------------

    def _hierarchy_graph(self) -> nx.DiGraph:
        # child -> parent edges over ChildOf only; MemberOf/RelatedTo never count
        if self._hierarchy is None:
            graph = nx.DiGraph()
            graph.add_nodes_from(self.cwe_nodes)
            for (relation, parent), triples in self._by_rel_tail.items():
                if relation is not RelationKind.CHILD_OF:
                    continue
                for triple in triples:
                    graph.add_edge(triple.head, parent)
            self._hierarchy = graph
        return self._hierarchy

    def parents(self, cwe: EntityId) -> set[EntityId]:
        self.node(cwe)
        return self.tails(cwe, RelationKind.CHILD_OF)

    def children(self, cwe: EntityId) -> set[EntityId]:
        self.node(cwe)
        return self.tails(cwe, RelationKind.PARENT_OF)

    def ancestors(self, cwe: EntityId) -> set[EntityId]:
        self.node(cwe)
        return set(nx.descendants(self._hierarchy_graph(), cwe))

    def descendants(self, cwe: EntityId) -> set[EntityId]:
        self.node(cwe)
        return set(nx.ancestors(self._hierarchy_graph(), cwe))

    def is_direct_neighbor(self, a: EntityId, b: EntityId) -> bool:
        """True when a is a parent or a child of b."""
        return b in self.parents(a) or b in self.children(a)

    def hop_distance(self, a: EntityId, b: EntityId) -> int | None:
        """Shortest path length between two CWEs over ChildOf/ParentOf edges.

        Direction is ignored. Returns None when the CWEs are not connected.

        Raises:
            UnknownCweError: either id is not in the catalog.
        """
        self.node(a)
        self.node(b)
        if a == b:
            return 0
        undirected = self._hierarchy_graph().to_undirected(as_view=True)
        try:
            return nx.shortest_path_length(undirected, a, b)
        except nx.NetworkXNoPath:
            return None

    def branch_roots(self, cwe: EntityId) -> set[EntityId]:
        """Pillar-level ancestors of a weakness (itself included when it is a Pillar).

        Hierarchies without any Pillar fall back to their top-most ancestors.
        """
        lineage = self.ancestors(cwe) | {cwe}
        pillars = {
            w
            for w in lineage
            if (node := self.cwe_nodes.get(w)) is not None and node.abstraction is Abstraction.PILLAR
        }
        if pillars:
            return pillars
        graph = self._hierarchy_graph()
        return {w for w in lineage if graph.out_degree(w) == 0}

    def same_branch(self, a: EntityId, b: EntityId) -> bool:
        """True iff two weaknesses share at least one branch root.

        Raises:
            UnknownCweError: either id is not in the catalog.
            CweKindError: either node is not a weakness.
        """
        for cwe in (a, b):
            if not self.node(cwe).is_weakness:
                raise CweKindError(f"{cwe} is not a weakness", entity=str(cwe))
        if a == b:
            return True
        return bool(self.branch_roots(a) & self.branch_roots(b))

    def descendants_in_view(self, cwe: EntityId) -> set[EntityId]:
        """Transitive descendants of a CWE that belong to the CWE-1003 view."""
        return {
            d
            for d in self.descendants(cwe)
            if (node := self.cwe_nodes.get(d)) is not None and node.in_view_1003
        }

    def members_of(self, cwe: EntityId) -> set[EntityId]:
        """CWEs holding a MemberOf edge to a category or view.

        Raises:
            UnknownCweError: the id is not in the catalog.
            CweKindError: the node is not a category or view.
        """
        if not self.node(cwe).is_grouping:
            raise CweKindError(f"{cwe} is not a category or view", entity=str(cwe))
        return self.heads(RelationKind.MEMBER_OF, cwe)

    # -- persistence --------------------------------------------------------

    def dump_triples(self, stream: IO[bytes]) -> None:
        """Write all triples as sorted UTF-8 TSV lines with LF endings."""
        lines = sorted(t.to_line() for t in self._triples)
        stream.write("".join(line + "\n" for line in lines).encode("utf-8"))

    def dump_entities(self, stream: IO[bytes]) -> None:
        """Write the dense index mapping as ``index<TAB>key`` lines."""
        stream.write("".join(f"{i}\t{e.key}\n" for i, e in enumerate(self._entities)).encode("utf-8"))


def load_triples(
    stream: IO[bytes],
    nodes: Iterable[CweNode] = (),
    entities: IO[bytes] | None = None,
) -> KnowledgeGraph:
    """Rebuild a graph from a triple dump.

    Args:
        stream: TSV triple dump as written by ``dump_triples``.
        nodes: CWE catalog nodes to attach.
        entities: Optional entity dump; when given, indices are restored exactly.

    Raises:
        MalformedDocumentError: a line cannot be parsed; ``offset`` is its byte offset.
    """
    kg = KnowledgeGraph()
    if entities is not None:
        for line in entities.read().decode("utf-8").splitlines():
            if line:
                kg.intern(EntityId.parse(line.split("\t", 1)[1]))
    for node in nodes:
        kg.add_node(node)
    offset = 0
    for raw in stream.read().splitlines(keepends=True):
        line = raw.decode("utf-8").rstrip("\n")
        if line:
            try:
                kg.add_triple(Triple.from_line(line))
            except TripleValidationError as exc:
                raise MalformedDocumentError(f"bad triple line: {exc.message}", offset=offset) from exc
        offset += len(raw)
    return kg
