"""
Candidate sets: the Allowed CWEs an invalid mapping may be remapped to.

Every set is drawn from the Allowed entries of the CWE-1003 view. Which
strategy applies depends on the old CWE: hierarchy strategies (Descendants,
Family) for Discouraged weaknesses, membership strategies (Members,
MembersFnn) for categories and views, baselines (Cwe1003, Top25) for anything.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .config import canonical_strategy
from .embed import EmbeddingModel, nearest_neighbors
from .errors import ConfigError, StrategyMismatchError
from .kg import CweNode, EntityId, KnowledgeGraph, MappingStatus
from .logs import get_logger

if TYPE_CHECKING:
    from .remap import RemapCase

logger = get_logger(__name__)

DEFAULT_THRESHOLD = 10


class CandidateStrategy(str, Enum):
    CWE_1003 = "Cwe1003"
    TOP_25 = "Top25"
    DESCENDANTS = "Descendants"
    FAMILY = "Family"
    MEMBERS = "Members"
    MEMBERS_FNN = "MembersFnn"
    PER_CWE_TAILORED = "PerCweTailored"

    @classmethod
    def from_name(cls, name: "str | CandidateStrategy") -> "CandidateStrategy":
        if isinstance(name, cls):
            return name
        return cls(canonical_strategy(name))

    @property
    def is_baseline(self) -> bool:
        return self in (CandidateStrategy.CWE_1003, CandidateStrategy.TOP_25)


class FillSource(str, Enum):
    PARENT_EXPANSION = "ParentExpansion"
    FNN_FILL = "FnnFill"


# most specific first; also the tie-break order of the tailored vote
TAILORED_ORDER = (
    CandidateStrategy.DESCENDANTS,
    CandidateStrategy.MEMBERS,
    CandidateStrategy.TOP_25,
    CandidateStrategy.CWE_1003,
)


@dataclass(frozen=True)
class CandidateSet:
    """Candidate CWEs for one (CVE, old CWE) pair.

    ``applied`` is the strategy that produced ``cwes``; it differs from
    ``strategy`` only for PerCweTailored.
    """

    cve: EntityId
    old_cwe: EntityId
    strategy: CandidateStrategy
    cwes: tuple[EntityId, ...]
    fill_source: FillSource | None = None
    applied: CandidateStrategy | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.cwes

    def to_dict(self) -> dict:
        return {
            "cve": self.cve.key,
            "old_cwe": self.old_cwe.key,
            "strategy": self.strategy.value,
            "applied": (self.applied or self.strategy).value,
            "candidates": [c.key for c in self.cwes],
            "fill_source": self.fill_source.value if self.fill_source else None,
            "diagnostics": list(self.diagnostics),
        }


def check_strategy(node: CweNode, strategy: CandidateStrategy) -> None:
    """Raise StrategyMismatchError when ``strategy`` does not apply to the old CWE."""
    if strategy.is_baseline or strategy is CandidateStrategy.PER_CWE_TAILORED:
        return
    if strategy in (CandidateStrategy.DESCENDANTS, CandidateStrategy.FAMILY):
        if node.is_weakness and node.status is MappingStatus.DISCOURAGED:
            return
        need = "a Discouraged weakness"
    else:
        if node.is_grouping:
            return
        need = "a category or view"
    raise StrategyMismatchError(
        f"{strategy.value} needs {need}, {node.id} is a {node.status.value} {node.kind.value}",
        strategy=strategy.value,
        cwe=str(node.id),
    )


def default_strategy(node: CweNode) -> CandidateStrategy:
    if node.is_weakness and node.status is MappingStatus.DISCOURAGED:
        return CandidateStrategy.FAMILY
    if node.is_grouping:
        return CandidateStrategy.MEMBERS
    return CandidateStrategy.CWE_1003


def descendants_candidates(kg: KnowledgeGraph, old: EntityId, pool: set[EntityId]) -> set[EntityId]:
    return kg.descendants_in_view(old) & pool


def members_candidates(kg: KnowledgeGraph, old: EntityId, pool: set[EntityId]) -> set[EntityId]:
    """In-view Allowed members plus the in-view descendants of those members."""
    found = set()
    for member in kg.members_of(old):
        if member in pool:
            found.add(member)
            found |= kg.descendants_in_view(member) & pool
    return found


def build_candidates(
    kg: KnowledgeGraph,
    model: EmbeddingModel | None,
    case: "RemapCase",
    strategy: CandidateStrategy | str,
    top25: Sequence[EntityId] = (),
    threshold: int = DEFAULT_THRESHOLD,
    tailored: Mapping[EntityId, CandidateStrategy] | None = None,
) -> CandidateSet:
    """Build the candidate set of one case.

    Args:
        kg: Frozen training graph.
        model: Trained embedding; needed by MembersFnn only.
        case: Supplies the CVE and the old CWE.
        strategy: Strategy to apply.
        top25: The Top-25 list used by the Top25 baseline.
        threshold: Minimum size that triggers parent expansion (Family) or
            nearest-neighbour fill (MembersFnn).
        tailored: Old CWE to strategy table for PerCweTailored.

    Returns:
        CandidateSet: Members ascending by id, followed by FNN fill in
        distance order. An empty set carries a diagnostic.

    Raises:
        UnknownCweError: The old CWE is not in the catalog.
        StrategyMismatchError: The strategy does not apply to the old CWE.
        ConfigError: MembersFnn without a model.
    """
    strategy = CandidateStrategy.from_name(strategy)
    old = case.old_cwe
    node = kg.node(old)
    check_strategy(node, strategy)

    applied = strategy
    if strategy is CandidateStrategy.PER_CWE_TAILORED:
        applied = (tailored or {}).get(old) or default_strategy(node)
        try:
            check_strategy(node, applied)
        except StrategyMismatchError:
            applied = default_strategy(node)

    pool = set(kg.view_1003())
    pool.discard(old)
    diagnostics: list[str] = []
    fill: list[EntityId] = []
    fill_source = None

    if applied is CandidateStrategy.CWE_1003:
        found = set(pool)
    elif applied is CandidateStrategy.TOP_25:
        found = {c for c in top25 if c in pool}
        if not top25:
            diagnostics.append("no Top-25 list configured")
    elif applied is CandidateStrategy.DESCENDANTS:
        found = descendants_candidates(kg, old, pool)
    elif applied is CandidateStrategy.FAMILY:
        found = descendants_candidates(kg, old, pool)
        if len(found) < threshold:
            expanded = set(found)
            for parent in sorted(kg.parents(old)):
                expanded |= kg.descendants_in_view(parent) & pool
            if expanded != found:
                fill_source = FillSource.PARENT_EXPANSION
            found = expanded
    else:
        found = members_candidates(kg, old, pool)
        if applied is CandidateStrategy.MEMBERS_FNN and len(found) < threshold:
            if model is None:
                raise ConfigError("MembersFnn needs a trained model", strategy=applied.value)
            if model.knows(old):
                remaining = {c for c in pool - found if model.knows(c)}
                fill = nearest_neighbors(model, old, remaining, threshold - len(found))
                if fill:
                    fill_source = FillSource.FNN_FILL
            else:
                diagnostics.append(f"{old} has no embedding, nearest-neighbour fill skipped")

    cwes = tuple(sorted(found)) + tuple(fill)
    if not cwes:
        diagnostics.append("empty candidate set")
    return CandidateSet(
        cve=case.cve,
        old_cwe=old,
        strategy=strategy,
        cwes=cwes,
        fill_source=fill_source,
        applied=applied,
        diagnostics=tuple(diagnostics),
    )


def tailored_strategy_table(
    history: Iterable["RemapCase"],
    kg: KnowledgeGraph,
    top25: Sequence[EntityId] = (),
) -> dict[EntityId, CandidateStrategy]:
    """Pick, per old CWE, the strategy most historical remaps would have been found by.

    Each historical case casts exactly one vote: for the first strategy in
    the order Descendants, Members, Top25, Cwe1003 that applies to its old CWE
    and whose set contains one of its truth labels. A case is not counted for
    the broader sets that also contain its label, so Cwe1003 wins only when
    most remaps fell outside every narrower set. The majority wins; ties go
    to the more specific strategy. Old CWEs with no vote are left out and
    fall back to the default.
    """
    pool = set(kg.view_1003())
    top = {c for c in top25 if c in pool}
    votes: dict[EntityId, Counter] = defaultdict(Counter)
    for case in history:
        node = kg.cwe_nodes.get(case.old_cwe)
        if node is None or not case.truth:
            continue
        sets = {
            CandidateStrategy.TOP_25: top,
            CandidateStrategy.CWE_1003: pool,
        }
        if node.is_weakness and node.status is MappingStatus.DISCOURAGED:
            sets[CandidateStrategy.DESCENDANTS] = descendants_candidates(kg, case.old_cwe, pool)
        if node.is_grouping:
            sets[CandidateStrategy.MEMBERS] = members_candidates(kg, case.old_cwe, pool)
        for strategy in TAILORED_ORDER:
            if strategy in sets and sets[strategy] & case.truth:
                votes[case.old_cwe][strategy] += 1
                break

    table = {}
    for old, counter in votes.items():
        table[old] = min(counter, key=lambda s: (-counter[s], TAILORED_ORDER.index(s)))
    logger.info("tailored strategies chosen for %d old CWEs", len(table))
    return dict(sorted(table.items()))
