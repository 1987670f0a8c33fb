"""
Remapping of invalid CVE-CWE mappings.

Find the CVEs mapped to Prohibited or Discouraged CWEs, score every candidate
triple (cve, MatchingCWE, w) with the embedding, rank candidates by score, and
optionally replace each invalid edge with the top-N predictions.
"""

from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Mapping, NamedTuple, Sequence

from tqdm import tqdm

from .candidates import CandidateSet, CandidateStrategy, build_candidates
from .embed import EmbeddingModel, score_tails
from .errors import ConfigError
from .kg import EntityId, KnowledgeGraph, MappingStatus, RelationKind, Triple
from .logs import get_logger
from .parsers import ChangeEvent

logger = get_logger(__name__)

INVALID_STATUSES = (MappingStatus.PROHIBITED, MappingStatus.DISCOURAGED)


class RankedCandidate(NamedTuple):
    cwe: EntityId
    score: float
    rank: int


@dataclass
class RemapCase:
    """One invalid (CVE, old CWE) mapping with its candidates and ranking.

    ``predictions`` stays None until the case is ranked; a ranked case with an
    empty candidate set has an empty prediction list.
    """

    cve: EntityId
    old_cwe: EntityId
    status: MappingStatus | None = None
    truth: frozenset[EntityId] | None = None
    candidate_set: CandidateSet | None = None
    predictions: list[RankedCandidate] | None = None
    diagnostics: list[str] = field(default_factory=list)

    @property
    def ranked(self) -> bool:
        return self.predictions is not None

    def ranked_cwes(self) -> list[EntityId]:
        return [p.cwe for p in self.predictions or []]

    def top(self, n: int) -> list[EntityId]:
        return self.ranked_cwes()[:n]


def determine_invalid(kg: KnowledgeGraph, status: MappingStatus | None = None) -> list[RemapCase]:
    """One case per MatchingCWE edge into a Prohibited or Discouraged CWE.

    Placeholder and uncatalogued CWEs are not part of either population.

    Args:
        kg: Frozen graph with the CWE catalog.
        status: Restrict to one population; both when None.
    """
    wanted = (status,) if status is not None else INVALID_STATUSES
    cases = []
    for triple in kg.triples(relation=RelationKind.MATCHING_CWE):
        node = kg.cwe_nodes.get(triple.tail)
        if node is None or node.is_placeholder or node.status not in wanted:
            continue
        cases.append(RemapCase(cve=triple.head, old_cwe=triple.tail, status=node.status))
    return cases


def remap_history(events: Iterable[ChangeEvent], kg: KnowledgeGraph, before: date) -> list[RemapCase]:
    """Historical remaps away from invalid CWEs that happened before ``before``.

    Each event yields one labelled case per removed invalid CWE, with the
    Allowed CWEs it added as truth.
    """
    cases = []
    for event in events:
        if event.timestamp.date() >= before:
            continue
        truth = frozenset(c for c in event.added_cwes if kg.status_of(c) is MappingStatus.ALLOWED)
        if not truth:
            continue
        for old in event.removed_cwes:
            node = kg.cwe_nodes.get(old)
            if node is None or node.is_placeholder or node.status not in INVALID_STATUSES:
                continue
            cases.append(RemapCase(cve=event.cve, old_cwe=old, status=node.status, truth=truth))
    return cases


def attach_candidates(
    kg: KnowledgeGraph,
    model: EmbeddingModel | None,
    cases: Iterable[RemapCase],
    strategy: CandidateStrategy | str,
    top25: Sequence[EntityId] = (),
    threshold: int = 10,
    tailored: Mapping[EntityId, CandidateStrategy] | None = None,
) -> list[RemapCase]:
    return [
        replace(case, candidate_set=build_candidates(kg, model, case, strategy, top25, threshold, tailored))
        for case in cases
    ]


def rank_case(model: EmbeddingModel, case: RemapCase) -> RemapCase:
    """Score the candidates of one case and sort them by (score desc, id asc).

    Candidates without an embedding are dropped from the candidate set with a
    diagnostic. A case whose CVE or old CWE has no embedding is returned
    unranked.
    """
    diagnostics = list(case.diagnostics)
    if case.candidate_set is None:
        diagnostics.append("no candidate set")
        return replace(case, predictions=None, diagnostics=diagnostics)
    for entity, what in ((case.cve, "CVE"), (case.old_cwe, "old CWE")):
        if not model.knows(entity):
            logger.warning("%s: %s %s is unknown to the model, left unranked", case.cve, what, entity)
            diagnostics.append(f"{what} {entity} has no embedding")
            return replace(case, predictions=None, diagnostics=diagnostics)

    candidate_set = case.candidate_set
    known = [c for c in candidate_set.cwes if model.knows(c)]
    if len(known) != len(candidate_set.cwes):
        missing = [c.key for c in candidate_set.cwes if not model.knows(c)]
        note = f"dropped candidates without embedding: {', '.join(missing)}"
        diagnostics.append(note)
        candidate_set = replace(candidate_set, cwes=tuple(known), diagnostics=candidate_set.diagnostics + (note,))

    scores = score_tails(model, case.cve, RelationKind.MATCHING_CWE, known) if known else []
    order = sorted(zip(known, (float(s) for s in scores)), key=lambda item: (-item[1], item[0].sort_key))
    predictions = [RankedCandidate(cwe, value, rank) for rank, (cwe, value) in enumerate(order, start=1)]
    return replace(case, candidate_set=candidate_set, predictions=predictions, diagnostics=diagnostics)


def rank_cases(
    model: EmbeddingModel,
    cases: Sequence[RemapCase],
    executor: Executor | None = None,
    progress: bool = False,
) -> list[RemapCase]:
    """Rank every case, in input order; scoring may run on ``executor``."""
    if executor is None:
        ranked = (rank_case(model, case) for case in cases)
    else:
        ranked = executor.map(lambda case: rank_case(model, case), cases)
    return list(tqdm(ranked, total=len(cases), desc="Ranking", unit="case", disable=not progress))


def fix_v2w(
    kg: KnowledgeGraph,
    model: EmbeddingModel,
    cases: Sequence[RemapCase],
    strategy: CandidateStrategy | str,
    top25: Sequence[EntityId] = (),
    threshold: int = 10,
    tailored: Mapping[EntityId, CandidateStrategy] | None = None,
    executor: Executor | None = None,
) -> list[RemapCase]:
    """Build candidates for each case and rank them with the model."""
    with_candidates = attach_candidates(kg, model, cases, strategy, top25, threshold, tailored)
    ranked = rank_cases(model, with_candidates, executor)
    unranked = sum(1 for case in ranked if not case.ranked)
    if unranked:
        logger.warning("%d of %d cases could not be ranked", unranked, len(ranked))
    return ranked


def _check_top_n(top_n: int) -> None:
    if top_n not in (1, 2, 3):
        raise ConfigError(f"top_n must be 1, 2 or 3, got {top_n}", top_n=top_n)


def fix_triples(cases: Iterable[RemapCase], top_n: int) -> set[Triple]:
    """MatchingCWE triples that ``apply_fixes`` inserts."""
    _check_top_n(top_n)
    return {
        Triple(case.cve, RelationKind.MATCHING_CWE, cwe)
        for case in cases
        if case.ranked
        for cwe in case.top(top_n)
    }


def apply_fixes(kg: KnowledgeGraph, ranked_cases: Iterable[RemapCase], top_n: int) -> KnowledgeGraph:
    """Replace each invalid edge by edges to the case's top-N predictions.

    Unranked cases and cases with no predictions are skipped with a warning.

    Returns:
        KnowledgeGraph: A new frozen graph; ``kg`` is untouched.
    """
    _check_top_n(top_n)
    fixed = kg.copy()
    applied = 0
    for case in ranked_cases:
        if not case.predictions:
            logger.warning("%s: no ranking for %s, fix skipped", case.cve, case.old_cwe)
            continue
        fixed.remove_triple(Triple(case.cve, RelationKind.MATCHING_CWE, case.old_cwe))
        for cwe in case.top(top_n):
            fixed.add_triple(Triple(case.cve, RelationKind.MATCHING_CWE, cwe))
        applied += 1
    logger.info("applied top-%d fixes to %d cases", top_n, applied)
    return fixed.freeze()
