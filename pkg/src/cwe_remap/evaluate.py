"""
Evaluation of ranked remaps and of graph completion.

Ranked cases are scored against their truth labels with three match levels:
the truth itself (exact), a parent or child of a truth (fine), and a CWE that
shares a branch root with a truth (coarse). Graph completion is measured with
filtered tail ranking, MR, MRR and Hits@N.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Callable, Iterable, Literal, Mapping, Sequence

import numpy as np
from tqdm import tqdm

from .config import TrainingConfig
from .embed import EmbeddingModel, score_tails, train
from .errors import EmptyInputError, LeakageError, UnlabeledCaseError
from .kg import EntityId, KnowledgeGraph, MappingStatus, RelationKind, Triple
from .logs import get_logger
from .parsers import ChangeEvent, ExploitEvent
from .remap import RemapCase, apply_fixes, fix_triples

logger = get_logger(__name__)

DEFAULT_CUTOFF = 10
DEFAULT_HITS = (1, 3, 5, 10, 20)
RANK_BUCKETS = ("1", "2-5", "6-10", "10+")

UnfoundPolicy = Literal["penalty", "exclude"]
WorldMode = Literal["open", "closed"]


class MatchKind(str, Enum):
    EXACT = "Exact"
    FINE = "Fine"
    COARSE = "Coarse"
    NONE = "None"


MATCH_ORDER = (MatchKind.EXACT, MatchKind.FINE, MatchKind.COARSE)


@dataclass(frozen=True)
class MatchOutcome:
    """Best match of one ranked case within the cutoff.

    ``exact_rank`` is the rank of the first truth in the full ranking (None
    when no truth was a candidate); it feeds MR/MRR.
    """

    case: RemapCase
    kind: MatchKind
    rank: int | None
    exact_rank: int | None = None

    def __post_init__(self):
        if (self.kind is MatchKind.NONE) != (self.rank is None):
            raise ValueError(f"kind {self.kind.value} and rank {self.rank} disagree")

    @property
    def candidate_count(self) -> int:
        return len(self.case.predictions or [])


@dataclass
class RankReport:
    """MR, MRR and Hits@N over a list of ranks.

    ``histograms`` maps a match kind to per-rank counts (rank 1..cutoff) when
    the report comes from classified cases.
    """

    mr: float
    mrr: float
    hits: dict[int, float]
    count: int
    unfound: int = 0
    policy: UnfoundPolicy = "penalty"
    filtered: bool | None = None
    histograms: dict[str, list[int]] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "MR": self.mr,
            "MRR": self.mrr,
            "hits": {str(n): v for n, v in sorted(self.hits.items())},
            "count": self.count,
            "unfound": self.unfound,
            "unfound_policy": self.policy,
            "filtered": self.filtered,
            "histograms": self.histograms,
            "diagnostics": self.diagnostics,
        }


# -- match classification -------------------------------------------------------


def _require_truth(case: RemapCase) -> frozenset[EntityId]:
    if not case.truth:
        raise UnlabeledCaseError(f"{case.cve}/{case.old_cwe} has no truth label", cve=str(case.cve))
    if case.predictions is None:
        raise UnlabeledCaseError(f"{case.cve}/{case.old_cwe} is not ranked", cve=str(case.cve))
    return case.truth


def _is_fine(kg: KnowledgeGraph, predicted: EntityId, truth: EntityId) -> bool:
    if predicted not in kg.cwe_nodes or truth not in kg.cwe_nodes:
        return False
    return kg.is_direct_neighbor(predicted, truth)


def _is_coarse(kg: KnowledgeGraph, predicted: EntityId, truth: EntityId) -> bool:
    a, b = kg.cwe_nodes.get(predicted), kg.cwe_nodes.get(truth)
    if a is None or b is None or not (a.is_weakness and b.is_weakness):
        return False
    return kg.same_branch(predicted, truth)


def match_ranks(case: RemapCase, kg: KnowledgeGraph, cutoff: int | None = None) -> dict[MatchKind, int | None]:
    """First rank at which each match kind occurs.

    Every kind is scanned independently, so an exact match at rank 4 can sit
    next to a fine match at rank 2 and a coarse match at rank 1.

    Args:
        case: Ranked case with truth labels.
        kg: Graph holding the CWE hierarchy.
        cutoff: Only look at the first ``cutoff`` predictions; all when None.

    Raises:
        UnlabeledCaseError: The case has no truth or no ranking.
    """
    truth = _require_truth(case)
    ranked = case.ranked_cwes()
    if cutoff is not None:
        ranked = ranked[:cutoff]
    tests: dict[MatchKind, Callable[[EntityId], bool]] = {
        MatchKind.EXACT: lambda w: w in truth,
        MatchKind.FINE: lambda w: any(_is_fine(kg, w, t) for t in truth),
        MatchKind.COARSE: lambda w: any(_is_coarse(kg, w, t) for t in truth),
    }
    return {
        kind: next((rank for rank, cwe in enumerate(ranked, start=1) if test(cwe)), None)
        for kind, test in tests.items()
    }


def classify_match(case: RemapCase, kg: KnowledgeGraph, cutoff: int = DEFAULT_CUTOFF) -> MatchOutcome:
    """Classify a ranked case: exact beats fine beats coarse within the cutoff."""
    within = match_ranks(case, kg, cutoff)
    exact_rank = next((rank for rank, cwe in enumerate(case.ranked_cwes(), start=1) if cwe in case.truth), None)
    for kind in MATCH_ORDER:
        if within[kind] is not None:
            return MatchOutcome(case, kind, within[kind], exact_rank)
    return MatchOutcome(case, MatchKind.NONE, None, exact_rank)


def classify_cases(cases: Iterable[RemapCase], kg: KnowledgeGraph, cutoff: int = DEFAULT_CUTOFF) -> list[MatchOutcome]:
    """Classify every ranked, labelled case; the rest are logged and skipped."""
    outcomes = []
    skipped = 0
    for case in cases:
        if not case.truth or case.predictions is None:
            skipped += 1
            continue
        outcomes.append(classify_match(case, kg, cutoff))
    if skipped:
        logger.warning("%d cases without ranking or truth left out of the evaluation", skipped)
    return outcomes


# -- rank metrics -----------------------------------------------------------------


def rank_metrics(
    ranks: Sequence[int],
    unfound: Sequence[int] = (),
    hits_at: Sequence[int] = DEFAULT_HITS,
    policy: UnfoundPolicy = "penalty",
) -> RankReport:
    """MR, MRR and Hits@N.

    Args:
        ranks: 1-based ranks of the truths that were found.
        unfound: Penalty ranks (candidate count + 1) of truths that were not.
        hits_at: Cut-offs of Hits@N.
        policy: ``penalty`` counts unfound truths with their penalty rank and a
            reciprocal rank of 0; ``exclude`` leaves them out.

    Raises:
        EmptyInputError: Nothing to average.
    """
    found = np.asarray(ranks, dtype=np.float64)
    if np.any(found < 1):
        raise ValueError("ranks are 1-based")
    penalties = np.asarray(unfound if policy == "penalty" else (), dtype=np.float64)
    total = found.size + penalties.size
    if total == 0:
        raise EmptyInputError("no ranks to evaluate")

    mr = float((found.sum() + penalties.sum()) / total)
    mrr = float(np.sum(1.0 / found) / total) if found.size else 0.0
    hits = {n: float(np.count_nonzero(found <= n) / total) for n in sorted(hits_at)}
    return RankReport(mr=mr, mrr=mrr, hits=hits, count=total, unfound=len(unfound), policy=policy)


def rank_histogram(outcomes: Iterable[MatchOutcome], cutoff: int = DEFAULT_CUTOFF) -> dict[str, list[int]]:
    """Per-rank counts (index 0 is rank 1) for each match kind."""
    histograms = {kind.value: [0] * cutoff for kind in MATCH_ORDER}
    for outcome in outcomes:
        if outcome.rank is not None and outcome.rank <= cutoff:
            histograms[outcome.kind.value][outcome.rank - 1] += 1
    return histograms


def outcome_metrics(
    outcomes: Sequence[MatchOutcome],
    hits_at: Sequence[int] = DEFAULT_HITS,
    policy: UnfoundPolicy = "penalty",
    cutoff: int = DEFAULT_CUTOFF,
) -> RankReport:
    """Rank metrics of the exact truth over classified cases, with histograms."""
    ranks = [o.exact_rank for o in outcomes if o.exact_rank is not None]
    unfound = [o.candidate_count + 1 for o in outcomes if o.exact_rank is None]
    report = rank_metrics(ranks, unfound, hits_at, policy)
    report.histograms = rank_histogram(outcomes, cutoff)
    return report


def _bucket(rank: int | None) -> str:
    if rank is None:
        return "10+"
    if rank == 1:
        return "1"
    return "2-5" if rank <= 5 else "6-10"


def coverage_report(outcomes: Iterable[MatchOutcome]) -> dict[str, dict[str, dict[str, float]]]:
    """Rank-bucket shares per strategy, split by match kind.

    Returns:
        dict: ``{strategy: {kind: {bucket: fraction}}}`` where the fractions of
        one strategy sum to 1. Cases without a match land in the "10+" bucket
        of kind "None".
    """
    tallies: dict[str, Counter] = defaultdict(Counter)
    for outcome in outcomes:
        candidate_set = outcome.case.candidate_set
        strategy = candidate_set.strategy.value if candidate_set else "Unknown"
        tallies[strategy][(outcome.kind.value, _bucket(outcome.rank))] += 1

    report = {}
    for strategy in sorted(tallies):
        counter = tallies[strategy]
        total = sum(counter.values())
        report[strategy] = {
            kind.value: {bucket: counter[(kind.value, bucket)] / total for bucket in RANK_BUCKETS}
            for kind in (*MATCH_ORDER, MatchKind.NONE)
        }
    return report


# -- graph completion ---------------------------------------------------------------


def split_closed_world(
    kg: KnowledgeGraph, fraction: float = 0.1, seed: int = 0
) -> tuple[KnowledgeGraph, list[Triple]]:
    """Hold out a share of the MatchingCWE triples of a graph.

    A triple is only held out while both its CVE and its CWE keep another
    triple in the training part, so every held-out entity stays embedded.

    Returns:
        tuple: (frozen training graph, held-out triples sorted).
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    matching = kg.triples(relation=RelationKind.MATCHING_CWE)
    degree: Counter = Counter()
    for triple in kg:
        degree[triple.head] += 1
        degree[triple.tail] += 1

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(matching))
    wanted = round(fraction * len(matching))
    held_out = []
    for i in order:
        if len(held_out) >= wanted:
            break
        triple = matching[i]
        if degree[triple.head] > 1 and degree[triple.tail] > 1:
            degree[triple.head] -= 1
            degree[triple.tail] -= 1
            held_out.append(triple)
    if len(held_out) < wanted:
        logger.warning("held out %d of %d requested triples", len(held_out), wanted)

    train_graph = kg.copy()
    for triple in held_out:
        train_graph.remove_triple(triple)
    return train_graph.freeze(), sorted(held_out, key=lambda t: t.to_line())


def graph_completion_eval(
    train_kg: KnowledgeGraph,
    eval_triples: Iterable[Triple],
    mode: WorldMode,
    model: EmbeddingModel,
    hits_at: Sequence[int] = DEFAULT_HITS,
    exempt: Iterable[Triple] = (),
    pool: Sequence[EntityId] | None = None,
) -> RankReport:
    """Filtered tail ranking of (cve, MatchingCWE, ?) over the CWE-1003 pool.

    For each eval triple the true tail is scored against every pool CWE;
    other tails known to be true for the same CVE (in training or in the eval
    set) are removed before ranking. Ties are broken by id, as in remap
    ranking. Eval triples whose CVE or CWE has no embedding are skipped.

    Args:
        train_kg: Graph the model was trained on.
        eval_triples: MatchingCWE triples to rank.
        mode: ``open`` triples postdate training, ``closed`` come from a split.
        model: Trained embedding.
        hits_at: Cut-offs of Hits@N.
        exempt: Triples allowed to appear in training in open mode (fixes
            inserted by remapping).
        pool: Candidate tails; defaults to the CWE-1003 view of ``train_kg``.

    Raises:
        LeakageError: In open mode an eval triple is part of training.
        EmptyInputError: No eval triple could be ranked.
    """
    eval_triples = sorted(set(eval_triples), key=lambda t: t.to_line())
    exempt = set(exempt)
    if mode == "open":
        leaked = [t for t in eval_triples if t in train_kg and t not in exempt]
        if leaked:
            raise LeakageError(
                f"{len(leaked)} eval triples are part of training, first {leaked[0].to_line()!r}",
                count=len(leaked),
            )

    pool = sorted(set(pool if pool is not None else train_kg.view_1003()))
    true_tails: dict[EntityId, set[EntityId]] = defaultdict(set)
    for triple in eval_triples:
        true_tails[triple.head].add(triple.tail)

    ranks = []
    skipped = 0
    for triple in eval_triples:
        if not (model.knows(triple.head) and model.knows(triple.tail)):
            skipped += 1
            continue
        known = train_kg.tails(triple.head, RelationKind.MATCHING_CWE) | true_tails[triple.head]
        competitors = [w for w in pool if w != triple.tail and w not in known and model.knows(w)]
        scores = score_tails(model, triple.head, RelationKind.MATCHING_CWE, [triple.tail, *competitors])
        target = scores[0]
        ahead = sum(
            1
            for w, s in zip(competitors, scores[1:])
            if s > target or (s == target and w.sort_key < triple.tail.sort_key)
        )
        ranks.append(ahead + 1)
    if skipped:
        logger.warning("%d eval triples without embedding skipped", skipped)

    report = rank_metrics(ranks, hits_at=hits_at)
    report.filtered = True
    report.diagnostics = {"mode": mode, "skipped": skipped, "pool": len(pool)}
    return report


Trainer = Callable[[KnowledgeGraph, TrainingConfig], EmbeddingModel]


def _quiet_train(kg: KnowledgeGraph, config: TrainingConfig) -> EmbeddingModel:
    return train(kg, config, progress=False)


def compare_fixed_graphs(
    kg: KnowledgeGraph,
    ranked_cases: Sequence[RemapCase],
    eval_triples: Sequence[Triple],
    config: TrainingConfig,
    top_ns: Sequence[int] = (1, 2, 3),
    mode: WorldMode = "open",
    hits_at: Sequence[int] = DEFAULT_HITS,
    trainer: Trainer = _quiet_train,
) -> dict[str, RankReport]:
    """Retrain on the original graph and on each top-N fixed graph, then evaluate.

    Every graph is trained with the same config and ranked against the same
    eval triples and the same candidate pool.

    Returns:
        dict: Reports keyed by ``Original`` and ``Top-1``, ``Top-2``...
    """
    pool = kg.view_1003()
    graphs: dict[str, tuple[KnowledgeGraph, set[Triple]]] = {"Original": (kg, set())}
    for n in top_ns:
        graphs[f"Top-{n}"] = (apply_fixes(kg, ranked_cases, n), fix_triples(ranked_cases, n))

    reports = {}
    for label, (graph, exempt) in tqdm(graphs.items(), desc="Retraining", unit="graph"):
        model = trainer(graph, config)
        reports[label] = graph_completion_eval(graph, eval_triples, mode, model, hits_at, exempt, pool)
        logger.info("%s: MRR %.3f, MR %.3f", label, reports[label].mrr, reports[label].mr)
    return reports


# -- exploited CVEs ---------------------------------------------------------------------


@dataclass
class ExploitRow:
    cve: EntityId
    old_cwe: EntityId
    status: MappingStatus
    exploit_date: date
    remap_date: date | None
    kind: MatchKind
    rank: int | None

    @property
    def remapped_after_exploit(self) -> bool:
        return self.remap_date is not None and self.remap_date > self.exploit_date

    @property
    def correct(self) -> bool:
        return self.kind is not MatchKind.NONE

    def to_dict(self) -> dict:
        return {
            "cve": self.cve.key,
            "old_cwe": self.old_cwe.key,
            "status": self.status.value,
            "exploit_date": self.exploit_date.isoformat(),
            "remap_date": self.remap_date.isoformat() if self.remap_date else None,
            "remapped_after_exploit": self.remapped_after_exploit,
            "match": self.kind.value,
            "rank": self.rank,
        }


@dataclass
class ExploitReport:
    rows: list[ExploitRow]

    def summary(self) -> dict[str, dict]:
        """Counts per status: exploited, remapped after the exploit, and correctly predicted among those."""
        summary = {}
        for status in (MappingStatus.DISCOURAGED, MappingStatus.PROHIBITED):
            rows = [r for r in self.rows if r.status is status]
            after = [r for r in rows if r.remapped_after_exploit]
            correct = [r for r in after if r.correct]
            summary[status.value] = {
                "exploited": len(rows),
                "remapped_after_exploit": len(after),
                "correctly_predicted": len(correct),
                "by_match": {kind.value: sum(1 for r in correct if r.kind is kind) for kind in MATCH_ORDER},
            }
        return summary


def exploit_analysis(
    cases: Iterable[RemapCase],
    exploits: Iterable[ExploitEvent],
    history: Iterable[ChangeEvent],
    kg: KnowledgeGraph,
    cutoff: int = DEFAULT_CUTOFF,
    start: date | None = None,
    end: date | None = None,
) -> ExploitReport:
    """Relate ranked test cases to exploitation dates.

    The exploit date of a CVE is its earliest exploit event in
    [``start``, ``end``] over all sources. The remap date of a case is the
    first change event after ``start`` that removed its old CWE. A case counts
    as correctly predicted when any truth matches within ``cutoff``.
    """
    first_exploit: dict[EntityId, date] = {}
    for event in exploits:
        if (start and event.exploit_date < start) or (end and event.exploit_date > end):
            continue
        if event.cve not in first_exploit or event.exploit_date < first_exploit[event.cve]:
            first_exploit[event.cve] = event.exploit_date

    remap_dates: dict[tuple[EntityId, EntityId], date] = {}
    for event in sorted(history, key=lambda e: (e.timestamp, e.change_id)):
        day = event.timestamp.date()
        if start and day < start:
            continue
        for old in event.removed_cwes:
            remap_dates.setdefault((event.cve, old), day)

    rows = []
    for case in cases:
        exploited = first_exploit.get(case.cve)
        if exploited is None or not case.truth or case.predictions is None:
            continue
        outcome = classify_match(case, kg, cutoff)
        status = case.status or kg.node(case.old_cwe).status
        rows.append(
            ExploitRow(
                case.cve,
                case.old_cwe,
                status,
                exploited,
                remap_dates.get((case.cve, case.old_cwe)),
                outcome.kind,
                outcome.rank,
            )
        )
    rows.sort(key=lambda r: (r.cve.sort_key, r.old_cwe.sort_key))
    logger.info("%d exploited cases with invalid mappings", len(rows))
    return ExploitReport(rows)


def outcomes_by_status(outcomes: Iterable[MatchOutcome]) -> Mapping[str, list[MatchOutcome]]:
    grouped: dict[str, list[MatchOutcome]] = defaultdict(list)
    for outcome in outcomes:
        status = outcome.case.status.value if outcome.case.status else "Unknown"
        grouped[status].append(outcome)
    return dict(sorted(grouped.items()))
