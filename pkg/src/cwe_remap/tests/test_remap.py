"""
Tests for invalid-mapping detection, ranking and fix application.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import date

import numpy as np
import pytest

from ..candidates import CandidateSet, CandidateStrategy
from ..embed import EmbeddingModel, train
from ..errors import ConfigError
from ..kg import MappingStatus, RelationKind, Triple
from ..remap import (
    RemapCase,
    apply_fixes,
    determine_invalid,
    fix_triples,
    fix_v2w,
    rank_case,
    rank_cases,
    remap_history,
)
from ..snapshot import build_snapshot
from .conftest import TRAIN_DATE, VALIDATE_DATE, cve, cwe

# distance of each CWE from CVE-2020-0001 in the hand-built model below
DISTANCES = {140: 1.0, 141: 2.0, 228: 3.0, 1284: 4.0, 138: 5.0}


@pytest.fixture
def line_model():
    """CVE-2020-0001 at the origin, a zero relation, CWEs on the x axis."""
    entities = [cve("CVE-2020-0001"), *(cwe(n) for n in DISTANCES)]
    vectors = np.zeros((len(entities), 2))
    for row, distance in enumerate(DISTANCES.values(), start=1):
        vectors[row] = [distance, 0.0]
    return EmbeddingModel(entities, [RelationKind.MATCHING_CWE], vectors, np.zeros((1, 2)))


def with_candidates(cwes, old=138, key="CVE-2020-0001"):
    candidate_set = CandidateSet(cve(key), cwe(old), CandidateStrategy.FAMILY, tuple(cwe(c) for c in cwes))
    return RemapCase(cve(key), cwe(old), MappingStatus.DISCOURAGED, candidate_set=candidate_set)


def test_determine_invalid(train_snapshot):
    """Test both invalid populations of the training snapshot."""
    cases = determine_invalid(train_snapshot.graph)
    assert [(c.cve.key, c.old_cwe.key, c.status.value) for c in cases] == [
        ("CVE-2014-0160", "CWE-189", "Prohibited"),
        ("CVE-2020-0001", "CWE-138", "Discouraged"),
        ("CVE-2020-0002", "CWE-189", "Prohibited"),
        ("CVE-2020-0003", "CWE-682", "Discouraged"),
        ("CVE-2021-0007", "CWE-189", "Prohibited"),
    ]
    discouraged = determine_invalid(train_snapshot.graph, MappingStatus.DISCOURAGED)
    assert [c.cve.key for c in discouraged] == ["CVE-2020-0001", "CVE-2020-0003"]


def test_determine_invalid_skips_placeholders(feed, history, catalog):
    """Test that a CWE-Other mapping is not a Prohibited case."""
    snapshot = build_snapshot(feed, history, catalog, date(2020, 12, 31))
    assert cve("CVE-2020-0005") not in {c.cve for c in determine_invalid(snapshot.graph)}


def test_remap_history(history, train_snapshot):
    """Test labelled historical cases before a date."""
    before_train = remap_history(history, train_snapshot.graph, TRAIN_DATE)
    assert [(c.cve, c.old_cwe, c.truth) for c in before_train] == [
        (cve("CVE-2021-0008"), cwe(707), frozenset({cwe(140)})),
    ]
    assert len(remap_history(history, train_snapshot.graph, VALIDATE_DATE)) == 5


def test_rank_case_orders_by_score(line_model):
    """Test ranking by score with 1-based ranks."""
    ranked = rank_case(line_model, with_candidates([1284, 140, 228, 141]))
    assert ranked.ranked_cwes() == [cwe(140), cwe(141), cwe(228), cwe(1284)]
    assert [p.rank for p in ranked.predictions] == [1, 2, 3, 4]
    assert ranked.predictions[0].score == pytest.approx(-1.0)
    assert ranked.top(2) == [cwe(140), cwe(141)]


def test_rank_case_breaks_ties_by_id(line_model):
    """Test that equal scores are ordered by ascending id."""
    line_model.entity_vectors[line_model.entity_row(cwe(141))] = [0.0, 1.0]
    ranked = rank_case(line_model, with_candidates([141, 140]))
    assert ranked.ranked_cwes() == [cwe(140), cwe(141)]


def test_rank_case_drops_unembedded_candidates(line_model):
    """Test that a candidate without embedding is removed with a note."""
    ranked = rank_case(line_model, with_candidates([140, 190]))
    assert ranked.ranked_cwes() == [cwe(140)]
    assert ranked.candidate_set.cwes == (cwe(140),)
    assert any("CWE-190" in note for note in ranked.diagnostics)


def test_rank_case_unknown_cve(line_model):
    """Test that an unembedded CVE leaves the case unranked."""
    ranked = rank_case(line_model, with_candidates([140], key="CVE-2020-0009"))
    assert not ranked.ranked
    assert ranked.diagnostics == ["CVE CVE-2020-0009 has no embedding"]


def test_rank_case_empty_candidates(line_model):
    ranked = rank_case(line_model, with_candidates([]))
    assert ranked.ranked
    assert ranked.predictions == []


def test_rank_cases_keeps_order_on_pool(line_model):
    """Test that threaded ranking returns cases in input order."""
    cases = [with_candidates([228, 140]), with_candidates([1284, 141]), with_candidates([138, 228])]
    with ThreadPoolExecutor(max_workers=3) as pool:
        threaded = rank_cases(line_model, cases, pool)
    assert threaded == rank_cases(line_model, cases)
    assert [c.top(1) for c in threaded] == [[cwe(140)], [cwe(141)], [cwe(228)]]


def test_fix_v2w(catalog_graph, line_model):
    """Test candidates plus ranking for one Discouraged case."""
    ranked = fix_v2w(catalog_graph, line_model, [RemapCase(cve("CVE-2020-0001"), cwe(138))], "family")
    assert ranked[0].candidate_set.strategy is CandidateStrategy.FAMILY
    assert ranked[0].ranked_cwes() == [cwe(140), cwe(141), cwe(228), cwe(1284)]


def test_apply_fixes(train_snapshot, line_model):
    """Test that the old edge is replaced by the top-N predictions."""
    ranked = rank_case(line_model, with_candidates([140, 141, 228]))
    unranked = replace(with_candidates([140], key="CVE-2020-0003", old=682), predictions=None)
    fixed = apply_fixes(train_snapshot.graph, [ranked, unranked], 2)

    assert fixed.frozen
    assert fixed.mappings(cve("CVE-2020-0001")) == {cwe(140), cwe(141)}
    assert fixed.mappings(cve("CVE-2020-0003")) == {cwe(682)}
    assert train_snapshot.graph.mappings(cve("CVE-2020-0001")) == {cwe(138)}
    assert fix_triples([ranked, unranked], 2) == {
        Triple(cve("CVE-2020-0001"), RelationKind.MATCHING_CWE, cwe(140)),
        Triple(cve("CVE-2020-0001"), RelationKind.MATCHING_CWE, cwe(141)),
    }


@pytest.mark.parametrize("top_n", [1, 2, 3])
def test_fixed_graph_has_no_invalid_mappings(train_snapshot, small_training, top_n):
    """Test that rescanning the fixed graph finds nothing left to remap."""
    graph = train_snapshot.graph
    model = train(graph, small_training, progress=False)
    ranked = []
    for status, strategy in ((MappingStatus.PROHIBITED, "members"), (MappingStatus.DISCOURAGED, "family")):
        ranked += fix_v2w(graph, model, determine_invalid(graph, status), strategy)
    assert ranked and all(case.predictions for case in ranked)

    fixed = apply_fixes(graph, ranked, top_n)
    assert determine_invalid(fixed) == []
    assert len(determine_invalid(graph)) == len(ranked)


def test_apply_fixes_top_n_range(train_snapshot):
    with pytest.raises(ConfigError):
        apply_fixes(train_snapshot.graph, [], 4)
    with pytest.raises(ConfigError):
        fix_triples([], 0)
