"""
Shared fixtures: a small CWE catalog with the "Improper Neutralization" slice
(707 <- 138 <- 140, 707 <- 228) and the "Numeric Errors" category 189, NVD
feeds, a change history and exploit lists.
"""

from datetime import date
from pathlib import Path

import pytest

from ..config import TrainingConfig
from ..kg import EntityId, KnowledgeGraph, placeholder_nodes
from ..parsers import parse_change_history, parse_cve_feed, parse_cwe_catalog, parse_exploits, parse_view_csv
from ..snapshot import build_snapshot

FIXTURES = Path(__file__).parent / "fixtures"

TRAIN_DATE = date(2021, 8, 4)
VALIDATE_DATE = date(2024, 12, 17)


def cwe(value):
    return EntityId.cwe(value)


def cve(key):
    return EntityId.cve(key)


@pytest.fixture
def fixtures_dir():
    """Directory with the on-disk fixture documents."""
    return FIXTURES


@pytest.fixture
def catalog():
    """Parsed fixture catalog."""
    return parse_cwe_catalog((FIXTURES / "catalog.xml").read_bytes())


@pytest.fixture
def catalog_graph(catalog):
    """Frozen graph holding only the catalog nodes and CWE-to-CWE triples."""
    kg = KnowledgeGraph(nodes=[*catalog.nodes, *placeholder_nodes()])
    for triple in catalog.triples:
        kg.add_triple(triple)
    return kg.freeze()


@pytest.fixture
def feed():
    return parse_cve_feed((FIXTURES / "nvd_v2.json").read_bytes())


@pytest.fixture
def history():
    return parse_change_history((FIXTURES / "history.json").read_bytes())


@pytest.fixture
def exploits():
    return parse_exploits(
        kev=(FIXTURES / "kev.json").read_bytes(),
        exploitdb=(FIXTURES / "files_exploits.csv").read_bytes(),
    )


@pytest.fixture
def top25():
    return parse_view_csv((FIXTURES / "top25.csv").read_bytes())


@pytest.fixture
def train_snapshot(feed, history, catalog):
    """Graph state on the training date."""
    return build_snapshot(feed, history, catalog, TRAIN_DATE)


@pytest.fixture
def valid_snapshot(feed, history, catalog):
    return build_snapshot(feed, history, catalog, VALIDATE_DATE)


@pytest.fixture
def small_training():
    """Quick training settings for tests that need a trained model."""
    return TrainingConfig(dim=16, epochs=30, batch_size=64, negatives=8, learning_rate=0.01, seed=7)


@pytest.fixture
def run_config_path(tmp_path):
    """Copy of the fixture config whose relative paths point at the fixtures."""
    config = tmp_path / "config.json"
    text = (FIXTURES / "config.json").read_text(encoding="utf-8")
    for name in ("nvd_v2.json", "history.json", "catalog.xml", "top25.csv", "kev.json", "files_exploits.csv"):
        text = text.replace(f'"{name}"', f'"{(FIXTURES / name).as_posix()}"')
    config.write_text(text, encoding="utf-8")
    return config
