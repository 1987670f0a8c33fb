"""
End-to-end tests of the cwe-remap commands on the fixture data.
"""

import json

import pytest

from ..cli import build_parser, main


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"


def run_cli(command, run_config_path, out_dir, *extra):
    return main([command, "--config", str(run_config_path), "--out", str(out_dir), "-q", *extra])


def last_error(capsys):
    """The JSON error line the CLI writes last on stderr."""
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_snapshot_command(run_config_path, out_dir):
    """Test that a snapshot directory and its manifest are written."""
    assert run_cli("snapshot", run_config_path, out_dir, "--as-of", "2021-08-04") == 0
    directory = out_dir / "snapshot-2021-08-04"
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "snapshot"
    assert manifest["parameters"] == {"as_of": "2021-08-04"}
    assert sorted(manifest["outputs"]) == ["cwe_nodes.jsonl", "entities.tsv", "meta.json", "triples.tsv"]
    assert not (out_dir / ".lock").exists()


def test_longitudinal_command(run_config_path, out_dir):
    assert run_cli("longitudinal", run_config_path, out_dir) == 0
    directory = out_dir / "longitudinal"
    header = (directory / "hop_distances.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "variant,1,2,3,4+,no-path,total"
    assert "removed,CWE-707,1" in (directory / "top_added_removed.csv").read_text(encoding="utf-8").splitlines()


def test_longitudinal_date_window(run_config_path, out_dir):
    """Test that --from and --to bound the change events and the yearly rows."""
    assert run_cli("longitudinal", run_config_path, out_dir, "--from", "2021-08-04", "--to", "2024-12-17") == 0
    directory = out_dir / "longitudinal"
    changes = (directory / "top_added_removed.csv").read_text(encoding="utf-8").splitlines()
    assert "removed,CWE-707,1" not in changes
    assert "removed,CWE-189,2" in changes
    years = (directory / "invalid_by_year.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert [row.split(",")[0] for row in years] == ["2021", "2022", "2023", "2024"]
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["parameters"] == {"from": "2021-08-04", "to": "2024-12-17"}


def test_longitudinal_rejects_reversed_window(run_config_path, out_dir, capsys):
    assert run_cli("longitudinal", run_config_path, out_dir, "--from", "2024-01-01", "--to", "2023-01-01") == 2
    assert last_error(capsys)["error"] == "ConfigError"


def test_fix_command(run_config_path, out_dir, capsys):
    """Test predictions and the fixed graph for both invalid populations."""
    assert run_cli("fix", run_config_path, out_dir, "--top-n", "1") == 0
    directory = out_dir / "fix"
    rows = [json.loads(line) for line in (directory / "predictions.jsonl").read_text(encoding="utf-8").splitlines()]
    assert {row["old_cwe"] for row in rows} == {"CWE-138", "CWE-189", "CWE-682"}
    assert {row["strategy"] for row in rows} == {"Family", "Members"}
    fixed = (directory / "fixed_top1.tsv").read_text(encoding="utf-8").splitlines()
    assert "CVE-2020-0001\tMatchingCWE\tCWE-138" not in fixed
    assert "Wrote:" in capsys.readouterr().out


def test_manifest_is_reproducible(run_config_path, out_dir):
    """Test that two runs with the same config and seed write identical manifests."""
    assert run_cli("fix", run_config_path, out_dir) == 0
    first = (out_dir / "fix" / "manifest.json").read_bytes()
    assert run_cli("fix", run_config_path, out_dir) == 0
    assert (out_dir / "fix" / "manifest.json").read_bytes() == first


def test_evaluate_command(run_config_path, out_dir, capsys):
    """Test metrics files and the console tables."""
    assert run_cli("evaluate", run_config_path, out_dir, "--status", "discouraged") == 0
    directory = out_dir / "evaluate"
    evaluation = json.loads((directory / "evaluation.json").read_text(encoding="utf-8"))
    assert evaluation["ranking"] == "per old CWE"
    assert list(evaluation["reports"]) == ["Discouraged"]
    assert (directory / "rank_histogram_discouraged.csv").exists()
    assert "Exact-match rank metrics" in capsys.readouterr().out


def test_locked_output_exits_with_config_error(run_config_path, out_dir, capsys):
    """Test the JSON error line and exit code when another run holds the lock."""
    out_dir.mkdir()
    (out_dir / ".lock").write_text("1", encoding="utf-8")
    assert run_cli("snapshot", run_config_path, out_dir) == 2
    error = last_error(capsys)
    assert error["error"] == "OutputLockedError"
    assert error["exit_code"] == 2
    assert (out_dir / ".lock").read_text(encoding="utf-8") == "1"


def test_missing_input_exits_with_config_error(tmp_path, out_dir, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"data.feed": "missing.json", "data.catalog": "missing.xml"}), encoding="utf-8")
    assert run_cli("snapshot", config, out_dir) == 2
    assert last_error(capsys)["error"] == "ConfigError"


def test_strategy_mismatch_exits_with_config_error(run_config_path, out_dir, capsys):
    """Test that members on Discouraged weaknesses is refused."""
    code = run_cli("fix", run_config_path, out_dir, "--status", "discouraged", "--strategy", "members")
    assert code == 2
    assert last_error(capsys)["error"] == "StrategyMismatchError"


def test_malformed_feed_exits_with_data_error(run_config_path, tmp_path, out_dir, capsys):
    """Test exit code 3 for an unparseable feed."""
    broken = tmp_path / "broken.json"
    broken.write_text('{"CVE_Items": [', encoding="utf-8")
    config = json.loads(run_config_path.read_text(encoding="utf-8"))
    config["data.feed"] = str(broken)
    run_config_path.write_text(json.dumps(config), encoding="utf-8")
    assert run_cli("snapshot", run_config_path, out_dir) == 3
    assert last_error(capsys)["error"] == "MalformedDocumentError"
