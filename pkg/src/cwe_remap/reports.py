"""
Report writers and console tables.

Files are written deterministically: JSON with sorted keys, CSV with LF line
endings, rows in a fixed order. Nothing here carries a timestamp.
"""

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from rich.console import Console
from rich.table import Table

from .evaluate import RANK_BUCKETS, ExploitReport, RankReport
from .longitudinal import HOP_BUCKETS, DistanceDistribution, RemapPair, StatusBreakdown
from .remap import RemapCase


def write_json(path: Path, payload: Any) -> Path:
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)
    Path(path).write_bytes((text + "\n").encode("utf-8"))
    return Path(path)


def write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> Path:
    lines = [json.dumps(row, sort_keys=True, ensure_ascii=False) for row in rows]
    Path(path).write_bytes("".join(line + "\n" for line in lines).encode("utf-8"))
    return Path(path)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_bytes(buffer.getvalue().encode("utf-8"))
    return Path(path)


# -- predictions -----------------------------------------------------------------


def prediction_row(case: RemapCase) -> dict:
    """One JSON line of the prediction report."""
    candidate_set = case.candidate_set
    row: dict[str, Any] = {
        "cve": case.cve.key,
        "old_cwe": case.old_cwe.key,
        "status": case.status.value if case.status else None,
        "strategy": candidate_set.strategy.value if candidate_set else None,
        "applied": (candidate_set.applied or candidate_set.strategy).value if candidate_set else None,
        "ranked": (
            [{"cwe": p.cwe.key, "score": p.score, "rank": p.rank} for p in case.predictions]
            if case.predictions is not None
            else None
        ),
        "diagnostics": case.diagnostics,
    }
    if case.truth is not None:
        row["truth"] = [c.key for c in sorted(case.truth)]
    return row


PREDICTION_COLUMNS = ("cve", "old_cwe", "strategy", "top1", "top1_score", "candidates", "truth")


def prediction_summary(case: RemapCase) -> list:
    best = case.predictions[0] if case.predictions else None
    return [
        case.cve.key,
        case.old_cwe.key,
        case.candidate_set.strategy.value if case.candidate_set else "",
        best.cwe.key if best else "",
        f"{best.score:.6f}" if best else "",
        len(case.predictions or []),
        " ".join(c.key for c in sorted(case.truth or ())),
    ]


def write_predictions(directory: Path, cases: Sequence[RemapCase]) -> list[Path]:
    directory = Path(directory)
    return [
        write_jsonl(directory / "predictions.jsonl", (prediction_row(c) for c in cases)),
        write_csv(directory / "predictions.csv", PREDICTION_COLUMNS, (prediction_summary(c) for c in cases)),
        write_jsonl(
            directory / "candidates.jsonl",
            (c.candidate_set.to_dict() for c in cases if c.candidate_set is not None),
        ),
    ]


# -- metrics -----------------------------------------------------------------------


def metrics_rows(reports: Mapping[str, RankReport]) -> tuple[list[str], list[list]]:
    hits = sorted({n for report in reports.values() for n in report.hits})
    header = ["label", "MR", "MRR", *[f"Hits@{n}" for n in hits], "count", "unfound", "filtered"]
    rows = [
        [
            label,
            f"{report.mr:.6f}",
            f"{report.mrr:.6f}",
            *[f"{report.hits.get(n, 0.0):.6f}" for n in hits],
            report.count,
            report.unfound,
            report.filtered,
        ]
        for label, report in reports.items()
    ]
    return header, rows


def coverage_rows(coverage: Mapping[str, Mapping[str, Mapping[str, float]]]) -> tuple[list[str], list[list]]:
    header = ["strategy", "match", *RANK_BUCKETS]
    rows = [
        [strategy, kind, *[f"{buckets[b]:.6f}" for b in RANK_BUCKETS]]
        for strategy, kinds in coverage.items()
        for kind, buckets in kinds.items()
    ]
    return header, rows


def histogram_rows(histograms: Mapping[str, Sequence[int]]) -> tuple[list[str], list[list]]:
    width = max((len(counts) for counts in histograms.values()), default=0)
    header = ["match", *[str(rank) for rank in range(1, width + 1)]]
    return header, [[kind, *counts] for kind, counts in histograms.items()]


# -- longitudinal ------------------------------------------------------------------


def distance_rows(variants: Mapping[str, DistanceDistribution]) -> tuple[list[str], list[list]]:
    header = ["variant", *HOP_BUCKETS, "total"]
    rows = [[name, *[d.counts[b] for b in HOP_BUCKETS], d.total] for name, d in variants.items()]
    return header, rows


def pair_rows(pairs: Iterable[RemapPair]) -> tuple[list[str], list[list]]:
    header = ["old_cwe", "new_cwe", "count", "share", "same_branch", "is_member"]
    rows = [
        [p.old_label, p.new_cwe.key, p.count, f"{p.share:.6f}", p.same_branch, "" if p.is_member is None else p.is_member]
        for p in pairs
    ]
    return header, rows


def status_rows(breakdowns: Iterable[StatusBreakdown]) -> tuple[list[str], list[list]]:
    header = ["as_of", *StatusBreakdown.COLUMNS, "total"]
    rows = [[b.as_of.isoformat(), *[b.counts[c] for c in StatusBreakdown.COLUMNS], b.total] for b in breakdowns]
    return header, rows


def exploit_rows(report: ExploitReport) -> tuple[list[str], list[list]]:
    header = ["cve", "old_cwe", "status", "exploit_date", "remap_date", "remapped_after_exploit", "match", "rank"]
    rows = [[row.to_dict()[column] for column in header] for row in report.rows]
    for row in rows:
        row[4] = row[4] or ""
        row[7] = "" if row[7] is None else row[7]
    return header, rows


# -- console -----------------------------------------------------------------------


def print_table(console: Console, title: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for column in header:
        table.add_column(str(column))
    for row in rows:
        table.add_row(*[str(value) for value in row])
    console.print(table)
