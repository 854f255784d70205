"""Ranking metrics, macro-averaging across datasets, and report serialization."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .core import Modality, UnimrError

ALL = "All"
SINGLE_MODAL = "Single-modal Qry"
MULTI_MODAL = "Multi-modal Qry"


class EmptyRelevant(UnimrError):
    pass


class EmptyGroup(UnimrError):
    pass


def recall_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int, fraction: bool = False) -> float:
    """Any-hit recall by default; ``fraction=True`` gives |relevant in top-k| / |relevant|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevant("recall needs at least one relevant doc")
    hits = len(relevant.intersection(ranked[:k]))
    if fraction:
        return hits / len(relevant)
    return 1.0 if hits else 0.0


def ndcg_at_10(ranked: Sequence[str], grades: Mapping[str, int]) -> float:
    return ndcg_at_k(ranked, grades, 10)


def ndcg_at_k(ranked: Sequence[str], grades: Mapping[str, int], k: int) -> float:
    positive = sorted((g for g in grades.values() if g > 0), reverse=True)
    if not positive:
        raise EmptyRelevant("nDCG needs at least one positively graded doc")
    dcg = sum((2.0 ** grades.get(d, 0) - 1.0) / math.log2(i + 2) for i, d in enumerate(ranked[:k]))
    ideal = sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(positive[:k]))
    return dcg / ideal


def map_at_5(ranked: Sequence[str], relevant: Iterable[str]) -> float:
    return average_precision_at_k(ranked, relevant, 5)


def average_precision_at_k(ranked: Sequence[str], relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevant("AP needs at least one relevant doc")
    hits = 0
    total = 0.0
    for i, d in enumerate(ranked[:k], 1):
        if d in relevant:
            hits += 1
            total += hits / i
    return total / min(k, len(relevant))


def modality_accuracy_at_1(top_modality: Modality | None, desired: Modality) -> float:
    return 1.0 if top_modality is not None and Modality(top_modality) == Modality(desired) else 0.0


def primary_metric_value(metric: str, ranked: Sequence[str], grades: Mapping[str, int]) -> float:
    relevant = {d for d, g in grades.items() if g > 0}
    if metric == "RecallAt5":
        return recall_at_k(ranked, relevant, 5)
    if metric == "RecallAt10":
        return recall_at_k(ranked, relevant, 10)
    if metric == "NDCGAt10":
        return ndcg_at_10(ranked, grades)
    if metric == "MAPAt5":
        return map_at_5(ranked, relevant)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# reporting

RowKey = tuple[str, str]  # (dataset_id, task_id)


@dataclass
class RunReport:
    """Per-(dataset, task) metric means plus unweighted macro rows over those."""

    rows: dict[RowKey, dict[str, float]] = field(default_factory=dict)
    macro: dict[str, dict[str, float]] = field(default_factory=dict)
    pool_tag: str = "global"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset_id", "task_id", "metric", "value"])
        for (ds, task), vals in sorted(self.rows.items()):
            for name, v in sorted(vals.items()):
                w.writerow([ds, task, name, repr(float(v))])
        for group, vals in self.macro.items():
            for name, v in sorted(vals.items()):
                w.writerow([group, "macro", name, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, pool_tag: str = "global") -> "RunReport":
        rep = cls(pool_tag=pool_tag)
        for row in csv.DictReader(io.StringIO(text)):
            if row["task_id"] == "macro":
                rep.macro.setdefault(row["dataset_id"], {})[row["metric"]] = float(row["value"])
            else:
                rep.rows.setdefault((row["dataset_id"], row["task_id"]), {})[row["metric"]] = float(row["value"])
        return rep

    def table(self, metrics: Sequence[str] | None = None) -> str:
        names = list(metrics) if metrics else sorted({n for v in self.rows.values() for n in v})
        head = ["dataset", "task"] + names
        lines = [head]
        for (ds, task), vals in sorted(self.rows.items()):
            lines.append([ds, task] + [f"{100 * vals[n]:.1f}" if n in vals else "-" for n in names])
        for group, vals in self.macro.items():
            lines.append([group, ""] + [f"{100 * vals[n]:.1f}" if n in vals else "-" for n in names])
        widths = [max(len(r[c]) for r in lines) for c in range(len(head))]
        out = [f"pool: {self.pool_tag}"]
        for k, r in enumerate(lines):
            out.append("  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip())
            if k == 0:
                out.append("  ".join("-" * wd for wd in widths))
        return "\n".join(out) + "\n"


def _mean(vals: Sequence[float]) -> float:
    return math.fsum(vals) / len(vals)


def macro_average(per_query: Mapping[RowKey, Mapping[str, Sequence[float]]],
                  groups: Mapping[RowKey, str | None] | None = None,
                  required_groups: Sequence[str] = (),
                  pool_tag: str = "global") -> RunReport:
    """Mean within each (dataset, task), then unweighted mean across rows per group.

    ``groups`` assigns each row to a named macro group (or ``None``); every row also
    counts toward ``"All"``. Naming a group in ``required_groups`` that receives no
    rows raises :class:`EmptyGroup`.
    """
    if not per_query:
        raise EmptyGroup("no datasets to average")
    groups = groups or {}
    rows: dict[RowKey, dict[str, float]] = {}
    for key in sorted(per_query):
        vals = {name: _mean(v) for name, v in per_query[key].items() if len(v)}
        if not vals:
            raise EmptyGroup(f"dataset {key} has no query values")
        rows[key] = vals

    members: dict[str, list[RowKey]] = {ALL: list(rows)}
    for name in required_groups:
        members.setdefault(name, [])
    for key in rows:
        g = groups.get(key)
        if g is not None:
            members.setdefault(g, []).append(key)

    macro: dict[str, dict[str, float]] = {}
    for name, keys in members.items():
        if not keys:
            raise EmptyGroup(f"macro group {name!r} has no datasets")
        metric_names = sorted({m for k in keys for m in rows[k]})
        macro[name] = {m: _mean([rows[k][m] for k in keys if m in rows[k]]) for m in metric_names}
    return RunReport(rows, macro, pool_tag)


def query_group(query_modality: Modality) -> str:
    """Macro group by query modality: interleaved text+image queries are multi-modal."""
    return MULTI_MODAL if query_modality is Modality.IMAGE_TEXT else SINGLE_MODAL
