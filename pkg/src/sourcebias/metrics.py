"""Ranking quality, source-bias metrics and the significance tests behind them."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .datamodel import SourceLabel
from .errors import (
    DegenerateTestError,
    MissingValueError,
    UndefinedCorrelationError,
    UndefinedDeltaError,
    ValidationError,
)


@dataclass(frozen=True)
class RankedRun:
    """One query's candidates, ordered by descending score then ascending doc id."""

    query_id: str
    ranking: tuple[tuple[str, float], ...]
    k: int | None = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        seen = set()
        prev = None
        for doc_id, score in self.ranking:
            if doc_id in seen:
                raise ValidationError(f"duplicate doc_id {doc_id!r} in run {self.query_id!r}")
            seen.add(doc_id)
            if prev is not None and rank_key(prev) > rank_key((doc_id, score)):
                raise ValidationError(
                    f"run {self.query_id!r} is not sorted at doc {doc_id!r}"
                )
            prev = (doc_id, score)

    @classmethod
    def from_scores(
        cls, query_id: str, scores: Mapping[str, float] | Iterable[tuple[str, float]], k=None
    ) -> "RankedRun":
        items = scores.items() if isinstance(scores, Mapping) else scores
        ranking = tuple(sorted(((d, float(s)) for d, s in items), key=rank_key))
        return cls(query_id=query_id, ranking=ranking, k=k)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.ranking]

    def __len__(self) -> int:
        return len(self.ranking)


def rank_key(entry: tuple[str, float]):
    """Sort key: descending score, ties by ascending doc id."""
    doc_id, score = entry[0], entry[1]
    return (-score, doc_id)


@dataclass(frozen=True)
class BiasReport:
    metric_human: float
    metric_llm: float
    relative_delta: float


def dcg(gains: Sequence[float]) -> float:
    return math.fsum(g / math.log2(i + 2) for i, g in enumerate(gains))


def _gain(rel: float, gain: str) -> float:
    if gain == "linear":
        return float(rel)
    if gain == "exponential":
        return 2.0**rel - 1.0
    raise ValueError(f"unknown gain {gain!r}")


def ndcg_at_k(
    run: RankedRun, qrels: Mapping[str, int], k: int | None = None, *, gain: str = "linear"
) -> float:
    """NDCG@k with log2(rank + 1) discount; 0 when the ideal DCG is 0.

    ``qrels`` maps doc_id to graded relevance for this query. Documents not
    in ``qrels`` count as non-relevant.
    """
    if k is None:
        k = run.k if run.k is not None else max(len(run), 1)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(run) == 0:
        warnings.warn(f"empty ranking for query {run.query_id!r}", RuntimeWarning, stacklevel=2)
        return 0.0
    if any(v < 0 for v in qrels.values()):
        raise ValidationError("relevance grades must be non-negative")
    ideal = sorted((_gain(r, gain) for r in qrels.values()), reverse=True)[:k]
    idcg = dcg(ideal)
    if idcg == 0:
        return 0.0
    gains = [_gain(qrels.get(d, 0), gain) for d in run.doc_ids[:k]]
    return dcg(gains) / idcg


def relative_delta(metric_human: float, metric_llm: float) -> float:
    """Percentage gap between human and LLM metrics, normalised by their mean."""
    if metric_human < 0 or metric_llm < 0:
        raise ValueError("metrics must be non-negative")
    total = metric_human + metric_llm
    if total == 0:
        raise UndefinedDeltaError("relative delta undefined when both metrics are 0")
    # dividing by the sum (not half of it) avoids underflow for subnormal inputs
    return (metric_human - metric_llm) / total * 200.0


def restrict_qrels(
    qrels: Mapping[str, int], source_map: Mapping[str, SourceLabel], source: SourceLabel
) -> dict[str, int]:
    """Zero the relevance of every document not written by ``source``.

    The ranked list is left untouched so both sources are scored on the same
    run. This is the single place that fixes the restriction convention.
    """
    out = {}
    for doc_id, rel in qrels.items():
        if rel > 0 and doc_id not in source_map:
            raise MissingValueError(f"no source label for doc {doc_id!r}", doc_id=doc_id)
        out[doc_id] = rel if source_map.get(doc_id) == source else 0
    return out


def per_source_ndcg(
    run: RankedRun,
    qrels: Mapping[str, int],
    k: int | None,
    source_map: Mapping[str, SourceLabel],
    *,
    gain: str = "linear",
) -> tuple[float, float]:
    for doc_id in run.doc_ids:
        if doc_id not in source_map:
            raise MissingValueError(f"no source label for doc {doc_id!r}", doc_id=doc_id)
    human = ndcg_at_k(run, restrict_qrels(qrels, source_map, SourceLabel.HUMAN), k, gain=gain)
    llm = ndcg_at_k(run, restrict_qrels(qrels, source_map, SourceLabel.GENERATED), k, gain=gain)
    return human, llm


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length sequences of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    if len(x) == 2:
        # two distinct points are always perfectly correlated
        return math.copysign(1.0, float(dx[0] * dy[0]))
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on ``a - b`` with n - 1 degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_t_test needs two equal-length sequences of at least 2 values")
    diff = a - b
    n = len(diff)
    sd = float(np.std(diff, ddof=1))
    if sd == 0:
        raise DegenerateTestError("differences have zero variance")
    t = float(diff.mean()) / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, min(p, 1.0)


@dataclass(frozen=True)
class QueryEval:
    query_id: str
    ndcg: float
    ndcg_human: float
    ndcg_llm: float


@dataclass(frozen=True)
class EvalResult:
    """Dataset-level performance (mean NDCG@k) and bias (Relative Delta)."""

    k: int
    performance: float
    bias: BiasReport
    per_query: tuple[QueryEval, ...]

    def to_dict(self, scale: float = 100.0) -> dict:
        return {
            "k": self.k,
            "queries": len(self.per_query),
            "performance": self.performance * scale,
            "ndcg_human": self.bias.metric_human * scale,
            "ndcg_llm": self.bias.metric_llm * scale,
            "bias": self.bias.relative_delta * scale / 100.0,
        }


def evaluate_runs(
    runs: Sequence[RankedRun],
    qrels: Mapping[str, Mapping[str, int]],
    source_map: Mapping[str, SourceLabel],
    k: int = 3,
    *,
    gain: str = "linear",
) -> EvalResult:
    """Mean NDCG@k over queries plus Relative Delta of the per-source means."""
    if not runs:
        raise ValidationError("no runs to evaluate")
    rows = []
    for run in runs:
        q = qrels.get(run.query_id, {})
        h, g = per_source_ndcg(run, q, k, source_map, gain=gain)
        rows.append(QueryEval(run.query_id, ndcg_at_k(run, q, k, gain=gain), h, g))
    human = float(np.mean([r.ndcg_human for r in rows]))
    llm = float(np.mean([r.ndcg_llm for r in rows]))
    return EvalResult(
        k=k,
        performance=float(np.mean([r.ndcg for r in rows])),
        bias=BiasReport(human, llm, relative_delta(human, llm)),
        per_query=tuple(rows),
    )


def compare_results(raw: EvalResult, cdc: EvalResult) -> dict:
    """Paired t-tests between two evaluations of the same queries.

    Performance pairs per-query NDCG@k. Bias pairs per-query Relative Delta
    over the queries where it is defined in both runs. A degenerate test is
    reported as ``None``.
    """
    by_q = {r.query_id: r for r in cdc.per_query}
    common = [r for r in raw.per_query if r.query_id in by_q]
    perf_a = [r.ndcg for r in common]
    perf_b = [by_q[r.query_id].ndcg for r in common]
    bias_a, bias_b = [], []
    for r in common:
        c = by_q[r.query_id]
        if r.ndcg_human + r.ndcg_llm > 0 and c.ndcg_human + c.ndcg_llm > 0:
            bias_a.append(relative_delta(r.ndcg_human, r.ndcg_llm))
            bias_b.append(relative_delta(c.ndcg_human, c.ndcg_llm))
    return {
        "performance_p": _safe_p(perf_a, perf_b),
        "bias_p": _safe_p(bias_a, bias_b),
        "queries": len(common),
    }


def _safe_p(a, b):
    try:
        return paired_t_test(a, b)[1]
    except (DegenerateTestError, ValueError):
        return None


TABLE2_COLUMNS = ("model", "dataset", "ndcg_raw", "ndcg_cdc", "bias_raw", "bias_cdc")


def table2_rows(model: str, dataset: str, raw: EvalResult, cdc: EvalResult, scale=100.0):
    return {
        "model": model,
        "dataset": dataset,
        "ndcg_raw": raw.performance * scale,
        "ndcg_cdc": cdc.performance * scale,
        "bias_raw": raw.bias.relative_delta * scale / 100.0,
        "bias_cdc": cdc.bias.relative_delta * scale / 100.0,
    }


def table2_csv(rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE2_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in TABLE2_COLUMNS})
    return buf.getvalue()


def table2_json(rows: Iterable[Mapping]) -> str:
    """Nest rows as model -> dataset -> {performance, bias} -> {raw, cdc}."""
    out: dict = {}
    for row in rows:
        out.setdefault(row["model"], {})[row["dataset"]] = {
            "performance": {"raw": row["ndcg_raw"], "cdc": row["ndcg_cdc"]},
            "bias": {"raw": row["bias_raw"], "cdc": row["bias_cdc"]},
        }
    return json.dumps(out, indent=2)
