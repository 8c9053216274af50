"""Inference-time debiasing: diagnose the perplexity effect, then subtract it.

The calibrated score of a candidate is ``raw - beta2 * perplexity``. Only the
``top_k`` candidates by raw score are recalibrated and re-sorted; the rest
keep their raw scores and stay below the corrected prefix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .causal import BiasEstimate, diagnose
from .datamodel import Dataset, build_estimation_set
from .errors import MissingValueError, ParseError, ValidationError
from .metrics import RankedRun, rank_key

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CdcConfig:
    budget: int = 128
    top_k_correct: int = 10
    beta2_override: float | None = None
    beta2_scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.budget < 2:
            raise ValueError(f"budget must be >= 2, got {self.budget}")
        if self.top_k_correct < 1:
            raise ValueError(f"top_k_correct must be >= 1, got {self.top_k_correct}")
        if not self.beta2_scale >= 0:
            raise ValueError(f"beta2_scale must be >= 0, got {self.beta2_scale}")


class CorrectedEntry(NamedTuple):
    doc_id: str
    raw_score: float
    perplexity: float | None
    calibrated_score: float
    corrected: bool


@dataclass(frozen=True)
class CorrectedRun:
    """A recalibrated ranking.

    ``entries`` holds the corrected prefix (sorted by calibrated score)
    followed by the untouched tail (still in raw order).
    """

    query_id: str
    entries: tuple[CorrectedEntry, ...]
    beta2_used: float

    @property
    def n_corrected(self) -> int:
        return sum(e.corrected for e in self.entries)

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def display_scores(self) -> list[float]:
        """Scores whose descending order (ties by doc id) reproduces ``entries``.

        Corrected entries show their calibrated score. An uncorrected entry
        that would sort above its predecessor is shown one ulp below it, so
        no tail candidate overtakes the corrected prefix.
        """
        out: list[float] = []
        prev = None
        for e in self.entries:
            score = e.calibrated_score
            if prev is not None and rank_key((e.doc_id, score)) < rank_key(prev):
                score = float(np.nextafter(prev[1], -np.inf))
            out.append(score)
            prev = (e.doc_id, score)
        return out

    def to_ranked_run(self, k: int | None = None) -> RankedRun:
        return RankedRun(
            query_id=self.query_id,
            ranking=tuple(zip(self.doc_ids, self.display_scores())),
            k=k,
        )


def correct_scores(
    run: RankedRun, perplexities: Mapping[str, float], beta2: float, top_k: int = 10
) -> CorrectedRun:
    """Apply ``calibrated = raw - beta2 * perplexity`` to the top-k raw candidates."""
    if not math.isfinite(beta2):
        raise ValidationError(f"beta2 must be finite, got {beta2!r}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    head: list[CorrectedEntry] = []
    tail: list[CorrectedEntry] = []
    for i, (doc_id, raw) in enumerate(run.ranking):
        if not math.isfinite(raw):
            raise ValidationError(f"non-finite score for doc {doc_id!r}", doc_id=doc_id)
        ppl = perplexities.get(doc_id)
        if i < top_k:
            if ppl is None:
                raise MissingValueError(
                    f"no perplexity for doc {doc_id!r} in query {run.query_id!r}",
                    doc_id=doc_id,
                )
            head.append(CorrectedEntry(doc_id, raw, ppl, raw - beta2 * ppl, True))
        else:
            tail.append(CorrectedEntry(doc_id, raw, ppl, raw, False))
    head.sort(key=lambda e: rank_key((e.doc_id, e.calibrated_score)))
    return CorrectedRun(run.query_id, tuple(head + tail), beta2)


def run_cdc(
    train: Dataset | None,
    test_runs: Sequence[RankedRun],
    perplexities: Mapping[str, float],
    cfg: CdcConfig = CdcConfig(),
) -> tuple[list[CorrectedRun], BiasEstimate | None]:
    """Diagnose on a budgeted estimation set, then correct every test run.

    Returns the corrected runs and the estimate that produced the
    coefficient. With ``cfg.beta2_override`` no diagnosis happens and the
    estimate is ``None``; the coefficient actually applied is always
    ``CorrectedRun.beta2_used``.
    """
    estimate = None
    if cfg.beta2_override is not None:
        beta2 = cfg.beta2_override
    else:
        if train is None:
            raise ValueError("a training dataset is required unless beta2_override is set")
        samples = build_estimation_set(train, cfg.budget, seed=cfg.seed)
        estimate = diagnose(samples)
        beta2 = estimate.beta2
        log.info("diagnosed beta2=%.6g on %d samples", beta2, len(samples))
    beta2 *= cfg.beta2_scale
    corrected = [correct_scores(r, perplexities, beta2, cfg.top_k_correct) for r in test_runs]
    return corrected, estimate


def format_trec_run(runs: Iterable[CorrectedRun | RankedRun], tag: str) -> str:
    """Render ``query_id Q0 doc_id rank score tag`` lines."""
    lines = []
    for run in runs:
        ranked = run.to_ranked_run() if isinstance(run, CorrectedRun) else run
        for rank, (doc_id, score) in enumerate(ranked.ranking, start=1):
            lines.append(f"{ranked.query_id} Q0 {doc_id} {rank} {score!r} {tag}\n")
    return "".join(lines)


def write_trec_run(runs: Iterable[CorrectedRun | RankedRun], path: str | Path, tag: str) -> None:
    Path(path).write_text(format_trec_run(runs, tag), encoding="utf-8")


def read_trec_run(path: str | Path) -> list[RankedRun]:
    """Read a TREC run; candidates are ordered by score as trec_eval does."""
    scores: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(f"line {lineno}: expected 6 columns, got {len(parts)}", line=lineno)
            qid, _q0, doc_id, _rank, score, _tag = parts
            try:
                value = float(score)
            except ValueError:
                raise ParseError(f"line {lineno}: bad score {score!r}", line=lineno) from None
            per_q = scores.setdefault(qid, {})
            if doc_id in per_q:
                raise ParseError(f"line {lineno}: duplicate doc {doc_id!r} for query {qid!r}",
                                 line=lineno)
            per_q[doc_id] = value
    return [RankedRun.from_scores(qid, s) for qid, s in scores.items()]


def read_qrels(path: str | Path) -> dict[str, dict[str, int]]:
    """Read TREC qrels (``qid iter doc_id rel``); three-column files are accepted too."""
    out: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 4:
                qid, _it, doc_id, rel = parts
            elif len(parts) == 3:
                qid, doc_id, rel = parts
            else:
                raise ParseError(f"line {lineno}: expected 3 or 4 columns", line=lineno)
            try:
                out.setdefault(qid, {})[doc_id] = int(rel)
            except ValueError:
                raise ParseError(f"line {lineno}: bad relevance {rel!r}", line=lineno) from None
    return out


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for doc_id, rel in qrels[qid].items():
                fh.write(f"{qid} 0 {doc_id} {rel}\n")
