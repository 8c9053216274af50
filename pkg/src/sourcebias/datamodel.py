"""Domain records, JSONL ingestion and estimation-set construction.

Perplexity is stored as the mean per-token cross-entropy in natural-log
units. It is never exponentiated here.
"""

from __future__ import annotations

import enum
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    DuplicateKeyError,
    InsufficientDataError,
    ParseError,
    SourceBiasError,
    ValidationError,
    WeakInstrumentError,
)

REQUIRED_FIELDS = ("query_id", "doc_id", "source", "score", "perplexity")
OPTIONAL_FIELDS = ("relevance", "temperature", "pair_key")
KNOWN_FIELDS = REQUIRED_FIELDS + OPTIONAL_FIELDS

# doc_id suffixes marking which side of a human/generated twin a record is.
_SOURCE_SUFFIX = re.compile(r"[-_.#@](h|g|human|gen|generated|llm)$", re.IGNORECASE)


class SourceLabel(enum.IntEnum):
    HUMAN = 0
    GENERATED = 1

    @classmethod
    def parse(cls, value: Any) -> "SourceLabel":
        if isinstance(value, bool):
            raise ValueError(f"invalid source label {value!r}")
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("0", "human", "h"):
                return cls.HUMAN
            if key in ("1", "generated", "gen", "llm", "g"):
                return cls.GENERATED
        raise ValueError(f"invalid source label {value!r}")


def default_pair_key(doc_id: str) -> str:
    """Strip a trailing source marker such as ``-h`` or ``_gen`` from a doc id."""
    return _SOURCE_SUFFIX.sub("", doc_id)


@dataclass(frozen=True)
class ScoredPair:
    query_id: str
    doc_id: str
    source: SourceLabel
    score: float
    perplexity: float
    relevance: int | None = None
    temperature: float | None = None
    pair_key: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError("score must be finite", field="score")
        if not (self.perplexity > 0) or not math.isfinite(self.perplexity):
            raise ValidationError(
                f"perplexity must be > 0, got {self.perplexity!r}", field="perplexity"
            )
        if self.relevance is not None and self.relevance < 0:
            raise ValidationError(
                f"relevance must be >= 0, got {self.relevance!r}", field="relevance"
            )
        if self.temperature is not None and not self.temperature >= 0:
            raise ValidationError(
                f"temperature must be >= 0, got {self.temperature!r}", field="temperature"
            )

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.doc_id)

    @property
    def twin_key(self) -> str:
        return self.pair_key if self.pair_key is not None else default_pair_key(self.doc_id)

    def to_record(self) -> dict:
        rec: dict[str, Any] = {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "source": int(self.source),
            "score": self.score,
            "perplexity": self.perplexity,
        }
        if self.relevance is not None:
            rec["relevance"] = self.relevance
        if self.temperature is not None:
            rec["temperature"] = self.temperature
        if self.pair_key is not None:
            rec["pair_key"] = self.pair_key
        rec.update(self.extra)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "ScoredPair":
        missing = [f for f in REQUIRED_FIELDS if f not in rec]
        if missing:
            raise ValidationError(
                f"missing required field(s): {', '.join(missing)}", field=missing[0]
            )
        try:
            source = SourceLabel.parse(rec["source"])
        except ValueError as exc:
            raise ValidationError(str(exc), field="source") from None
        score = _as_float(rec["score"], "score")
        perplexity = _as_float(rec["perplexity"], "perplexity")
        relevance = rec.get("relevance")
        if relevance is not None:
            if isinstance(relevance, bool) or not isinstance(relevance, int):
                raise ValidationError(
                    f"relevance must be an integer, got {relevance!r}", field="relevance"
                )
        temperature = rec.get("temperature")
        if temperature is not None:
            temperature = _as_float(temperature, "temperature")
        pair_key = rec.get("pair_key")
        if pair_key is not None:
            pair_key = str(pair_key)
        extra = {k: v for k, v in rec.items() if k not in KNOWN_FIELDS}
        return cls(
            query_id=str(rec["query_id"]),
            doc_id=str(rec["doc_id"]),
            source=source,
            score=score,
            perplexity=perplexity,
            relevance=relevance,
            temperature=temperature,
            pair_key=pair_key,
            extra=extra,
        )


def _as_float(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{name} must be a number, got {value!r}", field=name)
    return float(value)


@dataclass(frozen=True)
class EstimationSample:
    """One query's human document and its generated rewrite."""

    query_id: str
    r_human: float
    r_gen: float
    p_human: float
    p_gen: float
    pair_key: str = ""
    temperature: float | None = None

    def __post_init__(self):
        if not (self.p_human > 0 and self.p_gen > 0):
            raise ValidationError("both perplexities must be > 0", field="perplexity")


@dataclass(frozen=True)
class EstimationSet:
    """Samples selected under a budget, plus bookkeeping about what was dropped."""

    samples: tuple[EstimationSample, ...]
    available: int
    skipped: int

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[EstimationSample]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@dataclass(frozen=True)
class Dataset:
    pairs: tuple[ScoredPair, ...]
    qrels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[tuple[str, str], int] = {}
        for i, p in enumerate(self.pairs):
            if p.key in seen:
                raise DuplicateKeyError(
                    f"duplicate (query_id, doc_id) {p.key}", records=[seen[p.key], i]
                )
            seen[p.key] = i

    @classmethod
    def from_pairs(cls, pairs: Iterable[ScoredPair], meta: Mapping[str, str] | None = None):
        pairs = tuple(pairs)
        qrels = {p.key: p.relevance for p in pairs if p.relevance is not None}
        extras = sorted({k for p in pairs for k in p.extra})
        meta = dict(meta or {})
        if extras:
            meta.setdefault("extra_fields", ",".join(extras))
        return cls(pairs=pairs, qrels=qrels, meta=meta)

    def __len__(self) -> int:
        return len(self.pairs)

    def query_ids(self) -> list[str]:
        return sorted({p.query_id for p in self.pairs})

    def qrels_by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(dict)
        for (qid, did), rel in self.qrels.items():
            out[qid][did] = rel
        return dict(out)

    def sources(self) -> dict[str, SourceLabel]:
        """Map doc_id to source label; a doc must keep one label across queries."""
        out: dict[str, SourceLabel] = {}
        for p in self.pairs:
            if out.setdefault(p.doc_id, p.source) != p.source:
                raise ValidationError(f"conflicting source labels for doc {p.doc_id!r}")
        return out

    def perplexities(self) -> dict[str, float]:
        """Map doc_id to perplexity; perplexity is query-independent."""
        out: dict[str, float] = {}
        for p in self.pairs:
            if out.setdefault(p.doc_id, p.perplexity) != p.perplexity:
                raise ValidationError(f"conflicting perplexities for doc {p.doc_id!r}")
        return out

    def validate(self) -> dict[str, Any]:
        """Check that every qrel key refers to an existing pair."""
        keys = {p.key for p in self.pairs}
        dangling = sorted(k for k in self.qrels if k not in keys)
        return {
            "accepted": len(self.pairs),
            "dangling_qrels": [list(k) for k in dangling],
        }


def _iter_lines(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def _parse_line(lineno: int, line: str) -> ScoredPair:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})", line=lineno) from None
    if not isinstance(rec, dict):
        raise ParseError(f"line {lineno}: expected a JSON object", line=lineno)
    try:
        return ScoredPair.from_record(rec)
    except ValidationError as exc:
        raise ValidationError(
            f"line {lineno}: {exc}", line=lineno, field=exc.details.get("field")
        ) from None


def ingest_jsonl(path: str | Path) -> Dataset:
    """Read a JSONL file of scored pairs into a validated :class:`Dataset`.

    Raises on the first malformed or invalid line. Duplicate
    ``(query_id, doc_id)`` keys are reported with both line numbers.
    """
    path = Path(path)
    pairs: list[ScoredPair] = []
    first_seen: dict[tuple[str, str], int] = {}
    for lineno, line in _iter_lines(path):
        pair = _parse_line(lineno, line)
        if pair.key in first_seen:
            raise DuplicateKeyError(
                f"duplicate (query_id, doc_id) {pair.key} on lines "
                f"{first_seen[pair.key]} and {lineno}",
                lines=[first_seen[pair.key], lineno],
            )
        first_seen[pair.key] = lineno
        pairs.append(pair)
    return Dataset.from_pairs(pairs)


def validate_jsonl(path: str | Path) -> dict[str, Any]:
    """Validate every line and collect errors instead of stopping at the first."""
    accepted = skipped = 0
    errors: list[dict] = []
    first_seen: dict[tuple[str, str], int] = {}
    for lineno, line in _iter_lines(Path(path)):
        try:
            pair = _parse_line(lineno, line)
            if pair.key in first_seen:
                raise DuplicateKeyError(
                    f"duplicate (query_id, doc_id) {pair.key} on lines "
                    f"{first_seen[pair.key]} and {lineno}",
                    lines=[first_seen[pair.key], lineno],
                )
        except SourceBiasError as exc:
            skipped += 1
            errors.append({"line": lineno, **exc.to_dict()})
            continue
        first_seen[pair.key] = lineno
        accepted += 1
    return {"accepted": accepted, "skipped": skipped, "errors": len(errors), "details": errors}


def dump_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.pairs:
            fh.write(json.dumps(p.to_record()) + "\n")


def build_estimation_set(
    train: Dataset, budget: int, *, seed: int | None = None
) -> EstimationSet:
    """Pair human and generated records and keep at most ``budget`` of them.

    Records are joined on ``(query_id, pair_key)``. A group with exactly one
    human and one generated record is a complete pair; anything else is
    skipped and counted. Without ``seed`` the first ``budget`` pairs in sorted
    key order are kept; with ``seed`` a uniform random subset is drawn and
    then returned in sorted key order.
    """
    if budget < 2:
        raise ValueError(f"budget must be >= 2, got {budget}")
    groups: dict[tuple[str, str], list[ScoredPair]] = defaultdict(list)
    for p in train.pairs:
        groups[(p.query_id, p.twin_key)].append(p)

    complete: list[EstimationSample] = []
    skipped = 0
    for key in sorted(groups):
        members = groups[key]
        human = [p for p in members if p.source == SourceLabel.HUMAN]
        gen = [p for p in members if p.source == SourceLabel.GENERATED]
        if len(human) != 1 or len(gen) != 1:
            skipped += 1
            continue
        h, g = human[0], gen[0]
        complete.append(
            EstimationSample(
                query_id=key[0],
                r_human=h.score,
                r_gen=g.score,
                p_human=h.perplexity,
                p_gen=g.perplexity,
                pair_key=key[1],
                temperature=g.temperature,
            )
        )
    present = {p.source for p in train.pairs}
    if len(present) == 1:
        raise WeakInstrumentError(
            f"all records have source {present.pop().name.lower()}; "
            "the instrument needs both human and generated records"
        )
    if len(complete) < 2:
        raise InsufficientDataError(
            f"need at least 2 complete human/generated pairs, found {len(complete)}",
            available=len(complete),
            skipped=skipped,
        )
    if seed is None or len(complete) <= budget:
        chosen = complete[:budget]
    else:
        idx = np.random.default_rng(seed).choice(len(complete), size=budget, replace=False)
        chosen = [complete[i] for i in sorted(idx)]
    return EstimationSet(samples=tuple(chosen), available=len(complete), skipped=skipped)
