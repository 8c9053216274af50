"""Seeded synthetic worlds with a known perplexity effect.

The structural model is

    p = p0 + beta1 * s + nu          (generated text has lower perplexity)
    r = base + beta2 * p + eps       (the retriever penalises perplexity)

with ``s`` the source indicator. ``eps`` and ``nu`` are independent of ``s``,
so source is a valid instrument for perplexity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .causal import Observation
from .datamodel import Dataset, EstimationSample, ScoredPair, SourceLabel
from .metrics import RankedRun

TRUE_BETA1 = -0.4
TRUE_BETA2 = -0.5


def iv_observations(
    n: int,
    seed=None,
    *,
    beta1: float = TRUE_BETA1,
    beta2: float = TRUE_BETA2,
    p0: float = 3.0,
    r0: float = 0.3,
    noise_sd: float = 0.1,
    ppl_sd: float = 0.5,
    confounding: float = 0.0,
) -> list[Observation]:
    """Unpaired observations with a fair-coin instrument.

    ``confounding`` adds a shared latent to both perplexity and score; OLS of
    ``r`` on ``p`` is then biased while the IV estimate is not.
    """
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, size=n)
    u = rng.standard_normal(n)
    p = p0 + beta1 * s + ppl_sd * rng.standard_normal(n) + confounding * u
    p = np.maximum(p, 1e-3)
    r = r0 + beta2 * p + noise_sd * rng.standard_normal(n) + confounding * u
    return [Observation(int(si), float(pi), float(ri)) for si, pi, ri in zip(s, p, r)]


def temperature_beta1(temperature: float) -> float:
    """First-stage strength as a function of sampling temperature.

    Hotter sampling yields rewrites whose perplexity sits closer to the
    human original, so the source effect on perplexity weakens.
    """
    return -0.44 + 0.1 * temperature


@dataclass(frozen=True)
class PairedDraws:
    """Standard-normal draws reused across worlds (common random numbers)."""

    base: np.ndarray
    nu_h: np.ndarray
    nu_g: np.ndarray
    eps_h: np.ndarray
    eps_g: np.ndarray

    @classmethod
    def draw(cls, n: int, seed=None) -> "PairedDraws":
        rng = np.random.default_rng(seed)
        return cls(*(rng.standard_normal(n) for _ in range(5)))


def paired_world(
    n: int,
    seed=None,
    *,
    beta1: float = TRUE_BETA1,
    beta2: float = TRUE_BETA2,
    p0: float = 3.0,
    r0: float = 0.3,
    noise_sd: float = 0.1,
    ppl_sd: float = 0.5,
    base_sd: float = 0.2,
    temperature: float | None = None,
    draws: PairedDraws | None = None,
) -> list[EstimationSample]:
    """Human/generated pairs sharing a per-pair base relevance.

    Pass ``draws`` to regenerate the same pairs under a different ``beta1``.
    """
    dr = draws if draws is not None else PairedDraws.draw(n, seed)
    if len(dr.base) < n:
        raise ValueError("not enough pre-drawn values for n pairs")
    out = []
    for i in range(n):
        base = r0 + base_sd * dr.base[i]
        p_h = max(p0 + ppl_sd * dr.nu_h[i], 1e-3)
        p_g = max(p0 + beta1 + ppl_sd * dr.nu_g[i], 1e-3)
        out.append(
            EstimationSample(
                query_id=f"q{i:05d}",
                r_human=float(base + beta2 * p_h + noise_sd * dr.eps_h[i]),
                r_gen=float(base + beta2 * p_g + noise_sd * dr.eps_g[i]),
                p_human=float(p_h),
                p_gen=float(p_g),
                pair_key=f"d{i:05d}",
                temperature=temperature,
            )
        )
    return out


def samples_to_pairs(samples, prefix: str = "") -> list[ScoredPair]:
    pairs = []
    for smp in samples:
        key = f"{prefix}{smp.pair_key}"
        for src, r, p in (
            (SourceLabel.HUMAN, smp.r_human, smp.p_human),
            (SourceLabel.GENERATED, smp.r_gen, smp.p_gen),
        ):
            pairs.append(
                ScoredPair(
                    query_id=f"{prefix}{smp.query_id}",
                    doc_id=f"{key}-{'h' if src is SourceLabel.HUMAN else 'g'}",
                    source=src,
                    score=r,
                    perplexity=p,
                    temperature=smp.temperature if src is SourceLabel.GENERATED else None,
                    pair_key=key,
                )
            )
    return pairs


def training_dataset(n_pairs: int, seed=None, **world) -> Dataset:
    """Paired records ready for :func:`build_estimation_set`."""
    return Dataset.from_pairs(samples_to_pairs(paired_world(n_pairs, seed, **world)))


def temperature_corpus(
    temperatures=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    docs_per_temp: int = 40,
    seed=None,
    *,
    ppl_slope: float = 0.8,
    beta2: float = TRUE_BETA2,
    noise_sd: float = 0.1,
) -> Dataset:
    """Generated documents at several temperatures; hotter text has higher perplexity."""
    rng = np.random.default_rng(seed)
    pairs = []
    for t in temperatures:
        p = np.maximum(2.5 + ppl_slope * t + 0.3 * rng.standard_normal(docs_per_temp), 1e-3)
        r = 0.3 + beta2 * p + noise_sd * rng.standard_normal(docs_per_temp)
        for j in range(docs_per_temp):
            pairs.append(
                ScoredPair(
                    query_id=f"q{j:04d}",
                    doc_id=f"d{j:04d}-t{t:g}",
                    source=SourceLabel.GENERATED,
                    score=float(r[j]),
                    perplexity=float(p[j]),
                    temperature=float(t),
                )
            )
    return Dataset.from_pairs(pairs)


@dataclass(frozen=True)
class MixedCorpus:
    """Test collection where every human document has a generated twin."""

    runs: tuple[RankedRun, ...]
    qrels: dict[str, dict[str, int]]
    sources: dict[str, SourceLabel]
    perplexities: dict[str, float]
    test: Dataset
    train: Dataset


def mixed_corpus(
    n_queries: int = 50,
    seed=None,
    *,
    twins_per_query: int = 6,
    n_train: int = 200,
    beta1: float = TRUE_BETA1,
    beta2: float = TRUE_BETA2,
    rel_weight: float = 0.5,
    topical_sd: float = 0.3,
    noise_sd: float = 0.05,
    ppl_sd: float = 0.4,
) -> MixedCorpus:
    """Queries with graded human documents, their rewrites and raw retriever scores.

    Twins share relevance and a topical score component; the generated twin
    has lower perplexity and so a higher raw score on average.
    """
    rng = np.random.default_rng(seed)
    train_seed, test_seed = rng.integers(0, 2**63 - 1, size=2)
    train = training_dataset(n_train, int(train_seed), beta1=beta1, beta2=beta2)
    rng = np.random.default_rng(int(test_seed))
    pairs, runs = [], []
    qrels: dict[str, dict[str, int]] = {}
    for qi in range(n_queries):
        qid = f"q{qi:04d}"
        rels = rng.integers(0, 3, size=twins_per_query)
        if rels.max() == 0:
            rels[rng.integers(twins_per_query)] = 1
        scores = {}
        for j, rel in enumerate(rels):
            topical = rel_weight * rel + topical_sd * rng.standard_normal()
            key = f"{qid}-d{j:02d}"
            for src, shift in ((SourceLabel.HUMAN, 0.0), (SourceLabel.GENERATED, beta1)):
                p = max(3.0 + shift + ppl_sd * rng.standard_normal(), 1e-3)
                score = topical + beta2 * p + noise_sd * rng.standard_normal()
                doc = f"{key}-{'h' if src is SourceLabel.HUMAN else 'g'}"
                pairs.append(
                    ScoredPair(qid, doc, src, float(score), float(p), int(rel), pair_key=key)
                )
                scores[doc] = float(score)
                qrels.setdefault(qid, {})[doc] = int(rel)
        runs.append(RankedRun.from_scores(qid, scores))
    test = Dataset.from_pairs(pairs)
    return MixedCorpus(
        runs=tuple(runs),
        qrels=qrels,
        sources={p.doc_id: p.source for p in pairs},
        perplexities={p.doc_id: p.perplexity for p in pairs},
        test=test,
        train=train,
    )
