"""Diagnose and correct retriever preference for low-perplexity documents."""

from .causal import BiasEstimate, Observation, diagnose, ols, two_stage_iv, wald_estimator
from .cdc import CdcConfig, CorrectedRun, correct_scores, run_cdc
from .datamodel import (
    Dataset,
    EstimationSample,
    ScoredPair,
    SourceLabel,
    build_estimation_set,
    ingest_jsonl,
)
from .metrics import RankedRun, ndcg_at_k, paired_t_test, pearson, per_source_ndcg, relative_delta

__version__ = "0.1.0"

__all__ = [
    "BiasEstimate",
    "CdcConfig",
    "CorrectedRun",
    "Dataset",
    "EstimationSample",
    "Observation",
    "RankedRun",
    "ScoredPair",
    "SourceLabel",
    "build_estimation_set",
    "correct_scores",
    "diagnose",
    "ingest_jsonl",
    "ndcg_at_k",
    "ols",
    "paired_t_test",
    "pearson",
    "per_source_ndcg",
    "relative_delta",
    "run_cdc",
    "two_stage_iv",
    "wald_estimator",
]
