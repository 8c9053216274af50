"""Instrumental-variable estimation of the perplexity effect on relevance scores.

Document source (human = 0, generated = 1) is the instrument, perplexity the
treatment and the retriever score the outcome. Both stages are ordinary
least squares with an intercept, so with a binary instrument the second-stage
slope coincides with the Wald ratio of group-mean differences.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .datamodel import EstimationSample
from .errors import (
    DegenerateInstrumentError,
    InsufficientDataError,
    SingularDesignError,
    ValidationError,
    WeakInstrumentError,
    WeakInstrumentWarning,
)

WEAK_INSTRUMENT_T = 2.0


@dataclass(frozen=True)
class Observation:
    s: int
    p: float
    r: float

    def __post_init__(self):
        if self.s not in (0, 1):
            raise ValidationError(f"instrument must be 0 or 1, got {self.s!r}")
        if not self.p > 0:
            raise ValidationError(f"perplexity must be > 0, got {self.p!r}")


class OlsFit(NamedTuple):
    slope: float
    intercept: float
    se_slope: float
    t: float
    p: float


@dataclass(frozen=True)
class BiasEstimate:
    beta1: float
    beta2: float
    se1: float
    se2: float
    p1: float
    p2: float
    n: int
    intercepts: tuple[float, float]
    first_stage_t: float = math.inf
    weak_instrument: bool = False

    def to_record(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "se": {"beta1": self.se1, "beta2": self.se2},
            "p": {"beta1": self.p1, "beta2": self.p2},
            "n": self.n,
            "intercepts": list(self.intercepts),
            "weak_instrument": self.weak_instrument,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2)

    def table_cell(self) -> str:
        """Format as ``"beta2 (p)"`` the way a causal-effect table prints it."""
        return f"{self.beta2:.2f} ({format_p(self.p2)})"


def format_p(p: float) -> str:
    """Two decimals above 0.1, one-digit scientific notation below (``2e-12``)."""
    if p >= 0.1:
        return f"{p:.2f}"
    if p == 0:
        return "0"
    mantissa, exp = f"{p:.0e}".split("e")
    return f"{mantissa}e{int(exp)}"


def table1_csv(rows: Iterable[tuple[str, str, BiasEstimate]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "dataset", "beta1", "beta2", "se2", "p2", "n", "cell", "significant"])
    for model, dataset, est in rows:
        w.writerow(
            [model, dataset, est.beta1, est.beta2, est.se2, est.p2, est.n,
             est.table_cell(), int(est.p2 < 0.05)]
        )
    return buf.getvalue()


def _t_pvalue(t: float, df: int) -> float:
    if math.isnan(t):
        return 1.0
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


def _centred(v: np.ndarray) -> np.ndarray:
    # shifting by the first value first makes a constant vector centre to exact zeros
    v = v - v[0]
    return v - v.mean()


def ols(x: Sequence[float], y: Sequence[float]) -> OlsFit:
    """Simple regression of ``y`` on ``x`` with intercept and homoskedastic errors.

    The slope test is two-sided with ``n - 2`` degrees of freedom. A perfect
    fit gives ``se_slope = 0``; then ``t`` is infinite (``p = 0``) unless the
    slope is exactly zero, in which case ``t = 0`` and ``p = 1``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise InsufficientDataError(f"ols needs at least 3 observations, got {n}")
    dx = _centred(x)
    sxx = float(dx @ dx)
    if sxx == 0:
        raise SingularDesignError("regressor has zero variance")
    dy = _centred(y)
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = dy - slope * dx
    sigma2 = float(resid @ resid) / (n - 2)
    se = math.sqrt(sigma2 / sxx)
    return OlsFit(slope, intercept, se, *_slope_test(slope, se, n - 2))


def _slope_test(slope: float, se: float, df: int) -> tuple[float, float]:
    if se == 0:
        if slope == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, slope), 0.0
    t = slope / se
    return t, _t_pvalue(t, df)


def _arrays(obs: Sequence[Observation]):
    s = np.array([o.s for o in obs], dtype=float)
    p = np.array([o.p for o in obs], dtype=float)
    r = np.array([o.r for o in obs], dtype=float)
    return s, p, r


def _check_groups(s: np.ndarray, p: np.ndarray) -> None:
    n1 = int(s.sum())
    n0 = len(s) - n1
    if n0 == 0 or n1 == 0:
        raise WeakInstrumentError(
            "instrument takes a single value; both human and generated records are needed",
            n_human=n0, n_generated=n1,
        )
    if n0 < 2 or n1 < 2:
        raise InsufficientDataError(
            f"each instrument group needs >= 2 observations (got {n0} human, {n1} generated)"
        )
    m0, m1 = p[s == 0].mean(), p[s == 1].mean()
    if abs(m1 - m0) <= 1e-12 * max(abs(m0), abs(m1)):
        raise DegenerateInstrumentError(
            "group mean perplexities coincide; the first stage carries no variation"
        )


def wald_estimator(obs: Sequence[Observation]) -> float:
    """Ratio of the score gap to the perplexity gap between instrument groups."""
    s, p, r = _arrays(obs)
    _check_groups(s, p)
    g1, g0 = s == 1, s == 0
    return float((r[g1].mean() - r[g0].mean()) / (p[g1].mean() - p[g0].mean()))


def two_stage_iv(obs: Sequence[Observation], *, iv_se: bool = False) -> BiasEstimate:
    """Two-stage least squares of score on perplexity, instrumented by source.

    Parameters
    ----------
    obs : sequence of Observation
        Pooled observations; both instrument groups need at least two entries.
    iv_se : bool
        If True the second-stage standard error uses residuals against the
        observed perplexity (the textbook 2SLS correction). The default is the
        plain second-stage OLS error.

    Returns
    -------
    BiasEstimate
        First-stage slope ``beta1`` (source -> perplexity) and second-stage
        slope ``beta2`` (perplexity -> score) with standard errors and
        two-sided p-values.
    """
    s, p, r = _arrays(obs)
    _check_groups(s, p)
    n = len(s)

    first = ols(s, p)
    p_hat = first.intercept + first.slope * s
    second = ols(p_hat, r)
    se2, t2, p2 = second.se_slope, second.t, second.p
    if iv_se:
        resid = r - second.intercept - second.slope * p
        dx = p_hat - p_hat.mean()
        se2 = math.sqrt(float(resid @ resid) / (n - 2) / float(dx @ dx))
        t2, p2 = _slope_test(second.slope, se2, n - 2)

    weak = abs(first.t) < WEAK_INSTRUMENT_T
    if weak:
        warnings.warn(
            f"weak instrument: first-stage |t| = {abs(first.t):.3g} < {WEAK_INSTRUMENT_T}",
            WeakInstrumentWarning,
            stacklevel=2,
        )
    return BiasEstimate(
        beta1=first.slope,
        beta2=second.slope,
        se1=first.se_slope,
        se2=se2,
        p1=first.p,
        p2=p2,
        n=n,
        intercepts=(first.intercept, second.intercept),
        first_stage_t=first.t,
        weak_instrument=weak,
    )


def observations_from_samples(samples: Iterable[EstimationSample]) -> list[Observation]:
    out = []
    for smp in samples:
        out.append(Observation(s=0, p=smp.p_human, r=smp.r_human))
        out.append(Observation(s=1, p=smp.p_gen, r=smp.r_gen))
    return out


def diagnose(samples: Iterable[EstimationSample], *, iv_se: bool = False) -> BiasEstimate:
    """Estimate the perplexity effect from paired human/generated samples."""
    samples = list(samples)
    if len(samples) < 2:
        raise InsufficientDataError(f"diagnosis needs at least 2 samples, got {len(samples)}")
    return two_stage_iv(observations_from_samples(samples), iv_se=iv_se)


def estimate_from_record(record: dict) -> BiasEstimate:
    """Rebuild a :class:`BiasEstimate` from :meth:`BiasEstimate.to_record` output."""
    return BiasEstimate(
        beta1=record["beta1"],
        beta2=record["beta2"],
        se1=record["se"]["beta1"],
        se2=record["se"]["beta2"],
        p1=record["p"]["beta1"],
        p2=record["p"]["beta2"],
        n=record["n"],
        intercepts=tuple(record["intercepts"]),
        weak_instrument=record.get("weak_instrument", False),
    )


__all__ = [
    "BiasEstimate",
    "Observation",
    "OlsFit",
    "diagnose",
    "estimate_from_record",
    "format_p",
    "observations_from_samples",
    "ols",
    "table1_csv",
    "two_stage_iv",
    "wald_estimator",
]
