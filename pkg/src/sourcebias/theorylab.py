"""Desk-scale linear encoder/decoder world for the gradient-overlap claim.

An instance holds a decoder ``W`` (N x D), token embeddings ``d_emb``
(L x N), query embeddings ``q_emb`` and a row-stochastic token matrix ``d``.
The decoder maps embeddings to token distributions with a linear
normalisation ``sigma(z) = z / rowsum(z)`` instead of a softmax.

Losses
------
mlm        -(1/L) * sum_{l,j} d_lj * log sigma(d_emb W)_lj
retrieval  -<mean_l d_emb_l, mean_l q_emb_l>

The claim under test is ``grad retrieval = K * grad mlm`` elementwise with
``K_ln = lam * k_l / (L * (1 - k_l))`` and ``k_l = sum_j (d_emb W)_lj``,
together with the bound ``k_l <= 1/sqrt(N)``. Every quantity here is
computed exactly and reported as is; nothing is tuned to make the claim hold.
Two facts matter when reading reports: ``k_l`` is the l1 norm of a positive
vector whose l2 norm is 1, so ``k_l >= 1`` whenever the decoder is
semi-orthogonal; and when ``d = sigma(d_emb W)`` the mlm loss sits at its
minimum in ``d_emb``, so its gradient vanishes there.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .errors import AssumptionViolation, DomainError

CONDITIONS = ("collinearity", "semi_orthogonality", "cooperation")
IDENTITY_TOL = 1e-8
FD_TOL = 1e-5
KL_TOL = 1e-12
NEGATIVE_CONTROL_MARGIN = 1e-3


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def make_semi_orthogonal_positive(N: int, D: int, seed=None) -> np.ndarray:
    """Non-negative ``W`` with ``W @ W.T == I_N`` built from disjoint column blocks.

    Without a seed the D columns are split into N contiguous blocks as evenly
    as possible and each row is constant on its block. With a seed the block
    sizes and the positive row entries are random.
    """
    if N < 1 or D < 1:
        raise ValueError("N and D must be positive")
    if N > D:
        raise ValueError(f"need N <= D for disjoint supports, got N={N}, D={D}")
    W = np.zeros((N, D))
    if seed is None:
        blocks = np.array_split(np.arange(D), N)
        for i, cols in enumerate(blocks):
            W[i, cols] = 1.0 / math.sqrt(len(cols))
        return W
    rng = _rng(seed)
    cuts = np.sort(rng.choice(np.arange(1, D), size=N - 1, replace=False)) if N > 1 else []
    for i, cols in enumerate(np.split(np.arange(D), cuts)):
        v = rng.uniform(0.2, 1.0, size=len(cols))
        W[i, cols] = v / np.linalg.norm(v)
    return W


def sigma(z: np.ndarray) -> np.ndarray:
    """Row-wise linear normalisation onto the simplex."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise DomainError("linear normalisation needs strictly positive entries")
    return z / z.sum(axis=-1, keepdims=True)


def encode(d: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Left inverse of the decoder: unit-normalised rows of ``d @ W.T``.

    For ``d = sigma(e @ W)`` with unit-norm rows ``e`` and semi-orthogonal
    ``W`` this returns ``e`` exactly (up to rounding).
    """
    e = np.asarray(d, dtype=float) @ W.T
    return e / np.linalg.norm(e, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LabInstance:
    W: np.ndarray
    d_emb: np.ndarray
    q_emb: np.ndarray
    d: np.ndarray
    lam: float

    @property
    def L(self) -> int:
        return self.d_emb.shape[0]

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    def conditions(self, tol: float = 1e-10) -> dict[str, bool]:
        """Which of the three structural conditions hold, plus the side invariants."""
        z = self.d_emb @ self.W
        pooled_q = self.q_emb.sum(axis=0)
        pooled_d = self.d_emb.sum(axis=0)
        out = {
            "collinearity": bool(np.allclose(pooled_q, self.lam * pooled_d, rtol=0, atol=tol)),
            "semi_orthogonality": bool(
                np.abs(self.W @ self.W.T - np.eye(self.N)).max() <= max(tol, 1e-12)
            ),
            "cooperation": bool(
                np.all(z > 0) and np.abs(self.d - z / z.sum(1, keepdims=True)).max() <= tol
            ),
            "unit_rows": bool(np.abs(np.linalg.norm(self.d_emb, axis=1) - 1).max() <= tol),
            "positive_logits": bool(np.all(z > 0)),
            "stochastic_d": bool(np.abs(self.d.sum(axis=1) - 1).max() <= tol),
        }
        return out

    def validate(self) -> None:
        bad = [k for k, ok in self.conditions().items() if not ok]
        if bad:
            raise AssumptionViolation(f"instance violates: {', '.join(bad)}", violated=bad)


def instance_from_embedding(d_emb: np.ndarray, W: np.ndarray, lam: float) -> LabInstance:
    """Build the cooperative, strongly collinear instance for given embeddings."""
    d_emb = np.asarray(d_emb, dtype=float)
    return LabInstance(W=W, d_emb=d_emb, q_emb=lam * d_emb, d=sigma(d_emb @ W), lam=float(lam))


def make_instance(L: int, D: int, N: int, lam: float = 1.0, seed=None) -> LabInstance:
    """Random instance satisfying all three conditions by construction."""
    if lam <= 0:
        raise ValueError("lam must be > 0")
    rng = _rng(seed)
    W = make_semi_orthogonal_positive(N, D, rng)
    e = rng.uniform(0.1, 1.0, size=(L, N))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return instance_from_embedding(e, W, lam)


class MlmLoss(NamedTuple):
    total: float
    per_token: np.ndarray
    finite: bool


def mlm_token_losses(d: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-token cross-entropy of targets ``d`` under ``z / rowsum(z)``.

    Zero-target entries contribute nothing; a zero probability on a positive
    target gives ``inf`` for that token.
    """
    probs = z / z.sum(axis=1, keepdims=True)
    out = np.zeros(d.shape[0])
    for l in range(d.shape[0]):
        mask = d[l] > 0
        with np.errstate(divide="ignore"):
            out[l] = -float(np.sum(d[l, mask] * np.log(probs[l, mask])))
    return out


def loss_mlm(inst: LabInstance) -> MlmLoss:
    per_token = mlm_token_losses(inst.d, inst.d_emb @ inst.W)
    finite = bool(np.all(np.isfinite(per_token)))
    return MlmLoss(float(per_token.mean()), per_token, finite)


def retrieval_loss(d_emb: np.ndarray, q_emb: np.ndarray) -> float:
    L = d_emb.shape[0]
    return -float(d_emb.sum(axis=0) @ q_emb.sum(axis=0)) / L**2


def loss_retrieval(inst: LabInstance) -> float:
    if inst.d_emb.shape != inst.q_emb.shape:
        raise ValueError("d_emb and q_emb must have the same shape")
    return retrieval_loss(inst.d_emb, inst.q_emb)


class Gradients(NamedTuple):
    mlm: np.ndarray
    retrieval: np.ndarray
    k: np.ndarray
    K: np.ndarray


def mlm_grad(d: np.ndarray, d_emb: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Exact derivative of the mlm loss with respect to ``d_emb`` (d held fixed)."""
    L = d.shape[0]
    z = d_emb @ W
    k = z.sum(axis=1, keepdims=True)
    dz = -(d / z - d.sum(axis=1, keepdims=True) / k) / L
    return dz @ W.T


def retrieval_grad(q_emb: np.ndarray) -> np.ndarray:
    L = q_emb.shape[0]
    return np.broadcast_to(-q_emb.sum(axis=0) / L**2, q_emb.shape).copy()


def scaling_matrix(inst: LabInstance) -> tuple[np.ndarray, np.ndarray]:
    """Row sums ``k`` of the decoder logits and ``K = lam k / (L (1 - k))``."""
    k = (inst.d_emb @ inst.W).sum(axis=1)
    if np.any(k == 1.0):
        raise AssumptionViolation("k_l == 1 makes K undefined")
    K = np.repeat((inst.lam * k / (inst.L * (1.0 - k)))[:, None], inst.N, axis=1)
    return k, K


def grads_analytic(inst: LabInstance, *, strict: bool = False) -> Gradients:
    """Both loss gradients with respect to ``d_emb`` plus ``k`` and ``K``.

    With ``strict=True`` an instance with any ``k_l >= 1`` (which makes ``K``
    non-positive) raises :class:`AssumptionViolation`.
    """
    k, K = scaling_matrix(inst)
    if strict and np.any(k >= 1.0):
        raise AssumptionViolation(
            f"k_l < 1 required, max k_l = {k.max():.6g}", max_k=float(k.max())
        )
    return Gradients(mlm_grad(inst.d, inst.d_emb, inst.W), retrieval_grad(inst.q_emb), k, K)


def finite_difference(fun: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6):
    """Central-difference gradient of a scalar function of a matrix."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fplus = fun(x)
        x[idx] = orig - step
        fminus = fun(x)
        x[idx] = orig
        grad[idx] = (fplus - fminus) / (2 * step)
    return grad


@dataclass(frozen=True, eq=False)
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_err: float
    max_rel_err: float


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray) -> GradCheck:
    # relative to the gradient scale, floored at 1 for these unit-scale losses
    abs_err = float(np.abs(analytic - numeric).max())
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1.0)
    return GradCheck(analytic, numeric, abs_err, abs_err / scale)


def gradient_check(inst: LabInstance, step: float = 1e-6) -> tuple[GradCheck, GradCheck]:
    """Compare analytic mlm and retrieval gradients with central differences at ``inst``."""
    g = grads_analytic(inst)
    W, d, q = inst.W, inst.d, inst.q_emb
    num_mlm = finite_difference(
        lambda e: float(mlm_token_losses(d, e @ W).mean()), inst.d_emb, step
    )
    num_ret = finite_difference(lambda e: retrieval_loss(e, q), inst.d_emb, step)
    return compare_gradients(g.mlm, num_mlm), compare_gradients(g.retrieval, num_ret)


def probe_point(inst: LabInstance, rng, scale: float = 0.1) -> LabInstance:
    """Same targets, embeddings moved off the cooperative point (mlm gradient non-zero)."""
    e = inst.d_emb * np.exp(scale * _rng(rng).standard_normal(inst.d_emb.shape))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return replace(inst, d_emb=e)


def identity_error(inst: LabInstance) -> float:
    """Max elementwise gap between the retrieval gradient and ``K * mlm gradient``."""
    g = grads_analytic(inst)
    return float(np.abs(g.retrieval - g.K * g.mlm).max())


def break_condition(inst: LabInstance, which: str, seed=None) -> LabInstance:
    """Return a copy violating exactly one of the three conditions."""
    rng = _rng(seed)
    if which == "collinearity":
        noise = rng.uniform(0.1, 0.5, size=inst.q_emb.shape)
        return replace(inst, q_emb=inst.q_emb + noise)
    if which == "semi_orthogonality":
        W = inst.W + rng.uniform(0.05, 0.3, size=inst.W.shape)
        return replace(inst, W=W, d=sigma(inst.d_emb @ W))
    if which == "cooperation":
        d = sigma(inst.d * np.exp(0.5 * rng.standard_normal(inst.d.shape)))
        return replace(inst, d=d)
    raise ValueError(f"unknown condition {which!r}; expected one of {CONDITIONS}")


@dataclass
class TheoremReport:
    trials: int
    passed: int
    max_identity_err: float
    max_fd_err: float
    kl_bound_ok: bool
    max_k_over_bound: float
    rows: list[dict] = field(default_factory=list)

    @property
    def pass_rate(self) -> float | None:
        return self.passed / self.trials if self.trials else None

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "pass_rate": self.pass_rate,
            "pass_rate_defined": self.trials > 0,
            "max_identity_err": self.max_identity_err,
            "max_fd_err": self.max_fd_err,
            "kl_bound_ok": self.kl_bound_ok,
            "max_k_over_bound": self.max_k_over_bound,
            "expected_failures": sum(r["expected_failure"] for r in self.rows),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["trial", "L", "D", "N", "lam", "broken", "identity_err", "fd_err",
                "max_k", "k_bound", "k_bound_ok", "passed", "expected_failure"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r[c] for c in cols})
        return buf.getvalue()


def verify_theorem1(
    trials: int,
    dims: tuple[tuple[int, int], tuple[int, int], tuple[int, int]] = ((2, 8), (4, 32), (2, 8)),
    seed: int = 0,
    *,
    break_with: str | None = None,
    lam_range: tuple[float, float] = (0.5, 2.0),
    step: float = 1e-6,
) -> TheoremReport:
    """Sample condition-satisfying instances and check identity, gradients and bound.

    ``dims`` gives inclusive ranges for (L, D, N); N is capped at D. Each
    trial draws from its own child of ``SeedSequence(seed)``. With
    ``break_with`` one condition is violated on every trial and a trial whose
    identity error exceeds the negative-control margin is marked as an
    expected failure.
    """
    (lo_L, hi_L), (lo_D, hi_D), (lo_N, hi_N) = dims
    rows = []
    max_id = max_fd = 0.0
    kl_ok = True
    worst_ratio = 0.0
    passed = 0
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        L = int(rng.integers(lo_L, hi_L + 1))
        D = int(rng.integers(lo_D, hi_D + 1))
        N = int(rng.integers(lo_N, min(hi_N, D) + 1))
        lam = float(rng.uniform(*lam_range))
        inst = make_instance(L, D, N, lam, rng)
        if break_with is not None:
            inst = break_condition(inst, break_with, rng)
        err = identity_error(inst)
        fd = max(c.max_rel_err for c in gradient_check(inst, step))
        fd = max(fd, *(c.max_rel_err for c in gradient_check(probe_point(inst, rng), step)))
        k = (inst.d_emb @ inst.W).sum(axis=1)
        bound = 1.0 / math.sqrt(N)
        k_ok = bool(np.all(k <= bound + KL_TOL))
        ok = err < IDENTITY_TOL and fd < FD_TOL and k_ok
        passed += ok
        max_id = max(max_id, err)
        max_fd = max(max_fd, fd)
        kl_ok &= k_ok
        worst_ratio = max(worst_ratio, float(k.max() / bound))
        rows.append({
            "trial": t, "L": L, "D": D, "N": N, "lam": lam, "broken": break_with or "",
            "identity_err": err, "fd_err": fd, "max_k": float(k.max()), "k_bound": bound,
            "k_bound_ok": k_ok, "passed": ok,
            "expected_failure": break_with is not None and err > NEGATIVE_CONTROL_MARGIN,
        })
    return TheoremReport(trials, passed, max_id, max_fd, kl_ok, worst_ratio, rows)


@dataclass(frozen=True, eq=False)
class CorollaryReport:
    """Per-token mlm deltas, actual and first-order retrieval deltas, and signs.

    ``applicable`` records whether the precondition on every token's mlm
    delta held. ``contract_holds`` is the sign the corollary asserts.
    """

    applicable: bool
    delta_mlm: np.ndarray
    actual_delta_retrieval: float
    predicted_delta_retrieval: float
    contract_holds: bool

    @property
    def actual_delta_relevance(self) -> float:
        return -self.actual_delta_retrieval

    @property
    def predicted_delta_relevance(self) -> float:
        return -self.predicted_delta_retrieval

    @property
    def sign_agreement(self) -> bool:
        return np.sign(self.actual_delta_retrieval) == np.sign(self.predicted_delta_retrieval)

    @property
    def relative_gap(self) -> float:
        a, p = self.actual_delta_retrieval, self.predicted_delta_retrieval
        if a == 0:
            return 0.0 if p == 0 else math.inf
        return abs(p - a) / abs(a)

    def to_dict(self) -> dict:
        return {
            "applicable": self.applicable,
            "delta_mlm": self.delta_mlm.tolist(),
            "actual_delta_retrieval": self.actual_delta_retrieval,
            "predicted_delta_retrieval": self.predicted_delta_retrieval,
            "actual_delta_relevance": self.actual_delta_relevance,
            "predicted_delta_relevance": self.predicted_delta_relevance,
            "sign_agreement": bool(self.sign_agreement),
            "relative_gap": self.relative_gap,
            "contract_holds": self.contract_holds,
        }


def _token_ce(d: np.ndarray, W: np.ndarray) -> np.ndarray:
    return mlm_token_losses(d, encode(d, W) @ W)


def raising_direction(inst: LabInstance, seed=None) -> np.ndarray:
    """Zero-row-sum perturbation of ``d`` whose first-order effect raises every token's CE.

    Moving mass toward tokens with low predicted probability raises the
    cross-entropy by ``-sum_j delta_lj log d_lj`` to first order.
    """
    rng = _rng(seed)
    delta = rng.standard_normal(inst.d.shape)
    delta -= delta.mean(axis=1, keepdims=True)
    logd = np.log(inst.d)
    for l in range(inst.L):
        gain = -float(delta[l] @ logd[l])
        if gain < 0:
            delta[l] = -delta[l]
        elif gain == 0:
            delta[l] = 0
            delta[l, np.argmin(inst.d[l])] += 1
            delta[l, np.argmax(inst.d[l])] -= 1
    return delta / np.abs(delta).max()


def verify_corollary_data(inst: LabInstance, direction: np.ndarray, eps: float) -> CorollaryReport:
    """Compare a document with its higher-perplexity twin.

    ``inst.d`` plays the low-perplexity (generated) document; the twin is
    ``d + eps * direction`` after the direction is centred to zero row sums. Both are embedded with
    :func:`encode` and scored against the fixed ``inst.q_emb``. The first-order
    prediction is the K-weighted sum of per-token mlm deltas.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d2 = inst.d
    direction = np.asarray(direction, dtype=float)
    # a zero-row-sum step keeps rows on the simplex without a rounding renormalisation
    d1 = d2 + eps * (direction - direction.mean(axis=1, keepdims=True))
    if np.any(d1 <= 0):
        raise DomainError("perturbed token distribution left the open simplex")
    e2 = encode(d2, inst.W)
    e1 = encode(d1, inst.W)
    delta_mlm = _token_ce(d1, inst.W) - _token_ce(d2, inst.W)
    _, K = scaling_matrix(replace(inst, d_emb=e2))
    predicted = float(K[:, 0] @ delta_mlm)
    actual = retrieval_loss(e1, inst.q_emb) - retrieval_loss(e2, inst.q_emb)
    return CorollaryReport(
        applicable=bool(np.all(delta_mlm > 0)),
        delta_mlm=delta_mlm,
        actual_delta_retrieval=actual,
        predicted_delta_retrieval=predicted,
        contract_holds=-predicted < 0,
    )


def verify_corollary_model(
    inst: LabInstance, emb_perturbation: np.ndarray, eps: float
) -> CorollaryReport:
    """Compare the current embeddings with a perturbed "better language model".

    The candidate model embeds the same document as
    ``normalise(d_emb + eps * emb_perturbation)``. Its per-token mlm deltas,
    the actual retrieval delta against the fixed ``inst.q_emb`` and the
    K-weighted prediction are reported. The asserted sign is
    ``actual_delta_retrieval < 0``.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    e2 = inst.d_emb
    step = np.asarray(emb_perturbation, dtype=float)
    e1 = e2 + eps * step
    if np.any(e1 @ inst.W <= 0):
        raise DomainError("perturbed embeddings produce non-positive decoder logits")
    moved = np.any(step != 0, axis=1)
    e1[moved] /= np.linalg.norm(e1[moved], axis=1, keepdims=True)
    delta_mlm = mlm_token_losses(inst.d, e1 @ inst.W) - mlm_token_losses(inst.d, e2 @ inst.W)
    _, K = scaling_matrix(inst)
    predicted = float(K[:, 0] @ delta_mlm)
    actual = retrieval_loss(e1, inst.q_emb) - retrieval_loss(e2, inst.q_emb)
    return CorollaryReport(
        applicable=bool(np.all(delta_mlm < 0)),
        delta_mlm=delta_mlm,
        actual_delta_retrieval=actual,
        predicted_delta_retrieval=predicted,
        contract_holds=actual < 0,
    )


def corollary_data_trial(seed: int, eps: float = 1e-4, dims=(4, 12, 3)) -> CorollaryReport:
    L, D, N = dims
    rng = np.random.default_rng(seed)
    inst = make_instance(L, D, N, float(rng.uniform(0.5, 2.0)), rng)
    return verify_corollary_data(inst, raising_direction(inst, rng), eps)


def corollary_model_trial(
    seed: int, eps: float = 1e-4, dims=(4, 12, 3), offset: float = 0.2
) -> CorollaryReport:
    """Start from embeddings knocked off the exact reconstruction, step back toward it."""
    L, D, N = dims
    rng = np.random.default_rng(seed)
    exact = make_instance(L, D, N, float(rng.uniform(0.5, 2.0)), rng)
    worse = probe_point(exact, rng, scale=offset)
    return verify_corollary_model(worse, exact.d_emb - worse.d_emb, eps)
