"""Single-pair preference optimization over an explicit three-action simplex.

DPO only constrains the ratio between the preferred and dispreferred
actions, so its zero-loss set contains distributions that put real mass on
the third action.  SFT's only minimizer is the vertex of the preferred
action.  :func:`verify_counterexample` exhibits both facts numerically.

Optimization runs as projected gradient descent directly on the simplex
(``geometry="simplex"``), which can reach the boundary in finitely many
steps.  ``geometry="logit"`` runs plain gradient descent on softmax logits
for comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputDomainError, NumericFailure

GEOMETRIES = ("simplex", "logit")
DEFAULT_REF = (0.3, 0.2, 0.5)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


@dataclass
class SimplexPolicy:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (3,):
            raise InputDomainError("a simplex policy has exactly three actions")

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    @classmethod
    def from_probs(cls, probs) -> "SimplexPolicy":
        p = _check_distribution(probs, "distribution", strict=True)
        return cls(np.log(p))


def _check_distribution(p, what: str, strict: bool) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InputDomainError(f"{what} must be three finite numbers")
    if np.any(p < 0) or (strict and np.any(p <= 0)):
        raise InputDomainError(f"{what} must be {'strictly ' if strict else ''}positive")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InputDomainError(f"{what} must sum to 1")
    return p


def _check_pair(pair) -> tuple[int, int]:
    a, b = (int(i) for i in pair)
    if a == b or not (0 <= a < 3 and 0 <= b < 3):
        raise InputDomainError(f"invalid preference pair {pair}")
    return a, b


def sft_value(p, pair) -> float:
    pa = float(np.asarray(p)[pair[0]])
    return math.inf if pa <= 0 else -math.log(pa)


def dpo_value(p, ref, pair, beta: float) -> float:
    """log(1 + (ref_a * p_b / (ref_b * p_a)) ** beta); zero when p_b = 0."""
    a, b = pair
    p = np.asarray(p, dtype=np.float64)
    if p[a] <= 0:
        return math.inf
    if p[b] <= 0:
        return 0.0
    log_r = beta * (math.log(ref[a]) + math.log(p[b]) - math.log(ref[b]) - math.log(p[a]))
    return float(np.logaddexp(0.0, log_r))


def _loss(kind, p, ref, pair, beta):
    return sft_value(p, pair) if kind == "sft" else dpo_value(p, ref, pair, beta)


def prob_gradient(kind: str, p, ref, pair, beta: float) -> np.ndarray:
    """Gradient of the loss with respect to the probability vector."""
    a, b = pair
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros(3)
    if kind == "sft":
        g[a] = -1.0 / p[a]
        return g
    if p[b] <= 0:
        return g
    log_r = beta * (math.log(ref[a]) + math.log(p[b]) - math.log(ref[b]) - math.log(p[a]))
    w = beta * math.exp(-np.logaddexp(0.0, -log_r))  # beta * r / (1 + r)
    g[a] = -w / p[a]
    g[b] = w / p[b]
    return g


def logit_gradient(kind: str, p, ref, pair, beta: float) -> np.ndarray:
    a, b = pair
    p = np.asarray(p, dtype=np.float64)
    if kind == "sft":
        g = p.copy()
        g[a] -= 1.0
        return g
    log_r = beta * (math.log(ref[a]) + math.log(p[b]) - math.log(ref[b]) - math.log(p[a]))
    w = beta * math.exp(-np.logaddexp(0.0, -log_r))
    g = np.zeros(3)
    g[a], g[b] = -w, w
    return g


def stationarity(kind: str, p, ref, pair, beta: float, lr: float,
                 geometry: str = "simplex") -> float:
    """Norm of the gradient mapping (simplex) or of the logit gradient."""
    if geometry == "logit":
        return float(np.linalg.norm(logit_gradient(kind, p, ref, pair, beta)))
    g = prob_gradient(kind, p, ref, pair, beta)
    return float(np.linalg.norm(p - project_simplex(p - lr * g)) / lr)


@dataclass
class OptimizeResult:
    probs: np.ndarray
    loss: float
    steps: int
    stationarity: float
    history: list[tuple[int, float]] = field(default_factory=list)


def _check_ref(ref, pair) -> np.ndarray:
    ref = _check_distribution(ref, "reference", strict=False)
    if ref[pair[0]] <= 0 or ref[pair[1]] <= 0:
        raise InputDomainError("reference must give both paired actions positive mass")
    return ref


def optimize_simplex(loss_kind: str, ref, pair, init, beta: float = 0.1, steps: int = 5000,
                     lr: float = 0.01, geometry: str = "simplex",
                     until: Callable[[np.ndarray, float], bool] | None = None) -> OptimizeResult:
    """Gradient descent on a single-pair loss over a three-action distribution.

    ``until(probs, loss)`` may end the run early.
    """
    if loss_kind not in ("sft", "dpo"):
        raise InputDomainError(f"unknown loss kind {loss_kind!r}")
    if geometry not in GEOMETRIES:
        raise InputDomainError(f"unknown geometry {geometry!r}")
    if not beta > 0 or not lr > 0 or steps < 0:
        raise InputDomainError("beta and lr must be positive and steps non-negative")
    pair = _check_pair(pair)
    ref = _check_ref(ref, pair)
    p = _check_distribution(init, "initial distribution", strict=True).copy()
    logits = np.log(p)
    history = []
    done = 0
    for done in range(steps + 1):
        loss = _loss(loss_kind, p, ref, pair, beta)
        if not math.isfinite(loss):
            raise NumericFailure(f"non-finite loss at step {done}")
        if done % 100 == 0:
            history.append((done, loss))
        if done == steps or (until is not None and until(p, loss)):
            break
        if geometry == "simplex":
            p = project_simplex(p - lr * prob_gradient(loss_kind, p, ref, pair, beta))
        else:
            logits = logits - lr * logit_gradient(loss_kind, p, ref, pair, beta)
            p = SimplexPolicy(logits).probs
        if not np.all(np.isfinite(p)):
            raise NumericFailure(f"non-finite distribution at step {done + 1}")
    return OptimizeResult(p, loss, done, stationarity(loss_kind, p, ref, pair, beta, lr, geometry),
                          history)


@dataclass
class CounterexampleReport:
    beta: float
    tolerance: float
    clauses: dict[str, bool]
    dpo_probs: list[float]
    dpo_loss: float
    dpo_steps: int
    sft_loss_at_dpo_optimum: float
    sft_probs: list[float]
    sft_steps: int
    geometry: str

    @property
    def ok(self) -> bool:
        return all(self.clauses.values())

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.clauses.items() if not v]

    def to_dict(self) -> dict:
        return {"beta": self.beta, "tolerance": self.tolerance, "geometry": self.geometry,
                "clauses": self.clauses, "all_clauses_hold": self.ok, "failed_clauses": self.failed,
                "dpo": {"probs": self.dpo_probs, "loss": self.dpo_loss, "steps": self.dpo_steps,
                        "sft_loss_of_result": self.sft_loss_at_dpo_optimum},
                "sft": {"probs": self.sft_probs, "steps": self.sft_steps}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def verify_counterexample(beta: float = 1.0, tolerance: float = 1e-3, ref=DEFAULT_REF,
                          pair=(0, 1), steps: int = 200_000, lr: float = 0.01,
                          geometry: str = "simplex") -> CounterexampleReport:
    """Run DPO and SFT on one pair and check the three claims of the counter-example.

    dpo_reaches_optimum: DPO loss and the dispreferred mass both fall below ``tolerance``.
    sft_loss_nonzero_at_dpo_optimum: the SFT loss of that distribution exceeds 0.01.
    sft_reaches_vertex: SFT drives the preferred mass above ``1 - tolerance``.
    DPO starts from the reference (uniform if the reference has a zero entry), SFT
    from uniform.
    """
    a, b = _check_pair(pair)
    ref = _check_ref(ref, (a, b))
    if not 0 < tolerance < 1:
        raise InputDomainError("tolerance must lie in (0, 1)")
    start = ref if np.all(ref > 0) else np.full(3, 1 / 3)
    dpo = optimize_simplex("dpo", ref, (a, b), start, beta, steps, lr, geometry,
                           until=lambda p, loss: loss < tolerance and p[b] < tolerance)
    sft = optimize_simplex("sft", ref, (a, b), np.full(3, 1 / 3), beta, steps, lr, geometry,
                           until=lambda p, loss: p[a] > 1 - tolerance / 10)
    sft_at_dpo = sft_value(dpo.probs, (a, b))
    clauses = {
        "dpo_reaches_optimum": bool(dpo.loss < tolerance and dpo.probs[b] < tolerance),
        "sft_loss_nonzero_at_dpo_optimum": bool(sft_at_dpo > 0.01),
        "sft_reaches_vertex": bool(sft.probs[a] > 1 - tolerance),
    }
    return CounterexampleReport(beta, tolerance, clauses, dpo.probs.tolist(), dpo.loss, dpo.steps,
                                sft_at_dpo, sft.probs.tolist(), sft.steps, geometry)
