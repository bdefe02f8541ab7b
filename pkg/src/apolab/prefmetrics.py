"""{Preference}@k and preference-rate estimators over per-problem sample counts."""

from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputDomainError, UndefinedRate

AGGREGATIONS = ("micro", "macro")


@dataclass(frozen=True)
class ProblemOutcome:
    n: int
    pass_count: int
    c_p: int

    def __post_init__(self):
        if not 0 <= self.c_p <= self.pass_count <= self.n:
            raise InputDomainError(f"need 0 <= c_p <= pass_count <= n, got {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemOutcome":
        try:
            return cls(int(d["n"]), int(d["pass_count"]), int(d["c_p"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputDomainError(f"malformed outcome record {d!r}") from exc


def _at_k(n: int, c: int, k: int) -> float:
    if not 1 <= k <= n:
        raise InputDomainError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    # exact rational product, rounded once
    num = den = 1
    for i in range(k):
        num *= n - c - i
        den *= n - i
    return float(1 - Fraction(num, den))


def preference_at_k(outcome: ProblemOutcome, k: int) -> float:
    """Chance that k draws without replacement include a preferred passing solution."""
    return _at_k(outcome.n, outcome.c_p, k)


def pass_at_k(outcome: ProblemOutcome, k: int) -> float:
    return _at_k(outcome.n, outcome.pass_count, k)


def preference_at_k_mean(outcomes: Sequence[ProblemOutcome], k: int) -> float:
    if not outcomes:
        raise InputDomainError("no outcomes")
    return float(np.mean([preference_at_k(o, k) for o in outcomes]))


def pass_at_k_mean(outcomes: Sequence[ProblemOutcome], k: int) -> float:
    if not outcomes:
        raise InputDomainError("no outcomes")
    return float(np.mean([pass_at_k(o, k) for o in outcomes]))


def preference_rate(outcomes: Sequence[ProblemOutcome], aggregation: str = "micro") -> float:
    """Share of passing solutions that also meet the preference criterion.

    ``micro`` pools counts over problems; ``macro`` averages per-problem rates
    over the problems that have at least one passing solution.
    """
    if aggregation not in AGGREGATIONS:
        raise InputDomainError(f"unknown aggregation {aggregation!r}")
    if not outcomes:
        raise InputDomainError("no outcomes")
    passing = [o for o in outcomes if o.pass_count > 0]
    if not passing:
        raise UndefinedRate("no passing solutions; the rate is undefined")
    if aggregation == "micro":
        return sum(o.c_p for o in passing) / sum(o.pass_count for o in passing)
    return float(np.mean([o.c_p / o.pass_count for o in passing]))


def load_outcomes(path) -> list[ProblemOutcome]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputDomainError(f"line {i + 1}: {exc}") from exc
        out.append(ProblemOutcome.from_dict(rec))
    return out


def metrics_report(outcomes: Sequence[ProblemOutcome], ks: Sequence[int],
                   aggregation: str = "micro") -> list[dict]:
    rows = [{"metric": "preference_at_k", "k": k, "value": preference_at_k_mean(outcomes, k),
             "aggregation": "mean_over_problems"} for k in ks]
    rows += [{"metric": "pass_at_k", "k": k, "value": pass_at_k_mean(outcomes, k),
              "aggregation": "mean_over_problems"} for k in ks]
    try:
        rate = preference_rate(outcomes, aggregation)
    except UndefinedRate:
        rate = None
    rows.append({"metric": "preference_rate", "k": None, "value": rate,
                 "aggregation": aggregation})
    return rows
