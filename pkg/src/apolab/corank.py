"""Mutually reinforcing scores for solutions and the tests they pass.

A solution scores highly when it passes highly scored tests; a test scores
highly when highly scored solutions fail it.  Both vectors are updated
simultaneously from the previous iterate and rescaled to keep their sums
fixed at the solution and test counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputDomainError, NoSeparation, NumericFailure

DEFAULT_DAMPING = 0.85
DEFAULT_ITERATIONS = 5


@dataclass(frozen=True)
class PassMatrix:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise InputDomainError("pass matrix must be a non-empty 2-D array")
        if not np.all((b == 0) | (b == 1)):
            raise InputDomainError("pass matrix entries must be 0 or 1")
        object.__setattr__(self, "bits", b.astype(np.float64))

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def m(self) -> int:
        return self.bits.shape[1]

    @property
    def fails(self) -> np.ndarray:
        return 1.0 - self.bits

    @classmethod
    def from_rows(cls, rows) -> "PassMatrix":
        return cls(np.array([[int(x) for x in r] for r in rows]))


@dataclass
class ScoreState:
    s: np.ndarray
    t: np.ndarray
    iteration: int = 0


def corank_step(pm: PassMatrix, state: ScoreState, damping: float,
                normalize: bool = True) -> ScoreState:
    s_new = damping * pm.bits @ state.t + (1 - damping) * state.s
    t_new = damping * pm.fails.T @ state.s + (1 - damping) * state.t
    if normalize:
        zs, zt = s_new.sum(), t_new.sum()
        if not (zs > 0 and zt > 0):
            raise NumericFailure("co-ranking rescale denominator is zero")
        s_new = s_new * (pm.n / zs)
        t_new = t_new * (pm.m / zt)
    return ScoreState(s_new, t_new, state.iteration + 1)


def corank(pm: PassMatrix, damping: float = DEFAULT_DAMPING,
           iterations: int = DEFAULT_ITERATIONS) -> ScoreState:
    if not 0 < damping < 1:
        raise InputDomainError(f"damping must lie in (0, 1), got {damping}")
    if iterations < 1:
        raise InputDomainError("iterations must be positive")
    state = ScoreState(np.ones(pm.n), np.ones(pm.m))
    for _ in range(iterations):
        state = corank_step(pm, state, damping)
    return state


def select_extremes(state: ScoreState) -> tuple[int, int]:
    """Indices of the best and worst solutions; ties go to the smallest index."""
    s = np.asarray(state.s)
    if len(s) < 2:
        raise InputDomainError("need at least two solutions to pick a pair")
    if s.max() == s.min():
        raise NoSeparation("all solution scores are equal")
    return int(np.argmax(s)), int(np.argmin(s))


def load_pass_matrix(path) -> PassMatrix:
    """Read a CSV of 0/1 rows, or JSON ``{n, m, rows}``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
            rows = doc["rows"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputDomainError(f"malformed pass-matrix JSON: {exc}") from exc
        pm = PassMatrix.from_rows(rows)
        if (doc.get("n", pm.n), doc.get("m", pm.m)) != (pm.n, pm.m):
            raise InputDomainError("declared n, m disagree with rows")
        return pm
    try:
        rows = [r for r in csv.reader(text.splitlines()) if r]
        return PassMatrix.from_rows(rows)
    except ValueError as exc:
        raise InputDomainError(f"malformed pass-matrix CSV: {exc}") from exc


def result_json(state: ScoreState, damping: float, iterations: int) -> dict:
    try:
        best, worst = select_extremes(state)
    except NoSeparation:
        best = worst = None
    return {"s": state.s.tolist(), "t": state.t.tolist(), "best": best, "worst": worst,
            "damping": damping, "iterations": iterations}
