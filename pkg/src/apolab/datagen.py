"""Synthetic preference tasks for the two preference scenarios.

Each problem is a fixed-length response template.  Every position has a set
of allowed tokens: one for skeleton positions, several for free slots.  A
response is *correct* when every position holds an allowed token, and its
*quality* is the sum of per-token costs (lower is better).

``verifiable_optimum``
    The preferred response is the canonical (cheapest) correct response; the
    dispreferred one is a corrupted copy holding a disallowed token.
``graded_quality``
    The preferred response is a mid-cost correct response, never the
    cheapest; the dispreferred one is a costlier correct response.  A strictly
    better response always exists outside the pair.

Problems also carry a *habit* response that the base corpus over-represents.
It stands in for the output a pretrained model already prefers before any
preference training.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputDomainError
from .losses import PreferenceExample
from .probe import ProbeEntry, ProbeSet
from .seqmodel import Vocabulary

log = logging.getLogger(__name__)

SCENARIOS = ("verifiable_optimum", "graded_quality")


@dataclass
class Problem:
    prompt: int
    allowed: list[tuple[int, ...]]
    habit: tuple[int, ...]
    preferred: tuple[int, ...] | None = None

    @property
    def length(self) -> int:
        return len(self.allowed)

    @property
    def free_slots(self) -> list[int]:
        return [i for i, a in enumerate(self.allowed) if len(a) > 1]


@dataclass
class SyntheticTask:
    scenario: str
    vocab: Vocabulary
    costs: np.ndarray
    problems: list[Problem]
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def content_tokens(self) -> list[int]:
        return [t for t in range(self.vocab.size) if t != self.vocab.end_token]

    def problem(self, prompt: int) -> Problem:
        return self.problems[prompt]

    def is_correct(self, prompt: int, response: Sequence[int]) -> bool:
        p = self.problems[prompt]
        body = tuple(response)
        if not body or body[-1] != self.vocab.end_token:
            return False
        body = body[:-1]
        return len(body) == p.length and all(t in a for t, a in zip(body, p.allowed))

    def quality(self, response: Sequence[int]) -> float:
        """Token-cost sum; lower is better.  The end token costs nothing."""
        return float(sum(self.costs[t] for t in response if t != self.vocab.end_token))

    def correct_responses(self, prompt: int) -> list[tuple[int, ...]]:
        p = self.problems[prompt]
        end = (self.vocab.end_token,)
        return [tuple(c) + end for c in itertools.product(*p.allowed)]

    def canonical(self, prompt: int) -> tuple[int, ...]:
        return min(self.correct_responses(prompt), key=self.quality)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_record(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_record(self) -> dict:
        return {
            "scenario": self.scenario, "vocab_size": self.vocab.size,
            "end_token": self.vocab.end_token, "seed": self.seed,
            "costs": [float(c) for c in self.costs], "params": self.params,
            "problems": [{"prompt": p.prompt, "allowed": [list(a) for a in p.allowed],
                          "habit": list(p.habit),
                          "preferred": None if p.preferred is None else list(p.preferred)}
                         for p in self.problems],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticTask":
        problems = [Problem(p["prompt"], [tuple(a) for a in p["allowed"]], tuple(p["habit"]),
                            None if p["preferred"] is None else tuple(p["preferred"]))
                    for p in rec["problems"]]
        return cls(rec["scenario"], Vocabulary(rec["vocab_size"], rec["end_token"]),
                   np.array(rec["costs"]), problems, rec["seed"], rec.get("params", {}))


def make_task(scenario: str, seed: int, n_problems: int = 200, vocab_size: int = 16,
              min_len: int = 4, max_len: int = 8, n_free: int = 3, n_options: int = 3,
              habit_correct: float = 0.5, habit_distance: int = 1,
              habit_better: bool = True) -> SyntheticTask:
    """Draw a task.  Token costs are distinct, so correct responses rarely tie."""
    if scenario not in SCENARIOS:
        raise InputDomainError(f"unknown scenario {scenario!r}")
    if not 1 <= min_len <= max_len or n_free > min_len or n_options < 2:
        raise InputDomainError("invalid task shape")
    if n_options ** n_free < 4:
        raise InputDomainError("need at least 4 correct responses per problem")
    vocab = Vocabulary(vocab_size, vocab_size - 1)
    content = np.arange(vocab_size - 1)
    if len(content) < n_options + 1:
        raise InputDomainError("vocabulary too small for the requested slot options")
    rng = np.random.default_rng(seed)
    costs = np.zeros(vocab_size)
    costs[content] = np.round(rng.permutation(len(content)) + 1 + rng.uniform(0, 0.5, len(content)), 3)
    task = SyntheticTask(scenario, vocab, costs, [], seed, {
        "n_problems": n_problems, "vocab_size": vocab_size, "min_len": min_len,
        "max_len": max_len, "n_free": n_free, "n_options": n_options,
        "habit_correct": habit_correct, "habit_distance": habit_distance,
        "habit_better": habit_better})
    while len(task.problems) < n_problems:
        L = int(rng.integers(min_len, max_len + 1))
        free = set(rng.choice(L, size=n_free, replace=False).tolist())
        allowed = []
        for i in range(L):
            k = n_options if i in free else 1
            allowed.append(tuple(sorted(rng.choice(content, size=k, replace=False).tolist())))
        prob = Problem(len(task.problems), allowed, ())
        task.problems.append(prob)
        corrects = task.correct_responses(prob.prompt)
        if len({task.quality(c) for c in corrects}) != len(corrects):
            task.problems.pop()
            continue
        ranked = sorted(corrects, key=task.quality)
        if scenario == "graded_quality":
            # mid-cost preferred from the better half: >= 1 better and >= 2 worse responses
            prob.preferred = ranked[int(rng.integers(1, max(2, len(ranked) // 2)))]
        else:
            prob.preferred = ranked[0]
        if scenario == "graded_quality" and habit_better:
            better = [c for c in ranked if task.quality(c) < task.quality(prob.preferred)]
            near = min(_distance(c, prob.preferred) for c in better)
            better = [c for c in better if _distance(c, prob.preferred) == near]
            prob.habit = better[int(rng.integers(len(better)))]
        else:
            prob.habit = _draw_habit(task, prob, rng, habit_correct, habit_distance)
    return task


def _corrupt(task: SyntheticTask, prob: Problem, response: tuple[int, ...],
             rng: np.random.Generator, position: int | None = None) -> tuple[int, ...]:
    """Single-token substitution that puts a disallowed token at one position."""
    body = list(response[:-1])
    i = int(rng.integers(prob.length)) if position is None else position
    choices = [t for t in task.content_tokens if t not in prob.allowed[i]]
    body[i] = int(rng.choice(choices))
    return tuple(body) + (task.vocab.end_token,)


def _distance(a: Sequence[int], b: Sequence[int]) -> int:
    return sum(x != y for x, y in zip(a, b)) + abs(len(a) - len(b))


def _draw_habit(task, prob, rng, habit_correct, distance) -> tuple[int, ...]:
    """The preferred response with ``distance`` positions substituted.

    A substituted free slot keeps an allowed token with probability
    ``habit_correct``; every other substitution is arbitrary.
    """
    body = list(prob.preferred[:-1])
    for i in rng.choice(prob.length, size=min(distance, prob.length), replace=False):
        if len(prob.allowed[i]) > 1 and rng.uniform() < habit_correct:
            pool = [t for t in prob.allowed[i] if t != body[i]]
        else:
            pool = [t for t in task.content_tokens if t != body[i]]
        body[i] = int(pool[int(rng.integers(len(pool)))])
    return tuple(body) + (task.vocab.end_token,)


# -- datasets -------------------------------------------------------------

def _candidate_dispreferred(task: SyntheticTask, prob: Problem) -> list[tuple[int, ...]]:
    y_pos = prob.preferred
    if task.scenario == "graded_quality":
        q = task.quality(y_pos)
        return [c for c in task.correct_responses(prob.prompt) if task.quality(c) > q]
    end = (task.vocab.end_token,)
    out = []
    for i in range(prob.length):
        for t in task.content_tokens:
            if t not in prob.allowed[i]:
                body = list(y_pos[:-1])
                body[i] = t
                out.append(tuple(body) + end)
    return out


def check_example(task: SyntheticTask, ex: PreferenceExample) -> None:
    """Raise unless ``ex`` satisfies its scenario's defining predicate."""
    prompt = ex.prompt
    if task.scenario == "verifiable_optimum":
        ok = task.is_correct(prompt, ex.preferred) and not task.is_correct(prompt, ex.dispreferred)
    else:
        q_pos, q_neg = task.quality(ex.preferred), task.quality(ex.dispreferred)
        better = any(task.quality(c) < q_pos for c in task.correct_responses(prompt))
        ok = (task.is_correct(prompt, ex.preferred) and task.is_correct(prompt, ex.dispreferred)
              and q_pos < q_neg and better)
    if not ok:
        raise InputDomainError(f"example violates {task.scenario} predicate: {ex}")


def gen_dataset(task: SyntheticTask, seed: int, size: int) -> list[PreferenceExample]:
    """Sample ``size`` distinct preference pairs, spread evenly over problems."""
    rng = np.random.default_rng(seed)
    pools = [_candidate_dispreferred(task, p) for p in task.problems]
    available = sum(len(p) for p in pools)
    if size > available:
        raise InputDomainError(f"requested {size} pairs but only {available} distinct pairs exist")
    order = [rng.permutation(len(pool)) for pool in pools]
    used = [0] * len(pools)
    out: list[PreferenceExample] = []
    cycle = rng.permutation(len(pools))
    while len(out) < size:
        progressed = False
        for j in cycle:
            if len(out) == size:
                break
            if used[j] < len(pools[j]):
                prob = task.problems[j]
                neg = pools[j][order[j][used[j]]]
                used[j] += 1
                ex = PreferenceExample(prob.prompt, prob.preferred, neg)
                check_example(task, ex)
                out.append(ex)
                progressed = True
        if not progressed:
            break
    return out


def gen_base_corpus(task: SyntheticTask, seed: int, per_problem: int = 20,
                    habit_rate: float = 0.6, noise: float = 0.3) -> list[tuple[int, tuple[int, ...]]]:
    """(prompt, response) samples standing in for pretraining data.

    Each sample is the problem's habit response with probability
    ``habit_rate``; otherwise every position independently keeps the habit
    token, or with probability ``noise`` takes a random allowed or content
    token.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    end = (task.vocab.end_token,)
    for prob in task.problems:
        for _ in range(per_problem):
            if rng.uniform() < habit_rate:
                corpus.append((prob.prompt, prob.habit))
                continue
            body = list(prob.habit[:-1])
            for i in range(prob.length):
                if rng.uniform() < noise:
                    pool = prob.allowed[i] if rng.uniform() < 0.5 else task.content_tokens
                    body[i] = int(pool[int(rng.integers(len(pool)))])
            corpus.append((prob.prompt, tuple(body) + end))
    return corpus


# -- probe sets -------------------------------------------------------------

def _similar(task, prob, response, rng, keep_correct: bool, avoid) -> tuple[int, ...] | None:
    """Single-token substitution of ``response``, staying in its correctness class."""
    body = list(response[:-1])
    end = (task.vocab.end_token,)
    candidates = []
    for i in range(prob.length):
        for t in task.content_tokens:
            if t == body[i]:
                continue
            new = tuple(body[:i] + [t] + body[i + 1:]) + end
            if new in avoid:
                continue
            if task.is_correct(prob.prompt, new) == keep_correct:
                candidates.append(new)
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def build_probe(task: SyntheticTask, dataset: Sequence[PreferenceExample], seed: int,
                size: int = 500) -> tuple[ProbeSet, int]:
    """Probe set of up to ``size`` dataset examples with their response variants.

    Returns the probe and the number of entries dropped because a required
    variant did not exist.
    """
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(dataset))[:min(size, len(dataset))]
    entries, dropped = [], 0
    graded = task.scenario == "graded_quality"
    for j in sorted(pick.tolist()):
        ex = dataset[j]
        prob = task.problems[ex.prompt]
        roles = {"y_plus": ex.preferred, "y_minus": ex.dispreferred}
        if graded:
            q = task.quality(ex.preferred)
            corrects = task.correct_responses(ex.prompt)
            better = [c for c in corrects if task.quality(c) < q]
            worse = [c for c in corrects if task.quality(c) > q and c != ex.dispreferred]
            if not better or not worse:
                dropped += 1
                continue
            # the base model's habit, when better, is the alternative worth tracking
            if prob.habit in better:
                roles["y_plus_h"] = prob.habit
            else:
                roles["y_plus_h"] = better[int(rng.integers(len(better)))]
            roles["y_plus_l"] = worse[int(rng.integers(len(worse)))]
        taken = set(roles.values()) | {prob.habit}
        pos_correct = task.is_correct(ex.prompt, ex.preferred)
        neg_correct = task.is_correct(ex.prompt, ex.dispreferred)
        sim_p = _similar(task, prob, ex.preferred, rng, pos_correct, taken)
        if sim_p is None:
            sim_p = _similar(task, prob, ex.preferred, rng, not pos_correct, taken)
        taken.add(sim_p)
        sim_n = _similar(task, prob, ex.dispreferred, rng, neg_correct, taken)
        if sim_n is None:
            sim_n = _similar(task, prob, ex.dispreferred, rng, not neg_correct, taken)
        if sim_p is None or sim_n is None:
            dropped += 1
            continue
        roles["y_plus_sim"], roles["y_minus_sim"] = sim_p, sim_n
        entries.append(ProbeEntry(ex.prompt, roles))
    if dropped:
        log.warning("build_probe dropped %d entries lacking a required variant", dropped)
    return ProbeSet(entries), dropped


# -- evaluation helpers -----------------------------------------------------

def greedy_metrics(task: SyntheticTask, policy, max_len: int | None = None) -> dict:
    """Pass rate, mean quality and per-problem outcomes of greedy outputs.

    A greedy output counts as preferred when it is correct and no correct
    response of its problem has strictly better quality.  An incorrect output
    is scored at the quality of its problem's worst correct response, so
    broken outputs never look cheap.
    """
    from .prefmetrics import ProblemOutcome
    from .seqmodel import greedy_decode_many

    max_len = max_len or max(p.length for p in task.problems) + 2
    prompts = [p.prompt for p in task.problems]
    outs = greedy_decode_many(policy, prompts, max_len)
    passed = [task.is_correct(x, y) for x, y in zip(prompts, outs)]
    ranges = []
    for x in prompts:
        qs = [task.quality(r) for r in task.correct_responses(x)]
        ranges.append((min(qs), max(qs)))
    qual = [task.quality(y) if ok else worst for y, ok, (_, worst) in zip(outs, passed, ranges)]
    best = [b for b, _ in ranges]
    optimal = [ok and q <= b + 1e-9 for ok, q, b in zip(passed, qual, best)]
    return {
        "pass_rate": float(np.mean(passed)),
        "mean_quality": float(np.mean(qual)),
        "n_problems": len(prompts),
        "outcomes": [ProblemOutcome(1, int(ok), int(op)) for ok, op in zip(passed, optimal)],
    }


# -- serialization --------------------------------------------------------------

def write_jsonl(path, header: dict, records: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])["header"]
    return header, [json.loads(line) for line in lines[1:] if line.strip()]


def save_dataset(path, task: SyntheticTask, dataset: Sequence[PreferenceExample], seed: int) -> Path:
    header = {"kind": "dataset", "scenario": task.scenario, "seed": seed,
              "task_fingerprint": task.fingerprint()}
    return write_jsonl(path, header, [ex.to_dict() for ex in dataset])


def load_dataset(path) -> tuple[dict, list[PreferenceExample]]:
    header, recs = read_jsonl(path)
    return header, [PreferenceExample.from_dict(r) for r in recs]


def save_probe(path, task: SyntheticTask, probe: ProbeSet, seed: int) -> Path:
    header = {"kind": "probe", "scenario": task.scenario, "seed": seed,
              "task_fingerprint": task.fingerprint(), "roles": probe.roles,
              "variant_provenance": "synthetic analogue"}
    return write_jsonl(path, header, probe.to_records())


def load_probe(path) -> tuple[dict, ProbeSet]:
    header, recs = read_jsonl(path)
    return header, ProbeSet.from_records(recs)
