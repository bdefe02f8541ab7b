"""Confidence probing over role-tagged response variants.

A probe set pairs each prompt with a fixed set of responses (the preferred and
dispreferred responses plus variants).  At probe time the mean sequence
log-probability of every role is recorded, together with the confidence of
the policy's own greedy output.  Squeezing is the pattern where every tracked
role loses probability while the greedy output gains it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seqmodel
from .errors import InputDomainError
from .seqmodel import Policy

ROLES = ("y_plus", "y_minus", "y_plus_sim", "y_minus_sim", "y_plus_h", "y_plus_l")
SQUEEZE_DEADBAND = 1e-6


@dataclass
class ProbeEntry:
    prompt: int
    roles: dict[str, tuple[int, ...]]


class ProbeSet:
    def __init__(self, entries: Sequence[ProbeEntry], max_len: int | None = None):
        if not entries:
            raise InputDomainError("probe set is empty")
        tags = set(entries[0].roles)
        unknown = tags - set(ROLES)
        if unknown:
            raise InputDomainError(f"unknown probe roles {sorted(unknown)}")
        if not {"y_plus", "y_minus"} <= tags:
            raise InputDomainError("every probe entry needs y_plus and y_minus")
        for e in entries:
            if set(e.roles) != tags:
                raise InputDomainError("probe entries must share one role set")
        self.entries = list(entries)
        self.roles = [r for r in ROLES if r in tags]
        longest = max(len(s) for e in entries for s in e.roles.values())
        self.max_len = max_len if max_len is not None else longest + 2
        self._cache: dict = {}

    def __len__(self):
        return len(self.entries)

    def mean_lengths(self) -> dict[str, float]:
        return {r: float(np.mean([len(e.roles[r]) for e in self.entries])) for r in self.roles}

    def encoded(self, policy: Policy):
        key = (policy.vocab, policy.n_prompts, policy.context_window)
        if key not in self._cache:
            prompts = [e.prompt for e in self.entries] * len(self.roles)
            responses = [e.roles[r] for r in self.roles for e in self.entries]
            self._cache[key] = seqmodel.encode(policy, prompts, responses)
        return self._cache[key]

    def to_records(self) -> list[dict]:
        return [{"prompt": e.prompt, "roles": {r: list(s) for r, s in e.roles.items()}}
                for e in self.entries]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "ProbeSet":
        return cls([ProbeEntry(int(r["prompt"]), {k: tuple(v) for k, v in r["roles"].items()})
                    for r in records])


@dataclass
class TraceRow:
    step: int
    phase: str
    loss: float
    values: dict[str, float]
    argmax_logprob: float

    def as_dict(self) -> dict:
        return {"step": self.step, "phase": self.phase, "loss": self.loss,
                **self.values, "argmax": self.argmax_logprob}


@dataclass
class DynamicsTrace:
    roles: list[str]
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise InputDomainError("trace steps must be strictly increasing")
        self.rows.append(row)

    def at(self, step: int) -> TraceRow:
        for row in self.rows:
            if row.step == step:
                return row
        raise InputDomainError(f"step {step} not in trace")

    @property
    def steps(self) -> list[int]:
        return [r.step for r in self.rows]

    def columns(self) -> list[str]:
        return ["step", "phase", "loss", *self.roles, "argmax"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.rows:
            d = row.as_dict()
            writer.writerow([d["step"], d["phase"]] +
                            [repr(float(d[c])) for c in self.columns()[2:]])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path) -> "DynamicsTrace":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            roles = [c for c in reader.fieldnames if c in ROLES]
            trace = cls(roles)
            for rec in reader:
                trace.append(TraceRow(int(rec["step"]), rec["phase"], float(rec["loss"]),
                                      {r: float(rec[r]) for r in roles}, float(rec["argmax"])))
        return trace


def trace_confidence(policy: Policy, probe: ProbeSet) -> tuple[dict[str, float], float]:
    """Mean log-probability per role, and the mean log-probability of the greedy outputs.

    Sums run in entry order, so the reduction is deterministic.
    """
    enc = probe.encoded(policy)
    lp = seqmodel.forward(policy, enc)[0].reshape(len(probe.roles), len(probe))
    values = {r: float(np.mean(lp[i])) for i, r in enumerate(probe.roles)}

    prompts = sorted({e.prompt for e in probe.entries})
    greedy = seqmodel.greedy_decode_many(policy, prompts, probe.max_len)
    g_lp = seqmodel.seq_logprobs(policy, prompts, greedy)
    by_prompt = dict(zip(prompts, g_lp))
    argmax = float(np.mean([by_prompt[e.prompt] for e in probe.entries]))
    return values, argmax


def detect_squeeze(trace: DynamicsTrace, from_step: int, to_step: int,
                   deadband: float = SQUEEZE_DEADBAND) -> dict:
    """Did every tracked role lose confidence while the greedy output gained it?"""
    a, b = trace.at(from_step), trace.at(to_step)
    deltas = {r: b.values[r] - a.values[r] for r in trace.roles}
    argmax_delta = b.argmax_logprob - a.argmax_logprob
    squeezed = all(d < -deadband for d in deltas.values()) and argmax_delta > deadband
    return {"squeezed": bool(squeezed), "from_step": from_step, "to_step": to_step,
            "deltas": deltas, "argmax_delta": argmax_delta}


def squeeze_report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
