"""SFT, DPO and APO objectives over preference triples, with exact gradients.

All three losses are reductions of two per-example quantities, the sequence
log-probabilities of the preferred and dispreferred responses.  Gradients are
therefore assembled as weighted sums of ``grad log pi(y | x)`` and pushed
through :func:`apolab.seqmodel.backward` in a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import seqmodel
from .errors import InputDomainError, NumericFailure
from .seqmodel import Policy, ReferencePolicy

LOSS_KINDS = ("sft", "dpo", "apo")
ALPHA_MODES = ("stop_gradient", "differentiated")


@dataclass(frozen=True)
class PreferenceExample:
    prompt: int
    preferred: tuple[int, ...]
    dispreferred: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "prompt", seqmodel.prompt_id(self.prompt))
        object.__setattr__(self, "preferred", tuple(int(t) for t in self.preferred))
        object.__setattr__(self, "dispreferred", tuple(int(t) for t in self.dispreferred))
        if self.preferred == self.dispreferred:
            raise InputDomainError("preferred and dispreferred responses are identical")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "preferred": list(self.preferred),
                "dispreferred": list(self.dispreferred)}

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceExample":
        return cls(d["prompt"], tuple(d["preferred"]), tuple(d["dispreferred"]))


@dataclass(frozen=True)
class LossSpec:
    kind: str = "dpo"
    beta: float = 0.1
    alpha_mode: str = "stop_gradient"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InputDomainError(f"unknown loss kind {self.kind!r}")
        if not self.beta > 0:
            raise InputDomainError(f"beta must be positive, got {self.beta}")
        if self.alpha_mode not in ALPHA_MODES:
            raise InputDomainError(f"unknown alpha_mode {self.alpha_mode!r}")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


class PairBatch:
    """Encoded preferred/dispreferred responses of a batch.

    The first ``n`` encoded sequences are the preferred responses, the next
    ``n`` the dispreferred ones.  Reference log-probabilities are computed
    once at construction when a reference is given.
    """

    def __init__(self, policy: Policy, batch: Sequence[PreferenceExample],
                 ref: Policy | None = None, need_dispreferred: bool = True):
        if len(batch) == 0:
            raise InputDomainError("batch is empty")
        self.n = len(batch)
        prompts = [ex.prompt for ex in batch]
        responses = [ex.preferred for ex in batch]
        if need_dispreferred:
            prompts = prompts * 2
            responses = responses + [ex.dispreferred for ex in batch]
        self.enc = seqmodel.encode(policy, prompts, responses)
        self.ref_lp = seqmodel.forward(ref, self.enc)[0] if ref is not None else None

    def subset(self, which: np.ndarray) -> "PairBatch":
        which = np.asarray(which, dtype=np.int64)
        out = PairBatch.__new__(PairBatch)
        out.n = len(which)
        full = which if self.enc.n_seq == self.n else np.concatenate([which, which + self.n])
        out.enc = seqmodel.select(self.enc, full)
        out.ref_lp = None if self.ref_lp is None else self.ref_lp[full]
        return out


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericFailure(f"non-finite {what} at example index {int(bad[0])}")


def _terms(spec: LossSpec, lp: np.ndarray, ref_lp: np.ndarray | None, n: int,
           lengths: np.ndarray):
    """Per-example losses and d(loss_i)/d(lp) weights for every encoded sequence."""
    lp_pos = lp[:n]
    _check_finite(lp_pos, "preferred log-probability")
    if spec.kind == "sft":
        return -lp_pos, -np.ones(n)

    lp_neg = lp[n:2 * n]
    _check_finite(lp_neg, "dispreferred log-probability")
    z = (lp_pos - ref_lp[:n]) - (lp_neg - ref_lp[n:2 * n])
    dpo = softplus(-spec.beta * z)
    coef = spec.beta * sigmoid(-spec.beta * z)
    d_pos, d_neg = -coef, coef
    if spec.kind == "dpo":
        _check_finite(dpo, "DPO loss")
        return dpo, np.concatenate([d_pos, d_neg])

    T = lengths[:n].astype(np.float64)
    alpha = np.exp(lp_pos / T)
    sft = -lp_pos
    loss = alpha * dpo + (1.0 - alpha) * sft
    w_pos = alpha * d_pos - (1.0 - alpha)
    if spec.alpha_mode == "differentiated":
        w_pos = w_pos + (dpo - sft) * alpha / T
    w_neg = alpha * d_neg
    _check_finite(loss, "APO loss")
    return loss, np.concatenate([w_pos, w_neg])


def batch_loss_and_grad(spec: LossSpec, policy: Policy, pb: PairBatch,
                        want_grad: bool = True):
    lp, cache = seqmodel.forward(policy, pb.enc)
    losses, dlp = _terms(spec, lp, pb.ref_lp, pb.n, pb.enc.lengths)
    loss = float(np.mean(losses))
    if not want_grad:
        return loss, None
    weights = np.zeros(pb.enc.n_seq)
    weights[:len(dlp)] = dlp / pb.n
    _check_finite(weights, "loss weight")
    grad = seqmodel.backward(policy, cache, weights)
    if not np.all(np.isfinite(grad)):
        raise NumericFailure("non-finite gradient")
    return loss, grad


def per_example_losses(spec: LossSpec, policy: Policy, ref: Policy | None,
                       batch: Sequence[PreferenceExample]) -> np.ndarray:
    pb = PairBatch(policy, batch, ref if spec.kind != "sft" else None,
                   need_dispreferred=spec.kind != "sft")
    lp, _ = seqmodel.forward(policy, pb.enc)
    return _terms(spec, lp, pb.ref_lp, pb.n, pb.enc.lengths)[0]


def sft_loss(policy: Policy, batch: Sequence[PreferenceExample]) -> float:
    """Negative mean sequence log-likelihood of the preferred responses."""
    return float(np.mean(per_example_losses(LossSpec("sft"), policy, None, batch)))


def dpo_loss(policy: Policy, ref: ReferencePolicy, batch: Sequence[PreferenceExample],
             beta: float = 0.1) -> float:
    """Mean of ``softplus(-beta * z)``, z being the reference-adjusted log-ratio margin."""
    return float(np.mean(per_example_losses(LossSpec("dpo", beta), policy, ref, batch)))


def apo_alpha(policy: Policy, prompt, preferred: Sequence[int]) -> float:
    """Geometric-mean token probability of ``preferred`` (end token included)."""
    T = len(seqmodel.check_response(policy.vocab, preferred))
    return float(np.exp(seqmodel.seq_logprob(policy, prompt, preferred) / T))


def apo_loss(policy: Policy, ref: ReferencePolicy, batch: Sequence[PreferenceExample],
             spec: LossSpec) -> float:
    if spec.kind != "apo":
        raise InputDomainError(f"apo_loss needs an apo LossSpec, got {spec.kind!r}")
    return float(np.mean(per_example_losses(spec, policy, ref, batch)))


def loss_value(spec: LossSpec, policy: Policy, ref: Policy | None,
               batch: Sequence[PreferenceExample]) -> float:
    return float(np.mean(per_example_losses(spec, policy, ref, batch)))


def loss_gradient(spec: LossSpec, policy: Policy, ref: Policy | None,
                  batch: Sequence[PreferenceExample]) -> np.ndarray:
    if spec.kind != "sft" and ref is None:
        raise InputDomainError(f"{spec.kind} loss needs a reference policy")
    pb = PairBatch(policy, batch, ref if spec.kind != "sft" else None,
                   need_dispreferred=spec.kind != "sft")
    return batch_loss_and_grad(spec, policy, pb)[1]
