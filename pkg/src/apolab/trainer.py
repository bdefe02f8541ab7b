"""Seeded gradient-descent training under the SFT, DPO, S&D and APO schedules."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import losses
from .errors import InputDomainError, NumericFailure
from .losses import LossSpec, PairBatch, PreferenceExample
from .probe import DynamicsTrace, ProbeSet, TraceRow, trace_confidence
from .seqmodel import Policy, ReferencePolicy

log = logging.getLogger(__name__)

METHODS = ("sft", "dpo", "sd", "apo")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_LR = {"tabular": 1e-2, "feedforward": 1e-3}


def subseed(seed: int, label: str) -> int:
    """Independent 64-bit seed derived from ``seed`` and a label."""
    h = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, label))


@dataclass
class TrainConfig:
    method: str = "sft"
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float | None = None
    beta: float = 0.1
    probe_every: int = 100
    seed: int = 0
    optimizer: str = "adam"
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    alpha_mode: str = "stop_gradient"
    max_grad_norm: float | None = None
    sd_dpo_learning_rate: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputDomainError(f"unknown method {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InputDomainError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 1 or self.batch_size < 1 or self.probe_every < 1:
            raise InputDomainError("steps, batch_size and probe_every must be positive")
        if self.probe_every > self.steps:
            raise InputDomainError("probe_every must not exceed steps")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise InputDomainError("learning_rate must be positive")
        if self.sd_dpo_learning_rate is not None and not self.sd_dpo_learning_rate > 0:
            raise InputDomainError("sd_dpo_learning_rate must be positive")
        if not self.beta > 0:
            raise InputDomainError("beta must be positive")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise InputDomainError("max_grad_norm must be positive")

    def lr_for(self, policy: Policy, phase: str | None = None) -> float:
        """Step size for ``phase``; the DPO phase of ``sd`` may use its own."""
        if self.method == "sd" and phase == "dpo" and self.sd_dpo_learning_rate is not None:
            return self.sd_dpo_learning_rate
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[policy.kind]

    def phases(self) -> list[str]:
        return ["sft", "dpo"] if self.method == "sd" else [self.method]


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
                   hyper: dict) -> tuple[np.ndarray, OptimizerState]:
    """One SGD or bias-corrected Adam update; returns new params and state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise InputDomainError(f"shape mismatch {params.shape} vs {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericFailure("non-finite gradient")
    lr = hyper["lr"]
    if hyper.get("optimizer", "adam") == "sgd":
        return params - lr * grads, OptimizerState(state.t + 1)
    b1, b2, eps = hyper.get("b1", 0.9), hyper.get("b2", 0.999), hyper.get("eps", 1e-8)
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.t + 1
    m = b1 * m + (1 - b1) * grads
    v = b2 * v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), OptimizerState(t, m, v)


@dataclass
class PhaseRecord:
    phase: str
    start_step: int
    end_step: int
    reference: ReferencePolicy | None
    checkpoint: ReferencePolicy


@dataclass
class TrainResult:
    policy: Policy
    trace: DynamicsTrace
    losses: list[float]
    phases: list[PhaseRecord]
    config: TrainConfig

    @property
    def reference(self) -> ReferencePolicy | None:
        refs = [p.reference for p in self.phases if p.reference is not None]
        return refs[-1] if refs else None


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Endless stream of index batches; each epoch is a fresh permutation."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _row(policy, probe, step, phase, spec, full: PairBatch) -> TraceRow:
    loss = losses.batch_loss_and_grad(spec, policy, full, want_grad=False)[0]
    values, argmax = trace_confidence(policy, probe)
    if not all(np.isfinite([loss, argmax, *values.values()])):
        raise NumericFailure("non-finite probe value")
    return TraceRow(step, phase, loss, values, argmax)


def _step(config, spec, policy, batch, state, hyper):
    """One optimizer update; returns the batch loss and (new params, new state)."""
    loss, grad = losses.batch_loss_and_grad(spec, policy, batch)
    if config.max_grad_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > config.max_grad_norm:
            grad = grad * (config.max_grad_norm / norm)
    params, state = optimizer_step(policy.params, grad, state, hyper)
    if not np.all(np.isfinite(params)):
        raise NumericFailure("non-finite parameters")
    return loss, (params, state)


def train(config: TrainConfig, dataset: Sequence[PreferenceExample], probe: ProbeSet,
          policy: Policy) -> TrainResult:
    """Train a copy of ``policy``; the caller's policy is left untouched."""
    if len(dataset) == 0:
        raise InputDomainError("dataset is empty")
    policy = policy.copy()
    trace = DynamicsTrace(list(probe.roles))
    step_losses: list[float] = []
    records: list[PhaseRecord] = []
    step = 0

    for i, phase in enumerate(config.phases()):
        spec = LossSpec(phase, config.beta, config.alpha_mode)
        hyper = {"optimizer": config.optimizer, "lr": config.lr_for(policy, phase),
                 "b1": config.b1, "b2": config.b2, "eps": config.eps}
        ref = policy.snapshot() if phase != "sft" else None
        full = PairBatch(policy, dataset, ref, need_dispreferred=phase != "sft")
        if i == 0:
            trace.append(_row(policy, probe, 0, phase, spec, full))
        batches = _batches(rng_for(config.seed, f"shuffle:{i}"), len(dataset),
                           min(config.batch_size, len(dataset)))
        state = OptimizerState()
        start = step
        log.debug("phase %s: steps %d..%d", phase, start, start + config.steps)
        for _ in range(config.steps):
            idx = next(batches)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, (params, state) = _step(config, spec, policy, full.subset(idx),
                                                  state, hyper)
            except NumericFailure as exc:
                raise NumericFailure(f"divergence at step {step + 1}: {exc}") from exc
            policy.params = params
            step += 1
            policy.step = step
            step_losses.append(loss)
            if step % config.probe_every == 0 or step == start + config.steps:
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        trace.append(_row(policy, probe, step, phase, spec, full))
                except NumericFailure as exc:
                    raise NumericFailure(f"divergence at step {step}: {exc}") from exc
        records.append(PhaseRecord(phase, start, step, ref, policy.snapshot()))

    return TrainResult(policy, trace, step_losses, records, config)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def pretrain(policy: Policy, corpus: Sequence[tuple[int, Sequence[int]]], steps: int,
             seed: int, batch_size: int = 32, learning_rate: float = 1e-2) -> Policy:
    """Maximum-likelihood fit of ``policy`` to a (prompt, response) corpus.

    Used to build a base model with its own habits before any preference
    training.  Returns a new policy.
    """
    from . import seqmodel

    if not corpus:
        raise InputDomainError("pretraining corpus is empty")
    policy = policy.copy()
    enc = seqmodel.encode(policy, [p for p, _ in corpus], [r for _, r in corpus])
    hyper = {"optimizer": "adam", "lr": learning_rate}
    state = OptimizerState()
    batches = _batches(rng_for(seed, "pretrain"), len(corpus), min(batch_size, len(corpus)))
    for _ in range(steps):
        idx = next(batches)
        sub = seqmodel.select(enc, idx)
        _, cache = seqmodel.forward(policy, sub)
        grad = seqmodel.backward(policy, cache, -np.ones(len(idx)) / len(idx))
        policy.params, state = optimizer_step(policy.params, grad, state, hyper)
    policy.step = 0
    return policy
