"""Shared builders for tests: small random policies, batches, cached pipeline runs."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from apolab import experiment
from apolab.losses import PreferenceExample
from apolab.seqmodel import Policy, Vocabulary

ACCEPTANCE_SEEDS = (41, 42, 43)
SCENARIO_CONFIGS = {"verifiable_optimum": "reproduce-fig2", "graded_quality": "reproduce-fig3"}


def small_policy(kind: str, seed: int, vocab_size: int = 4, n_prompts: int = 2,
                 context_window: int = 2, scale: float = 1.0) -> Policy:
    vocab = Vocabulary(vocab_size, vocab_size - 1)
    if kind == "tabular":
        return Policy.tabular(vocab, n_prompts, context_window, seed=seed, init_scale=scale)
    return Policy.feedforward(vocab, n_prompts, context_window, embed_dim=2, hidden=3,
                              seed=seed, init_scale=scale)


def random_response(rng: np.random.Generator, vocab: Vocabulary, max_body: int = 3) -> tuple:
    body = rng.integers(0, vocab.end_token, size=rng.integers(0, max_body + 1))
    return tuple(int(t) for t in body) + (vocab.end_token,)


def random_batch(rng: np.random.Generator, policy: Policy, size: int = 2,
                 max_body: int = 3) -> list[PreferenceExample]:
    out = []
    while len(out) < size:
        pos = random_response(rng, policy.vocab, max_body)
        neg = random_response(rng, policy.vocab, max_body)
        if pos != neg:
            out.append(PreferenceExample(int(rng.integers(policy.n_prompts)), pos, neg))
    return out


def uniform_tabular(vocab_size: int = 4, context_window: int = 2) -> Policy:
    p = Policy.zeros(Vocabulary(vocab_size, vocab_size - 1), 1, context_window)
    return p


@lru_cache(maxsize=None)
def bundled_run(config: str, seed: int):
    """Workbench plus {method: (TrainResult, metrics)} for a bundled config."""
    doc = experiment.load_config_doc(config)
    doc["seed"] = seed
    cfg = experiment.parse_config(doc)
    bench = experiment.prepare(cfg)
    runs = {m: experiment.run_method(bench, m) for m in cfg.train.methods}
    return bench, runs


def scenario_run(scenario: str, seed: int):
    return bundled_run(SCENARIO_CONFIGS[scenario], seed)


def tiny_doc(method="sft", scenario="graded_quality", seed=5) -> dict:
    """A config small enough to run end to end in well under a second."""
    return {
        "seed": seed,
        "task": {"scenario": scenario, "n_problems": 6, "vocab_size": 10, "min_len": 3,
                 "max_len": 5, "n_free": 2, "dataset_size": 24},
        "model": {"context_window": 4, "embed_dim": 4, "hidden": 8, "pretrain_steps": 20,
                  "corpus_per_problem": 5},
        "train": {"method": method, "steps": 10, "batch_size": 4, "probe_every": 5,
                  "learning_rate": 0.01},
        "probe": {"size": 24},
    }
