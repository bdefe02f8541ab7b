"""Small autoregressive softmax policies over integer token sequences.

Two policy families share one interface:

``tabular``
    A logit table with one row per context window (prompt id plus the last
    ``k`` response tokens).  Rows are indexed exactly while the table fits
    under ``MAX_TABLE_ROWS``; larger windows fall back to a multiplicative
    hash of the exact index.
``feedforward``
    Token and prompt embeddings of the context window, concatenated, passed
    through one tanh hidden layer and a linear logit head.

Prompts are integer ids in their own range ``[0, n_prompts)``; response
tokens live in ``[0, vocab.size)``.  Context slots before the first response
token hold a padding id equal to ``vocab.size``.

Every evaluation is a pure read of ``policy.params``; gradients are computed
by explicit backpropagation in :func:`backward`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputDomainError, NumericFailure

TABULAR = "tabular"
FEEDFORWARD = "feedforward"
KINDS = (TABULAR, FEEDFORWARD)

MAX_TABLE_ROWS = 1 << 20
_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)

# floor used when a prescribed probability is exactly zero
LOG_ZERO = -1.0e4


@dataclass(frozen=True)
class Vocabulary:
    size: int
    end_token: int

    def __post_init__(self):
        if int(self.size) < 2:
            raise InputDomainError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= int(self.end_token) < int(self.size):
            raise InputDomainError(
                f"end_token {self.end_token} outside vocabulary of size {self.size}")

    @property
    def pad(self) -> int:
        return self.size


def check_response(vocab: Vocabulary, response: Sequence[int]) -> tuple[int, ...]:
    """Validate a terminated response and return it as a tuple."""
    seq = tuple(int(t) for t in response)
    if not seq:
        raise InputDomainError("response is empty")
    for t in seq:
        if not 0 <= t < vocab.size:
            raise InputDomainError(f"token {t} out of range for vocabulary {vocab.size}")
    if seq[-1] != vocab.end_token or seq.count(vocab.end_token) != 1:
        raise InputDomainError(
            f"response must end with end_token {vocab.end_token} exactly once: {seq}")
    return seq


def prompt_id(prompt) -> int:
    if isinstance(prompt, (int, np.integer)):
        return int(prompt)
    items = list(prompt)
    if len(items) != 1:
        raise InputDomainError(f"prompt must be a single id, got {items}")
    return int(items[0])


class Policy:
    """Autoregressive next-token policy with a flat parameter vector."""

    def __init__(self, kind: str, vocab: Vocabulary, n_prompts: int,
                 context_window: int = 2, embed_dim: int = 8, hidden: int = 32,
                 params: np.ndarray | None = None, seed: int | None = None,
                 init_scale: float = 0.1, step: int = 0):
        if kind not in KINDS:
            raise InputDomainError(f"unknown policy kind {kind!r}")
        if n_prompts < 1 or context_window < 0:
            raise InputDomainError("n_prompts must be >= 1 and context_window >= 0")
        self.kind = kind
        self.vocab = vocab
        self.n_prompts = int(n_prompts)
        self.context_window = int(context_window)
        self.embed_dim = int(embed_dim)
        self.hidden = int(hidden)
        self.seed = seed
        self.step = int(step)
        self._shapes = self._layout()
        n = sum(int(np.prod(s)) for s in self._shapes.values())
        if params is None:
            rng = np.random.default_rng(seed)
            params = rng.uniform(-init_scale, init_scale, size=n)
        params = np.asarray(params, dtype=np.float64).copy()
        if params.shape != (n,):
            raise InputDomainError(f"expected {n} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise NumericFailure("policy parameters must be finite")
        self.params = params

    # -- layout -----------------------------------------------------------

    @property
    def n_rows(self) -> int:
        exact = self.n_prompts * (self.vocab.size + 1) ** self.context_window
        return min(exact, MAX_TABLE_ROWS)

    @property
    def hashed(self) -> bool:
        return self.n_prompts * (self.vocab.size + 1) ** self.context_window > MAX_TABLE_ROWS

    def _layout(self) -> dict[str, tuple[int, ...]]:
        V = self.vocab.size
        if self.kind == TABULAR:
            return {"table": (self.n_rows, V)}
        d, H, k = self.embed_dim, self.hidden, self.context_window
        return {
            "prompt_emb": (self.n_prompts, d),
            "token_emb": (V + 1, d),
            "w1": (H, (k + 1) * d),
            "b1": (H,),
            "w2": (V, H),
            "b2": (V,),
        }

    def views(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        params = self.params if params is None else params
        out, off = {}, 0
        for name, shape in self._shapes.items():
            size = int(np.prod(shape))
            out[name] = params[off:off + size].reshape(shape)
            off += size
        return out

    # -- construction helpers ---------------------------------------------

    @classmethod
    def tabular(cls, vocab: Vocabulary, n_prompts: int, context_window: int = 2,
                seed: int | None = None, init_scale: float = 0.1) -> "Policy":
        return cls(TABULAR, vocab, n_prompts, context_window, seed=seed,
                   init_scale=init_scale)

    @classmethod
    def feedforward(cls, vocab: Vocabulary, n_prompts: int, context_window: int = 2,
                    embed_dim: int = 8, hidden: int = 32, seed: int | None = None,
                    init_scale: float = 0.1) -> "Policy":
        return cls(FEEDFORWARD, vocab, n_prompts, context_window, embed_dim, hidden,
                   seed=seed, init_scale=init_scale)

    @classmethod
    def zeros(cls, vocab: Vocabulary, n_prompts: int = 1, context_window: int = 2) -> "Policy":
        """Tabular policy with all-zero logits (uniform everywhere)."""
        p = cls.tabular(vocab, n_prompts, context_window, seed=0)
        p.params[:] = 0.0
        return p

    def set_distribution(self, prompt, prefix: Sequence[int], probs) -> None:
        """Make a tabular policy reproduce ``probs`` in one context.

        Zero probabilities map to ``LOG_ZERO``, whose softmax weight
        underflows to exactly 0.
        """
        if self.kind != TABULAR:
            raise InputDomainError("set_distribution needs a tabular policy")
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (self.vocab.size,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise InputDomainError("probs must be a distribution over the vocabulary")
        row = _row_index(self, np.array([prompt_id(prompt)]),
                         context_array(self, [prefix]))[0]
        with np.errstate(divide="ignore"):
            logits = np.where(probs > 0, np.log(probs), LOG_ZERO)
        self.views()["table"][row] = logits

    def copy(self) -> "Policy":
        return Policy(self.kind, self.vocab, self.n_prompts, self.context_window,
                      self.embed_dim, self.hidden, params=self.params, seed=self.seed,
                      step=self.step)

    def snapshot(self) -> "ReferencePolicy":
        return ReferencePolicy(self)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab.size,
            "end_token": self.vocab.end_token,
            "context_window": self.context_window,
            "n_prompts": self.n_prompts,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
        }

    def __repr__(self):
        return (f"Policy(kind={self.kind!r}, vocab={self.vocab.size}, "
                f"prompts={self.n_prompts}, k={self.context_window}, "
                f"n_params={self.params.size})")


class ReferencePolicy(Policy):
    """Frozen deep copy of a policy; parameters are read-only."""

    def __init__(self, policy: Policy):
        super().__init__(policy.kind, policy.vocab, policy.n_prompts,
                         policy.context_window, policy.embed_dim, policy.hidden,
                         params=policy.params, seed=policy.seed, step=policy.step)
        self.params.setflags(write=False)
        self._frozen = True

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("ReferencePolicy is immutable")
        super().__setattr__(name, value)

    def snapshot(self) -> "ReferencePolicy":
        return self


# -- contexts -------------------------------------------------------------

def context_array(policy: Policy, prefixes: Iterable[Sequence[int]]) -> np.ndarray:
    """Last ``k`` tokens of each prefix, left-padded, as an (N, k) int array."""
    k, pad = policy.context_window, policy.vocab.pad
    rows = []
    for prefix in prefixes:
        prefix = [int(t) for t in prefix]
        for t in prefix:
            if not 0 <= t < policy.vocab.size:
                raise InputDomainError(f"token {t} out of range for vocabulary {policy.vocab.size}")
        window = ([pad] * k + prefix)[len(prefix):] if k else []
        rows.append(window)
    return np.array(rows, dtype=np.int64).reshape(-1, k)


def _row_index(policy: Policy, prompts: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    radix = policy.vocab.size + 1
    idx = prompts.astype(np.uint64)
    for i in range(policy.context_window):
        idx = idx * np.uint64(radix) + ctx[:, i].astype(np.uint64)
    if policy.hashed:
        idx = (idx * _HASH_MULT) >> np.uint64(20)
    return (idx % np.uint64(policy.n_rows)).astype(np.int64)


@dataclass
class Encoded:
    """All next-token positions of a list of (prompt, response) pairs."""

    prompts: np.ndarray
    ctx: np.ndarray
    targets: np.ndarray
    seq: np.ndarray
    lengths: np.ndarray

    @property
    def n_seq(self) -> int:
        return len(self.lengths)


def encode(policy: Policy, prompts: Sequence, responses: Sequence[Sequence[int]]) -> Encoded:
    if len(prompts) != len(responses):
        raise InputDomainError("prompts and responses differ in length")
    k, pad = policy.context_window, policy.vocab.pad
    p_parts, c_parts, t_parts, s_parts, lengths = [], [], [], [], []
    for i, (x, y) in enumerate(zip(prompts, responses)):
        pid = prompt_id(x)
        if not 0 <= pid < policy.n_prompts:
            raise InputDomainError(f"prompt id {pid} out of range [0, {policy.n_prompts})")
        y = check_response(policy.vocab, y)
        T = len(y)
        padded = np.array([pad] * k + list(y[:-1]), dtype=np.int64)
        if k:
            ctx = np.lib.stride_tricks.sliding_window_view(padded, k)
        else:
            ctx = np.zeros((T, 0), dtype=np.int64)
        p_parts.append(np.full(T, pid, dtype=np.int64))
        c_parts.append(ctx)
        t_parts.append(np.array(y, dtype=np.int64))
        s_parts.append(np.full(T, i, dtype=np.int64))
        lengths.append(T)
    if not lengths:
        raise InputDomainError("nothing to encode")
    return Encoded(np.concatenate(p_parts), np.concatenate(c_parts).reshape(-1, k),
                   np.concatenate(t_parts), np.concatenate(s_parts),
                   np.array(lengths, dtype=np.int64))


def select(enc: Encoded, which: np.ndarray) -> Encoded:
    """Sub-batch of sequences ``which`` (in that order)."""
    which = np.asarray(which, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(enc.lengths)[:-1]])
    idx = np.concatenate([np.arange(starts[w], starts[w] + enc.lengths[w]) for w in which])
    remap = np.repeat(np.arange(len(which)), enc.lengths[which])
    return Encoded(enc.prompts[idx], enc.ctx[idx], enc.targets[idx], remap,
                   enc.lengths[which])


# -- forward / backward ---------------------------------------------------

def _logits(policy: Policy, prompts: np.ndarray, ctx: np.ndarray,
            params: np.ndarray | None = None):
    w = policy.views(params)
    if policy.kind == TABULAR:
        rows = _row_index(policy, prompts, ctx)
        return w["table"][rows], {"rows": rows}
    n = len(prompts)
    x = np.concatenate([w["prompt_emb"][prompts],
                        w["token_emb"][ctx].reshape(n, -1)], axis=1)
    h = np.tanh(x @ w["w1"].T + w["b1"])
    return h @ w["w2"].T + w["b2"], {"x": x, "h": h}


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def forward(policy: Policy, enc: Encoded, params: np.ndarray | None = None):
    """Sequence log-probabilities for every encoded sequence, plus a cache for :func:`backward`."""
    logits, cache = _logits(policy, enc.prompts, enc.ctx, params)
    logp = _log_softmax(logits)
    tok = logp[np.arange(len(enc.targets)), enc.targets]
    seq_lp = np.zeros(enc.n_seq, dtype=tok.dtype)
    np.add.at(seq_lp, enc.seq, tok)
    cache.update(logp=logp, enc=enc, token_lp=tok)
    return seq_lp, cache


def backward(policy: Policy, cache: dict, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_s weights[s] * log pi(y_s | x_s)`` with respect to the parameters."""
    enc: Encoded = cache["enc"]
    weights = np.asarray(weights, dtype=np.float64)
    probs = np.exp(cache["logp"])
    w_pos = weights[enc.seq][:, None]
    dlogits = -w_pos * probs
    dlogits[np.arange(len(enc.targets)), enc.targets] += w_pos[:, 0]

    grad = np.zeros_like(policy.params)
    g = policy.views(grad)
    if policy.kind == TABULAR:
        np.add.at(g["table"], cache["rows"], dlogits)
        return grad
    w = policy.views()
    h, x = cache["h"], cache["x"]
    g["w2"][:] = dlogits.T @ h
    g["b2"][:] = dlogits.sum(axis=0)
    da = (dlogits @ w["w2"]) * (1.0 - h * h)
    g["w1"][:] = da.T @ x
    g["b1"][:] = da.sum(axis=0)
    dx = da @ w["w1"]
    d = policy.embed_dim
    np.add.at(g["prompt_emb"], enc.prompts, dx[:, :d])
    k = policy.context_window
    if k:
        np.add.at(g["token_emb"], enc.ctx.reshape(-1), dx[:, d:].reshape(-1, d))
    return grad


# -- public single-sequence operations ------------------------------------

def token_logits(policy: Policy, prompt, prefix: Sequence[int]) -> np.ndarray:
    """Next-token logits after ``prefix``; softmax gives pi(. | x, y_<t)."""
    pid = prompt_id(prompt)
    if not 0 <= pid < policy.n_prompts:
        raise InputDomainError(f"prompt id {pid} out of range [0, {policy.n_prompts})")
    ctx = context_array(policy, [prefix])
    logits, _ = _logits(policy, np.array([pid]), ctx)
    return logits[0].copy()


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def seq_logprob(policy: Policy, prompt, response: Sequence[int]) -> float:
    enc = encode(policy, [prompt], [response])
    return float(forward(policy, enc)[0][0])


def seq_logprobs(policy: Policy, prompts: Sequence, responses: Sequence[Sequence[int]]) -> np.ndarray:
    return forward(policy, encode(policy, prompts, responses))[0]


def greedy_decode_many(policy: Policy, prompts: Sequence, max_len: int) -> list[tuple[int, ...]]:
    """Greedy argmax decoding for several prompts at once (ties go to the smallest id)."""
    if max_len < 1:
        raise InputDomainError("max_len must be >= 1")
    pids = np.array([prompt_id(p) for p in prompts], dtype=np.int64)
    if np.any(pids < 0) or np.any(pids >= policy.n_prompts):
        raise InputDomainError("prompt id out of range")
    end, pad, k = policy.vocab.end_token, policy.vocab.pad, policy.context_window
    out: list[list[int]] = [[] for _ in pids]
    active = np.ones(len(pids), dtype=bool)
    ctx = np.full((len(pids), k), pad, dtype=np.int64)
    for _ in range(max_len):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        logits, _ = _logits(policy, pids[idx], ctx[idx])
        nxt = np.argmax(logits, axis=1)
        for j, t in zip(idx, nxt):
            out[j].append(int(t))
            if t == end:
                active[j] = False
        if k:
            ctx[idx] = np.concatenate([ctx[idx, 1:], nxt[:, None]], axis=1)
    for seq in out:
        if not seq or seq[-1] != end:
            seq.append(end)
    return [tuple(s) for s in out]


def greedy_decode(policy: Policy, prompt, max_len: int) -> tuple[int, ...]:
    return greedy_decode_many(policy, [prompt], max_len)[0]


# -- checkpoints ----------------------------------------------------------

def checkpoint_text(policy: Policy, seed: int | None = None, step: int | None = None) -> str:
    """JSON checkpoint; parameters are written with 17 significant digits."""
    if not np.all(np.isfinite(policy.params)):
        raise NumericFailure("cannot checkpoint non-finite parameters")
    header = dict(policy.meta())
    header["seed"] = policy.seed if seed is None else seed
    header["step"] = policy.step if step is None else step
    body = json.dumps(header, sort_keys=True)[:-1]
    params = ",".join(format(float(v), ".17g") for v in policy.params)
    return f'{body}, "parameters": [{params}]}}\n'


def save_checkpoint(policy: Policy, path, seed: int | None = None, step: int | None = None) -> Path:
    path = Path(path)
    path.write_text(checkpoint_text(policy, seed, step))
    return path


def policy_from_record(rec: dict) -> Policy:
    vocab = Vocabulary(int(rec["vocab_size"]), int(rec["end_token"]))
    return Policy(rec["kind"], vocab, int(rec.get("n_prompts", 1)), int(rec["context_window"]),
                  int(rec.get("embed_dim", 8)), int(rec.get("hidden", 32)),
                  params=np.array(rec["parameters"], dtype=np.float64),
                  seed=rec.get("seed"), step=int(rec.get("step", 0)))


def load_checkpoint(path) -> Policy:
    return policy_from_record(json.loads(Path(path).read_text()))
