"""Independent reference computations used to cross-check the package.

Everything here is written as plain per-token loops in extended precision
(numpy longdouble or mpmath), sharing no code with the vectorized paths
under test beyond reading the parameter layout.
"""

from __future__ import annotations

import math
from fractions import Fraction

import mpmath
import numpy as np

LD = np.longdouble


def _weights(policy, params):
    """Slice a flat parameter vector into named arrays, in longdouble."""
    out, off = {}, 0
    for name, shape in policy._shapes.items():
        size = int(np.prod(shape))
        out[name] = np.asarray(params[off:off + size], dtype=LD).reshape(shape)
        off += size
    return out


def _context(policy, prefix):
    k, pad = policy.context_window, policy.vocab.size
    padded = [pad] * k + list(prefix)
    return padded[len(padded) - k:] if k else []


def logits(policy, params, prompt, prefix):
    w = _weights(policy, params)
    ctx = _context(policy, prefix)
    if policy.kind == "tabular":
        radix = policy.vocab.size + 1
        row = prompt
        for t in ctx:
            row = row * radix + t
        return w["table"][row % policy.n_rows]
    pieces = [w["prompt_emb"][prompt]] + [w["token_emb"][t] for t in ctx]
    x = np.concatenate(pieces)
    hidden = np.array([np.tanh(np.dot(w["w1"][j], x) + w["b1"][j])
                       for j in range(policy.hidden)], dtype=LD)
    return np.array([np.dot(w["w2"][v], hidden) + w["b2"][v]
                     for v in range(policy.vocab.size)], dtype=LD)


def token_logprob(z, token):
    m = max(z)
    total = sum(np.exp(v - m) for v in z)
    return z[token] - m - np.log(total)


def seq_logprob(policy, params, prompt, response):
    total = LD(0)
    for t in range(len(response)):
        total += token_logprob(logits(policy, params, prompt, response[:t]), response[t])
    return total


def loss(kind, policy, params, ref, batch, beta=0.1, frozen_alpha=None):
    """Mean SFT / DPO / APO loss, looping over examples in longdouble.

    ``frozen_alpha`` supplies per-example APO weights to hold fixed, which is
    what a stop-gradient weight means for a finite-difference check.
    """
    vals = []
    for i, ex in enumerate(batch):
        lp_pos = seq_logprob(policy, params, ex.prompt, ex.preferred)
        sft = -lp_pos
        if kind == "sft":
            vals.append(sft)
            continue
        lp_neg = seq_logprob(policy, params, ex.prompt, ex.dispreferred)
        r_pos = seq_logprob(ref, ref.params, ex.prompt, ex.preferred)
        r_neg = seq_logprob(ref, ref.params, ex.prompt, ex.dispreferred)
        margin = (lp_pos - r_pos) - (lp_neg - r_neg)
        dpo = np.log1p(np.exp(-LD(beta) * margin))
        if kind == "dpo":
            vals.append(dpo)
            continue
        if frozen_alpha is None:
            alpha = np.exp(lp_pos / LD(len(ex.preferred)))
        else:
            alpha = LD(frozen_alpha[i])
        vals.append(alpha * dpo + (1 - alpha) * sft)
    return sum(vals) / LD(len(vals))


def alphas(policy, params, batch):
    return [np.exp(seq_logprob(policy, params, ex.prompt, ex.preferred) / LD(len(ex.preferred)))
            for ex in batch]


def fd_gradient(fn, params, h=1e-5):
    """Central finite differences of ``fn`` evaluated in longdouble."""
    base = np.asarray(params, dtype=LD)
    grad = np.zeros(len(base), dtype=LD)
    for i in range(len(base)):
        up, down = base.copy(), base.copy()
        up[i] += LD(h)
        down[i] -= LD(h)
        grad[i] = (fn(up) - fn(down)) / LD(2 * h)
    return grad.astype(np.float64)


# -- mpmath ------------------------------------------------------------------

def mp_seq_prob(policy, prompt, response, dps=50):
    """Sequence probability with float64 logits softmaxed at ``dps`` digits."""
    from apolab.seqmodel import token_logits

    with mpmath.workdps(dps):
        prob = mpmath.mpf(1)
        for t in range(len(response)):
            z = [mpmath.mpf(float(v)) for v in token_logits(policy, prompt, response[:t])]
            prob *= mpmath.exp(z[response[t]]) / mpmath.fsum(mpmath.exp(v) for v in z)
        return prob


def mp_dpo_ratio_form(policy, ref, ex, beta, dps=50):
    """log(1 + (ref(y+) pi(y-) / (pi(y+) ref(y-))) ** beta) at ``dps`` digits."""
    with mpmath.workdps(dps):
        ratio = (mp_seq_prob(ref, ex.prompt, ex.preferred, dps)
                 * mp_seq_prob(policy, ex.prompt, ex.dispreferred, dps)
                 / (mp_seq_prob(policy, ex.prompt, ex.preferred, dps)
                    * mp_seq_prob(ref, ex.prompt, ex.dispreferred, dps)))
        return mpmath.log(1 + ratio ** mpmath.mpf(beta))


# -- combinatorics / co-ranking ------------------------------------------------------

def binomial_at_k(n, c, k) -> Fraction:
    """1 - C(n - c, k) / C(n, k) with exact big integers."""
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def corank_dense(bits, damping, iterations):
    """Straight-line co-ranking with explicit loops."""
    n, m = len(bits), len(bits[0])
    s, t = [1.0] * n, [1.0] * m
    for _ in range(iterations):
        s_new = [damping * sum(bits[i][j] * t[j] for j in range(m)) + (1 - damping) * s[i]
                 for i in range(n)]
        t_new = [damping * sum((1 - bits[i][j]) * s[i] for i in range(n)) + (1 - damping) * t[j]
                 for j in range(m)]
        zs, zt = math.fsum(s_new), math.fsum(t_new)
        s = [v * n / zs for v in s_new]
        t = [v * m / zt for v in t_new]
    return s, t
