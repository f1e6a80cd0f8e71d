"""CTC loss with its logit gradient, greedy decoding, and a brute-force oracle.

All recursions run in log space over the blank-extended label sequence
``[blank, l1, blank, l2, ..., lL, blank]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

NEG_INF = -np.inf


class CTCError(ValueError):
    pass


@dataclass
class CtcResult:
    loss: float
    dlogits: np.ndarray


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def min_frames(labels) -> int:
    """Shortest input that can emit ``labels``: one frame per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


@njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _forward_backward(logp, ext, skip):
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)

    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse2(a, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                a = _lse2(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]

    # beta[t, s]: log prob of emitting frames t+1..T-1 given state s at frame t
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                b = _lse2(b, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and skip[s + 2]:
                b = _lse2(b, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = b

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = _lse2(log_p, alpha[T - 1, S - 2])
    return alpha, beta, log_p


@njit(cache=True)
def _occupancy(alpha, beta, log_p, ext, V):
    T, S = alpha.shape
    gamma = np.zeros((T, V))
    for t in range(T):
        for s in range(S):
            v = alpha[t, s] + beta[t, s]
            if v != -np.inf:
                gamma[t, ext[s]] += math.exp(v - log_p)
    return gamma


def extend_labels(labels, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved label sequence and, per position, whether the skip transition from s-2 is allowed."""
    labels = list(labels)
    S = 2 * len(labels) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(S, dtype=np.bool_)
    for i in range(1, len(labels)):
        if labels[i] != labels[i - 1]:
            skip[2 * i + 1] = True
    return ext, skip


def ctc_loss_grad(logits: np.ndarray, labels, blank: int) -> CtcResult:
    """Negative log-likelihood of ``labels`` under CTC and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise CTCError(f"logits must be a non-empty T x V matrix, got shape {logits.shape}")
    T, V = logits.shape
    labels = [int(x) for x in labels]
    if any(x == blank for x in labels):
        raise CTCError("labels must not contain the blank index")
    if any(x < 0 or x >= V for x in labels):
        raise CTCError("label index out of range")
    need = min_frames(labels)
    if T < need:
        raise CTCError(f"label-too-long: {len(labels)} labels need {need} frames, got {T}")

    logp = log_softmax(logits)
    ext, skip = extend_labels(labels, blank)
    alpha, beta, log_p = _forward_backward(logp, ext, skip)
    gamma = _occupancy(alpha, beta, log_p, ext, V)
    dlogits = np.exp(logp) - gamma
    return CtcResult(loss=float(-log_p), dlogits=dlogits)


def greedy_decode(logits: np.ndarray, blank: int) -> list[int]:
    """Best-path decode: frame argmax (lowest index on ties), collapse runs, drop blanks."""
    path = np.argmax(np.asarray(logits), axis=-1)
    out = []
    prev = None
    for k in path.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def collapse(path, blank: int) -> tuple:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_force_ctc(logits: np.ndarray, labels, blank: int, max_paths: int = 10**6) -> float:
    """Exact -log p(labels) by enumerating every frame path. Returns inf when no path collapses to ``labels``."""
    logits = np.asarray(logits, dtype=np.float64)
    T, V = logits.shape
    if V**T > max_paths:
        raise CTCError(f"instance too large for enumeration: {V}^{T} paths")
    logp = log_softmax(logits)
    target = tuple(int(x) for x in labels)
    terms = []
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) == target:
            terms.append(sum(logp[t, k] for t, k in enumerate(path)))
    if not terms:
        return math.inf
    top = max(terms)
    return -(top + math.log(sum(math.exp(x - top) for x in terms)))
