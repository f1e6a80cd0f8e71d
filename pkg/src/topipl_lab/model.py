"""Context-window MLP acoustic model with a CTC output layer.

Frame ``t`` sees frames ``t-w .. t+w`` (zero padded), passes through one
ReLU hidden layer with inverted dropout, and emits logits over the
alphabet plus a trailing blank.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

TENSOR_NAMES = ("W1", "b1", "W2", "b2")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Tokenizer:
    symbols: tuple[str, ...]

    def __post_init__(self):
        syms = tuple(self.symbols)
        object.__setattr__(self, "symbols", syms)
        if len(set(syms)) != len(syms):
            raise ValueError("tokenizer symbols must be distinct")
        if any(len(s) != 1 for s in syms):
            raise ValueError("tokenizer symbols must be single characters")

    @classmethod
    def from_string(cls, chars: str) -> "Tokenizer":
        return cls(tuple(chars))

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def vocab_size(self) -> int:
        return len(self.symbols) + 1

    @staticmethod
    def normalize(text: str) -> str:
        return re.sub(r"\s+", " ", text.strip().lower())

    def encode(self, text: str) -> list[int]:
        norm = self.normalize(text)
        index = {s: i for i, s in enumerate(self.symbols)}
        unknown = sorted({c for c in norm if c not in index})
        if unknown:
            raise ValueError(f"unknown characters: {', '.join(repr(c) for c in unknown)}")
        return [index[c] for c in norm]

    def decode_ids(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids if i != self.blank_index)


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    context: int
    feat_dim: int
    hidden: int

    def __post_init__(self):
        in_dim = (2 * self.context + 1) * self.feat_dim
        V = self.b2.shape[0] if self.b2.ndim == 1 else -1
        expected = {
            "W1": (in_dim, self.hidden),
            "b1": (self.hidden,),
            "W2": (self.hidden, V),
            "b2": (V,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def vocab_size(self) -> int:
        return self.b2.shape[0]

    def tensors(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(TENSOR_NAMES, self.tensors()))

    def with_tensors(self, tensors) -> "ModelParams":
        W1, b1, W2, b2 = tensors
        return ModelParams(W1, b1, W2, b2, self.context, self.feat_dim, self.hidden)

    def copy(self) -> "ModelParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> "ModelParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def same_shape(self, other: "ModelParams") -> bool:
        return (self.context, self.feat_dim, self.hidden) == (
            other.context,
            other.feat_dim,
            other.hidden,
        ) and all(a.shape == b.shape for a, b in zip(self.tensors(), other.tensors()))

    def equals(self, other: "ModelParams") -> bool:
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def init_params(context: int, feat_dim: int, hidden: int, vocab: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if min(context + 1, feat_dim, hidden, vocab) < 1:
        raise ValueError("all model dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    in_dim = (2 * context + 1) * feat_dim

    def glorot(fan_in, fan_out):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    W1 = glorot(in_dim, hidden)
    W2 = glorot(hidden, vocab)
    return ModelParams(W1, np.zeros(hidden), W2, np.zeros(vocab), context, feat_dim, hidden)


@dataclass(frozen=True)
class AugmentConfig:
    n_freq_masks: int = 1
    freq_mask_width: int = 2
    n_time_masks: int = 1
    time_mask_width: int = 10
    enabled: bool = True

    def __post_init__(self):
        if min(self.freq_mask_width, self.time_mask_width, self.n_freq_masks, self.n_time_masks) < 0:
            raise ValueError("mask counts and widths must be >= 0")


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Spectrogram-style masking; returns a new array.

    Each mask width is uniform in [1, max width] (capped at the axis
    length) and its start is uniform over the valid positions.
    """
    if not cfg.enabled:
        return x
    out = x.copy()
    T, D = out.shape

    def draw(max_width, size):
        cap = min(max_width, size)
        if cap < 1:
            return 0, 0
        width = int(rng.integers(1, cap + 1))
        return int(rng.integers(0, size - width + 1)), width

    for _ in range(cfg.n_freq_masks):
        start, width = draw(cfg.freq_mask_width, D)
        out[:, start : start + width] = 0.0
    for _ in range(cfg.n_time_masks):
        start, width = draw(cfg.time_mask_width, T)
        out[start : start + width, :] = 0.0
    return out


def window(x: np.ndarray, context: int) -> np.ndarray:
    """Stack frames t-w..t+w into rows of a T x (2w+1)D matrix."""
    T, D = x.shape
    padded = np.zeros((T + 2 * context, D))
    padded[context : context + T] = x
    return np.concatenate([padded[k : k + T] for k in range(2 * context + 1)], axis=1)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    mask: np.ndarray | None = field(default=None)


def forward_windowed(
    p: ModelParams,
    inputs: np.ndarray,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Forward pass on pre-windowed rows; used to batch several utterances in one matmul."""
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must be in [0, 1)")
    if inputs.shape[1] != p.W1.shape[0]:
        raise ShapeError(f"input width {inputs.shape[1]} does not match W1 rows {p.W1.shape[0]}")
    pre = inputs @ p.W1 + p.b1
    h = np.maximum(pre, 0.0)
    mask = None
    if train and dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = (rng.random(h.shape) >= dropout_p) / (1.0 - dropout_p)
        h = h * mask
    logits = h @ p.W2 + p.b2
    return logits, ForwardTrace(inputs, pre, h, mask)


def forward(
    p: ModelParams,
    x: np.ndarray,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.feat_dim:
        raise ShapeError(f"expected T x {p.feat_dim} features, got shape {x.shape}")
    return forward_windowed(p, window(x, p.context), dropout_p, train, rng)


def backward(p: ModelParams, trace: ForwardTrace, dlogits: np.ndarray) -> ModelParams:
    """Gradient of sum(dlogits * logits) w.r.t. every parameter."""
    if dlogits.shape != (trace.hidden.shape[0], p.vocab_size):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match trace")
    dW2 = trace.hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dh = dlogits @ p.W2.T
    if trace.mask is not None:
        dh = dh * trace.mask
    dh = dh * (trace.pre > 0)
    dW1 = trace.inputs.T @ dh
    db1 = dh.sum(axis=0)
    return p.with_tensors([dW1, db1, dW2, db2])
