"""Deterministic toy-speech corpus.

Each symbol of a random letter string is rendered as a run of noisy copies
of that symbol's unit-norm prototype vector. Randomness comes from
SplitMix64 (Steele, Lea & Flood 2014): the state advances by the constant
0x9E3779B97F4A7C15 and each output is the state passed through the
``mix`` finaliser below, so the k-th draw of a stream is a pure function
of (key, k) and can be vectorised. Uniforms take the top 53 bits; normals
use the Box-Muller cosine branch on consecutive uniform pairs. Every
utterance has its own stream keyed by (seed, split, index), so corpora
are reproducible from the constants alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from topipl_lab.manifest import Manifest, Utterance, write_manifest

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1

SPLITS = ("labeled", "unlabeled", "dev", "test")
SIDECAR_NAME = "unlabeled.refs.jsonl"


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, key: int):
        self.state = int(key) & MASK64

    @classmethod
    def derive(cls, *parts: int) -> "SplitMix64":
        """Stream keyed by hashing ``parts`` through successive mix rounds."""
        key = 0
        for p in parts:
            key = int(_mix(np.array([(key ^ (int(p) & MASK64)) + int(GOLDEN) & MASK64], dtype=np.uint64))[0])
        return cls(key)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * GOLDEN
        self.state = (self.state + n * int(GOLDEN)) & MASK64
        return _mix(states)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """Integers in the closed range [lo, hi]."""
        return lo + np.floor(self.uniform(n) * (hi - lo + 1)).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return r * np.cos(2.0 * np.pi * u[:, 1])


@dataclass(frozen=True)
class SynthSpec:
    alphabet_size: int = 8
    feat_dim: int = 16
    frames_per_symbol: tuple[int, int] = (3, 8)
    symbols_per_utt: tuple[int, int] = (2, 10)
    noise_sigma: float = 0.3
    fps: float = 10.0
    seed: int = 0
    split_sizes: dict = field(
        default_factory=lambda: {"labeled": 200, "unlabeled": 2000, "dev": 100, "test": 200}
    )
    allow_repeats: bool = False
    lang: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "frames_per_symbol", tuple(self.frames_per_symbol))
        object.__setattr__(self, "symbols_per_utt", tuple(self.symbols_per_utt))
        if not 2 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in [2, 26]")
        if self.feat_dim < self.alphabet_size:
            raise ValueError("feat_dim must be >= alphabet_size")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("frames_per_symbol", "symbols_per_utt"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a range 1 <= lo <= hi")
        if set(self.split_sizes) != set(SPLITS) or min(self.split_sizes.values()) < 1:
            raise ValueError(f"split_sizes needs positive counts for {SPLITS}")
        if self.fps <= 0:
            raise ValueError("fps must be > 0")

    @property
    def letters(self) -> str:
        return "abcdefghijklmnopqrstuvwxyz"[: self.alphabet_size]

    def to_json(self) -> dict:
        d = asdict(self)
        d["frames_per_symbol"] = list(self.frames_per_symbol)
        d["symbols_per_utt"] = list(self.symbols_per_utt)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def make_templates(spec: SynthSpec, max_tries: int = 100) -> np.ndarray:
    """``alphabet_size x feat_dim`` unit-norm prototypes with pairwise dot products < 0.9."""
    rng = SplitMix64.derive(spec.seed, 0xC0FFEE)
    for _ in range(max_tries):
        protos = rng.normal(spec.alphabet_size * spec.feat_dim).reshape(spec.alphabet_size, spec.feat_dim)
        norms = np.linalg.norm(protos, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        protos = protos / norms
        gram = protos @ protos.T
        np.fill_diagonal(gram, -np.inf)
        if gram.max() < 0.9:
            return protos
    raise RuntimeError(f"could not draw {spec.alphabet_size} distinct prototypes in {max_tries} tries")


def gen_utterance(templates: np.ndarray, spec: SynthSpec, rng: SplitMix64, uid: str = "utt", split: str = "") -> Utterance:
    n_sym = int(rng.integers(*spec.symbols_per_utt, 1)[0])
    A = spec.alphabet_size
    if spec.allow_repeats:
        symbols = rng.integers(0, A - 1, n_sym)
    else:
        # each next symbol is drawn from the A-1 letters that differ from the previous one
        draws = rng.integers(0, A - 2, n_sym)
        symbols = np.empty(n_sym, dtype=np.int64)
        symbols[0] = int(np.floor(rng.uniform(1)[0] * A))
        for i in range(1, n_sym):
            d = int(draws[i])
            symbols[i] = d if d < symbols[i - 1] else d + 1
    runs = rng.integers(*spec.frames_per_symbol, n_sym)
    frames = np.repeat(templates[symbols], runs, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.normal(frames.size).reshape(frames.shape)
    text = "".join(spec.letters[k] for k in symbols)
    return Utterance(
        id=uid,
        duration=frames.shape[0] / spec.fps,
        text=text,
        lang=spec.lang,
        features=frames,
        source=f"synth:{split}" if split else "synth",
    )


def gen_split(spec: SynthSpec, split: str, templates: np.ndarray | None = None) -> Manifest:
    if templates is None:
        templates = make_templates(spec)
    split_code = SPLITS.index(split) + 1
    return Manifest(
        gen_utterance(templates, spec, SplitMix64.derive(spec.seed, split_code, i), f"{split}-{i:05d}", split)
        for i in range(spec.split_sizes[split])
    )


def strip_text(m: Manifest) -> Manifest:
    return Manifest(
        Utterance(u.id, u.duration, None, u.lang, u.words, u.features, u.source, u.extra) for u in m
    )


@dataclass
class Corpus:
    labeled: Manifest
    unlabeled: Manifest
    dev: Manifest
    test: Manifest
    unlabeled_refs: dict[str, str]
    templates: np.ndarray


def gen_corpus(spec: SynthSpec, out_dir=None) -> Corpus:
    """Generate all four splits; write them (plus the unlabeled sidecar) when ``out_dir`` is given."""
    templates = make_templates(spec)
    splits = {s: gen_split(spec, s, templates) for s in SPLITS}
    refs = {u.id: u.text for u in splits["unlabeled"]}
    corpus = Corpus(
        labeled=splits["labeled"],
        unlabeled=strip_text(splits["unlabeled"]),
        dev=splits["dev"],
        test=splits["test"],
        unlabeled_refs=refs,
        templates=templates,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            write_manifest(getattr(corpus, s), out / f"{s}.jsonl")
        with open(out / SIDECAR_NAME, "w", encoding="utf-8") as fh:
            for uid, text in refs.items():
                fh.write(json.dumps({"id": uid, "text": text}) + "\n")
        with open(out / "spec.json", "w", encoding="utf-8") as fh:
            json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return corpus


def nearest_prototype_decode(
    features: np.ndarray, templates: np.ndarray, letters: str, smooth_radius: int = 0
) -> str:
    """Nearest prototype per frame, then run collapse; a learnability oracle.

    With ``smooth_radius > 0`` each frame is first replaced by the mean of
    frames within that radius (truncated at the edges).
    """
    x = features
    if smooth_radius > 0:
        T = x.shape[0]
        csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
        lo = np.clip(np.arange(T) - smooth_radius, 0, T)
        hi = np.clip(np.arange(T) + smooth_radius + 1, 0, T)
        x = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    d = ((x[:, None, :] - templates[None, :, :]) ** 2).sum(axis=-1)
    path = np.argmin(d, axis=1)
    out, prev = [], None
    for k in path.tolist():
        if k != prev:
            out.append(letters[k])
        prev = k
    return "".join(out)
