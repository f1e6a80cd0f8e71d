"""JSON Lines manifests and the filtering / segmentation stages applied to them."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from topipl_lab import metrics

KNOWN_FIELDS = ("id", "text", "duration", "lang", "words", "features", "source")
DEFAULT_BOUNDARY_CHARS = frozenset(".!?…")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class WordStamp:
    word: str
    start: float
    end: float

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ManifestError(f"bad word interval for {self.word!r}: {self.start}..{self.end}")


@dataclass(frozen=True, eq=False)
class Utterance:
    """One manifest entry.

    ``features`` is either an inline ``T x D`` float array or a string
    reference to a ``.npy`` file (resolved by :func:`load_features`).
    Unrecognised JSON fields ride along in ``extra``.
    """

    id: str
    duration: float
    text: str | None = None
    lang: str | None = None
    words: tuple[WordStamp, ...] | None = None
    features: np.ndarray | str | None = None
    source: str | None = None
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not (isinstance(self.duration, (int, float)) and self.duration > 0):
            raise ManifestError(f"{self.id}: duration must be > 0, got {self.duration!r}")
        if self.words is not None:
            object.__setattr__(self, "words", tuple(self.words))
            for w in self.words:
                if w.end > self.duration:
                    raise ManifestError(f"{self.id}: word {w.word!r} ends after the utterance")
        if self.features is not None and not isinstance(self.features, str):
            object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        a, b = self.features, other.features
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            same_feats = (
                isinstance(a, np.ndarray)
                and isinstance(b, np.ndarray)
                and a.shape == b.shape
                and np.array_equal(a, b)
            )
        else:
            same_feats = a == b
        return same_feats and all(
            getattr(self, f) == getattr(other, f)
            for f in ("id", "duration", "text", "lang", "words", "source", "extra")
        )

    __hash__ = None

    def to_json(self) -> dict:
        rec = {"id": self.id}
        if self.text is not None:
            rec["text"] = self.text
        rec["duration"] = self.duration
        if self.lang is not None:
            rec["lang"] = self.lang
        if self.words is not None:
            rec["words"] = [{"word": w.word, "start": w.start, "end": w.end} for w in self.words]
        if isinstance(self.features, np.ndarray):
            rec["features"] = self.features.tolist()
        elif self.features is not None:
            rec["features"] = self.features
        if self.source is not None:
            rec["source"] = self.source
        for k, v in self.extra.items():
            rec.setdefault(k, v)
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "Utterance":
        if not isinstance(rec, dict):
            raise ManifestError("entry is not a JSON object")
        if "id" not in rec or "duration" not in rec:
            raise ManifestError("entry needs 'id' and 'duration'")
        words = rec.get("words")
        if words is not None:
            words = tuple(WordStamp(w["word"], float(w["start"]), float(w["end"])) for w in words)
        feats = rec.get("features")
        if feats is not None and not isinstance(feats, str):
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim != 2:
                raise ManifestError(f"{rec['id']}: inline features must be a 2-D array")
        return cls(
            id=str(rec["id"]),
            duration=rec["duration"],
            text=rec.get("text"),
            lang=rec.get("lang"),
            words=words,
            features=feats,
            source=rec.get("source"),
            extra={k: v for k, v in rec.items() if k not in KNOWN_FIELDS},
        )


class Manifest:
    """Ordered utterances with pairwise distinct ids."""

    def __init__(self, entries: Iterable[Utterance] = ()):
        self.entries = list(entries)
        seen = set()
        for u in self.entries:
            if u.id in seen:
                raise ManifestError(f"duplicate id {u.id!r}")
            seen.add(u.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.entries == other.entries

    def __repr__(self):
        return f"Manifest({len(self.entries)} entries)"

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.entries]

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.entries}


@dataclass
class FilterReport:
    stage: str
    kept: int
    dropped: int
    reasons: dict[str, int]

    def to_json(self) -> dict:
        return {"stage": self.stage, "kept": self.kept, "dropped": self.dropped, "reasons": dict(self.reasons)}


def read_manifest(path) -> Manifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(Utterance.from_json(json.loads(line)))
            except (json.JSONDecodeError, ManifestError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc}") from exc
    try:
        return Manifest(entries)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def write_manifest(m: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in m:
            fh.write(json.dumps(u.to_json(), ensure_ascii=False))
            fh.write("\n")


def load_features(u: Utterance, base_dir=None) -> np.ndarray:
    if u.features is None:
        raise ManifestError(f"{u.id}: no features")
    if isinstance(u.features, str):
        p = Path(u.features)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        return np.load(p).astype(np.float64)
    return u.features


def _select(m: Manifest, stage: str, verdict: Callable[[Utterance], str | None]):
    """Keep entries whose verdict is None; otherwise count the returned reason."""
    kept, reasons = [], Counter()
    for u in m:
        reason = verdict(u)
        if reason is None:
            kept.append(u)
        else:
            reasons[reason] += 1
    report = FilterReport(stage, len(kept), len(m) - len(kept), dict(sorted(reasons.items())))
    return Manifest(kept), report


def filter_duration(m: Manifest, max_seconds: float):
    if not max_seconds > 0:
        raise ValueError("max_seconds must be > 0")
    return _select(m, "duration", lambda u: "too-long" if u.duration > max_seconds else None)


def filter_language(m: Manifest, target: str):
    def verdict(u):
        if u.lang is None:
            return "no-lang"
        return None if u.lang == target else "wrong-lang"

    return _select(m, "lang", verdict)


def filter_char_rate(
    m: Manifest,
    hyps: Mapping[str, str],
    low: float,
    high: float,
    count_whitespace: bool = True,
):
    """Keep entries whose hypothesis character rate lies in the closed band [low, high]."""
    if not low < high:
        raise ValueError("low must be < high")

    def verdict(u):
        if u.id not in hyps:
            return "no-hyp"
        cr = metrics.character_rate(hyps[u.id], u.duration, count_whitespace)
        if cr < low:
            return "cr-low"
        if cr > high:
            return "cr-high"
        return None

    return _select(m, "cr", verdict)


def filter_wer(m: Manifest, hyps: Mapping[str, str], threshold: float):
    if threshold < 0:
        raise ValueError("threshold must be >= 0")

    def verdict(u):
        if u.text is None:
            return "no-ref"
        if u.id not in hyps:
            return "no-hyp"
        return None if metrics.wer(u.text, hyps[u.id]) <= threshold else "wer-high"

    return _select(m, "wer", verdict)


def _is_boundary(token: str, boundary_chars) -> bool:
    stripped = token.rstrip()
    return bool(stripped) and stripped[-1] in boundary_chars


def segment(
    u: Utterance,
    min_s: float = 1.0,
    max_s: float = 20.0,
    boundary_chars=DEFAULT_BOUNDARY_CHARS,
    fps: float | None = None,
) -> list[Utterance]:
    """Split an utterance into sentence-level children using word timestamps.

    A sentence ends at any word whose last non-space character is a
    boundary mark. Sentences whose span falls outside [min_s, max_s] are
    dropped. Children record ``parent_id`` and ``offset`` (seconds into
    the parent) in ``extra``. Inline features are cropped to frames
    ``[floor(start*fps), ceil(end*fps))``; ``fps`` defaults to T/duration.
    """
    if not u.words:
        raise ManifestError(f"{u.id}: no-timestamps")
    if not min_s < max_s:
        raise ValueError("min_s must be < max_s")

    sentences, cur = [], []
    for w in u.words:
        cur.append(w)
        if _is_boundary(w.word, boundary_chars):
            sentences.append(cur)
            cur = []
    if cur:
        sentences.append(cur)

    feats = u.features if isinstance(u.features, np.ndarray) else None
    if feats is not None and fps is None:
        fps = feats.shape[0] / u.duration

    children = []
    for n, words in enumerate(sentences):
        start, end = words[0].start, words[-1].end
        dur = end - start
        if not min_s <= dur <= max_s:
            continue
        child_feats = u.features if feats is None else None
        if feats is not None:
            lo = int(math.floor(start * fps))
            hi = min(int(math.ceil(end * fps)), feats.shape[0])
            child_feats = feats[lo:hi].copy()
        children.append(
            replace(
                u,
                id=f"{u.id}-seg{n}",
                text=" ".join(w.word for w in words),
                duration=dur,
                words=tuple(WordStamp(w.word, w.start - start, w.end - start) for w in words),
                features=child_feats,
                extra={**u.extra, "parent_id": u.id, "offset": start},
            )
        )
    return children


def segment_manifest(m: Manifest, **kwargs) -> Manifest:
    out = []
    for u in m:
        out.extend(segment(u, **kwargs))
    return Manifest(out)


def read_hyps(path) -> dict[str, str]:
    """Hypothesis files are JSON Lines of ``{"id": ..., "text": ...}``."""
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                hyps[str(rec["id"])] = rec.get("text") or ""
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc}") from exc
    return hyps


def write_hyps(hyps: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, text in hyps.items():
            fh.write(json.dumps({"id": uid, "text": text}, ensure_ascii=False))
            fh.write("\n")
