"""Edit distance, WER/CER and character rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence


@dataclass(frozen=True)
class ErrorRateReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(self.ref_len, 1)

    def __add__(self, other: "ErrorRateReport") -> "ErrorRateReport":
        return ErrorRateReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )

    def as_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_len": self.ref_len,
            "errors": self.errors,
            "rate": self.rate,
        }


EMPTY_REPORT = ErrorRateReport(0, 0, 0, 0)


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorRateReport:
    """Levenshtein alignment of ``hyp`` against ``ref`` with unit costs.

    The S/I/D split comes from a backtrace that prefers, in order:
    match, substitution, deletion, insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev = d[i], d[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if r == hyp[j - 1] else 1)
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        cur = d[i][j]
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if same and cur == d[i - 1][j - 1]:
                i, j = i - 1, j - 1
                continue
            if not same and cur == d[i - 1][j - 1] + 1:
                subs += 1
                i, j = i - 1, j - 1
                continue
        if i > 0 and cur == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorRateReport(subs, ins, dels, n)


def word_errors(ref: str, hyp: str) -> ErrorRateReport:
    return edit_distance(ref.split(), hyp.split())


def char_errors(ref: str, hyp: str) -> ErrorRateReport:
    return edit_distance(list(ref), list(hyp))


def wer(ref: str, hyp: str) -> float:
    return word_errors(ref, hyp).rate


def cer(ref: str, hyp: str) -> float:
    return char_errors(ref, hyp).rate


def count_chars(text: str, count_whitespace: bool = True) -> int:
    if count_whitespace:
        return len(text)
    return sum(1 for c in text if not c.isspace())


def character_rate(text: str, duration: float, count_whitespace: bool = True) -> float:
    """Characters per second of audio."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration!r}")
    return count_chars(text, count_whitespace) / duration


def _pooled(refs, hyps: Mapping[str, str], per_pair) -> ErrorRateReport:
    pairs = [(u.id, u.text) for u in refs] if not isinstance(refs, Mapping) else list(refs.items())
    missing = [uid for uid, _ in pairs if uid not in hyps]
    if missing:
        raise KeyError(f"missing hypotheses for ids: {', '.join(missing)}")
    total = EMPTY_REPORT
    for uid, text in pairs:
        total = total + per_pair(text or "", hyps[uid])
    return total


def corpus_word_errors(refs, hyps: Mapping[str, str]) -> ErrorRateReport:
    """Pooled word errors; ``refs`` is a manifest (or iterable of utterances) or an id->text mapping."""
    return _pooled(refs, hyps, word_errors)


def corpus_char_errors(refs, hyps: Mapping[str, str]) -> ErrorRateReport:
    return _pooled(refs, hyps, char_errors)


def corpus_wer(refs, hyps: Mapping[str, str]) -> float:
    return corpus_word_errors(refs, hyps).rate


def corpus_cer(refs, hyps: Mapping[str, str]) -> float:
    return corpus_char_errors(refs, hyps).rate
