"""Optimisation, the pseudo-label cache and the five training strategies.

Strategies are assembled from three stage functions so that runs sharing
a prefix (e.g. EMA and TopIPL both start from the first-stage model) can
reuse it. Every stage draws its randomness from streams keyed by
(seed, stage, purpose), which makes a stage's output depend only on its
inputs and the config, never on what ran before it in the same process.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from topipl_lab import checkpoints as ckpt
from topipl_lab import ctc
from topipl_lab.manifest import Manifest, load_features
from topipl_lab.metrics import EMPTY_REPORT, char_errors, word_errors
from topipl_lab.model import (
    AugmentConfig,
    ModelParams,
    Tokenizer,
    augment,
    backward,
    forward_windowed,
    init_params,
    window,
)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "pl_once", "fs", "ema", "topipl")
STAGE_CODES = {"init": 0, "baseline": 1, "first_stage": 2, "teacher_stage": 3}
PURPOSE_CODES = {"shuffle": 1, "augment": 2, "dropout": 3, "cache": 4}


class DivergedError(RuntimeError):
    pass


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "topipl"
    n_epochs: int = 50
    m_epochs: int = 25
    batch_size: int = 16
    base_max_lr: float = 3e-3
    max_lr: list | None = None
    min_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_p: float = 0.1
    p_cache: float = 0.2
    refresh_mode: str = "whole"
    top_n: int = 3
    ema_alpha: float = 0.99
    clip_norm: float = 5.0
    context: int = 2
    hidden: int = 64
    n_freq_masks: int = 1
    freq_mask_width: int = 2
    n_time_masks: int = 1
    time_mask_width: int = 10
    augment: bool = True
    symbols: str | None = None
    plateau_window: int = 10
    plateau_delta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.p_cache <= 1.0:
            raise ValueError("p_cache must be in [0, 1]")
        if self.n_epochs < 1 or self.m_epochs < 1:
            raise ValueError("epoch budgets must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.refresh_mode not in ("whole", "per_utterance"):
            raise ValueError("refresh_mode must be 'whole' or 'per_utterance'")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in [0, 1]")
        lrs = self.stage_lrs()
        if any(b > a for a, b in zip(lrs, lrs[1:])):
            raise ValueError("per-stage max_lr must be non-increasing")
        if self.min_lr > lrs[-1]:
            raise ValueError("min_lr must not exceed any stage max_lr")

    def stage_lrs(self) -> list[float]:
        """Max learning rate per stage; each stage halves the previous one unless given explicitly."""
        if self.max_lr is not None:
            lrs = [float(x) for x in self.max_lr]
            if len(lrs) != 3:
                raise ValueError("max_lr needs one value per stage (3)")
            return lrs
        return [self.base_max_lr / 2**k for k in range(3)]

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            self.n_freq_masks, self.freq_mask_width, self.n_time_masks, self.time_mask_width, self.augment
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["max_lr"] = self.stage_lrs()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimiser


def cosine_lr(step: int, total_steps: int, max_lr: float, min_lr: float) -> float:
    if total_steps <= 0:
        return max_lr
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(x) for x in params.tensors()], [np.zeros_like(x) for x in params.tensors()])


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    for name, g in grads.named_tensors():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"diverged: non-finite gradient in {name}")
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), grads.tensors(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), AdamState(new_m, new_v, t)


def clip_global_norm(grads: ModelParams, max_norm: float) -> tuple[ModelParams, bool]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.tensors()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, False
    scale = max_norm / norm
    return grads.with_tensors([g * scale for g in grads.tensors()]), True


# ---------------------------------------------------------------- data


@dataclass
class Example:
    id: str
    features: np.ndarray
    labels: list | None = None
    text: str | None = None
    _windowed: np.ndarray | None = field(default=None, repr=False)

    def windowed(self, context: int) -> np.ndarray:
        if self._windowed is None:
            self._windowed = window(self.features, context)
        return self._windowed


def make_tokenizer(labeled: Manifest, symbols: str | None = None) -> Tokenizer:
    if symbols is not None:
        return Tokenizer.from_string(symbols)
    chars = set()
    for u in labeled:
        chars.update(Tokenizer.normalize(u.text or ""))
    return Tokenizer(tuple(sorted(chars)))


def prepare(m: Manifest, tok: Tokenizer | None, with_text: bool, base_dir=None) -> list[Example]:
    out = []
    for u in m:
        feats = np.asarray(load_features(u, base_dir), dtype=np.float64)
        if with_text:
            if u.text is None:
                raise TrainError(f"{u.id}: labeled entry without text")
            text = Tokenizer.normalize(u.text)
            out.append(Example(u.id, feats, tok.encode(text) if tok else None, text))
        else:
            out.append(Example(u.id, feats))
    return out


def decode_examples(params: ModelParams, examples: list[Example], tok: Tokenizer, chunk: int = 256) -> dict[str, str]:
    """Greedy CTC transcripts in eval mode."""
    hyps = {}
    for i in range(0, len(examples), chunk):
        part = examples[i : i + chunk]
        stacked = np.concatenate([e.windowed(params.context) for e in part], axis=0)
        logits, _ = forward_windowed(params, stacked)
        pos = 0
        for e in part:
            T = e.features.shape[0]
            hyps[e.id] = tok.decode_ids(ctc.greedy_decode(logits[pos : pos + T], tok.blank_index))
            pos += T
    return hyps


def score(examples: list[Example], hyps: dict[str, str]) -> tuple[float, float]:
    """Pooled (WER, CER)."""
    w = c = EMPTY_REPORT
    for e in examples:
        w = w + word_errors(e.text, hyps[e.id])
        c = c + char_errors(e.text, hyps[e.id])
    return w.rate, c.rate


# ---------------------------------------------------------------- cache


@dataclass(frozen=True)
class CacheEntry:
    text: str
    generator: str
    epoch: int


@dataclass
class PseudoLabelCache:
    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def texts(self) -> dict[str, str]:
        return {k: e.text for k, e in self.entries.items()}

    def empty_count(self) -> int:
        return sum(1 for e in self.entries.values() if not e.text)


def generate_pls(
    params: ModelParams,
    unlabeled: list[Example],
    tok: Tokenizer,
    generator: str = "student",
    epoch: int = 0,
) -> PseudoLabelCache:
    hyps = decode_examples(params, unlabeled, tok)
    return PseudoLabelCache({e.id: CacheEntry(hyps[e.id], generator, epoch) for e in unlabeled})


def maybe_refresh_cache(
    cache: PseudoLabelCache,
    params: ModelParams,
    unlabeled: list[Example],
    tok: Tokenizer,
    p_cache: float,
    rng: np.random.Generator,
    generator: str = "student",
    epoch: int = 0,
    mode: str = "whole",
) -> tuple[PseudoLabelCache, bool]:
    """Regenerate the cache with probability ``p_cache``.

    ``whole`` mode draws one uniform per call and relabels everything;
    ``per_utterance`` mode draws one uniform per utterance.
    """
    if mode == "whole":
        if rng.random() < p_cache:
            return generate_pls(params, unlabeled, tok, generator, epoch), True
        return cache, False
    draws = rng.random(len(unlabeled))
    chosen = [e for e, u in zip(unlabeled, draws) if u < p_cache]
    if not chosen:
        return cache, False
    fresh = generate_pls(params, chosen, tok, generator, epoch)
    entries = dict(cache.entries)
    entries.update(fresh.entries)
    return PseudoLabelCache(entries), True


# ---------------------------------------------------------------- run log


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    dev_wer: float
    dev_cer: float
    lr: float
    cache_refreshed: bool = False
    teacher_dev_wer: float | None = None
    skipped_empty: int = 0
    clipped_steps: int = 0
    plateau: bool = False


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def extend(self, other: "RunLog") -> None:
        for r in other.records:
            self.append(r)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def stages(self) -> list[str]:
        return [r.stage for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _plateau(history: list[float], window_: int, delta: float) -> bool:
    if len(history) <= window_:
        return False
    before = min(history[:-window_])
    recent = min(history[-window_:])
    return before - recent < delta


# ---------------------------------------------------------------- training core


def _rngs(seed: int, stage: str) -> dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng([seed, STAGE_CODES[stage], code])
        for name, code in PURPOSE_CODES.items()
    }


@dataclass
class Pair:
    features: np.ndarray
    labels: list


def _train_epochs(
    params: ModelParams,
    pool_fn: Callable[[], tuple[list[Pair], int]],
    cfg: TrainConfig,
    epochs: int,
    max_lr: float,
    rngs: dict,
    on_epoch_end: Callable[[int, ModelParams, float, float, int, int], None],
) -> ModelParams:
    """Shared epoch loop: shuffled minibatches, augmentation, dropout, CTC, clipped Adam, cosine lr."""
    if epochs == 0:
        return params
    state = AdamState.zeros(params)
    aug_cfg = cfg.augment_config()
    blank = params.vocab_size - 1
    for e in range(epochs):
        pool, skipped = pool_fn()
        if not pool:
            raise TrainError("empty-split")
        order = rngs["shuffle"].permutation(len(pool))
        n_batches = math.ceil(len(pool) / cfg.batch_size)
        loss_sum, clipped, lr = 0.0, 0, max_lr
        for b in range(n_batches):
            batch = [pool[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            xs = [window(augment(p.features, aug_cfg, rngs["augment"]), params.context) for p in batch]
            logits, trace = forward_windowed(
                params, np.concatenate(xs, axis=0), cfg.dropout_p, True, rngs["dropout"]
            )
            dlogits = np.empty_like(logits)
            pos = 0
            for x, p in zip(xs, batch):
                T = x.shape[0]
                res = ctc.ctc_loss_grad(logits[pos : pos + T], p.labels, blank)
                if not math.isfinite(res.loss):
                    raise DivergedError("diverged: non-finite CTC loss")
                loss_sum += res.loss
                dlogits[pos : pos + T] = res.dlogits
                pos += T
            grads = backward(params, trace, dlogits / len(batch))
            grads, was_clipped = clip_global_norm(grads, cfg.clip_norm)
            clipped += was_clipped
            lr = cosine_lr(e * n_batches + b, epochs * n_batches, max_lr, cfg.min_lr)
            params, state = adam_step(params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        if clipped:
            log.debug("epoch %d: gradient clipped on %d steps", e, clipped)
        on_epoch_end(e, params, loss_sum / len(pool), lr, skipped, clipped)
    return params


def _labeled_pairs(labeled: list[Example]) -> list[Pair]:
    return [Pair(e.features, e.labels) for e in labeled]


def _cache_pairs(cache: PseudoLabelCache, unlabeled: list[Example], tok: Tokenizer) -> tuple[list[Pair], int]:
    pairs, skipped = [], 0
    for e in unlabeled:
        text = cache.entries[e.id].text
        labels = tok.encode(text) if text else []
        if not labels or ctc.min_frames(labels) > e.features.shape[0]:
            skipped += 1
            continue
        pairs.append(Pair(e.features, labels))
    return pairs, skipped


@dataclass
class LabData:
    """Prepared splits. The unlabeled split never carries transcripts."""

    tok: Tokenizer
    labeled: list
    unlabeled: list
    dev: list

    @classmethod
    def from_manifests(cls, labeled: Manifest, unlabeled: Manifest, dev: Manifest, symbols=None, base_dir=None):
        if len(labeled) == 0:
            raise TrainError("empty-split: labeled")
        tok = make_tokenizer(labeled, symbols)
        return cls(
            tok,
            prepare(labeled, tok, True, base_dir),
            prepare(unlabeled, None, False, base_dir),
            prepare(dev, None, True, base_dir) if dev is not None else [],
        )


def _dev_scores(params, data: LabData) -> tuple[float, float]:
    if not data.dev:
        return 0.0, 0.0
    return score(data.dev, decode_examples(params, data.dev, data.tok))


def train_supervised(
    params: ModelParams,
    data: LabData,
    cfg: TrainConfig,
    epochs: int,
    stage_lr: float,
    stage: str = "baseline",
    start_epoch: int = 0,
) -> tuple[ModelParams, RunLog]:
    """Supervised CTC training on the labeled split only."""
    if not data.labeled:
        raise TrainError("empty-split")
    runlog, history = RunLog(), []
    pairs = _labeled_pairs(data.labeled)

    def end(e, p, loss, lr, skipped, clipped):
        w, c = _dev_scores(p, data)
        history.append(w)
        runlog.append(
            EpochRecord(
                start_epoch + e + 1, stage, loss, w, c, lr,
                skipped_empty=skipped, clipped_steps=clipped,
                plateau=_plateau(history, cfg.plateau_window, cfg.plateau_delta),
            )
        )

    params = _train_epochs(params, lambda: (pairs, 0), cfg, epochs, stage_lr, _rngs(cfg.seed, stage), end)
    return params, runlog


RefreshHook = Callable[[int, ModelParams, float], tuple[ModelParams, str, float | None]]


def student_refresh(epoch: int, student: ModelParams, dev_wer: float):
    return student, "student", None


def train_mixed(
    params: ModelParams,
    data: LabData,
    cache: PseudoLabelCache,
    cfg: TrainConfig,
    epochs: int,
    stage_lr: float,
    refresh_with: RefreshHook = student_refresh,
    p_cache: float | None = None,
    stage: str = "first_stage",
    start_epoch: int = 0,
) -> tuple[ModelParams, PseudoLabelCache, RunLog]:
    """Train on labeled + cached pseudo-labeled pairs, refreshing the cache at epoch ends.

    ``refresh_with(epoch, student, dev_wer)`` is called after every epoch
    and returns the model that generates the refresh, its tag, and
    optionally that model's dev WER for the log.
    """
    if len(cache) == 0:
        raise TrainError("empty-cache")
    p_cache = cfg.p_cache if p_cache is None else p_cache
    rngs = _rngs(cfg.seed, stage)
    runlog, history = RunLog(), []
    labeled_pairs = _labeled_pairs(data.labeled)
    state = {"cache": cache}

    def pool():
        pl_pairs, skipped = _cache_pairs(state["cache"], data.unlabeled, data.tok)
        return labeled_pairs + pl_pairs, skipped

    def end(e, p, loss, lr, skipped, clipped):
        epoch = start_epoch + e + 1
        w, c = _dev_scores(p, data)
        history.append(w)
        gen, tag, gen_wer = refresh_with(epoch, p, w)
        state["cache"], refreshed = maybe_refresh_cache(
            state["cache"], gen, data.unlabeled, data.tok, p_cache, rngs["cache"], tag, epoch, cfg.refresh_mode
        )
        runlog.append(
            EpochRecord(
                epoch, stage, loss, w, c, lr, refreshed, gen_wer, skipped, clipped,
                _plateau(history, cfg.plateau_window, cfg.plateau_delta),
            )
        )

    params = _train_epochs(params, pool, cfg, epochs, stage_lr, rngs, end)
    return params, state["cache"], runlog


# ---------------------------------------------------------------- strategies


@dataclass
class StageResult:
    student: ModelParams
    log: RunLog
    cache: PseudoLabelCache | None = None
    teacher: ModelParams | None = None
    teacher_dev_wer: float | None = None


def stage_baseline(cfg: TrainConfig, data: LabData) -> StageResult:
    feat_dim = data.labeled[0].features.shape[1]
    params = init_params(cfg.context, feat_dim, cfg.hidden, data.tok.vocab_size, cfg.seed)
    params, runlog = train_supervised(params, data, cfg, cfg.n_epochs, cfg.stage_lrs()[0])
    return StageResult(params, runlog)


def stage_first(cfg: TrainConfig, data: LabData, base: StageResult, p_cache: float | None = None) -> StageResult:
    """Label the unlabeled pool once with the converged student, then iterate with student refreshes."""
    start = base.log.last_epoch
    cache = generate_pls(base.student, data.unlabeled, data.tok, "student", start)
    params, cache, runlog = train_mixed(
        base.student, data, cache, cfg, cfg.m_epochs, cfg.stage_lrs()[1],
        student_refresh, p_cache, "first_stage", start,
    )
    return StageResult(params, runlog, cache)


Observer = Callable[[int, ModelParams, ModelParams, "ckpt.TopNRegistry | None"], None]


def stage_teacher(
    cfg: TrainConfig,
    data: LabData,
    first: StageResult,
    kind: str,
    out_dir=None,
    observer: Observer | None = None,
) -> StageResult:
    """Student-teacher stage. ``kind`` is ``topipl`` (top-N average) or ``ema``."""
    start = first.log.last_epoch
    teacher = {"params": first.student.copy(), "wer": None}
    registry = ckpt.TopNRegistry(cfg.top_n)
    reg_dir = None
    if out_dir is not None and kind == "topipl":
        reg_dir = Path(out_dir) / "topn"
        reg_dir.mkdir(parents=True, exist_ok=True)

    def refresh(epoch, student, dev_wer):
        if kind == "topipl":
            rec = ckpt.CheckpointRecord(student.copy(), epoch, dev_wer, "teacher_stage")
            if registry.offer(rec) and reg_dir is not None:
                ckpt.save(rec, reg_dir)
            teacher["params"] = ckpt.average(registry.records)
        else:
            teacher["params"] = ckpt.ema_update(teacher["params"], student, cfg.ema_alpha)
        teacher["wer"] = _dev_scores(teacher["params"], data)[0]
        if observer is not None:
            observer(epoch, student, teacher["params"], registry if kind == "topipl" else None)
        return teacher["params"], "teacher", teacher["wer"]

    params, cache, runlog = train_mixed(
        first.student, data, first.cache, cfg, cfg.m_epochs, cfg.stage_lrs()[2],
        refresh, None, "teacher_stage", start,
    )
    return StageResult(params, runlog, cache, teacher["params"], teacher["wer"])


@dataclass
class StrategyResult:
    student: ckpt.CheckpointRecord
    teacher: ckpt.CheckpointRecord | None
    log: RunLog
    cache: PseudoLabelCache | None
    tokenizer: Tokenizer


def _record(params, runlog: RunLog, stage: str, tok: Tokenizer, strategy: str, wer=None) -> ckpt.CheckpointRecord:
    last = runlog.records[-1]
    return ckpt.CheckpointRecord(
        params, last.epoch, last.dev_wer if wer is None else wer, stage,
        meta={"symbols": "".join(tok.symbols), "strategy": strategy},
    )


def run_strategy(
    cfg: TrainConfig,
    labeled: Manifest,
    unlabeled: Manifest,
    dev: Manifest,
    out_dir=None,
    observer: Observer | None = None,
    base_dir=None,
) -> StrategyResult:
    """Run one strategy end to end; writes checkpoints and the run log when ``out_dir`` is set."""
    data = LabData.from_manifests(labeled, unlabeled, dev, cfg.symbols, base_dir)
    return run_prepared(cfg, data, out_dir, observer)


def run_prepared(cfg: TrainConfig, data: LabData, out_dir=None, observer=None) -> StrategyResult:
    s = cfg.strategy
    stages = [stage_baseline(cfg, data)]
    if s in ("pl_once", "fs", "ema", "topipl"):
        stages.append(stage_first(cfg, data, stages[0], 0.0 if s == "pl_once" else None))
        if s in ("ema", "topipl"):
            stages.append(stage_teacher(cfg, data, stages[1], s, out_dir, observer))
    return _finish(cfg, data, stages, out_dir)


def _finish(cfg: TrainConfig, data: LabData, stages: list[StageResult], out_dir=None) -> StrategyResult:
    """Concatenate stage logs, build final records and write them under ``out_dir``."""
    runlog = RunLog()
    for st in stages:
        runlog.extend(st.log)
    final = stages[-1]
    last_stage = runlog.records[-1].stage
    student_rec = _record(final.student, runlog, last_stage, data.tok, cfg.strategy)
    teacher_rec = None
    if final.teacher is not None:
        teacher_rec = _record(final.teacher, runlog, last_stage, data.tok, cfg.strategy, final.teacher_dev_wer)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(student_rec, out / "final-student.ckpt")
        if teacher_rec is not None:
            ckpt.save(teacher_rec, out / "final-teacher.ckpt")
        runlog.write(out / "runlog.jsonl")
    return StrategyResult(student_rec, teacher_rec, runlog, final.cache, data.tok)


def run_ablation(
    cfg: TrainConfig,
    data: LabData,
    strategies=STRATEGIES,
    out_dir=None,
    observer: Observer | None = None,
) -> dict[str, StrategyResult]:
    """Run several strategies, training each shared stage prefix once.

    Stage RNG streams depend only on (seed, stage), so every result equals
    what :func:`run_prepared` would produce for that strategy alone.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies: {sorted(unknown)}")
    out = {}
    sub = (lambda name: Path(out_dir) / name) if out_dir is not None else (lambda name: None)
    base = stage_baseline(replace(cfg, strategy="baseline"), data)
    if "baseline" in strategies:
        out["baseline"] = _finish(replace(cfg, strategy="baseline"), data, [base], sub("baseline"))
    if "pl_once" in strategies:
        c = replace(cfg, strategy="pl_once")
        out["pl_once"] = _finish(c, data, [base, stage_first(c, data, base, 0.0)], sub("pl_once"))
    if {"fs", "ema", "topipl"} & set(strategies):
        fs = stage_first(replace(cfg, strategy="fs"), data, base)
        if "fs" in strategies:
            out["fs"] = _finish(replace(cfg, strategy="fs"), data, [base, fs], sub("fs"))
        for kind in ("ema", "topipl"):
            if kind in strategies:
                c = replace(cfg, strategy=kind)
                d = sub(kind)
                third = stage_teacher(c, data, fs, kind, d, observer if kind == "topipl" else None)
                out[kind] = _finish(c, data, [base, fs, third], d)
    return out
