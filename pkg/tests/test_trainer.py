import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topipl_lab import checkpoints as ck
from topipl_lab.manifest import Manifest
from topipl_lab.model import init_params
from topipl_lab.synthdata import SynthSpec, gen_corpus
from topipl_lab.trainer import (
    AdamState,
    DivergedError,
    LabData,
    PseudoLabelCache,
    TrainConfig,
    TrainError,
    adam_step,
    clip_global_norm,
    cosine_lr,
    decode_examples,
    generate_pls,
    maybe_refresh_cache,
    prepare,
    run_ablation,
    run_prepared,
    score,
    stage_baseline,
    stage_first,
    train_mixed,
    train_supervised,
)

TINY = SynthSpec(split_sizes={"labeled": 24, "unlabeled": 40, "dev": 12, "test": 12})


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(TINY)


@pytest.fixture(scope="module")
def data(corpus):
    return LabData.from_manifests(corpus.labeled, corpus.unlabeled, corpus.dev)


def tiny_cfg(**kw):
    base = dict(n_epochs=3, m_epochs=2, batch_size=8, hidden=16)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config


def test_stage_lrs_halve():
    assert TrainConfig(base_max_lr=4e-3).stage_lrs() == [4e-3, 2e-3, 1e-3]


def test_explicit_stage_lrs_must_not_increase():
    with pytest.raises(ValueError):
        TrainConfig(max_lr=[1e-3, 2e-3, 1e-3])


def test_config_roundtrip_and_unknown_keys():
    cfg = TrainConfig(strategy="ema", p_cache=0.3)
    assert TrainConfig.from_json(cfg.to_json()) == TrainConfig(strategy="ema", p_cache=0.3, max_lr=cfg.stage_lrs())
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        TrainConfig.from_json({"bogus": 1})


@pytest.mark.parametrize("bad", [dict(strategy="nope"), dict(p_cache=1.5), dict(batch_size=0), dict(ema_alpha=2.0)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- schedule and optimiser


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)


@given(st.integers(0, 999), st.integers(1, 1000))
def test_cosine_lr_bounded(step, total):
    lr = cosine_lr(min(step, total), total, 3e-3, 1e-5)
    assert 1e-5 - 1e-15 <= lr <= 3e-3 + 1e-15


def test_cosine_lr_monotone():
    lrs = [cosine_lr(s, 50, 1e-2, 0.0) for s in range(51)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adam_zero_gradient_is_noop():
    p = init_params(1, 3, 4, 5, 0)
    new, state = adam_step(p, p.zeros_like(), AdamState.zeros(p), 1e-2)
    assert new.equals(p) and state.t == 1


def test_adam_first_step_is_signed_lr():
    p = init_params(1, 3, 4, 5, 0)
    g = init_params(1, 3, 4, 5, 1)
    new, _ = adam_step(p, g, AdamState.zeros(p), 1e-3)
    for a, b, gt in zip(new.tensors(), p.tensors(), g.tensors()):
        nz = gt != 0
        np.testing.assert_allclose((a - b)[nz], -1e-3 * np.sign(gt[nz]), rtol=1e-4)


def test_adam_rejects_non_finite():
    p = init_params(1, 3, 4, 5, 0)
    g = p.zeros_like()
    g.W2[0, 0] = np.nan
    with pytest.raises(DivergedError, match="diverged: non-finite gradient in W2"):
        adam_step(p, g, AdamState.zeros(p), 1e-3)


def test_clip_global_norm():
    g = init_params(1, 3, 4, 5, 0)
    clipped, was = clip_global_norm(g, 0.5)
    norm = math.sqrt(sum(float(np.sum(t * t)) for t in clipped.tensors()))
    assert was and norm == pytest.approx(0.5)
    same, was = clip_global_norm(g, 1e9)
    assert not was and same is g


# ---------------------------------------------------------------- cache


def test_refresh_probability_extremes(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 0)
    cache = PseudoLabelCache()
    rng = np.random.default_rng(0)
    assert maybe_refresh_cache(cache, p, data.unlabeled, data.tok, 0.0, rng)[1] is False
    fresh, refreshed = maybe_refresh_cache(cache, p, data.unlabeled, data.tok, 1.0, rng, "teacher", 7)
    assert refreshed and set(fresh.entries) == {e.id for e in data.unlabeled}
    assert {(e.generator, e.epoch) for e in fresh.entries.values()} == {("teacher", 7)}


def test_refresh_frequency(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 0)
    rng = np.random.default_rng(123)
    cache, hits = PseudoLabelCache(), 0
    for _ in range(10_000):
        cache, r = maybe_refresh_cache(cache, p, data.unlabeled[:1], data.tok, 0.2, rng)
        hits += r
    assert 0.19 <= hits / 10_000 <= 0.21


def test_per_utterance_refresh_touches_subset(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 0)
    old = generate_pls(p, data.unlabeled, data.tok, "student", 0)
    new, refreshed = maybe_refresh_cache(
        old, p, data.unlabeled, data.tok, 0.5, np.random.default_rng(1), "teacher", 3, "per_utterance"
    )
    gens = [e.generator for e in new.entries.values()]
    assert refreshed and 0 < gens.count("teacher") < len(gens)


def test_generate_pls_covers_ids_deterministically(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 4)
    a = generate_pls(p, data.unlabeled, data.tok)
    b = generate_pls(p, data.unlabeled, data.tok)
    assert list(a.entries) == [e.id for e in data.unlabeled]
    assert a == b


# ---------------------------------------------------------------- training


def test_empty_labeled_split():
    empty = LabData.__new__(LabData)
    empty.labeled, empty.dev = [], []
    p = init_params(1, 2, 3, 4, 0)
    with pytest.raises(TrainError, match="empty-split"):
        train_supervised(p, empty, tiny_cfg(), 1, 1e-3)


def test_empty_cache(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 0)
    with pytest.raises(TrainError, match="empty-cache"):
        train_mixed(p, data, PseudoLabelCache(), tiny_cfg(), 1, 1e-3)


def test_zero_lr_leaves_params(data):
    cfg = tiny_cfg(min_lr=0.0, base_max_lr=0.0)
    p = init_params(2, 16, 16, data.tok.vocab_size, 0)
    out, _ = train_supervised(p, data, cfg, 2, 0.0)
    assert out.equals(p)


def test_overfit_five_utterances(corpus):
    five = Manifest(corpus.labeled.entries[:5])
    d = LabData.from_manifests(five, Manifest(), None)
    cfg = tiny_cfg(dropout_p=0.0, augment=False, batch_size=5, base_max_lr=1e-2, hidden=32)
    p = init_params(2, 16, 32, d.tok.vocab_size, 0)
    _, runlog = train_supervised(p, d, cfg, 500, 1e-2)
    assert runlog.records[-1].train_loss < 0.1


def test_noise_free_pseudo_labels_exact():
    spec = SynthSpec(noise_sigma=0.0, split_sizes={"labeled": 60, "unlabeled": 30, "dev": 10, "test": 10})
    c = gen_corpus(spec)
    d = LabData.from_manifests(c.labeled, c.unlabeled, c.dev)
    base = stage_baseline(tiny_cfg(n_epochs=40, dropout_p=0.0, augment=False, base_max_lr=1e-2, hidden=32), d)
    cache = generate_pls(base.student, d.unlabeled, d.tok)
    assert cache.texts() == c.unlabeled_refs


def test_log_stage_labels_and_epochs(data):
    res = run_prepared(tiny_cfg(strategy="topipl"), data)
    assert res.log.stages() == ["baseline"] * 3 + ["first_stage"] * 2 + ["teacher_stage"] * 2
    assert [r.epoch for r in res.log.records] == list(range(1, 8))
    assert res.teacher is not None and res.teacher.stage == "teacher_stage"
    assert all(r.teacher_dev_wer is not None for r in res.log.records[-2:])


def test_baseline_has_no_teacher(data, tmp_path):
    res = run_prepared(tiny_cfg(strategy="baseline"), data, tmp_path)
    assert res.teacher is None and not (tmp_path / "final-teacher.ckpt").exists()
    assert (tmp_path / "final-student.ckpt").exists()
    lines = (tmp_path / "runlog.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["stage"] == "baseline"


def test_rerun_is_deterministic(data, tmp_path):
    a = run_prepared(tiny_cfg(strategy="ema"), data, tmp_path / "a")
    b = run_prepared(tiny_cfg(strategy="ema"), data, tmp_path / "b")
    assert (tmp_path / "a" / "runlog.jsonl").read_bytes() == (tmp_path / "b" / "runlog.jsonl").read_bytes()
    assert a.student.params.equals(b.student.params)


def test_pl_once_equals_fs_without_refresh(data):
    cfg = tiny_cfg(p_cache=0.0)
    base = stage_baseline(cfg, data)
    once = stage_first(cfg, data, base, 0.0)
    fs = stage_first(cfg, data, base)
    assert once.student.equals(fs.student)
    assert not any(r.cache_refreshed for r in fs.log.records)


def test_teacher_is_registry_mean(data, tmp_path):
    seen = []

    def observer(epoch, student, teacher, registry):
        mean = [np.mean([r.params.tensors()[i] for r in registry.records], axis=0) for i in range(4)]
        seen.append(max(float(np.abs(a - b).max()) for a, b in zip(teacher.tensors(), mean)))

    run_prepared(tiny_cfg(strategy="topipl", m_epochs=4, top_n=2), data, tmp_path, observer)
    assert len(seen) == 4 and max(seen) < 1e-12
    assert len(list((tmp_path / "topn").glob("*.ckpt"))) == 2


def test_checkpoint_meta_carries_symbols(data, tmp_path):
    run_prepared(tiny_cfg(strategy="baseline"), data, tmp_path)
    rec = ck.load(tmp_path / "final-student.ckpt")
    assert rec.meta["symbols"] == "".join(data.tok.symbols)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_score_perfect_hyps(seed):
    c = gen_corpus(SynthSpec(seed=seed % 1000, split_sizes={"labeled": 3, "unlabeled": 1, "dev": 1, "test": 1}))
    d = LabData.from_manifests(c.labeled, c.unlabeled, c.dev)
    assert score(d.labeled, {e.id: e.text for e in d.labeled}) == (0.0, 0.0)


def test_decode_examples_ids(data):
    p = init_params(2, 16, 8, data.tok.vocab_size, 0)
    assert list(decode_examples(p, data.dev, data.tok)) == [e.id for e in data.dev]
    assert prepare(Manifest(), data.tok, True) == []


def test_ablation_matches_standalone_runs(data):
    cfg = tiny_cfg()
    shared = run_ablation(cfg, data)
    assert list(shared) == ["baseline", "pl_once", "fs", "ema", "topipl"]
    for name, res in shared.items():
        alone = run_prepared(tiny_cfg(strategy=name), data)
        assert res.log.to_jsonl() == alone.log.to_jsonl()
        assert res.student.params.equals(alone.student.params)
        assert (res.teacher is None) == (alone.teacher is None)


def test_ablation_rejects_unknown_strategy(data):
    with pytest.raises(ValueError, match="unknown strategies"):
        run_ablation(tiny_cfg(), data, ["fs", "mystery"])
