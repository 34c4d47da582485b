"""Losses, analytic gradients vs finite differences, the optimizer, the stage
loop, and checkpoint files."""

import math

import numpy as np
import pytest
from mpmath import mp, mpf, workdps

from lsgg.datastream import StageDataset
from lsgg.prompt_pool import make_exemplar
from lsgg.rng import SeededRng
from lsgg.scorer import build_vocab, default_vocab
from lsgg.trainer import (AdamW, CheckpointFormatError, TrainConfig, _Item,
                          batch_loss_and_grads, grad_step, load_checkpoint,
                          loss_key_alignment, loss_predicate_ce, loss_total,
                          predict_ranked, save_checkpoint, stage_quota,
                          token_norm_penalty, train_stage)

from conftest import TinyWorld, finite_diff, grad_rel_err


# -- loss terms ---------------------------------------------------------------


def test_key_alignment_parallel_and_antiparallel():
    f = np.array([1.0, 2.0, -1.0])
    assert loss_key_alignment(f, [3.0 * f]) == pytest.approx(0.0, abs=1e-15)
    assert loss_key_alignment(f, [-f]) == pytest.approx(2.0, abs=1e-12)
    assert loss_key_alignment(f, [f, -f]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss_key_alignment(f, [])


def test_key_alignment_matches_sum_of_cosines():
    rng = SeededRng(1)
    for _ in range(20):
        f = rng.normal(6)
        keys = [rng.normal(6) for _ in range(rng.randint(4) + 1)]
        expect = sum(
            1.0 - float(f @ k) / (np.linalg.norm(f) * np.linalg.norm(k))
            for k in keys
        )
        assert loss_key_alignment(f, keys) == pytest.approx(expect, rel=1e-12)


def test_predicate_ce_point_mass_is_zero():
    vocab = default_vocab(3)
    dist = np.zeros((1, 4))
    dist[0, vocab.tokens[1][0]] = 1.0
    assert loss_predicate_ce(dist, 1, vocab) == pytest.approx(0.0, abs=1e-15)


def test_predicate_ce_uniform_is_log_vocab_size():
    # uniform over V tokens -> CE = log V per non-padding slot
    vocab = build_vocab({0: "a b", 1: "c"})
    v = vocab.n_word_tokens
    uniform = np.full((2, v), 1.0 / v)
    assert loss_predicate_ce(uniform, 0, vocab) == pytest.approx(2.0 * math.log(v), rel=1e-12)
    assert loss_predicate_ce(uniform, 1, vocab) == pytest.approx(math.log(v), rel=1e-12)


def test_predicate_ce_matches_extended_precision():
    vocab = build_vocab({0: "p q r", 1: "s"})
    rng = SeededRng(2)
    raw = rng.random_block(3 * vocab.n_word_tokens).reshape(3, -1) + 0.01
    dist = raw / raw.sum(axis=1, keepdims=True)
    got = loss_predicate_ce(dist, 0, vocab)
    with workdps(60):
        expect = -sum(mp.log(mpf(dist[j, t])) for j, t in enumerate(vocab.tokens[0]))
    assert got == pytest.approx(float(expect), abs=1e-10)


def test_predicate_ce_rejects_bad_tokens():
    vocab = default_vocab(2)
    with pytest.raises(ValueError):
        loss_predicate_ce(np.full((1, 3), 1 / 3), 7, vocab)


def test_loss_total_weighting():
    config = TrainConfig()  # alpha 0.2, lam 0.5
    assert loss_total(0.0, 0.0, 3.25, config) == pytest.approx(3.25, abs=1e-15)
    assert loss_total(1.0, 1.0, 1.0, config) == pytest.approx(1.7, abs=1e-12)
    off = TrainConfig(alpha=0.0, lam=0.0)
    assert loss_total(9.0, 9.0, 2.0, off) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError):
        loss_total(float("nan"), 0.0, 0.0, config)


def test_token_norm_penalty_value_and_gradient():
    block = np.array([[1.0, 0.0], [0.0, 2.0]])
    val, grad = token_norm_penalty(block)
    assert val == pytest.approx((0.0 + 9.0) / 2.0, abs=1e-12)
    work = block.copy()

    def fn():
        return token_norm_penalty(work)[0]

    numeric = finite_diff(fn, work)
    assert grad_rel_err(grad, numeric) < 1e-6


def test_config_validation():
    TrainConfig().validate()
    for bad in (TrainConfig(alpha=-0.1), TrainConfig(rho=1.0), TrainConfig(lr=-1e-3),
                TrainConfig(epochs=0), TrainConfig(l1_mode="huber")):
        with pytest.raises(ValueError):
            bad.validate()
    assert TrainConfig(naive=True, k_retrieve=5).effective_k() == 1
    assert TrainConfig(naive=True, rho=0.5).effective_rho() == 0.0


# -- batched loss and analytic gradients ----------------------------------------


def fd_world(train_scorer=False, depth=1, l1_mode="none", n_pred=10):
    # d_tok = 8, vocabulary of 10 predicates, K = 2
    config = TrainConfig(alpha=0.3 if l1_mode != "none" else 0.2, lam=0.5,
                         k_retrieve=2, l1_mode=l1_mode)
    w = TinyWorld(seed=21, d_tok=8, n_t=4, n_p=2, n_e=3, n_pred=n_pred,
                  depth=depth, k_retrieve=2, train_scorer=train_scorer,
                  two_word_labels=True, config=config)
    for e in range(w.pool.n_t):
        w.fill_store(e, 2, start_pred=e)
    batch = [
        _Item(source=w.instance(predicate=1), replay=False),
        _Item(source=w.instance(predicate=3), replay=False),
        _Item(source=make_exemplar(w.instance(predicate=2)), replay=True),
    ]
    return w, batch


def batch_loss_only(w, batch):
    loss, _, _ = batch_loss_and_grads(batch, w.pool, w.tr, w.vocab, w.config)
    return loss


FD_CASES = [
    ("frozen-d1", dict(train_scorer=False, depth=1)),
    ("frozen-d0", dict(train_scorer=False, depth=0)),
    ("finetune-d1", dict(train_scorer=True, depth=1)),
    ("l1-token-norm", dict(train_scorer=False, depth=1, l1_mode="token_norm")),
]


@pytest.mark.parametrize("label,kw", FD_CASES, ids=[c[0] for c in FD_CASES])
def test_batch_gradients_match_finite_differences(label, kw):
    w, batch = fd_world(**kw)
    _, grads, _ = batch_loss_and_grads(batch, w.pool, w.tr, w.vocab, w.config)
    params = dict(w.tr.param_items())
    assert set(grads) == set(params)

    checked = 0
    for name, arr in params.items():
        numeric = finite_diff(lambda: batch_loss_only(w, batch), arr)
        if np.max(np.abs(numeric)) < 1e-12 and np.max(np.abs(grads[name])) < 1e-12:
            continue  # parameter provably untouched by this batch
        assert grad_rel_err(grads[name], numeric) < 1e-4, name
        checked += 1
    # the batch must actually exercise the surface: mapper, pool, mask at least
    assert checked >= 10


def test_gradients_cover_every_trainable_kind():
    w, batch = fd_world(train_scorer=True)
    _, grads, _ = batch_loss_and_grads(batch, w.pool, w.tr, w.vocab, w.config)
    touched = {name for name, g in grads.items() if np.max(np.abs(g)) > 0}
    for prefix in ("mapper.proj_w", "mapper.pos", "pool.v.", "pool.k.", "y_mask",
                   "scorer.emb", "scorer.readout", "scorer.pos_weight"):
        assert any(t.startswith(prefix) for t in touched), prefix


def test_replay_items_skip_key_alignment():
    w, batch = fd_world()
    # replay-only batch: no key-alignment term at all
    replay_only = [it for it in batch if it.replay]
    _, grads, parts = batch_loss_and_grads(replay_only, w.pool, w.tr, w.vocab, w.config)
    assert parts["l2"] == 0.0
    for i in range(w.pool.n_t):
        assert np.max(np.abs(grads[f"pool.k.{i}"])) == 0.0


def test_parts_l2_matches_alignment_loss():
    w, batch = fd_world()
    _, _, parts = batch_loss_and_grads(batch, w.pool, w.tr, w.vocab, w.config)
    expect = 0.0
    cache_keys = [e.k for e in w.pool.entries]
    from lsgg.numerics import cosine_to_rows

    for it in batch:
        if it.replay:
            continue
        sims = cosine_to_rows(np.asarray(it.source.f_c, float), np.stack(cache_keys))
        order = np.argsort(-sims, kind="stable")[: w.config.k_retrieve]
        expect += loss_key_alignment(it.source.f_c,
                                     [cache_keys[int(i)] for i in order])
    assert parts["l2"] == pytest.approx(expect / len(batch), abs=1e-12)


def test_empty_batch_rejected():
    w, _ = fd_world()
    with pytest.raises(ValueError):
        batch_loss_and_grads([], w.pool, w.tr, w.vocab, w.config)


# -- optimizer -------------------------------------------------------------------


def test_zero_lr_leaves_parameters_unchanged():
    w, batch = fd_world(train_scorer=True)
    w.config.lr = 0.0
    before = {name: arr.copy() for name, arr in w.tr.param_items()}
    opt = AdamW()
    grad_step(w.tr, batch, w.pool, w.vocab, w.config, opt)
    for name, arr in w.tr.param_items():
        assert np.array_equal(arr, before[name]), name


def test_adamw_matches_reference_implementation():
    # one parameter, three steps, hand-rolled reference with bias correction
    w, batch = fd_world()
    opt = AdamW()
    config = TrainConfig(lr=0.01, weight_decay=0.05)
    param = w.tr.y_mask
    start = param.copy()
    gs = [SeededRng(40 + t).normal(param.shape) for t in range(3)]

    ref = start.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t, g in enumerate(gs, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1.0 - 0.9 ** t)
        vh = v / (1.0 - 0.999 ** t)
        ref -= config.lr * (mh / (np.sqrt(vh) + 1e-8) + config.weight_decay * ref)

    for g in gs:
        opt.step(w.tr, {"y_mask": g}, config)
    assert np.allclose(param, ref, rtol=1e-12, atol=1e-15)


def test_scorer_lr_is_scaled_down():
    w, batch = fd_world(train_scorer=True)
    config = TrainConfig(lr=0.01, weight_decay=0.0, scorer_lr_scale=0.1)
    opt = AdamW()
    g = {name: np.ones_like(arr) for name, arr in w.tr.param_items()}
    before_mask = w.tr.y_mask.copy()
    before_emb = w.tr.scorer.emb.copy()
    opt.step(w.tr, g, config)
    d_mask = np.max(np.abs(w.tr.y_mask - before_mask))
    d_emb = np.max(np.abs(w.tr.scorer.emb - before_emb))
    assert d_mask == pytest.approx(0.01, rel=1e-6)
    assert d_emb == pytest.approx(0.001, rel=1e-6)


def test_loss_decreases_on_separable_batch():
    w, _ = fd_world(n_pred=4)
    w.config.lr = 0.01
    batch = [_Item(source=w.instance(predicate=0), replay=False),
             _Item(source=w.instance(predicate=3), replay=False)]
    opt = AdamW()
    first = batch_loss_only(w, batch)
    losses = [grad_step(w.tr, batch, w.pool, w.vocab, w.config, opt)
              for _ in range(50)]
    assert losses[0] == pytest.approx(first, rel=1e-12)
    assert losses[-1] < 0.5 * first
    assert batch_loss_only(w, batch) < losses[-1]


def test_naive_config_reduces_surface():
    config = TrainConfig(alpha=0.0, lam=0.0, naive=True, k_retrieve=3)
    w = TinyWorld(seed=33, config=config, k_retrieve=3)
    batch = [_Item(source=w.instance(predicate=1), replay=False)]
    loss, grads, parts = batch_loss_and_grads(batch, w.pool, w.tr, w.vocab, config)
    assert parts["l1"] == 0.0
    # parts report raw components; lam = 0 zeroes the weighted contribution
    assert loss == pytest.approx(parts["l3"], abs=1e-15)
    for i in range(w.pool.n_t):
        assert np.max(np.abs(grads[f"pool.k.{i}"])) == 0.0
    # single prompt segment: exactly one pool entry receives v-gradient
    touched_v = [i for i in range(w.pool.n_t)
                 if np.max(np.abs(grads[f"pool.v.{i}"])) > 0]
    assert len(touched_v) == 1


# -- stage loop -------------------------------------------------------------------


def loop_world(seed=50, **config_kw):
    config = TrainConfig(epochs=2, batch_size=4, k_retrieve=2, lr=0.005,
                         **config_kw)
    w = TinyWorld(seed=seed, n_t=4, n_e=3, n_pred=4, config=config)
    train = [w.instance(predicate=p % w.n_pred, image_id=i)
             for i, p in enumerate(range(12))]
    stage = StageDataset(train=train, val=[], test=[])
    return w, stage


def test_train_stage_deterministic():
    results = []
    snapshots = []
    for _ in range(2):
        w, stage = loop_world()
        opt = AdamW()
        out = train_stage(stage, w.pool, w.tr, w.vocab, w.config, opt,
                          SeededRng(7), quota=6)
        results.append(out)
        snapshots.append({name: arr.copy() for name, arr in w.tr.param_items()})
    assert results[0]["epoch_losses"] == results[1]["epoch_losses"]
    assert results[0]["admitted"] == results[1]["admitted"]
    for name in snapshots[0]:
        assert np.array_equal(snapshots[0][name], snapshots[1][name]), name


def test_train_stage_respects_quota_and_counts_steps():
    w, stage = loop_world()
    out = train_stage(stage, w.pool, w.tr, w.vocab, w.config, AdamW(),
                      SeededRng(8), quota=5)
    assert out["admitted"] <= 5
    stored = sum(len(e.store) for e in w.pool.entries)
    assert stored == out["admitted"]  # pool started empty
    chunk = 4 - round(4 * 0.25)
    per_epoch = (12 + chunk - 1) // chunk
    assert out["steps"] == 2 * per_epoch
    assert len(out["epoch_losses"]) == 2


def test_train_stage_zero_quota_never_admits():
    w, stage = loop_world()
    out = train_stage(stage, w.pool, w.tr, w.vocab, w.config, AdamW(),
                      SeededRng(9), quota=0)
    assert out["admitted"] == 0
    assert all(not e.store for e in w.pool.entries)


def test_train_stage_naive_ignores_quota():
    w, stage = loop_world(naive=True)
    out = train_stage(stage, w.pool, w.tr, w.vocab, w.config, AdamW(),
                      SeededRng(10), quota=50)
    assert out["admitted"] == 0


def test_train_stage_rejects_empty_split():
    w, _ = loop_world()
    with pytest.raises(ValueError):
        train_stage(StageDataset(train=[], val=[], test=[]), w.pool, w.tr,
                    w.vocab, w.config, AdamW(), SeededRng(11))


def test_stage_quota_formula():
    w = TinyWorld(n_t=4, n_e=3)
    assert stage_quota(w.pool, 5) == (4 * 3) // 5
    assert stage_quota(w.pool, 1) == 12


def test_predict_ranked_is_pure():
    w, stage = loop_world()
    train_stage(stage, w.pool, w.tr, w.vocab, w.config, AdamW(), SeededRng(12),
                quota=6)
    before = {name: arr.copy() for name, arr in w.tr.param_items()}
    stores_before = [len(e.store) for e in w.pool.entries]
    queries = [w.instance(predicate=i % 4) for i in range(5)]
    ranked = predict_ranked(queries, w.pool, w.tr, w.vocab, w.config)
    assert len(ranked) == 5
    for rr in ranked:
        assert len({p for p, _ in rr}) == len(rr)
        assert all(np.isfinite(s) for _, s in rr)
    for name, arr in w.tr.param_items():
        assert np.array_equal(arr, before[name]), name
    assert [len(e.store) for e in w.pool.entries] == stores_before
    # a different batch split changes BLAS blocking, not the ranking
    again = predict_ranked(queries, w.pool, w.tr, w.vocab, w.config, batch_size=2)
    for ra, rb in zip(again, ranked):
        assert [p for p, _ in ra] == [p for p, _ in rb]
        for (_, sa), (_, sb) in zip(ra, rb):
            assert sa == pytest.approx(sb, abs=1e-9)


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    w, stage = loop_world()
    train_stage(stage, w.pool, w.tr, w.vocab, w.config, AdamW(), SeededRng(13),
                quota=4)
    path = tmp_path / "ckpt.lsgg"
    save_checkpoint(path, w.tr, w.config, "pool.lsgg")
    arrays, config_echo, pool_path, meta = load_checkpoint(path)
    assert pool_path == "pool.lsgg"
    assert meta["d_tok"] == 8 and meta["depth"] == 1
    assert meta["scorer_trainable"] is False
    assert config_echo["rho"] == str(w.config.rho)
    for name, arr in w.tr.checkpoint_items():
        assert np.array_equal(arrays[name], arr), name


def test_checkpoint_rejects_malformed(tmp_path):
    path = tmp_path / "ckpt.lsgg"
    path.write_text("LSGG-CKPT 2\n")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
    path.write_text("LSGG-CKPT 1\nmystery record\n")
    with pytest.raises(CheckpointFormatError, match="line 2"):
        load_checkpoint(path)
    path.write_text("LSGG-CKPT 1\nconfig lr=0.1\n")
    with pytest.raises(CheckpointFormatError, match="pool"):
        load_checkpoint(path)
    path.write_text("")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
