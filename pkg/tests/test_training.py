"""Contrastive loss, AdamW, and the training loop."""

import csv
import math

import numpy as np
import pytest

from tinyir.augment import AugmentationConfig
from tinyir.corpus import Document, DocumentStore, build_vocab
from tinyir.errors import (ConfigError, DataError, NumericalError, ShapeError)
from tinyir.model import ModelConfig, init_params, load_checkpoint
from tinyir.tensor import Tensor
from tinyir.training import (SCOPE_BATCH, SCOPE_OWN, ContrastiveBatch,
                             OptimizerState, TrainConfig, adamw_step,
                             clip_grad_norm, collect_grads, info_nce_from_sims,
                             info_nce_loss, init_optimizer, train)


def unit(rows):
    a = np.asarray(rows, dtype=np.float64)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_batch(rng, n, k, d=8):
    anchors = Tensor(unit(rng.normal(size=(n, d))))
    positives = Tensor(unit(rng.normal(size=(n, d))))
    negatives = None
    if k > 0:
        negatives = Tensor(unit(rng.normal(size=(n * k, d))))
    return ContrastiveBatch(anchors=anchors, positives=positives,
                            negatives=negatives, k_per_anchor=k)


def oracle_loss(batch, tau, scope):
    """Direct per-anchor summation, no shared log-sum-exp machinery."""
    a = batch.anchors.data
    p = batch.positives.data
    neg = batch.negatives.data if batch.negatives is not None else None
    n = a.shape[0]
    k = batch.k_per_anchor
    total = 0.0
    for i in range(n):
        cands = [p[j] for j in range(n)]
        if k > 0:
            if scope == SCOPE_OWN:
                cands += [neg[i * k + j] for j in range(k)]
            else:
                cands += [neg[j] for j in range(n * k)]
        logits = np.array([float(a[i] @ c) for c in cands]) / tau
        total += -(logits[i] - math.log(np.exp(logits - logits.max()).sum())
                   - logits.max())
    return total / n


class TestInfoNce:
    def test_single_pair_without_negatives_is_exactly_zero(self):
        batch = ContrastiveBatch(anchors=Tensor(unit([[1.0, 2.0]])),
                                 positives=Tensor(unit([[0.5, -1.0]])),
                                 negatives=None, k_per_anchor=0)
        assert info_nce_loss(batch, tau=0.05).item() == 0.0

    def test_two_indistinguishable_positives_give_ln2(self):
        positives = Tensor(unit([[1.0, 0.0], [1.0, 0.0]]))
        batch = ContrastiveBatch(anchors=Tensor(unit([[1.0, 0.0], [0.0, 1.0]])),
                                 positives=positives,
                                 negatives=None, k_per_anchor=0)
        loss = info_nce_loss(batch, tau=0.05).item()
        assert loss == pytest.approx(math.log(2.0), abs=1e-9)

    def test_uniform_shift_of_similarities_leaves_loss_unchanged(self):
        rng = np.random.default_rng(0)
        sims = rng.normal(size=(4, 4 + 4 * 2))
        base = info_nce_from_sims(Tensor(sims), 2, 0.05).item()
        shifted = info_nce_from_sims(Tensor(sims + 0.37), 2, 0.05).item()
        assert shifted == pytest.approx(base, abs=1e-8)

    def test_matches_direct_summation_on_random_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            k = int(rng.integers(0, 4))
            scope = SCOPE_OWN if rng.integers(2) else SCOPE_BATCH
            batch = random_batch(rng, n, k)
            got = info_nce_loss(batch, tau=0.05, negatives_scope=scope).item()
            want = oracle_loss(batch, 0.05, scope)
            assert got == pytest.approx(want, abs=1e-10)

    def test_own_scope_ignores_other_anchors_negatives(self):
        """Anchor 0 sits on top of anchor 1's mined negative; that distractor
        must raise the batch-scope loss but not the own-scope one."""
        a0 = [1.0, 0.0, 0.0]
        batch = ContrastiveBatch(
            anchors=Tensor(unit([a0, [0.0, 1.0, 0.0]])),
            positives=Tensor(unit([[0.9, 0.1, 0.0], [0.1, 0.9, 0.0]])),
            negatives=Tensor(unit([[0.0, 0.0, 1.0], a0])),
            k_per_anchor=1)
        loss_batch = info_nce_loss(batch, 0.05, SCOPE_BATCH).item()
        loss_own = info_nce_loss(batch, 0.05, SCOPE_OWN).item()
        assert loss_batch > loss_own

    def test_rows_must_be_unit_normalized(self):
        batch = ContrastiveBatch(anchors=Tensor([[3.0, 4.0]]),
                                 positives=Tensor(unit([[1.0, 0.0]])),
                                 negatives=None, k_per_anchor=0)
        with pytest.raises(DataError, match="unit"):
            info_nce_loss(batch, tau=0.05)

    def test_negative_block_shape_enforced(self):
        rng = np.random.default_rng(2)
        bad = ContrastiveBatch(anchors=Tensor(unit(rng.normal(size=(2, 4)))),
                               positives=Tensor(unit(rng.normal(size=(2, 4)))),
                               negatives=Tensor(unit(rng.normal(size=(3, 4)))),
                               k_per_anchor=2)
        with pytest.raises(ShapeError):
            info_nce_loss(bad, tau=0.05)
        with pytest.raises(ShapeError):
            info_nce_from_sims(Tensor(np.zeros((2, 5))), 2, 0.05)

    def test_bad_tau_and_scope_rejected(self):
        batch = random_batch(np.random.default_rng(3), 2, 0)
        with pytest.raises(ConfigError):
            info_nce_loss(batch, tau=0.0)
        with pytest.raises(ConfigError):
            info_nce_from_sims(Tensor(np.zeros((2, 2))), 0, 0.05,
                               negatives_scope="global")


class TestAdamW:
    def test_converges_on_a_quadratic(self):
        params = {"x": Tensor([[5.0, -3.0]], requires_grad=True)}
        state = init_optimizer(params)
        cfg = TrainConfig(lr=0.05, weight_decay=0.0)
        for _ in range(500):
            grads = {"x": 2.0 * params["x"].data}
            adamw_step(params, grads, state, cfg)
        assert np.abs(params["x"].data).max() < 1e-3

    def test_weight_decay_is_decoupled_from_the_gradient(self):
        p0 = np.array([[2.0, -1.5]])
        g = np.array([[0.3, -0.2]])
        cfg = TrainConfig(lr=0.01, weight_decay=0.1)
        params = {"x": Tensor(p0.copy(), requires_grad=True)}
        state = init_optimizer(params)
        adamw_step(params, {"x": g.copy()}, state, cfg)
        # at t=1 the bias corrections cancel: m_hat = g, v_hat = g^2
        expected = p0 * (1.0 - cfg.lr * cfg.weight_decay) \
            - cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(params["x"].data, expected, atol=1e-12)

    def test_nonfinite_gradient_names_the_parameter(self):
        params = {"embed": Tensor([[1.0]], requires_grad=True)}
        state = init_optimizer(params)
        with pytest.raises(NumericalError, match="embed"):
            adamw_step(params, {"embed": np.array([[np.nan]])}, state,
                       TrainConfig())

    def test_gradient_shape_mismatch_rejected(self):
        params = {"x": Tensor([[1.0, 2.0]], requires_grad=True)}
        state = init_optimizer(params)
        with pytest.raises(ShapeError):
            adamw_step(params, {"x": np.zeros((2, 2))}, state, TrainConfig())

    def test_missing_gradient_means_no_movement_without_decay(self):
        params = {"x": Tensor([[1.0, 2.0]], requires_grad=True)}
        state = init_optimizer(params)
        adamw_step(params, {}, state, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(params["x"].data, [[1.0, 2.0]])

    def test_lr_override_beats_config_lr(self):
        make = lambda: ({"x": Tensor([[1.0]], requires_grad=True)},
                        OptimizerState(m={"x": np.zeros((1, 1))},
                                       v={"x": np.zeros((1, 1))}))
        pa, sa = make()
        pb, sb = make()
        g = {"x": np.array([[1.0]])}
        adamw_step(pa, {k: v.copy() for k, v in g.items()}, sa,
                   TrainConfig(lr=1e-4, weight_decay=0.0), lr=0.5)
        adamw_step(pb, {k: v.copy() for k, v in g.items()}, sb,
                   TrainConfig(lr=0.5, weight_decay=0.0))
        np.testing.assert_array_equal(pa["x"].data, pb["x"].data)

    def test_clip_returns_preclip_norm_and_rescales(self):
        grads = {"a": np.array([[3.0, 0.0]]), "b": np.array([[0.0, 4.0]])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
        assert total == pytest.approx(1.0)

    def test_clip_below_threshold_is_a_no_op(self):
        grads = {"a": np.array([[0.3, 0.4]])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], [[0.3, 0.4]])


def tiny_setup(seed=0):
    rng = np.random.default_rng(seed)
    pool = [f"tok{i}" for i in range(30)]
    docs = [Document(id=f"d{i}", text=" ".join(rng.choice(pool, size=12)))
            for i in range(8)]
    store = DocumentStore(docs)
    vocab = build_vocab(store, max_size=64)
    negatives = {f"d{i}": [f"d{(i + 1) % 8}"] for i in range(8)}
    model_cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2,
                            n_layers=1, d_ff=32, max_context=32)
    aug_cfg = AugmentationConfig(anchor_len=4, passage_len=8, k_negatives=1,
                                 seed=seed)
    return store, vocab, negatives, model_cfg, aug_cfg


class TestTrainLoop:
    def test_two_runs_are_bit_identical(self, tmp_path):
        store, vocab, negs, model_cfg, aug_cfg = tiny_setup()
        tc = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=5)

        def run(out):
            params = init_params(model_cfg, seed=7)
            return train(store, vocab, negs, params, model_cfg, aug_cfg, tc,
                         out_dir=str(tmp_path / out))

        r1, r2 = run("a"), run("b")
        assert r1.losses == r2.losses
        for name, t in r1.params.named().items():
            np.testing.assert_array_equal(t.data, r2.params.named()[name].data)

    def test_loss_log_matches_result(self, tmp_path):
        store, vocab, negs, model_cfg, aug_cfg = tiny_setup()
        tc = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=5)
        params = init_params(model_cfg, seed=7)
        out = str(tmp_path / "run")
        result = train(store, vocab, negs, params, model_cfg, aug_cfg, tc,
                       out_dir=out)
        with open(result.log_path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss", "lr", "seconds"]
        assert len(rows) - 1 == len(result.losses) == 4  # ceil(8/4) * 2 epochs
        for row, loss in zip(rows[1:], result.losses):
            assert float(row[1]) == pytest.approx(loss, abs=1e-6)
            assert float(row[2]) == pytest.approx(tc.lr)
        loaded, loaded_cfg = load_checkpoint(result.checkpoint_path)
        assert loaded_cfg == model_cfg

    def test_lora_leaves_base_weights_untouched(self):
        store, vocab, negs, model_cfg, aug_cfg = tiny_setup()
        tc = TrainConfig(batch_size=4, lr=1e-2, epochs=1, seed=5,
                         use_lora=True, lora_rank=2, lora_alpha=4.0)
        params = init_params(model_cfg, seed=7)
        before = {n: t.data.copy() for n, t in params.named().items()}
        result = train(store, vocab, negs, params, model_cfg, aug_cfg, tc)
        for name, t in params.named().items():
            np.testing.assert_array_equal(t.data, before[name])
        assert result.adapter is not None
        merged = result.params.named()
        assert any(not np.array_equal(merged[n].data, before[n])
                   for n in before)

    def test_warmup_scales_logged_lr(self, tmp_path):
        store, vocab, negs, model_cfg, aug_cfg = tiny_setup()
        tc = TrainConfig(batch_size=4, lr=1e-3, epochs=2, seed=5,
                         warmup_steps=4)
        params = init_params(model_cfg, seed=7)
        out = str(tmp_path / "warm")
        train(store, vocab, negs, params, model_cfg, aug_cfg, tc, out_dir=out)
        with open(out + "/train_log.csv", newline="") as f:
            lrs = [float(r[2]) for r in list(csv.reader(f))[1:]]
        assert lrs == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3])

    def test_corpus_must_exceed_negative_count(self):
        store, vocab, negs, model_cfg, aug_cfg = tiny_setup()
        big_k = AugmentationConfig(anchor_len=4, passage_len=8,
                                   k_negatives=len(store))
        params = init_params(model_cfg, seed=7)
        with pytest.raises(DataError):
            train(store, vocab, negs, params, model_cfg, big_k, TrainConfig())
