import csv
import math

import numpy as np
import pytest

from geoprompt.embedcore import Rng, l2_normalize
from geoprompt.encoder import EmbeddingStore, HardToken, SoftToken, ToyTextEncoder, encode_text
from geoprompt.errors import (
    EmptyClassError,
    MissingTargetError,
    NonFiniteLossError,
)
from geoprompt.evalmetrics import SampleMeta
from geoprompt.prompting import PromptSpec, PromptStrategy, build_vocab, embed_prompt
from geoprompt.softprompt import (
    KnowledgeTargets,
    SoftPromptState,
    TrainConfig,
    batch_loss_and_context_grad,
    build_class_prompt,
    ce_loss,
    class_embeddings,
    gkr_loss,
    grad_step,
    kgcoop_targets,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train,
    write_training_log,
)


@pytest.fixture
def toy():
    """5-token vocab, random square encoder, 3 classes."""
    vocab = build_vocab(["alpha beta gamma stove hob"])
    rng = Rng(77)
    enc = ToyTextEncoder.random(len(vocab), d_in=6, d_out=6, rng=rng.derive(1))
    return vocab, enc, ["alpha", "beta", "gamma"]


def make_targets(classes, dim, gen):
    return KnowledgeTargets(vectors={c: gen.normal(size=dim) for c in classes})


class TestBuildClassPrompt:
    def test_single_token_class_length(self, toy):
        vocab, enc, _ = toy
        ctx = np.zeros((4, 6))
        rows = build_class_prompt(ctx, "stove", vocab)
        assert len(rows) == 5
        assert all(isinstance(r, SoftToken) for r in rows[:4])
        assert isinstance(rows[4], HardToken)

    def test_slash_class_gets_two_hard_tokens(self, toy):
        vocab, enc, _ = toy
        rows = build_class_prompt(np.zeros((4, 6)), "stove/hob", vocab)
        assert len(rows) == 6

    def test_m_zero_rejected_at_config(self):
        with pytest.raises(ValueError):
            TrainConfig(context_length=0)


class TestClassEmbeddings:
    def test_unit_rows(self, toy, rng):
        vocab, enc, classes = toy
        ctx = rng.derive(50).normal(scale=0.1, size=(4, 6))
        embs = class_embeddings(ctx, classes, enc, vocab)
        assert embs.shape == (3, 6)
        np.testing.assert_allclose(np.linalg.norm(embs, axis=1), 1.0, atol=1e-9)

    def test_deterministic(self, toy, rng):
        vocab, enc, classes = toy
        ctx = rng.derive(51).normal(scale=0.1, size=(4, 6))
        a = class_embeddings(ctx, classes, enc, vocab)
        b = class_embeddings(ctx, classes, enc, vocab)
        np.testing.assert_array_equal(a, b)

    def test_rows_match_direct_encoding(self, toy, rng):
        vocab, enc, classes = toy
        ctx = rng.derive(52).normal(scale=0.1, size=(4, 6))
        embs = class_embeddings(ctx, classes, enc, vocab)
        for i, c in enumerate(classes):
            direct = encode_text(enc, build_class_prompt(ctx, c, vocab))
            np.testing.assert_array_equal(embs[i], direct)


class TestCeLoss:
    def test_uniform_cosines_give_log_n(self):
        # All class embeddings identical -> identical logits -> ln N.
        w = np.tile(l2_normalize([1.0, 2.0, 2.0]), (4, 1))
        f = l2_normalize([0.3, -0.5, 1.0])
        assert ce_loss(w, f, 2, tau=0.07) == pytest.approx(math.log(4), abs=1e-12)

    def test_two_class_closed_form(self):
        f = np.array([1.0, 0.0])
        w = np.stack([f, -f])  # cosines (1, -1)
        expected = math.log(1 + math.exp(-2.0))
        assert ce_loss(w, f, 0, tau=1.0) == pytest.approx(expected, abs=1e-12)

    def test_matches_independent_logsumexp_oracle(self, rng):
        gen = rng.derive(60).generator
        for _ in range(30):
            n, d = int(gen.integers(2, 6)), 5
            w = np.stack([l2_normalize(gen.normal(size=d)) for _ in range(n)])
            f = l2_normalize(gen.normal(size=d))
            y = int(gen.integers(0, n))
            tau = 0.01
            # independent: direct probability with mpmath-free stable math
            logits = [float(w[i] @ f) / tau for i in range(n)]
            m = max(logits)
            denom = sum(math.exp(x - m) for x in logits)
            expected = -(logits[y] - m - math.log(denom))
            assert ce_loss(w, f, y, tau) == pytest.approx(expected, abs=1e-10)

    def test_nonnegative(self, rng):
        gen = rng.derive(61).generator
        for _ in range(50):
            w = np.stack([l2_normalize(gen.normal(size=4)) for _ in range(3)])
            f = l2_normalize(gen.normal(size=4))
            assert ce_loss(w, f, int(gen.integers(0, 3)), tau=0.5) >= 0.0


class TestGkrLoss:
    def test_aligned_is_zero(self, rng):
        gen = rng.derive(62).generator
        w = np.stack([l2_normalize(gen.normal(size=5)) for _ in range(4)])
        targets = KnowledgeTargets(
            vectors={f"c{i}": 3.0 * w[i] for i in range(4)})
        assert gkr_loss(w, targets, [f"c{i}" for i in range(4)]) == \
            pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        w = np.eye(3)[:2]
        targets = KnowledgeTargets(vectors={"a": np.array([0.0, 0, 1.0]),
                                            "b": np.array([0.0, 0, 1.0])})
        assert gkr_loss(w, targets, ["a", "b"]) == pytest.approx(1.0, abs=1e-12)

    def test_anti_aligned_is_two(self):
        w = np.eye(2)
        targets = KnowledgeTargets(vectors={"a": -w[0], "b": -w[1]})
        assert gkr_loss(w, targets, ["a", "b"]) == pytest.approx(2.0, abs=1e-12)

    def test_bounds_on_random_inputs(self, rng):
        gen = rng.derive(63).generator
        for _ in range(200):
            n = int(gen.integers(1, 5))
            w = np.stack([l2_normalize(gen.normal(size=4)) for _ in range(n)])
            classes = [f"c{i}" for i in range(n)]
            targets = KnowledgeTargets(
                vectors={c: gen.normal(size=4) for c in classes})
            val = gkr_loss(w, targets, classes)
            assert 0.0 <= val <= 2.0

    def test_missing_target(self):
        targets = KnowledgeTargets(vectors={"a": np.array([1.0, 0.0])})
        with pytest.raises(MissingTargetError):
            gkr_loss(np.eye(2), targets, ["a", "b"])


class TestTotalLoss:
    def test_lambda_zero_reduces_to_ce(self):
        assert total_loss(0.37, 1.9, 0.0) == 0.37

    def test_weighted_sum(self):
        assert total_loss(0.5, 0.25, 4.0) == pytest.approx(1.5)

    def test_default_weight_matches_config(self):
        assert TrainConfig().reg_weight == 4.0


def _train_setup(seed=0, n_per_class=24, d=8):
    classes = ["alpha", "beta", "gamma"]
    vocab = build_vocab(["alpha beta gamma"])
    gen = Rng(seed, 5).generator
    table = gen.normal(scale=0.5, size=(len(vocab), d))
    enc = ToyTextEncoder.from_table(table)
    store = EmbeddingStore(dim=d)
    samples = []
    centers = {c: l2_normalize(gen.normal(size=d)) for c in classes}
    for c in classes:
        for j in range(n_per_class):
            sid = f"{c}_{j}"
            store.add(sid, centers[c] + 0.2 * gen.normal(size=d))
            samples.append(SampleMeta(id=sid, label=c, country="geo_0",
                                      continent="Africa", income_bucket="low",
                                      split="source-train"))
    targets = KnowledgeTargets(
        vectors={c: gen.normal(size=d) for c in classes})
    return classes, vocab, enc, store, samples, targets


class TestGradStep:
    def test_zero_learning_rate_keeps_state(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=4, epochs=1, context_length=2)
        ctx = Rng(1, 2).normal(scale=0.02, size=(2, 8))
        state = SoftPromptState(context=ctx.copy(), velocity=np.zeros_like(ctx),
                                epoch=0, config=config, rng_state={})
        feats = np.stack([store.get(s.id) for s in samples[:6]])
        labels = np.array([0, 0, 1, 1, 2, 2])
        record = grad_step(state, classes, feats, labels, targets, enc, vocab,
                           lr=0.0)
        np.testing.assert_array_equal(state.context, ctx)
        assert record.total > 0

    def test_gradient_matches_finite_differences(self):
        # 3 classes, M=2, D=8 instance per the contract example.
        classes, vocab, enc, store, samples, targets = _train_setup(seed=3)
        config = TrainConfig(shots=4, epochs=1, context_length=2, reg_weight=2.5,
                             tau=0.05)
        gen = Rng(9).generator
        ctx = gen.normal(scale=0.05, size=(2, 8))
        feats = np.stack([store.get(s.id) for s in samples[:9]])
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])

        def loss_at(c):
            rec, _ = batch_loss_and_context_grad(
                c, classes, feats, labels, targets, config.reg_weight,
                config.tau, enc, vocab)
            return rec.total

        _, grad = batch_loss_and_context_grad(
            ctx, classes, feats, labels, targets, config.reg_weight, config.tau,
            enc, vocab)
        step = 1e-6
        for m in range(2):
            for j in range(8):
                up, dn = ctx.copy(), ctx.copy()
                up[m, j] += step
                dn[m, j] -= step
                fd = (loss_at(up) - loss_at(dn)) / (2 * step)
                scale = max(abs(fd), abs(float(grad[m, j])), 1e-8)
                assert abs(fd - float(grad[m, j])) / scale <= 1e-4

    def test_huge_lambda_descends_gkr(self):
        classes, vocab, enc, store, samples, targets = _train_setup(seed=5)
        config = TrainConfig(shots=4, epochs=1, context_length=2,
                             reg_weight=1e6, learning_rate=1e-9)
        gen = Rng(11).generator
        ctx = gen.normal(scale=0.02, size=(2, 8))
        state = SoftPromptState(context=ctx, velocity=np.zeros_like(ctx),
                                epoch=0, config=config, rng_state={})
        feats = np.stack([store.get(s.id) for s in samples[:6]])
        labels = np.array([0, 0, 1, 1, 2, 2])
        values = []
        for _ in range(10):
            record = grad_step(state, classes, feats, labels, targets, enc,
                               vocab, lr=config.learning_rate)
            values.append(record.gkr)
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

    def test_non_finite_loss_aborts(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=4, epochs=1, context_length=2)
        ctx = np.full((2, 8), 1e308)
        state = SoftPromptState(context=ctx, velocity=np.zeros_like(ctx),
                                epoch=0, config=config, rng_state={})
        feats = np.stack([store.get(s.id) for s in samples[:3]])
        with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError):
            grad_step(state, classes, feats, np.array([0, 1, 2]), targets, enc,
                      vocab, lr=0.01)


class TestTrain:
    def test_fixed_seed_bitwise_determinism(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=6, epochs=5, context_length=2, seed=123)
        a = train(config, samples, store, classes, targets, enc, vocab)
        b = train(config, samples, store, classes, targets, enc, vocab)
        np.testing.assert_array_equal(a.context, b.context)
        assert a.history == b.history

    def test_lambda_zero_equals_gkr_free_trainer(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=6, epochs=10, context_length=2,
                             reg_weight=0.0, seed=7)
        with_targets = train(config, samples, store, classes, targets, enc,
                             vocab)
        without = train(config, samples, store, classes, None, enc, vocab)
        np.testing.assert_array_equal(with_targets.context, without.context)
        # gkr is still reported for visibility when targets exist
        assert with_targets.history[0]["gkr"] > 0.0
        assert without.history[0]["gkr"] == 0.0

    def test_empty_class_rejected(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        missing = [s for s in samples if s.label != "beta"]
        config = TrainConfig(shots=4, epochs=1, context_length=2)
        with pytest.raises(EmptyClassError):
            train(config, missing, store, classes, targets, enc, vocab)

    def test_shortfall_uses_all_and_warns(self, caplog):
        classes, vocab, enc, store, samples, targets = _train_setup(
            n_per_class=3)
        config = TrainConfig(shots=16, epochs=1, context_length=2)
        with caplog.at_level("WARNING"):
            state = train(config, samples, store, classes, targets, enc, vocab)
        assert state.history
        assert any("shots" in rec.message for rec in caplog.records)

    def test_history_logs_all_epochs(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=4, epochs=7, context_length=2)
        state = train(config, samples, store, classes, targets, enc, vocab)
        assert [h["epoch"] for h in state.history] == list(range(7))
        assert all(h["total"] == pytest.approx(
            h["ce"] + config.reg_weight * h["gkr"], abs=1e-12)
            for h in state.history)

    def test_targets_frozen_through_training(self):
        classes, vocab, enc, store, samples, targets = _train_setup()
        before = targets.digest()
        config = TrainConfig(shots=6, epochs=3, context_length=2)
        train(config, samples, store, classes, targets, enc, vocab)
        assert targets.digest() == before


class TestKgcoopTargets:
    def test_targets_are_default_prompt_embeddings(self, toy):
        vocab, enc, classes = toy
        targets = kgcoop_targets(classes, enc, vocab)
        for c in classes:
            expected = embed_prompt(PromptSpec(PromptStrategy.DEFAULT, c), enc,
                                    vocab)
            np.testing.assert_array_equal(targets.vectors[c], expected)

    def test_gkr_at_near_zero_init_is_finite_and_below_two(self, toy):
        vocab, enc, classes = toy
        targets = kgcoop_targets(classes, enc, vocab)
        ctx = Rng(4).normal(scale=1e-4, size=(4, 6))
        embs = class_embeddings(ctx, classes, enc, vocab)
        val = gkr_loss(embs, targets, classes)
        assert math.isfinite(val)
        assert val < 2.0


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=4, epochs=3, context_length=2, seed=9)
        state = train(config, samples, store, classes, targets, enc, vocab)
        path = tmp_path / "ckpt.json"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.context, state.context)
        np.testing.assert_array_equal(loaded.velocity, state.velocity)
        assert loaded.config == state.config
        assert loaded.history == state.history
        assert loaded.rng_state == state.rng_state

    def test_training_log_csv(self, tmp_path):
        classes, vocab, enc, store, samples, targets = _train_setup()
        config = TrainConfig(shots=4, epochs=2, context_length=2)
        state = train(config, samples, store, classes, targets, enc, vocab)
        path = tmp_path / "log.csv"
        write_training_log(state.history, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "ce", "gkr", "total", "lr"]
        assert len(rows) == 3
        assert float(rows[1][1]) == pytest.approx(state.history[0]["ce"])
