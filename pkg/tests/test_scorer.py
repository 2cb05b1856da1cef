"""Scorer losses, agreement metric and head, each against an oracle."""

import numpy as np
import pytest

from aeslab import tensor as T
from aeslab.augment import FeatureVector, PromptScaler, SetStats
from aeslab.corpus import EssayRecord, ScoreRange, Vocabulary, tokenize
from aeslab.errors import ConfigError, ContractError
from aeslab.scorer import (
    CONTEXTS,
    ScoreBatch,
    ScorerConfig,
    ScorerModel,
    ScoringExample,
    combined_loss,
    create_head_tensors,
    head_forward,
    margin_ranking_loss,
    mse_loss,
    parse_context,
    predict_score,
    qwk,
    ranking_signs,
    round_half_away,
    stratified_folds,
)

from oracles import margin_ranking_bruteforce, mse_bruteforce, qwk_bruteforce, rel_err


class TestMseLoss:
    def test_equal_is_zero(self):
        assert mse_loss(T.Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0

    def test_hand_value(self):
        assert mse_loss(T.Tensor([0.0, 0.0]), [1.0, 3.0]).item() == 5.0

    def test_gradient_is_two_diff_over_n(self):
        rng = np.random.default_rng(0)
        pred_data = rng.normal(size=6)
        gold = rng.normal(size=6)
        pred = T.Tensor(pred_data.copy())
        with T.Graph() as g:
            loss = mse_loss(pred, gold)
        T.backward(g, loss)
        assert np.allclose(pred.grad, 2.0 * (pred_data - gold) / 6.0)
        fd = T.finite_difference_gradient(lambda v: mse_loss(v, gold), T.Tensor(pred_data.copy()))
        assert rel_err(pred.grad, fd.data) <= 1e-4

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            mse_loss(T.Tensor(np.zeros(0)), [])


class TestMarginRankingLoss:
    def test_correctly_ordered_is_zero(self):
        gold = [1.0, 2.0, 3.0]
        pred = T.Tensor([-1.0, 0.5, 2.0])
        assert margin_ranking_loss(pred, gold).item() == 0.0

    def test_hand_case_single_pair(self):
        # gold says item 2 ranks higher, prediction says the opposite by 2
        loss = margin_ranking_loss(T.Tensor([3.0, 1.0]), [1.0, 2.0]).item()
        assert loss == 2.0

    def test_equal_gold_penalises_absolute_difference(self):
        loss = margin_ranking_loss(T.Tensor([1.0, 4.0]), [2.0, 2.0]).item()
        assert loss == 3.0
        loss2 = margin_ranking_loss(T.Tensor([4.0, 1.0]), [2.0, 2.0]).item()
        assert loss2 == 3.0

    def test_equal_gold_equal_pred_is_margin_hinge(self):
        assert margin_ranking_loss(T.Tensor([1.5, 1.5]), [2.0, 2.0]).item() == 0.0
        assert margin_ranking_loss(T.Tensor([1.5, 1.5]), [2.0, 2.0], margin=0.3).item() == 0.3

    def test_single_element_batch_is_zero(self):
        assert margin_ranking_loss(T.Tensor([1.0]), [2.0]).item() == 0.0

    def test_matches_pair_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(200):
            n = int(rng.integers(2, 17))
            # quantised values make gold ties and prediction ties common
            gold = rng.integers(0, 4, size=n).astype(float)
            pred_data = np.round(rng.normal(size=n), 1)
            margin = float(rng.choice([0.0, 0.0, 0.5]))
            got = margin_ranking_loss(T.Tensor(pred_data), gold, margin).item()
            ref = margin_ranking_bruteforce(pred_data, gold, margin)
            assert abs(got - ref) <= 1e-12

    def test_invariant_under_constant_shift(self):
        rng = np.random.default_rng(2)
        gold = rng.integers(0, 5, size=8).astype(float)
        pred = rng.normal(size=8)
        a = margin_ranking_loss(T.Tensor(pred), gold).item()
        b = margin_ranking_loss(T.Tensor(pred + 11.75), gold).item()
        assert abs(a - b) <= 1e-12

    def test_argmin_is_any_order_consistent_vector(self):
        # grid search over 3-element predictions: zero loss iff the gold
        # (strict) order is reproduced
        gold = np.array([1.0, 3.0, 2.0])
        grid = np.linspace(-1, 1, 9)
        for a in grid:
            for b in grid:
                for c in grid:
                    pred = np.array([a, b, c])
                    loss = margin_ranking_loss(T.Tensor(pred), gold).item()
                    consistent = b > c > a
                    if consistent:
                        assert loss == 0.0
                    else:
                        assert loss >= 0.0
        assert margin_ranking_loss(T.Tensor(np.array([-1.0, 1.0, 0.0])), gold).item() == 0.0

    def test_gradients_vs_finite_differences(self):
        # central differences are only valid away from the hinge kinks, so
        # resample until every pairwise difference clears them
        rng = np.random.default_rng(3)
        done = 0
        while done < 10:
            n = int(rng.integers(2, 8))
            gold = rng.integers(0, 3, size=n).astype(float)
            pred_data = rng.normal(size=n)
            gaps = np.abs(pred_data[:, None] - pred_data[None, :])[np.triu_indices(n, 1)]
            if gaps.min() < 1e-3:
                continue
            done += 1
            pred = T.Tensor(pred_data.copy())
            with T.Graph() as g:
                loss = margin_ranking_loss(pred, gold)
            T.backward(g, loss)
            fd = T.finite_difference_gradient(
                lambda v: margin_ranking_loss(v, gold), T.Tensor(pred_data.copy())
            )
            assert rel_err(pred.grad, fd.data) <= 1e-4

    def test_ranking_signs_case_table(self):
        r = ranking_signs(np.array([1.0, 1.0, 2.0]), np.array([3.0, 1.0, 1.0]))
        assert r[0, 1] == 1.0 and r[1, 0] == -1.0  # strict gold order
        assert r[1, 2] == 1.0 and r[2, 1] == -1.0  # gold tie, prediction differs
        r2 = ranking_signs(np.array([1.0, 1.0]), np.array([2.0, 2.0]))
        assert r2[0, 1] == 0.0  # gold tie and prediction tie


class TestCombinedLoss:
    def test_alpha_one_is_mse(self):
        rng = np.random.default_rng(4)
        pred, gold = rng.normal(size=5), rng.normal(size=5)
        a = combined_loss(T.Tensor(pred), gold, alpha=1.0, beta=0.0).item()
        assert a == mse_loss(T.Tensor(pred), gold).item()

    def test_alpha_zero_is_margin_ranking(self):
        rng = np.random.default_rng(5)
        pred, gold = rng.normal(size=5), rng.integers(0, 3, size=5).astype(float)
        a = combined_loss(T.Tensor(pred), gold, alpha=0.0, beta=1.0).item()
        assert a == margin_ranking_loss(T.Tensor(pred), gold).item()

    def test_default_weights_recompose(self):
        rng = np.random.default_rng(6)
        for trial in range(20):
            n = int(rng.integers(2, 10))
            pred = rng.normal(size=n)
            gold = rng.integers(0, 4, size=n).astype(float)
            got = combined_loss(T.Tensor(pred), gold).item()
            ref = 0.9 * mse_bruteforce(pred, gold) + 0.1 * margin_ranking_bruteforce(pred, gold)
            assert abs(got - ref) <= 1e-12

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            combined_loss(T.Tensor([1.0, 2.0]), [1.0, 2.0], alpha=0.9, beta=0.2)
        with pytest.raises(ConfigError):
            combined_loss(T.Tensor([1.0, 2.0]), [1.0, 2.0], alpha=1.2, beta=-0.2)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        gold = rng.integers(0, 3, size=6).astype(float)
        pred_data = rng.normal(size=6)
        pred = T.Tensor(pred_data.copy())
        with T.Graph() as g:
            loss = combined_loss(pred, gold)
        T.backward(g, loss)
        fd = T.finite_difference_gradient(lambda v: combined_loss(v, gold), T.Tensor(pred_data.copy()))
        assert rel_err(pred.grad, fd.data) <= 1e-4


class TestQwk:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            x = rng.integers(2, 13, size=15)
            assert qwk(x, x, ScoreRange(1, 2, 12)) == 1.0

    def test_two_by_two_total_disagreement(self):
        assert qwk([0, 1], [1, 0], ScoreRange(1, 0, 1)) == -1.0

    def test_matches_independent_implementation(self):
        rng = np.random.default_rng(9)
        ranges = [ScoreRange(1, 2, 12), ScoreRange(2, 1, 6), ScoreRange(3, 0, 3)]
        for trial in range(200):
            r = ranges[trial % len(ranges)]
            n = int(rng.integers(1, 40))
            p = rng.integers(r.min_score, r.max_score + 1, size=n)
            g = rng.integers(r.min_score, r.max_score + 1, size=n)
            got = qwk(p, g, r)
            ref = qwk_bruteforce(p.tolist(), g.tolist(), r.min_score, r.max_score)
            assert abs(got - ref) <= 1e-12

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(10)
        r = ScoreRange(3, 0, 3)
        for trial in range(50):
            n = int(rng.integers(1, 30))
            p = rng.integers(0, 4, size=n)
            g = rng.integers(0, 4, size=n)
            assert abs(qwk(p, g, r) - qwk(g, p, r)) <= 1e-12

    def test_single_category_mass_returns_one(self):
        assert qwk([2, 2, 2], [2, 2, 2], ScoreRange(3, 0, 3)) == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            qwk([0, 5], [1, 2], ScoreRange(3, 0, 3))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            qwk([1], [1, 2], ScoreRange(3, 0, 3))


class TestRounding:
    def test_half_away_from_zero(self):
        assert round_half_away(7.5) == 8
        assert round_half_away(-0.5) == -1
        assert round_half_away(2.4) == 2
        assert round_half_away(-2.5) == -3
        assert round_half_away(0.0) == 0


def tiny_config(**overrides):
    defaults = dict(
        epochs=2,
        learning_rate=0.01,
        batch_size=4,
        embed_dim=6,
        hidden=4,
        head_hidden=4,
        window_size=2,
        folds=2,
        patience=3,
        dropout_rate=0.0,
    )
    defaults.update(overrides)
    return ScorerConfig(**defaults)


def example_for(text, essay_id, essay_set, score, vocab):
    rec = EssayRecord(essay_id, essay_set, text, score)
    return ScoringExample(rec, tokenize(text, vocab), FeatureVector(len(text.split()), len(text), 0, 0))


class TestHeadForward:
    def test_scalar_output_for_any_length(self):
        cfg = tiny_config()
        head = create_head_tensors(cfg, seed=0)
        rng = np.random.default_rng(11)
        for n in (1, 2, 7):
            out = head_forward(T.Tensor(rng.normal(size=(n, 2 * cfg.hidden))), None, head, cfg.head_hidden)
            assert out.shape == ()

    def test_feature_order_sensitivity(self):
        cfg = tiny_config()
        head = create_head_tensors(cfg, seed=1)
        rng = np.random.default_rng(12)
        enc = rng.normal(size=(5, 2 * cfg.hidden))
        f = np.array([56.0, 317.0, 2.0, 7.0])
        a = head_forward(T.Tensor(enc), f, head, cfg.head_hidden).item()
        b = head_forward(T.Tensor(enc), f[::-1].copy(), head, cfg.head_hidden).item()
        assert a != b

    def test_needs_at_least_one_position(self):
        cfg = tiny_config()
        head = create_head_tensors(cfg, seed=2)
        with pytest.raises(ContractError):
            head_forward(T.Tensor(np.zeros((0, 2 * cfg.hidden))), None, head, cfg.head_hidden)

    def test_gradients_all_head_parameters(self):
        cfg = tiny_config()
        head = create_head_tensors(cfg, seed=3)
        rng = np.random.default_rng(13)
        # perturb every weight (biases start at zero) so no relu sits
        # exactly on its kink, where the defined subgradient is 0 but
        # central differences straddle the corner
        for t in head.values():
            t.data = t.data + rng.normal(size=t.shape) * 0.2
        enc_data = rng.normal(size=(4, 2 * cfg.hidden))
        feats = np.array([0.5, -0.3, 1.0, 0.1])
        with T.Graph() as g:
            out = head_forward(T.Tensor(enc_data), feats, head, cfg.head_hidden)
        T.backward(g, out)
        for name, t in head.items():
            def f(v, name=name):
                old = head[name].data
                head[name].data = v.data
                try:
                    return head_forward(T.Tensor(enc_data), feats, head, cfg.head_hidden)
                finally:
                    head[name].data = old

            fd = T.finite_difference_gradient(f, T.Tensor(t.data.copy()))
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            assert rel_err(grad, fd.data) <= 1e-4, name


class TestPredictScore:
    def make_model(self):
        vocab = Vocabulary()
        tokenize("an essay", vocab)  # vocabulary settled before sizing the table
        cfg = tiny_config()
        model = ScorerModel.create(vocab, cfg, parse_context("none"), {1: ScoreRange(1, 2, 12)}, seed=0)
        model.scaler = PromptScaler({1: SetStats(7.0, 2.0)})
        return model, vocab

    def test_zero_head_output_maps_to_set_mean(self):
        model, vocab = self.make_model()
        # zero all head weights so the forward output is exactly 0
        for t in model.head.values():
            t.data = np.zeros_like(t.data)
        ex = example_for("an essay", 1, 1, 7, vocab)
        assert predict_score(model, ex) == 7

    def test_clamping(self):
        model, vocab = self.make_model()
        model.scaler = PromptScaler({1: SetStats(7.0, 100.0)})  # push outputs far out
        for t in model.head.values():
            t.data = np.zeros_like(t.data)
        model.head["head/ffb/b2"].data = np.array([-5.0])
        ex = example_for("an essay", 1, 1, 7, vocab)
        assert predict_score(model, ex) == 2  # min of the range after clamping

    def test_unknown_set_rejected(self):
        model, vocab = self.make_model()
        ex = example_for("an essay", 1, 2, 3, vocab)
        with pytest.raises(ContractError):
            predict_score(model, ex)


class TestFolds:
    def test_stratified_round_robin(self):
        vocab = Vocabulary()
        examples = [example_for(f"text {i}", i + 1, 1 + (i % 2), 2 + (i % 2), vocab) for i in range(12)]
        folds = stratified_folds(examples, 3, seed=0)
        assert sorted(sum(folds, [])) == list(range(12))
        for f in folds:
            sets = [examples[i].record.essay_set for i in f]
            assert sets.count(1) == 2 and sets.count(2) == 2

    def test_single_fold_is_everything(self):
        vocab = Vocabulary()
        examples = [example_for(f"t {i}", i + 1, 1, 3, vocab) for i in range(5)]
        assert stratified_folds(examples, 1, seed=0) == [[0, 1, 2, 3, 4]]

    def test_more_folds_than_examples_rejected(self):
        vocab = Vocabulary()
        examples = [example_for("t", 1, 1, 3, vocab)]
        with pytest.raises(ConfigError):
            stratified_folds(examples, 2, seed=0)


class TestContexts:
    def test_all_seven_rows_present(self):
        assert sorted(CONTEXTS) == sorted(
            ["none", "mr", "mr+prompt", "mr+edu", "mr+ac", "mr+ac+prompt", "mr+ac+prompt+features"]
        )

    def test_unknown_context_rejected(self):
        with pytest.raises(ConfigError):
            parse_context("mr+edu+ac")

    def test_flags(self):
        c = parse_context("mr+ac+prompt+features")
        assert c.use_margin_ranking and c.use_prompt and c.use_features
        assert c.decoration is not None and c.decoration.value == "ac"
        none = parse_context("none")
        assert not (none.use_margin_ranking or none.use_prompt or none.use_features)
        assert none.decoration is None


class TestScoreBatch:
    def test_validates_lengths(self):
        with pytest.raises(ContractError):
            ScoreBatch([1], [1, 2], [1, 1])
        b = ScoreBatch([1, 2], [1, 2], [1, 1])
        assert len(b.predicted) == 2
