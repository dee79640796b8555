import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FunctionModel, TanhMLPBag, seq_of
from xagree.attributions import (
    AttributionConfig,
    BaselineSpec,
    Explanation,
    deep_shap,
    deeplift,
    exact_shapley,
    grad_shap,
    input_x_gradient,
    integrated_gradients,
    leave_one_out,
    lime,
    sample_baselines,
)
from xagree.errors import CapabilityError, ConfigError, ContractError, NumericalError
from xagree.models import LinearBagClassifier, TokenSequence
from xagree.tensor import Tensor


def target_logit(model, seq, emb, target):
    logits, _ = model.forward_embedded(Tensor(emb[None]), model.encode([seq]))
    return logits.data[0, target]


def linear_expected(model, seq, base_ids=None, target=1):
    """Closed form on the bag model: score_i = (e_i - b_i) . W[:, target]."""
    ids = model.encode([seq]).ids[0]
    e = model.embed(ids)
    b = model.embed(np.zeros_like(ids) if base_ids is None else base_ids)
    return (e - b) @ model.params["w"].data[:, target]


def test_explanation_invariants():
    with pytest.raises(ContractError):
        Explanation("m", ["a", "b"], [1.0])
    with pytest.raises(NumericalError):
        Explanation("m", ["a"], [np.nan])
    exp = Explanation("m", ["a", "b"], [1.0, 2.0], 1, 0.7)
    assert Explanation.from_record(exp.to_record()).scores.tolist() == [1.0, 2.0]


def test_config_counts_must_be_positive():
    with pytest.raises(ConfigError):
        AttributionConfig(ig_steps=0)
    with pytest.raises(ConfigError):
        BaselineSpec("sample_set", [])


def test_input_x_gradient_zero_embedding_row(linear_model, vocab):
    s = seq_of(vocab, ["a", "b"])
    linear_model.params["embedding"].data[s.ids[0]] = 0.0
    assert input_x_gradient(linear_model, s).scores[0] == 0.0


def test_input_x_gradient_linear_analytic(linear_model, vocab):
    s = seq_of(vocab, ["a", "b", "c"])
    exp = input_x_gradient(linear_model, s, target=1)
    e = linear_model.embed(linear_model.encode([s]).ids[0])
    np.testing.assert_allclose(exp.scores, e @ linear_model.params["w"].data[:, 1], atol=1e-12)


def test_input_x_gradient_directional_probe(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b", "c"])
    exp = input_x_gradient(tiny_bilstm, s, target=0)
    e = tiny_bilstm.embed(tiny_bilstm.encode([s]).ids[0])
    eps = 1e-6
    base = target_logit(tiny_bilstm, s, e, 0)
    for i in range(len(e)):
        bumped = e.copy()
        bumped[i] += eps * e[i]  # probe along the token's own embedding
        probe = (target_logit(tiny_bilstm, s, bumped, 0) - base) / eps
        assert abs(probe - exp.scores[i]) < 1e-3


def test_integrated_gradients_rejects_zero_steps(linear_model, vocab):
    with pytest.raises(ConfigError):
        integrated_gradients(linear_model, seq_of(vocab, ["a"]), steps=0)


def test_integrated_gradients_at_baseline_is_zero(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b"])
    ids = tiny_transformer.encode([s]).ids[0]
    exp = integrated_gradients(tiny_transformer, s, baseline=BaselineSpec("sample_set", [ids]), steps=4)
    np.testing.assert_array_equal(exp.scores, 0.0)


@pytest.mark.parametrize("steps", [1, 3, 16])
def test_integrated_gradients_linear_exact(linear_model, vocab, steps):
    s = seq_of(vocab, ["a", "b", "c", "d"])
    exp = integrated_gradients(linear_model, s, target=1, steps=steps)
    np.testing.assert_allclose(exp.scores, linear_expected(linear_model, s), atol=1e-12)


def test_integrated_gradients_completeness_untrained(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b", "c"], ["d", "e"])
    exp = integrated_gradients(tiny_transformer, s, steps=512)
    assert abs(exp.scores.sum() - exp.info["delta"]) < 1e-3
    # the recorded delta agrees with two explicit forward passes
    batch = tiny_transformer.encode([s])
    full = tiny_transformer.logits(batch)[0, exp.target_class]
    empty = tiny_transformer.logits(batch.with_ids(np.zeros_like(batch.ids)))[0, exp.target_class]
    assert exp.info["delta"] == pytest.approx(full - empty, abs=1e-12)


def test_deeplift_linear_equals_ig(linear_model, vocab):
    s = seq_of(vocab, ["e", "f", "g"])
    dl = deeplift(linear_model, s, target=0)
    ig = integrated_gradients(linear_model, s, target=0, steps=2)
    np.testing.assert_allclose(dl.scores, ig.scores, atol=1e-12)


def test_deeplift_at_baseline_is_zero(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b"])
    ids = tiny_bilstm.encode([s]).ids[0]
    exp = deeplift(tiny_bilstm, s, baseline=BaselineSpec("sample_set", [ids]))
    np.testing.assert_array_equal(exp.scores, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_deeplift_summation_to_delta_tanh_mlp(seed, n):
    model = TanhMLPBag(vocab_size=12, seed=seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, 12, size=n)
    s = TokenSequence([f"t{i}" for i in ids], ids, 0)
    exp = deeplift(model, s, target=1)
    batch = model.encode([s])
    fx = model.logits(batch)[0, 1]
    fb = model.logits(batch.with_ids(np.zeros_like(batch.ids)))[0, 1]
    assert abs(exp.scores.sum() - (fx - fb)) < 1e-6


def test_deeplift_unsupported_op_raises(vocab):
    from xagree.tensor import record_op

    class Odd(LinearBagClassifier):
        def forward_embedded(self, emb, batch, capture=False):
            logits, _ = super().forward_embedded(emb, batch)
            return record_op("cube", logits.data ** 3, (logits,), lambda g: (3 * logits.data ** 2 * g,)), []

    from xagree.models import LinearConfig

    model = Odd(LinearConfig(vocab_size=len(vocab)), seed=0)
    with pytest.raises(CapabilityError, match="cube"):
        deeplift(model, seq_of(vocab, ["a"]))


def test_grad_shap_zero_when_input_equals_baselines(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b"])
    ids = tiny_transformer.encode([s]).ids[0]
    exp = grad_shap(tiny_transformer, s, baseline_spec=BaselineSpec("sample_set", [ids, ids.copy()]), n_samples=4)
    np.testing.assert_array_equal(exp.scores, 0.0)


def test_grad_shap_linear_single_padding_baseline_exact(linear_model, vocab):
    s = seq_of(vocab, ["a", "c", "e"])
    exp = grad_shap(linear_model, s, target=1, n_samples=5, seed=3)
    np.testing.assert_allclose(exp.scores, linear_expected(linear_model, s), atol=1e-12)


def test_grad_shap_linear_expectation_over_set(linear_model, vocab):
    s = seq_of(vocab, ["a", "c", "e"])
    ids = linear_model.encode([s]).ids[0]
    bases = [np.zeros_like(ids), np.array([5, 6, 7])]
    exp = grad_shap(linear_model, s, target=1, baseline_spec=BaselineSpec("sample_set", bases), n_samples=4000, seed=0)
    w = linear_model.params["w"].data[:, 1]
    mean_b = np.mean([linear_model.embed(b) for b in bases], axis=0)
    expected = (linear_model.embed(ids) - mean_b) @ w
    np.testing.assert_allclose(exp.scores, expected, atol=0.1 * np.abs(expected).max())


def test_grad_shap_seed_determinism(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b", "c"])
    a = grad_shap(tiny_bilstm, s, n_samples=8, seed=9)
    b = grad_shap(tiny_bilstm, s, n_samples=8, seed=9)
    assert a.scores.tobytes() == b.scores.tobytes()


def test_grad_shap_converges_to_ig(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b", "c", "d"])
    ig = integrated_gradients(tiny_transformer, s, steps=512)
    gs = grad_shap(tiny_transformer, s, target=ig.target_class, n_samples=1024, seed=0)
    big = np.abs(ig.scores) > 0.01
    assert big.any()
    rel = np.abs(gs.scores[big] - ig.scores[big]) / np.abs(ig.scores[big])
    assert rel.max() < 0.10


def test_deep_shap_singleton_equals_deeplift(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b", "c"])
    spec = BaselineSpec("sample_set", [np.array([5, 0, 7])])
    ds = deep_shap(tiny_bilstm, s, baseline_spec=spec)
    dl = deeplift(tiny_bilstm, s, baseline=spec)
    np.testing.assert_array_equal(ds.scores, dl.scores)


def test_deep_shap_two_baselines_hand_average(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b", "c"])
    b1, b2 = np.array([2, 0, 0, 0]), np.array([2, 5, 6, 7])
    ds = deep_shap(tiny_transformer, s, target=1, baseline_spec=BaselineSpec("sample_set", [b1, b2]))
    d1 = deeplift(tiny_transformer, s, target=1, baseline=BaselineSpec("sample_set", [b1]))
    d2 = deeplift(tiny_transformer, s, target=1, baseline=BaselineSpec("sample_set", [b2]))
    np.testing.assert_array_equal(ds.scores, np.mean([d1.scores, d2.scores], axis=0))


def test_deep_shap_linear_mean_of_set(linear_model, vocab):
    s = seq_of(vocab, ["a", "b"])
    bases = [np.array([0, 0]), np.array([6, 9]), np.array([4, 4])]
    ds = deep_shap(linear_model, s, target=0, baseline_spec=BaselineSpec("sample_set", bases))
    w = linear_model.params["w"].data[:, 0]
    mean_b = np.mean([linear_model.embed(b) for b in bases], axis=0)
    expected = (linear_model.embed(linear_model.encode([s]).ids[0]) - mean_b) @ w
    np.testing.assert_allclose(ds.scores, expected, atol=1e-12)


def test_sample_baselines_layout(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b", "c"], ["d", "e"])
    pool = [seq_of(vocab, ["f"], ["g", "h", "a", "b"]), seq_of(vocab, ["g", "h", "f", "e"], ["c"])]
    spec = sample_baselines(tiny_transformer, s, pool, 2, np.random.default_rng(0))
    ids = tiny_transformer.encode([s]).ids[0]
    assert len(spec.samples) == 3
    np.testing.assert_array_equal(spec.samples[0], 0)
    for row in spec.samples[1:]:
        assert row.shape == ids.shape
        assert row[0] == vocab.cls_id and row[4] == vocab.sep_id


def test_lime_constant_model_zero():
    model = FunctionModel(8, lambda present: 0.3)
    s = TokenSequence(("a", "b", "c"), (4, 5, 6), 1)
    exp = lime(model, s, target=1, seed=0)
    np.testing.assert_allclose(exp.scores, 0.0, atol=1e-9)


def _ridge_oracle(X, y, w, lam):
    """Weighted ridge with free intercept as an augmented least-squares problem."""
    n, d = X.shape
    A = np.hstack([np.ones((n, 1)), X]) * np.sqrt(w)[:, None]
    reg = np.hstack([np.zeros((d, 1)), math.sqrt(lam) * np.eye(d)])
    sol, *_ = np.linalg.lstsq(np.vstack([A, reg]), np.concatenate([y * np.sqrt(w), np.zeros(d)]), rcond=None)
    return sol[1:]


def test_lime_two_token_additive_model():
    a, b = 0.3, -0.2
    model = FunctionModel(8, lambda present: 0.5 + a * present[0] + b * present[1])
    s = TokenSequence(("x", "y"), (4, 5), 1)
    cfg = AttributionConfig(lime_samples=400)
    exp = lime(model, s, target=1, cfg=cfg, seed=1)
    # same draws as the implementation, fit by an independent solver
    rng = np.random.default_rng(1)
    masks = rng.random((400, 2)) < 0.5
    masks[0] = True
    y = 0.5 + a * masks[:, 0] + b * masks[:, 1]
    d = 1 - np.sqrt(masks.sum(1) / 2)
    w = np.exp(-d ** 2 / (0.25 * math.sqrt(2)) ** 2)
    np.testing.assert_allclose(exp.scores, _ridge_oracle(masks.astype(float), y, w, 1.0), atol=1e-10)
    # ridge only shrinks toward zero
    assert 0 < exp.scores[0] <= a and b <= exp.scores[1] < 0
    assert abs(exp.scores[0] - a) < 0.05 and abs(exp.scores[1] - b) < 0.05


def test_lime_seed_determinism(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b", "c", "d"])
    assert lime(tiny_bilstm, s, seed=4).scores.tobytes() == lime(tiny_bilstm, s, seed=4).scores.tobytes()


def test_leave_one_out_examples(tiny_bilstm, vocab):
    ignores_second = FunctionModel(8, lambda p: 0.2 + 0.5 * p[0])
    s = TokenSequence(("x", "y"), (4, 5), 1)
    assert leave_one_out(ignores_second, s, target=1).scores[1] == 0.0
    single = seq_of(vocab, ["c"])
    exp = leave_one_out(tiny_bilstm, single)
    batch = tiny_bilstm.encode([single])
    p = tiny_bilstm.predict_proba(batch)[0, exp.target_class]
    p0 = tiny_bilstm.predict_proba(batch.with_ids(np.zeros_like(batch.ids)))[0, exp.target_class]
    assert exp.scores[0] == pytest.approx(p - p0, abs=1e-15)


def test_leave_one_out_brute_force(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b", "c"], ["d"])
    exp = leave_one_out(tiny_transformer, s)
    ids = tiny_transformer.encode([s]).ids[0]
    t = exp.target_class
    full = tiny_transformer.predict_proba(tiny_transformer.encode([s]))[0, t]
    for i in range(len(ids)):
        dropped = list(ids)
        dropped[i] = 0
        batch = tiny_transformer.encode([s]).with_ids(np.array([dropped]))
        assert exp.scores[i] == pytest.approx(full - tiny_transformer.predict_proba(batch)[0, t], abs=1e-12)


def test_exact_shapley_single_token():
    model = FunctionModel(8, lambda p: 0.1 + 0.6 * p[0])
    exp = exact_shapley(model, TokenSequence(("x",), (4,), 1), target=1)
    assert exp.scores[0] == pytest.approx(0.6, abs=1e-12)


def test_exact_shapley_additive_recovers_coefficients():
    c = np.array([0.05, -0.1, 0.2, 0.0, 0.07])
    model = FunctionModel(10, lambda p: 0.3 + float(c @ p))
    s = TokenSequence(tuple("abcde"), (4, 5, 6, 7, 8), 1)
    np.testing.assert_allclose(exact_shapley(model, s, target=1).scores, c, atol=1e-12)


def test_exact_shapley_symmetric_tokens():
    model = FunctionModel(10, lambda p: 0.1 + 0.3 * p[0] * p[1] + 0.2 * p[2])
    exp = exact_shapley(model, TokenSequence(tuple("abc"), (4, 5, 6), 1), target=1)
    assert abs(exp.scores[0] - exp.scores[1]) < 1e-9


def test_exact_shapley_capability_limit(linear_model, vocab):
    with pytest.raises(CapabilityError):
        exact_shapley(linear_model, seq_of(vocab, ["a"] * 5), max_n=4)


def test_exact_shapley_matches_permutation_oracle(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b", "c", "d"])
    exp = exact_shapley(tiny_bilstm, s)
    t = exp.target_class
    ids = tiny_bilstm.encode([s]).ids[0]
    batch = tiny_bilstm.encode([s])

    def v(keep):
        row = np.where(keep, ids, 0)
        return tiny_bilstm.predict_proba(batch.with_ids(row[None]))[0, t]

    n = len(ids)
    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        keep = np.zeros(n, dtype=bool)
        for i in perm:
            before = v(keep)
            keep[i] = True
            phi[i] += v(keep) - before
    np.testing.assert_allclose(exp.scores, phi / len(perms), atol=1e-12)


def test_specials_flag(tiny_transformer, vocab):
    s = seq_of(vocab, ["a", "b"], ["c"])
    full = integrated_gradients(tiny_transformer, s, steps=4)
    assert full.tokens == ["[CLS]", "a", "b", "[SEP]", "c"]
    trimmed = integrated_gradients(tiny_transformer, s, steps=4, cfg=AttributionConfig(include_specials=False))
    assert trimmed.tokens == ["a", "b", "c"]
    np.testing.assert_array_equal(trimmed.scores, full.scores[[1, 2, 4]])
    assert trimmed.segments == ((0, 2), (2, 3))
    # perturbation methods keep specials fixed when they are not players
    assert len(exact_shapley(tiny_transformer, s, cfg=AttributionConfig(include_specials=False)).scores) == 3


def test_target_defaults_to_prediction(tiny_bilstm, vocab):
    s = seq_of(vocab, ["a", "b"], label=0)
    probs = tiny_bilstm.predict_proba(tiny_bilstm.encode([s]))[0]
    exp = leave_one_out(tiny_bilstm, s)
    assert exp.target_class == int(np.argmax(probs))
    assert exp.prediction_prob == pytest.approx(probs.max())
    gold = leave_one_out(tiny_bilstm, s, cfg=AttributionConfig(target="gold"))
    assert gold.target_class == 0
