import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmhotfix import tensor as T
from llmhotfix.data import DegeneratePairError, HotfixExample
from llmhotfix.loss import (OBJECTIVES, UNLEARN_MAX, ConfigurationError, combine, context_kl_mask, dual_loss,
                            guided_loss, kl_retain_loss, objective_loss, ratio_term, unlearn_loss, vanilla_loss)
from llmhotfix.model import next_token_log_probs
from llmhotfix.peft import AdapterSpec, init_adapter

from conftest import TINY, tiny_model


def make_example(rng, ctx=4, stmt=3, suffix=2, V=TINY.vocab_size, pair_id="e"):
    context = rng.integers(2, V, size=ctx).tolist()
    fixed = rng.integers(2, V, size=stmt).tolist()
    buggy = list(fixed)
    buggy[1] = (buggy[1] + 1 - 2) % (V - 2) + 2
    tail = rng.integers(2, V, size=suffix).tolist()
    w = np.zeros(ctx + stmt + suffix)
    w[ctx + 1] = 1.0
    return HotfixExample(context + fixed + tail, context + buggy + tail, w.copy(), w.copy(), ctx, pair_id,
                         buggy, fixed)


def peaked_model(tokens, logit=1e3):
    """Model whose next-token distribution is uniform over ``tokens`` at every position."""
    m = tiny_model()
    m.params["lnf.g"].data[:] = 0.0
    m.params["lnf.b"].data[:] = 1.0
    m.params["head"].data[:] = 0.0
    for t in tokens:
        m.params["head"].data[:, t] = logit / TINY.embed_dim
    return m


def lora(m, seed=0, scale=0.3):
    a = init_adapter(AdapterSpec(rank=2), m, seed=seed)
    rng = np.random.default_rng(seed + 50)
    for t in a.tensors.values():
        t.data += rng.normal(0, scale, t.shape)
    return a


class TestSingleExampleLosses:
    def test_guided_all_ones_equals_vanilla_bitwise(self, rng):
        m, ex = tiny_model(), make_example(rng)
        ex.w_plus = np.ones(len(ex.fixed_tokens))
        assert guided_loss(m, ex).item() == vanilla_loss(m, ex).item()

    def test_vanilla_matches_weighted_nll_all_ones(self, rng):
        m, ex = tiny_model(), make_example(rng)
        seq = np.array(ex.fixed_tokens)
        want = T.weighted_nll(next_token_log_probs(m, seq[:-1]), seq[1:], np.ones(len(seq) - 1)).item()
        assert vanilla_loss(m, ex).item() == want

    def test_uniform_model_gives_log_v(self, rng):
        m, ex = tiny_model(), make_example(rng)
        m.params["head"].data[:] = 0.0
        assert abs(vanilla_loss(m, ex).item() - math.log(TINY.vocab_size)) < 1e-14
        assert abs(unlearn_loss(m, ex).item() - math.log(TINY.vocab_size)) < 1e-14

    def test_certain_model_gives_zero(self):
        m = peaked_model([5])
        ex = HotfixExample([3, 5, 5, 5], [3, 5, 6, 5], np.array([0, 1, 1, 0.]), np.array([0, 0, 1, 0.]), 1)
        assert guided_loss(m, ex).item() == 0.0

    def test_half_probability_gives_ln2(self):
        m = peaked_model([5, 6])
        ex = HotfixExample([3, 4, 5], [3, 4, 6], np.array([0, 0, 1.]), np.array([0, 0, 1.]), 2)
        assert abs(guided_loss(m, ex).item() - math.log(2)) < 1e-12
        assert abs(unlearn_loss(m, ex).item() - math.log(2)) < 1e-12

    def test_unlearn_loop_oracle(self, rng):
        m = tiny_model()
        for _ in range(5):
            ex = make_example(rng, ctx=3, stmt=4, suffix=2)
            ex.w_minus = (rng.random(len(ex.buggy_tokens)) < 0.5).astype(float)
            ex.w_minus[:ex.context_len] = 0
            ex.w_minus[-1] = 1.0
            logp = next_token_log_probs(m, ex.buggy_tokens[:-1]).data
            total, n = 0.0, 0
            for t in range(1, len(ex.buggy_tokens)):
                if ex.w_minus[t]:
                    total += -ex.w_minus[t] * logp[t - 1, ex.buggy_tokens[t]]
                    n += 1
            assert abs(unlearn_loss(m, ex).item() - total / n) < 1e-12

    def test_zero_mass_is_degenerate(self, rng):
        m, ex = tiny_model(), make_example(rng)
        ex.w_plus = np.zeros(len(ex.fixed_tokens))
        with pytest.raises(DegeneratePairError):
            guided_loss(m, ex)
        ex.w_minus = np.zeros(len(ex.buggy_tokens))
        with pytest.raises(DegeneratePairError):
            unlearn_loss(m, ex)

    def test_deterministic(self, rng):
        m, ex = tiny_model(), make_example(rng)
        a = lora(m)
        assert dual_loss(m, ex, a)[0].item() == dual_loss(m, ex, a)[0].item()


class TestDual:
    def test_zero_guided(self):
        total, bd = combine("Dual", {"guided": 0.0, "unlearn": 0.0})
        assert total.item() == 0.0 and bd.l_ratio == 0.0

    def test_analytic_075(self):
        assert combine("Dual", {"guided": 1.0, "unlearn": 1.0})[0].item() == pytest.approx(0.75, abs=1e-8)

    def test_breakdown_components(self, rng):
        m, ex = tiny_model(), make_example(rng)
        total, bd = dual_loss(m, ex)
        assert bd.objective_name == "Dual"
        assert bd.l_guided == guided_loss(m, ex).item()
        assert bd.l_unlearn == unlearn_loss(m, ex).item()
        assert bd.l_vanilla is None and bd.l_kl is None
        assert total.item() == bd.l_total

    @given(st.floats(1e-3, 50), st.floats(1e-3, 50), st.floats(1e-3, 50))
    def test_ratio_properties(self, lg, lu, more):
        r1 = ratio_term(T.tensor(lg), T.tensor(lu)).item()
        r2 = ratio_term(T.tensor(lg), T.tensor(lu + more)).item()
        assert 0 < r1 <= 1 and r2 < r1
        assert combine("Dual", {"guided": lg, "unlearn": lu})[0].item() <= (lg + 1) / 2

    def test_gradient_matches_finite_differences(self, rng):
        m, ex = tiny_model(), make_example(rng)
        a = lora(m)
        err = T.gradcheck(lambda: dual_loss(m, ex, a)[0], list(a.tensors.values()), max_entries=4, rng=rng)
        assert err < 1e-4


class TestCombine:
    def test_guided_kl(self):
        assert combine("Guided+KL", {"guided": 0.4, "kl": 0.2})[0].item() == pytest.approx(0.3, abs=1e-15)

    def test_dual_kl(self):
        assert combine("Dual+KL", {"guided": 1.0, "unlearn": 1.0, "kl": 0.0})[0].item() == pytest.approx(
            0.5, abs=1e-8)

    def test_vanilla_kl_zero_kl(self):
        assert combine("Vanilla+KL", {"vanilla": 0.9, "kl": 0.0})[0].item() == 0.45

    def test_pass_through(self):
        assert combine("Vanilla", {"vanilla": 0.9})[0].item() == 0.9
        assert combine("Guided", {"guided": 0.7})[0].item() == 0.7

    def test_missing_component(self):
        with pytest.raises(ConfigurationError):
            combine("Dual+KL", {"guided": 1.0, "unlearn": 1.0})

    def test_unknown_objective(self):
        with pytest.raises(ConfigurationError):
            combine("Penalty", {"guided": 1.0})

    def test_unlearn_max_needs_flag(self):
        with pytest.raises(ConfigurationError):
            combine(UNLEARN_MAX, {"unlearn": 1.0})
        assert combine(UNLEARN_MAX, {"unlearn": 1.5}, allow_unsupported=True)[0].item() == -1.5
        assert UNLEARN_MAX not in OBJECTIVES


class TestKL:
    def test_fresh_adapter_is_exactly_zero(self, rng):
        m, ex = tiny_model(), make_example(rng)
        a = init_adapter(AdapterSpec(rank=2), m)
        assert kl_retain_loss(m, a, ex.fixed_tokens, context_kl_mask(ex)).item() == 0.0

    def test_positive_after_perturbation(self, rng):
        m, ex = tiny_model(), make_example(rng)
        assert kl_retain_loss(m, lora(m), ex.fixed_tokens).item() > 0

    def test_loop_oracle_six_positions(self, rng):
        m = tiny_model()
        a = lora(m)
        seq = rng.integers(0, TINY.vocab_size, size=7)
        mask = np.array([1, 0, 1, 1, 0, 1.0])
        p0 = np.exp(next_token_log_probs(m, seq[:-1]).data)
        p = np.exp(next_token_log_probs(m, seq[:-1], a).data)
        total = 0.0
        for t in range(6):
            if mask[t]:
                total += sum(p0[t, v] * (math.log(p0[t, v]) - math.log(p[t, v])) for v in range(TINY.vocab_size))
        assert abs(kl_retain_loss(m, a, seq, mask).item() - total / mask.sum()) < 1e-10

    def test_gradient(self, rng):
        m = tiny_model()
        a = lora(m)
        seq = rng.integers(0, TINY.vocab_size, size=6)
        err = T.gradcheck(lambda: kl_retain_loss(m, a, seq), list(a.tensors.values()), max_entries=4, rng=rng)
        assert err < 1e-4


class TestBatchedObjective:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.m = tiny_model()
        self.a = lora(self.m)
        self.examples = [make_example(rng, ctx=c, stmt=3, suffix=s, pair_id=f"e{c}{s}")
                         for c, s in [(3, 2), (5, 1), (4, 3)]]
        self.neutral = [rng.integers(2, TINY.vocab_size, size=n).tolist() for n in (6, 9)]

    def test_matches_per_example_means(self):
        m, a, exs = self.m, self.a, self.examples
        for obj, fn in [("Vanilla", vanilla_loss), ("Guided", guided_loss)]:
            got = objective_loss(m, a, exs, obj)[0].item()
            want = np.mean([fn(m, ex, a).item() for ex in exs])
            assert abs(got - want) < 1e-12, obj
        got = objective_loss(m, a, exs, "Dual")[0].item()
        assert abs(got - np.mean([dual_loss(m, ex, a)[0].item() for ex in exs])) < 1e-12

    def test_kl_term_pools_context_and_neutral_positions(self):
        m, a, exs = self.m, self.a, self.examples
        _, bd = objective_loss(m, a, exs, "Guided+KL", neutral=self.neutral)
        num, den = 0.0, 0
        for ex in exs:
            mask = context_kl_mask(ex)
            num += kl_retain_loss(m, a, ex.fixed_tokens, mask).item() * mask.sum()
            den += mask.sum()
        for seq in self.neutral:
            num += kl_retain_loss(m, a, seq).item() * (len(seq) - 1)
            den += len(seq) - 1
        assert abs(bd.l_kl - num / den) < 1e-12

    @pytest.mark.parametrize("objective", OBJECTIVES)
    def test_components_present_match_name(self, objective):
        _, bd = objective_loss(self.m, self.a, self.examples, objective, neutral=self.neutral)
        present = {k for k in ("vanilla", "guided", "unlearn", "ratio", "kl") if getattr(bd, "l_" + k) is not None}
        expected = {"Vanilla": {"vanilla"}, "Guided": {"guided"}, "Dual": {"guided", "unlearn", "ratio"},
                    "Vanilla+KL": {"vanilla", "kl"}, "Guided+KL": {"guided", "kl"},
                    "Dual+KL": {"guided", "unlearn", "ratio", "kl"}}[objective]
        assert present == expected
        assert np.isfinite(bd.l_total)

    @pytest.mark.parametrize("objective", OBJECTIVES)
    def test_gradients(self, objective):
        m, a = self.m, self.a

        def fn():
            return objective_loss(m, a, self.examples, objective, neutral=self.neutral)[0]

        assert T.gradcheck(fn, list(a.tensors.values()), max_entries=3, rng=np.random.default_rng(2)) < 1e-4

    def test_unlearn_max_only_with_flag(self):
        with pytest.raises(ConfigurationError):
            objective_loss(self.m, self.a, self.examples, UNLEARN_MAX)
        total, bd = objective_loss(self.m, self.a, self.examples, UNLEARN_MAX, allow_unsupported=True)
        assert total.item() == -bd.l_unlearn
