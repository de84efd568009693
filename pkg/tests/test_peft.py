import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmhotfix import tensor as T
from llmhotfix.checkpoint import CompatibilityError
from llmhotfix.model import ModelConfig, TransformerLM, sequence_nll
from llmhotfix.peft import (AdapterSpec, SpecError, adapted_projection, init_adapter, merged_weight,
                            prefix_attend, quantize_base, quantize_matrix)
from llmhotfix.tensor import Tensor

from conftest import TINY, tiny_model

IDS = [1, 4, 2, 8, 5, 7, 3]


class TestSpec:
    def test_defaults(self):
        s = AdapterSpec()
        assert (s.kind, s.rank, s.alpha, s.prefix_len, s.targets) == ("lora", 4, 8.0, 20, ("q", "v"))

    def test_rank_above_dim(self):
        with pytest.raises(SpecError):
            init_adapter(AdapterSpec(rank=9), TINY)

    @pytest.mark.parametrize("kw", [{"kind": "adapterx"}, {"rank": 0}, {"prefix_len": 0},
                                    {"kind": "qlora", "quant_bits": 3}, {"kind": "qlora"}, {"targets": ("z",)}])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            AdapterSpec(**kw)

    def test_dict_round_trip(self):
        s = AdapterSpec(kind="qlora", quant_bits=4, targets=("q", "k", "v"))
        assert AdapterSpec.from_dict(s.to_dict()) == s


class TestCounts:
    def test_reference_lora_count(self):
        L, targets, d, r = 4, 2, 128, 4
        # per layer and target: A [d, r] plus B [r, d]
        assert init_adapter(AdapterSpec(), ModelConfig()).num_parameters() == L * targets * (d * r + r * d) == 8_192

    def test_reference_ia3_count(self):
        d, L = 128, 4
        assert init_adapter(AdapterSpec(kind="ia3"), ModelConfig()).num_parameters() == L * (d + d + 4 * d)

    def test_all_kinds_below_ten_percent(self):
        base = TransformerLM(ModelConfig()).num_parameters()
        for kind, extra in [("lora", {}), ("ia3", {}), ("prefix", {}), ("qlora", {"quant_bits": 8})]:
            n = init_adapter(AdapterSpec(kind=kind, **extra), ModelConfig()).num_parameters()
            assert n < 0.1 * base, kind

    def test_ia3_smaller_than_lora(self):
        cfg = ModelConfig()
        assert (init_adapter(AdapterSpec(kind="ia3"), cfg).num_parameters()
                < init_adapter(AdapterSpec(), cfg).num_parameters())

    def test_adapter_holds_no_base_parameters(self):
        m = tiny_model()
        st_ = init_adapter(AdapterSpec(), m)
        assert not set(st_.tensors) & set(m.params)


class TestIdentity:
    @pytest.mark.parametrize("kind", ["lora", "ia3"])
    def test_fresh_adapter_is_bitwise_noop(self, kind):
        m = tiny_model()
        a = init_adapter(AdapterSpec(kind=kind, rank=2), m, seed=5)
        assert m.forward(IDS, a).data.tobytes() == m.forward(IDS).data.tobytes()

    def test_degenerate_prefix_gives_base_logits(self):
        m = tiny_model()
        a = init_adapter(AdapterSpec(kind="prefix", prefix_len=4), m)
        assert np.abs(m.forward(IDS, a).data - m.forward(IDS).data).max() > 0
        a.tensors["prefix.values"].data[:] = 0.0
        a.prefix_mask = np.zeros(4, dtype=bool)
        np.testing.assert_array_equal(m.forward(IDS, a).data, m.forward(IDS).data)


class TestProjection:
    def test_zero_b(self, rng):
        W, x = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(4, 6)))
        A, B = Tensor(rng.normal(size=(6, 2))), Tensor(np.zeros((2, 6)))
        assert adapted_projection(W, x, (A, B), 8.0, 2).data.tobytes() == (x @ W).data.tobytes()

    def test_pure_adapter_path(self, rng):
        W, x = Tensor(np.zeros((6, 6))), Tensor(rng.normal(size=(4, 6)))
        A, B = Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=(2, 6)))
        np.testing.assert_allclose(adapted_projection(W, x, (A, B), 2.0, 2).data, ((x @ A) @ B).data,
                                   rtol=0, atol=1e-15)

    def test_dense_merge_oracle(self, rng):
        W, x = rng.normal(size=(6, 5)), rng.normal(size=(4, 6))
        A, B = rng.normal(size=(6, 3)), rng.normal(size=(3, 5))
        got = adapted_projection(Tensor(W), Tensor(x), (Tensor(A), Tensor(B)), 8.0, 3).data
        assert np.abs(got - x @ merged_weight(W, A, B, 8.0, 3)).max() < 1e-10

    def test_shape_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            adapted_projection(Tensor(np.ones((6, 6))), Tensor(np.ones((2, 6))),
                               (Tensor(np.ones((6, 2))), Tensor(np.ones((3, 6)))), 8.0, 2)

    def test_gradient_only_into_adapter(self, rng):
        W = Tensor(rng.normal(size=(6, 6)))
        x = Tensor(rng.normal(size=(4, 6)))
        A = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        B = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        T.backward((adapted_projection(W, x, (A, B), 8.0, 2) ** 2).sum())
        assert W.grad is None and A.grad is not None and B.grad is not None


class TestPrefix:
    def test_score_shape(self, rng):
        q = k = v = Tensor(rng.normal(size=(7, 8)))
        pk, pv = Tensor(rng.normal(size=(20, 8))), Tensor(rng.normal(size=(20, 8)))
        out, w = prefix_attend(q, k, v, pk, pv, n_heads=2, return_weights=True)
        w = w.data
        assert out.shape == (7, 8)
        assert w.shape[-2:] == (7, 27)
        # all prefix slots visible from every position; causal over the sequence part
        assert (w[0, :, :, :20] > 0).all()
        assert np.all(w[0, :, 0, 21:] == 0)

    def test_gradient_reaches_prefix(self, rng):
        m = tiny_model()
        a = init_adapter(AdapterSpec(kind="prefix", prefix_len=3), m, seed=2)

        def loss():
            return sequence_nll(m, [IDS], a).mean()

        err = T.gradcheck(loss, [a.tensors["prefix.keys"], a.tensors["prefix.values"]], max_entries=8, rng=rng)
        assert err < 1e-4


@pytest.mark.parametrize("kind", ["lora", "ia3", "prefix", "qlora"])
def test_adapter_gradients_match_finite_differences(kind):
    m = tiny_model()
    spec = AdapterSpec(kind=kind, rank=2, prefix_len=3, quant_bits=8 if kind == "qlora" else None)
    base = quantize_base(m, 8) if kind == "qlora" else m
    a = init_adapter(spec, base, seed=1)
    rng = np.random.default_rng(7)
    for t in a.tensors.values():  # move off the zero-contribution init
        t.data += rng.normal(0, 0.3, t.shape)

    def loss():
        return sequence_nll(base, [IDS, IDS[::-1]], a).mean()

    assert T.gradcheck(loss, list(a.tensors.values()), max_entries=4, rng=rng) < 1e-4


class TestQuantization:
    def test_zero_matrix(self):
        q = quantize_matrix(np.zeros((3, 4)), 8)
        np.testing.assert_array_equal(q.dequantize(), 0.0)

    @given(st.integers(0, 10_000), st.sampled_from([4, 8]))
    def test_per_row_bound(self, seed, bits):
        w = np.random.default_rng(seed).normal(0, 0.02, size=(8, 16))
        q = quantize_matrix(w, bits)
        qmax = 2 ** (bits - 1) - 1
        scale = np.abs(w).max(axis=1) / qmax
        np.testing.assert_allclose(q.scale, scale, rtol=0, atol=0)
        assert (np.abs(q.dequantize() - w).max(axis=1) <= scale / 2 + 1e-18).all()
        assert q.codes.dtype == np.int8 and np.abs(q.codes).max() <= qmax

    def test_quantize_base_leaves_original(self):
        m = tiny_model()
        before = m.params["layers.0.attn.q"].data.copy()
        qm = quantize_base(m, 4)
        assert m.params["layers.0.attn.q"].data.tobytes() == before.tobytes()
        assert set(qm.quantized) == {n for n, p in m.params.items() if p.ndim == 2}
        assert qm.base_fingerprint == m.fingerprint

    def test_qlora_requires_quantized_base(self):
        m = tiny_model()
        a = init_adapter(AdapterSpec(kind="qlora", quant_bits=8), quantize_base(m, 8))
        with pytest.raises(CompatibilityError):
            m.forward(IDS, a)

    def test_fingerprint_mismatch(self):
        a = init_adapter(AdapterSpec(), tiny_model(seed=1))
        with pytest.raises(CompatibilityError):
            tiny_model(seed=2).forward(IDS, a)
