import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llmhotfix import tensor as T
from llmhotfix.model import (InputError, LengthError, ModelConfig, SamplerConfig, TransformerLM, generate,
                             parameter_count, sequence_nll, train_base)

from conftest import TINY, tiny_model


def test_reference_parameter_count():
    cfg = ModelConfig()
    V, d, L, Tm = 512, 128, 4, 256
    by_hand = V * d + Tm * d + L * (4 * d * d + 2 * 4 * d * d + 4 * d) + 2 * d + d * V
    assert parameter_count(cfg) == by_hand == 952_576
    assert TransformerLM(cfg).num_parameters() == 952_576


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


class TestForward:
    def test_shapes(self):
        m = tiny_model()
        assert m.forward([1, 2, 3]).shape == (3, TINY.vocab_size)
        assert m.forward(np.array([[1, 2, 3], [4, 5, 6]])).shape == (2, 3, TINY.vocab_size)

    def test_token_out_of_range(self):
        with pytest.raises(InputError):
            tiny_model().forward([1, TINY.vocab_size])
        with pytest.raises(InputError):
            tiny_model().forward([-1, 2])

    def test_too_long(self):
        with pytest.raises(LengthError):
            tiny_model().forward(list(range(1, 11)) * 2)

    @given(st.lists(st.integers(0, TINY.vocab_size - 1), min_size=2, max_size=12), st.data())
    def test_causality(self, ids, data):
        m = tiny_model()
        pos = data.draw(st.integers(1, len(ids) - 1))
        other = list(ids)
        other[pos] = (other[pos] + data.draw(st.integers(1, TINY.vocab_size - 1))) % TINY.vocab_size
        a = m.forward(ids).data[:pos]
        b = m.forward(other).data[:pos]
        assert a.tobytes() == b.tobytes()

    def test_zero_head_gives_uniform(self):
        m = tiny_model()
        m.params["head"].data[:] = 0.0
        logp = T.log_softmax(m.forward([3, 1, 4, 1, 5])).data
        np.testing.assert_allclose(logp, -math.log(TINY.vocab_size), rtol=0, atol=1e-15)
        nll = sequence_nll(m, [[3, 1, 4, 1, 5]]).data[0]
        assert abs(nll - math.log(TINY.vocab_size)) < 1e-14

    def test_deterministic(self):
        a = tiny_model(seed=9).forward([1, 2, 3, 4]).data
        b = tiny_model(seed=9).forward([1, 2, 3, 4]).data
        assert a.tobytes() == b.tobytes()

    def test_batch_rows_match_single(self):
        m = tiny_model()
        batch = m.forward(np.array([[1, 2, 3], [4, 5, 6]])).data
        np.testing.assert_allclose(batch[1], m.forward([4, 5, 6]).data, rtol=0, atol=1e-13)

    def test_gradients_through_whole_model(self, rng):
        m = tiny_model()
        m.set_trainable(True)
        ids = rng.integers(0, TINY.vocab_size, size=(2, 6))
        params = [m.params[n] for n in ("wte", "wpe", "layers.0.attn.q", "layers.1.mlp.fc",
                                        "layers.0.ln1.g", "lnf.b", "head")]

        def loss():
            return sequence_nll(m, ids.tolist()).mean()

        assert T.gradcheck(loss, params, max_entries=5, rng=rng) < 1e-4


class TestGenerate:
    def test_returns_num_samples_extending_prompt(self):
        m = tiny_model()
        outs = generate(m, [1, 2], SamplerConfig(num_samples=10, max_new_tokens=4))
        assert len(outs) == 10
        assert all(o[:2] == [1, 2] and len(o) == 6 for o in outs)

    def test_same_seed_same_samples(self):
        m = tiny_model()
        cfg = SamplerConfig(max_new_tokens=5, rng_seed=7)
        assert generate(m, [3], cfg) == generate(m, [3], cfg)

    def test_greedy_on_peaked_model(self):
        m = tiny_model()
        m.params["head"].data[:] = 0.0
        m.params["head"].data[:, 4] = 1e3
        m.params["lnf.b"].data[:] = 1.0
        m.params["lnf.g"].data[:] = 0.0
        outs = generate(m, [1], SamplerConfig(greedy=True, num_samples=3, max_new_tokens=3))
        assert outs == [[1, 4, 4, 4]] * 3

    def test_top_k_one_equals_greedy(self):
        m = tiny_model()
        a = generate(m, [2, 3], SamplerConfig(top_k=1, max_new_tokens=6, num_samples=2, rng_seed=1))
        b = generate(m, [2, 3], SamplerConfig(greedy=True, max_new_tokens=6, num_samples=2))
        assert a == b

    def test_stop_token_truncates(self):
        m = tiny_model()
        m.params["head"].data[:] = 0.0
        m.params["head"].data[:, 5] = 1e3
        m.params["lnf.b"].data[:] = 1.0
        m.params["lnf.g"].data[:] = 0.0
        outs = generate(m, [1], SamplerConfig(stop_token=5, max_new_tokens=6, num_samples=2))
        assert outs == [[1, 5], [1, 5]]

    def test_errors(self):
        m = tiny_model()
        with pytest.raises(InputError):
            generate(m, [], SamplerConfig())
        with pytest.raises(LengthError):
            generate(m, [1] * 10, SamplerConfig(max_new_tokens=10))
        with pytest.raises(ValueError):
            SamplerConfig(temperature=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(num_samples=0)

    def test_sampling_frequencies_follow_softmax(self):
        m = tiny_model()
        cfg = SamplerConfig(temperature=0.8, max_new_tokens=1, num_samples=4000, rng_seed=5)
        outs = generate(m, [1, 2], cfg)
        freq = np.bincount([o[-1] for o in outs], minlength=TINY.vocab_size) / 4000
        p = T.softmax(T.tensor(m.forward([1, 2]).data[-1] / 0.8)).data
        assert np.abs(freq - p).max() < 0.03


class TestTrainBase:
    def test_memorizes_one_sequence(self):
        m = tiny_model()
        seq = [1, 5, 2, 7, 3, 9, 4]
        opt = T.Adam(m.params, learning_rate=1e-2)
        trace = train_base(m, [seq], epochs=150, batch_size=1, opt=opt)
        assert trace[-1] < 0.1 < trace[0]

    def test_zero_epochs_leaves_params(self):
        m = tiny_model()
        before = {k: v.copy() for k, v in m.state_arrays().items()}
        train_base(m, [[1, 2, 3]], epochs=0, batch_size=1, opt=T.Adam(m.params))
        assert all(before[k].tobytes() == v.data.tobytes() for k, v in m.params.items())

    def test_trace_reproducible(self):
        def run():
            m = tiny_model()
            return train_base(m, [[1, 2, 3, 4], [5, 6, 7], [8, 9, 1, 2, 3]], epochs=3, batch_size=2,
                              opt=T.Adam(m.params, learning_rate=1e-2), seed=4)

        assert run() == run()

    def test_loss_falls(self):
        m = tiny_model()
        corpus = [[1, 2, 3, 4, 5], [2, 3, 4, 5, 6], [6, 5, 4, 3, 2]]
        trace = train_base(m, corpus, epochs=20, batch_size=3, opt=T.Adam(m.params, learning_rate=1e-2))
        assert trace[-1] < trace[0]
        assert not any(p.requires_grad for p in m.params.values())
