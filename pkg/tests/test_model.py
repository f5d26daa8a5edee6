"""Decoder forward pass, rotary embeddings, greedy copy decoding, temperature."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pplxlab import model as M
from pplxlab.model import ModelConfig, STOP, forward, greedy_copy_decode, greedy_next, init_params

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_context=129)


@pytest.fixture(scope="module")
def noisy_params():
    # larger than init scale so the distributions are far from uniform
    rng = np.random.default_rng(5)
    return {k: v + 0.5 * rng.normal(size=v.shape) for k, v in init_params(SMALL, 1).items()}


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.n_layers, c.n_heads, c.d_model, c.d_ff, c.rope_base, c.max_context) == (2, 4, 64, 256, 10000.0, 1025)
        assert c.d_head == 16

    @pytest.mark.parametrize("kw", [{"d_model": 10, "n_heads": 4}, {"d_model": 6, "n_heads": 2}, {"n_layers": 0}])
    def test_invalid(self, kw):
        with pytest.raises(M.ConfigError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_param_order_and_init(self):
        names = list(M.param_shapes(SMALL))
        assert names[0] == "tok_emb" and names[-2:] == ["final_norm", "w_out"]
        p = init_params(SMALL, 0)
        assert np.all(p["layer0.attn_norm"] == 1.0) and np.all(p["layer1.b2"] == 0.0)
        assert p["layer0.wq"].std() == pytest.approx(0.02, rel=0.2)
        assert p["layer0.wo"].std() == pytest.approx(0.01, rel=0.2)

    def test_init_deterministic(self):
        a, b = init_params(SMALL, 9), init_params(SMALL, 9)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestForward:
    def test_prompt_shape(self, noisy_params):
        out = forward(noisy_params, SMALL, [0, 1, STOP])
        assert out.shape == (3, 3)

    def test_rows_are_distributions(self, noisy_params, rng):
        out = forward(noisy_params, SMALL, rng.integers(0, 3, 40))
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
        assert np.all(out >= 0)

    @settings(max_examples=25)
    @given(st.lists(st.integers(0, 2), min_size=1, max_size=60), st.integers(0, 2))
    def test_causality(self, noisy_params, toks, extra):
        base = forward(noisy_params, SMALL, toks)
        longer = forward(noisy_params, SMALL, toks + [extra])
        np.testing.assert_array_equal(longer[:len(toks)], base)

    def test_context_limit(self, noisy_params):
        with pytest.raises(M.ContextLengthError):
            forward(noisy_params, SMALL, [0] * 130)

    def test_vocab_check(self, noisy_params):
        with pytest.raises(M.VocabError):
            forward(noisy_params, SMALL, [0, 3])


class TestRope:
    def test_position_zero_identity(self, rng):
        x = rng.normal(size=(1, 8))
        np.testing.assert_array_equal(M.rope_rotate(x, [0], 10000.0), x)

    @given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 300))
    def test_relative_position(self, p, q, s):
        rng = np.random.default_rng(p * 1000 + q)
        a, b = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        dot = lambda i, j: float(M.rope_rotate(a, [i], 10000.0)[0] @ M.rope_rotate(b, [j], 10000.0)[0])
        assert dot(p + s, q + s) == pytest.approx(dot(p, q), abs=1e-9)

    def test_single_pair_angle(self):
        # base**0 = 1, so position 1 rotates by exactly one radian
        r = M.rope_rotate(np.array([[1.0, 0.0]]), [1], 10000.0)[0]
        assert math.atan2(r[1], r[0]) == pytest.approx(1.0, abs=1e-12)

    def test_odd_head(self):
        with pytest.raises(M.ConfigError):
            M.rope_rotate(np.ones((1, 3)), [0], 10000.0)


class TestGreedy:
    @pytest.mark.parametrize("dist,expected", [((0.6, 0.3, 0.1), 0), ((0.45, 0.45, 0.10), 0), ((0.1, 0.2, 0.7), 1)])
    def test_next(self, dist, expected):
        assert greedy_next(dist) == expected

    def test_empty(self, noisy_params):
        tr = greedy_copy_decode(noisy_params, SMALL, [])
        assert len(tr) == 0 and tr.distributions.shape == (0, 3)

    def test_confident_oracle_copies(self, monkeypatch):
        bits = np.array([0, 1, 1, 0, 1])

        def fake(params, config, tokens, width=None):
            rows = np.full((len(tokens), 3), 0.1)
            for k in range(len(bits), len(tokens)):
                rows[k] = [0.2, 0.2, 0.6]
                rows[k, bits[k - len(bits)]] = 0.55
            return rows

        monkeypatch.setattr(M, "forward", fake)
        for naive in (False, True):
            tr = greedy_copy_decode(None, SMALL, bits, naive=naive)
            np.testing.assert_array_equal(tr.emitted, bits)
            assert tr.correct

    @settings(max_examples=15)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=24))
    def test_fast_path_matches_stepwise(self, noisy_params, bits):
        fast = greedy_copy_decode(noisy_params, SMALL, bits)
        slow = greedy_copy_decode(noisy_params, SMALL, bits, naive=True)
        np.testing.assert_array_equal(fast.emitted, slow.emitted)
        np.testing.assert_array_equal(fast.distributions, slow.distributions)

    def test_repeatable(self, noisy_params):
        bits = np.tile([0, 1, 1], 10)
        a, b = greedy_copy_decode(noisy_params, SMALL, bits), greedy_copy_decode(noisy_params, SMALL, bits)
        assert a.distributions.tobytes() == b.distributions.tobytes()

    def test_too_long(self, noisy_params):
        with pytest.raises(M.ContextLengthError):
            greedy_copy_decode(noisy_params, SMALL, [0] * 65)


class TestTemperature:
    def test_cold_limit_is_greedy(self):
        for d in [(0.6, 0.3, 0.1), (0.3, 0.6, 0.1), (0.1, 0.2, 0.7)]:
            assert round(M.tempered_one_prob(d, 1e-4)) == greedy_next(d)

    def test_unit_temperature_frequency(self):
        rng = np.random.default_rng(11)
        d = (0.3, 0.5, 0.2)
        draws = [M.sample_with_temperature(d, 1.0, rng) for _ in range(100_000)]
        p = 0.5 / 0.8
        assert abs(np.mean(draws) - p) <= 3 * math.sqrt(p * (1 - p) / 1e5)

    def test_sharpening(self):
        # 0.75^2 / (0.75^2 + 0.25^2)
        assert M.tempered_one_prob((0.25, 0.75, 0.0), 0.5) == pytest.approx(0.9, abs=1e-12)

    def test_bad_temperature(self, rng):
        with pytest.raises(ValueError):
            M.sample_with_temperature((0.5, 0.5, 0.0), 0.0, rng)
