"""Pipelines on small models: determinism, shapes and internal consistency."""

import math

import numpy as np
import pytest

from pplxlab import experiments as ex
from pplxlab.metrics import Regime
from pplxlab.model import ModelConfig, forward_tensors, init_params
from pplxlab.numerics import Tensor
from pplxlab.tasks import make_alpha, make_beta

SMALL = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_context=65)
QUICK = ex.CopyTrainConfig(batch_size=4, length_range=(1, 4), max_steps=8, eval_every=4,
                           held_out_count=4, held_out_length=4)


class TestCopyTraining:
    def test_same_seed_same_params(self):
        a = ex.run_copy_training(SMALL, 11, QUICK)
        b = ex.run_copy_training(SMALL, 11, QUICK)
        assert a.steps == b.steps == 8
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert a.losses == b.losses

    def test_losses_finite_and_meta(self):
        r = ex.run_copy_training(SMALL, 2, QUICK)
        assert all(math.isfinite(x) for x in r.losses)
        m = r.meta()
        assert m["seed"] == 2 and m["train"]["learning_rate"] == QUICK.learning_rate and not m["converged"]

    def test_context_guard(self):
        with pytest.raises(ValueError):
            ex.run_copy_training(ModelConfig(max_context=20), 0, QUICK.__class__(length_range=(1, 16)))

    def test_learning_rate_schedule(self):
        t = ex.CopyTrainConfig(learning_rate=1e-3, min_learning_rate=1e-5, decay_steps=100)
        assert t.learning_rate_at(0) == pytest.approx(1e-3, abs=1e-18)
        assert t.learning_rate_at(50) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)
        assert t.learning_rate_at(100) == t.learning_rate_at(10_000) == pytest.approx(1e-5, rel=1e-12)
        rates = [t.learning_rate_at(s) for s in range(101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        flat = ex.CopyTrainConfig(decay_steps=0)
        assert flat.learning_rate_at(7) == flat.learning_rate

    def test_length_probabilities(self):
        ns, p = ex.CopyTrainConfig(length_range=(1, 16)).length_probs()
        # P(n) = n / (1 + ... + 16) = n / 136
        assert ns.tolist() == list(range(1, 17))
        np.testing.assert_allclose(p, ns / 136, rtol=1e-15)
        _, q = ex.CopyTrainConfig(length_range=(3, 6), length_sampling="uniform").length_probs()
        np.testing.assert_allclose(q, [0.25] * 4, rtol=1e-15)
        with pytest.raises(ValueError):
            ex.CopyTrainConfig(length_sampling="geometric").length_probs()

    def test_bucketed_batches_share_a_length(self, monkeypatch):
        seen = []
        real = ex.copy_loss_fn
        monkeypatch.setattr(ex, "copy_loss_fn", lambda c, b, f: seen.append({len(x) for x in b}) or real(c, b, f))
        ex.run_copy_training(SMALL, 3, ex.CopyTrainConfig(
            batch_size=6, length_range=(1, 4), max_steps=5, eval_every=5, held_out_count=2,
            held_out_length=4, bucket_lengths=True))
        assert len(seen) == 5 and all(len(s) == 1 for s in seen)

    def test_batch_layout(self):
        inp, tgt, w = ex.copy_sequences([np.array([1, 0]), np.array([1])])
        # "10|10" shifted by one; the second row is "1|1" padded
        assert inp.tolist() == [[1, 0, 2, 1], [1, 2, 0, 0]]
        assert tgt.tolist() == [[0, 2, 1, 0], [2, 1, 0, 0]]
        assert w.tolist() == [[0, 0, 1, 1], [0, 1, 0, 0]]


def _saturated_copy_model():
    """A model that puts almost all mass on symbol 0 at every position.

    All token embeddings are equal, so every position carries the same final
    hidden state h.  An identity readout exposes log softmax(h) = h - c, and the
    centred vector w = h - mean(h) satisfies w.h = |w|^2, so a readout column
    60 w / |w|^2 gives symbol 0 a logit margin of 60.
    """
    p = init_params(SMALL, 0)
    p["tok_emb"] = np.tile(np.random.default_rng(1).normal(size=SMALL.d_model), (SMALL.vocab_size, 1))
    probe = {k: Tensor(v) for k, v in p.items()}
    probe["w_out"] = Tensor(np.eye(SMALL.d_model))
    u = np.log(forward_tensors(probe, SMALL, np.array([[0]])).data[0, 0])
    w = u - u.mean()
    p["w_out"] = np.zeros((SMALL.d_model, SMALL.vocab_size))
    p["w_out"][:, 0] = 60.0 * w / (w @ w)
    return p


class TestCopySweep:
    def test_single_length(self):
        sw = ex.run_copy_sweep(init_params(SMALL, 0), SMALL, [8])
        assert len(sw.rows) == 1 and set(sw.traces) == {(8, "alpha"), (8, "beta")}

    def test_rows_consistent_with_traces(self):
        params = init_params(SMALL, 3)
        sw = ex.run_copy_sweep(params, SMALL, [4, 8, 16], pattern="01", flip_pos=1)
        for r in sw.rows:
            ta, tb = sw.traces[(r.N, "alpha")], sw.traces[(r.N, "beta")]
            np.testing.assert_array_equal(ta.bits, make_alpha(r.N, "01"))
            np.testing.assert_array_equal(tb.bits, make_beta(make_alpha(r.N, "01"), 1))
            assert r.alpha_correct == bool(np.array_equal(ta.emitted, ta.bits))
            assert r.pplx_alpha == pytest.approx(-np.log(np.maximum(ta.target_probs, 1e-12)).mean(), abs=1e-12)
            assert r.linf_gap == np.abs(ta.distributions - tb.distributions).max()
            assert r.flip_prob_beta == tb.distributions[1, tb.bits[1]]
            assert r.regime in {x.value for x in Regime}
            assert r.pplx_gap == abs(r.pplx_alpha - r.pplx_beta)

    def test_saturated_model(self):
        p = _saturated_copy_model()
        sw = ex.run_copy_sweep(p, SMALL, [4, 16])
        for r in sw.rows:
            assert r.alpha_correct and not r.beta_correct
            assert r.min_prob_alpha == 1.0
            assert r.flip_prob_beta < 1e-20
            # outputs ignore the input entirely, so alpha and beta traces coincide
            assert r.linf_gap == 0.0 and r.regime == Regime.COLLAPSE.value

    def test_guards(self):
        with pytest.raises(ValueError):
            ex.run_copy_sweep(init_params(SMALL, 0), SMALL, [])
        with pytest.raises(ValueError):
            ex.run_copy_sweep(init_params(SMALL, 0), SMALL, [64])


class TestGradSweep:
    def test_perfect_fit_has_vanishing_gradient(self):
        (row,) = ex.run_grad_norm_sweep(_saturated_copy_model(), SMALL, [8])
        assert row.loss_alpha < 1e-20 and row.grad_norm_alpha < 1e-20
        # beta's last bit is a confident miss: large loss, and the clamp kills its gradient
        assert row.loss_beta == pytest.approx(12 * math.log(10) / 8, rel=1e-9)

    def test_random_model_order_one(self):
        rows = ex.run_grad_norm_sweep(init_params(SMALL, 4), SMALL, [4, 8, 16])
        for r in rows:
            assert 1e-3 < r.grad_norm_alpha < 1e3 and 1e-3 < r.grad_norm_beta < 1e3
            assert r.loss_beta == pytest.approx(math.log(3), abs=0.2)

    def test_grad_norm_helper(self):
        assert ex.grad_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


class TestParity:
    def test_default_schedule(self):
        t = ex.ParityTrainConfig()
        assert t.steps // t.checkpoint_every == 50 and t.batch_size == 128

    def test_checkpoints_and_determinism(self):
        cfg = ex.parity_config(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_context=40)
        train = ex.ParityTrainConfig(steps=30, checkpoint_every=10, batch_size=8)
        seen = []
        a, la = ex.run_parity_training(cfg, 1, train, on_checkpoint=seen.append)
        b, lb = ex.run_parity_training(cfg, 1, train)
        assert [c.step for c in a] == [10, 20, 30] and seen == a
        assert la == lb and all(x.params[k].tobytes() == y.params[k].tobytes()
                                for x, y in zip(a, b) for k in x.params)

    def test_learning_improves_iid_f1(self):
        cfg = ex.parity_config(d_model=32, d_ff=64, n_heads=2, max_context=32)
        train = ex.ParityTrainConfig(steps=300, checkpoint_every=300, batch_size=64)
        ckpts, _ = ex.run_parity_training(cfg, 0, train)
        sets = ex.parity_eval_sets(0, 256, 16, ood_length=32)
        init = ex.ParityCheckpoint(0, init_params(cfg, 123))
        evals, _, _ = ex.eval_checkpoints([init, *ckpts], cfg, sets.iid, sets.ood)
        iid = [e for e in evals if e.split == "IID"]
        assert iid[-1].f1 > iid[0].f1

    def test_single_checkpoint_degenerate(self):
        cfg = ex.parity_config(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_context=40)
        sets = ex.parity_eval_sets(0, 8, 4, ood_length=20)
        _, summary, _ = ex.eval_checkpoints([ex.ParityCheckpoint(100, init_params(cfg, 0))], cfg, sets.iid, sets.ood)
        assert summary["IID"].degenerate and summary["IID"].r is None
        assert summary["IID"].best_f1_step == summary["IID"].best_L_step == 100

    def test_scoring_modes(self):
        cfg = ex.parity_config(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_context=40)
        data = ex.parity_eval_sets(2, 20, 2, ood_length=20).iid
        p = init_params(cfg, 5)
        L_all, f_all, _, preds = ex.evaluate_parity(p, cfg, data, "all_positions")
        L_fin, f_fin, _, _ = ex.evaluate_parity(p, cfg, data, "final_only")
        hits = [int(pr[-1] == x.running_parity[-1]) for pr, x in zip(preds, data)]
        assert f_fin == pytest.approx(np.mean(hits))
        allhits = np.concatenate([pr == x.running_parity for pr, x in zip(preds, data)])
        assert f_all == pytest.approx(allhits.mean())
        with pytest.raises(ValueError):
            ex.evaluate_parity(p, cfg, data, "middle")

    def test_eval_sets_disjoint_streams(self):
        s = ex.parity_eval_sets(0)
        assert len(s.iid) == 512 and len(s.ood) == 128
        assert {len(x.bits) for x in s.ood} == {128}
        assert max(len(x.bits) for x in s.iid) <= 16


def test_rank_trend():
    assert ex.rank_trend([16, 32, 64], [3.0, 2.0, 1.0]) == pytest.approx(-1.0)
