"""Loss closed forms, batch-loss oracle, optimizer, schedule, loop."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqgeo import autodiff as ad
from seqgeo.autodiff import Matrix, Tape
from seqgeo.rng import make_rng
from seqgeo.tfam import DropoutMask, TfamConfig, TfamParams
from seqgeo.training import (AdamState, PairBatch, PairDataset, TrainConfig,
                             adam_step, exhaustive_batch_loss,
                             exhaustive_triplet_loss_graph, l2_normalize,
                             lr_schedule, train, triplet_loss)

from oracles import reference_batch_loss


class TestL2Normalize:
    def test_three_four_five(self):
        assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_idempotent_on_unit_vectors(self):
        v = l2_normalize(make_rng(0).normal(size=16))
        assert np.allclose(l2_normalize(v), v, atol=1e-12)

    def test_norm_one_sweep(self):
        rng = make_rng(1)
        for _ in range(1000):
            v = l2_normalize(rng.normal(size=int(rng.integers(2, 64))))
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            l2_normalize(np.zeros(8))


class TestTripletLoss:
    def test_equal_distances_ln2(self):
        assert abs(triplet_loss(0.7, 0.7, 10.0) - math.log(2.0)) < 1e-12
        assert abs(triplet_loss(0.0, 0.0, 3.0) - math.log(2.0)) < 1e-12

    def test_large_negative_margin(self):
        # d_pos=0, d_neg=2, gamma=10 -> log(1 + e^-20)
        expected = math.log1p(math.exp(-20.0))
        assert abs(triplet_loss(0.0, 2.0, 10.0) - expected) < 1e-13
        assert expected == pytest.approx(2.0612e-9, rel=1e-3)

    def test_positive_margin(self):
        # d_pos=0.5, d_neg=0.3, gamma=10 -> log(1 + e^2)
        assert triplet_loss(0.5, 0.3, 10.0) == pytest.approx(2.126928, abs=1e-6)

    def test_monotone_in_margin(self):
        prev = -1.0
        for margin in np.linspace(-3.9, 3.9, 41):
            val = triplet_loss(2.0 + margin / 2, 2.0 - margin / 2, 4.0)
            assert val > prev
            prev = val

    @given(d_pos=st.floats(0, 10), d_neg=st.floats(0, 10),
           gamma=st.floats(0.1, 50))
    @settings(deadline=None)
    def test_bounded_below_property(self, d_pos, d_neg, gamma):
        val = triplet_loss(d_pos, d_neg, gamma)
        assert val >= 0.0
        assert math.isfinite(val)
        if d_pos == d_neg:
            assert abs(val - math.log(2.0)) < 1e-12

    def test_bounded_below_and_vanishing(self):
        assert triplet_loss(0.0, 10.0, 10.0) >= 0.0
        assert triplet_loss(0.0, 10.0, 10.0) < 1e-40

    def test_gamma_scaling_sign_dependence(self):
        # growing gamma raises the loss when d_pos > d_neg, lowers it when
        # d_pos < d_neg
        assert triplet_loss(0.8, 0.5, 20.0) > triplet_loss(0.8, 0.5, 10.0)
        assert triplet_loss(0.5, 0.8, 20.0) < triplet_loss(0.5, 0.8, 10.0)

    def test_rejects_negative_distances(self):
        with pytest.raises(ValueError):
            triplet_loss(-0.1, 1.0, 10.0)


class TestExhaustiveBatchLoss:
    def test_orthonormal_toy_batch(self):
        # g_i == a_i, a_1 and a_2 orthonormal: every one of the 4 triplets
        # has d_pos=0 and d_neg=sqrt(2)
        g = Matrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        a = Matrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        loss = exhaustive_triplet_loss_graph(g, a, gamma=10.0).item()
        expected = float(np.logaddexp(0.0, -10.0 * math.sqrt(2.0)))
        assert abs(loss - expected) < 1e-12
        assert loss == pytest.approx(7.2e-7, rel=0.01)

    def test_identical_features_give_ln2(self):
        rng = make_rng(2)
        row = rng.normal(size=8)
        g = Matrix(np.tile(row, (5, 1)))
        a = Matrix(np.tile(row, (5, 1)))
        assert abs(exhaustive_triplet_loss_graph(g, a, 10.0).item()
                   - math.log(2.0)) < 1e-12

    def test_matches_four_loop_oracle(self):
        rng = make_rng(3)
        for _ in range(5):
            g = rng.normal(size=(8, 12))
            a = rng.normal(size=(8, 12))
            got = exhaustive_triplet_loss_graph(Matrix(g.copy()),
                                                Matrix(a.copy()), 10.0).item()
            assert abs(got - reference_batch_loss(g, a, 10.0)) < 1e-12

    def test_invariant_under_pair_permutation(self):
        rng = make_rng(4)
        g = rng.normal(size=(6, 10))
        a = rng.normal(size=(6, 10))
        perm = rng.permutation(6)
        base = exhaustive_triplet_loss_graph(Matrix(g), Matrix(a), 10.0).item()
        shuffled = exhaustive_triplet_loss_graph(Matrix(g[perm]),
                                                 Matrix(a[perm]), 10.0).item()
        assert abs(base - shuffled) < 1e-12

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="negatives"):
            exhaustive_triplet_loss_graph(Matrix(np.ones((1, 4))),
                                          Matrix(np.ones((1, 4))), 10.0)

    def test_through_model_matches_oracle(self):
        # aggregate with the real forward, then compare against the loop
        # oracle applied to the pooled features
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)
        rng = make_rng(5)
        params = TfamParams.init(cfg, rng)
        embs = [rng.normal(size=(5, 8)) for _ in range(4)]
        masks = [DropoutMask.full(5)] * 4
        aerial = [rng.normal(size=8) for _ in range(4)]
        bound = params.bind(None)
        batch = PairBatch(ground=[(Matrix(e), m) for e, m in zip(embs, masks)],
                          aerial=aerial)
        got = exhaustive_batch_loss(batch, bound, cfg, 10.0).item()
        from seqgeo.tfam import tfam_forward
        pooled = np.vstack([tfam_forward(Matrix(e), m, bound, cfg)[1].array
                            for e, m in zip(embs, masks)])
        assert abs(got - reference_batch_loss(pooled, np.vstack(aerial), 10.0)) < 1e-12


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = np.array([[1.0]])
        state = AdamState.init([p])
        adam_step([p], [np.array([[1.0]])], state, t=1, lr=1e-3)
        assert abs((1.0 - p[0, 0]) - 1e-3) < 1e-9

    def test_zero_gradient_no_motion(self):
        p = np.full((3, 3), 2.5)
        state = AdamState.init([p])
        adam_step([p], [np.zeros((3, 3))], state, t=1, lr=1e-2,
                  weight_decay=0.0)
        assert np.array_equal(p, np.full((3, 3), 2.5))

    def test_non_finite_gradient_refused(self):
        p = np.ones((2, 2))
        state = AdamState.init([p])
        bad = np.array([[1.0, np.nan], [0.0, 0.0]])
        with pytest.raises(ValueError, match="non-finite"):
            adam_step([p], [bad], state, t=1, lr=1e-3)
        assert np.array_equal(p, np.ones((2, 2)))

    def test_coupled_decay_pulls_toward_zero(self):
        p = np.array([[10.0]])
        state = AdamState.init([p])
        adam_step([p], [np.zeros((1, 1))], state, t=1, lr=1e-2,
                  weight_decay=0.1)
        assert p[0, 0] < 10.0


class TestSchedule:
    CFG = TrainConfig(epochs=50, lr_start=1e-5, lr_end=5e-7,
                      decay_start_epoch=30)

    def test_initial_plateau(self):
        assert lr_schedule(0, self.CFG) == 1e-5
        assert lr_schedule(29, self.CFG) == 1e-5

    def test_endpoint(self):
        assert lr_schedule(49, self.CFG) == pytest.approx(5e-7, abs=1e-12)

    def test_linear_in_between(self):
        mid = lr_schedule(40, self.CFG)
        expected = 1e-5 + (5e-7 - 1e-5) * (40 - 30) / (49 - 30)
        assert mid == pytest.approx(expected, rel=1e-12)

    def test_monotone_decay(self):
        vals = [lr_schedule(e, self.CFG) for e in range(50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_epoch_range_validated(self):
        with pytest.raises(ValueError):
            lr_schedule(50, self.CFG)


def tiny_dataset(n=8, t=5, d=8, seed=6):
    rng = make_rng(seed)
    aerial = rng.normal(size=(n, d))
    aerial /= np.linalg.norm(aerial, axis=1, keepdims=True)
    ground = np.stack([np.tile(a, (t, 1)) + 0.1 * rng.normal(size=(t, d))
                       for a in aerial])
    return PairDataset(ground=ground.astype(np.float32),
                       aerial=aerial.astype(np.float32))


class TestTrainLoop:
    def test_overfits_one_fixed_batch(self):
        dataset = tiny_dataset()
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)
        tc = TrainConfig(gamma=10.0, batch_size=8, epochs=500, lr_start=3e-3,
                         lr_end=3e-3, decay_start_epoch=500, weight_decay=0.0,
                         j_max_dropped=0, seed=11, max_steps=500)
        params, metrics = train(dataset, cfg, tc)
        assert metrics[-1].mean_loss < 0.1 * metrics[0].mean_loss

    def test_dropout_isolation_with_forced_masks(self):
        # identical forced masks make a J=0 run and a J=6 run coincide
        dataset = tiny_dataset()
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)
        forced = [DropoutMask.full(5) for _ in range(len(dataset))]
        losses = []
        for j in (0, 4):
            tc = TrainConfig(batch_size=4, epochs=3, lr_start=1e-3,
                             lr_end=1e-3, decay_start_epoch=3,
                             j_max_dropped=j, seed=21)
            _, metrics = train(dataset, cfg, tc, forced_masks=forced)
            losses.append([m.mean_loss for m in metrics])
        assert losses[0] == losses[1]

    def test_determinism_bit_identical_params(self):
        dataset = tiny_dataset()
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)

        def run():
            tc = TrainConfig(batch_size=4, epochs=50, lr_start=1e-3,
                             lr_end=1e-3, decay_start_epoch=50,
                             j_max_dropped=3, seed=31, max_steps=100)
            params, _ = train(dataset, cfg, tc)
            return params.matrices()

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)

    def test_f64_training_supported(self):
        dataset = tiny_dataset()
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)
        tc = TrainConfig(batch_size=4, epochs=2, lr_start=1e-3, lr_end=1e-3,
                         decay_start_epoch=2, j_max_dropped=0, seed=1,
                         dtype="f64")
        params, metrics = train(dataset, cfg, tc)
        assert params.w_o[0].dtype == np.float64
        assert np.isfinite(metrics[-1].mean_loss)


class TestGradientThroughModel:
    def test_full_model_gradcheck_small(self):
        # spot-check (the exhaustive per-entry sweep lives in acceptance)
        cfg = TfamConfig(seq_len=5, dim=8, n_heads=2, n_layers=1)
        rng = make_rng(13)
        params = TfamParams.init(cfg, rng)
        embs = [rng.normal(size=(5, 8)) for _ in range(3)]
        masks = [DropoutMask(bits=(1, 0, 1, 1, 1)), DropoutMask.full(5),
                 DropoutMask(bits=(1, 1, 1, 0, 1))]
        aerial = [rng.normal(size=8) for _ in range(3)]

        def loss_value():
            batch = PairBatch(ground=[(Matrix(e), m) for e, m in zip(embs, masks)],
                              aerial=aerial)
            return exhaustive_batch_loss(batch, params.bind(None), cfg, 10.0).item()

        tape = Tape()
        bound = params.bind(tape)
        batch = PairBatch(ground=[(Matrix(e), m) for e, m in zip(embs, masks)],
                          aerial=aerial)
        loss = exhaustive_batch_loss(batch, bound, cfg, 10.0)
        grads = ad.grad(loss, bound.all())

        mats = params.matrices()
        probe_rng = make_rng(14)
        h = 1e-5
        for _ in range(60):
            mi = int(probe_rng.integers(0, len(mats)))
            w, g = mats[mi], grads[mi]
            idx = tuple(int(probe_rng.integers(0, s)) for s in w.shape)
            keep = w[idx]
            w[idx] = keep + h
            f_plus = loss_value()
            w[idx] = keep - h
            f_minus = loss_value()
            w[idx] = keep
            fd = (f_plus - f_minus) / (2 * h)
            denom = max(abs(fd), abs(g[idx]), 1e-3)
            assert abs(fd - g[idx]) / denom < 1e-6
