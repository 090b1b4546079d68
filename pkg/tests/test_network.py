"""Numerical core: init, forward, NLL, exact gradients, Adam, training loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rulens.config import TrainingConfig
from rulens.errors import DivergenceError
from rulens.network import (VAR_FLOOR, Architecture, GaussianSeqPrediction,
                            PnnParams, adam_step, batch_loss, clip_global_norm,
                            finite_diff_check, forward, gaussian_nll, grad,
                            init_adam, init_params, train_pnn)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _zero_params(arch: Architecture) -> PnnParams:
    params = init_params(arch, seed=0)
    for arr in params.arrays.values():
        arr[:] = 0.0
    return params


class TestArchitecture:
    def test_dense_head_must_be_two_wide(self):
        with pytest.raises(ValueError, match="2-unit"):
            Architecture(input_dim=4, dense_layers=(3,))

    def test_needs_recurrent_layer(self):
        with pytest.raises(ValueError):
            Architecture(input_dim=4, recurrent_layers=())

    def test_param_count_matches_shape_formula(self):
        # independent oracle: 4*(in + h + 1)*h per recurrent layer,
        # (in + 1)*out per dense layer
        def oracle(input_dim, rec, dense):
            total, width = 0, input_dim
            for h in rec:
                total += 4 * (width + h + 1) * h
                width = h
            for d in dense:
                total += (width + 1) * d
                width = d
            return total

        cases = [(18, (32, 16), (2,)), (3, (4,), (2,)), (7, (5, 5, 5), (4, 2))]
        for input_dim, rec, dense in cases:
            arch = Architecture(input_dim, rec, dense)
            assert arch.n_params() == oracle(input_dim, rec, dense)
        assert Architecture(18, (32, 16), (2,)).n_params() == 9698

    def test_shapes_roundtrip_through_dict(self):
        arch = Architecture(5, (6, 3), (4, 2))
        assert Architecture.from_dict(arch.to_dict()) == arch


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_params(Architecture(4, (5,), (2,)), seed=123)
        b = init_params(Architecture(4, (5,), (2,)), seed=123)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)

    def test_different_seeds_differ(self):
        a = init_params(Architecture(4, (5,), (2,)), seed=1)
        b = init_params(Architecture(4, (5,), (2,)), seed=2)
        assert any(not np.array_equal(a.arrays[k], b.arrays[k])
                   for k in a.arrays)

    def test_forget_gate_bias_is_one_rest_zero(self):
        params = init_params(Architecture(4, (6, 3), (2,)), seed=0)
        for k, hidden in enumerate((6, 3)):
            b = params.arrays[f"lstm{k}.b"]
            assert np.all(b[hidden:2 * hidden] == 1.0)
            assert np.all(b[:hidden] == 0.0)
            assert np.all(b[2 * hidden:] == 0.0)
        assert np.all(params.arrays["dense0.b"] == 0.0)

    def test_weight_scale_respects_fan_in(self):
        params = init_params(Architecture(100, (8,), (2,)), seed=7)
        w = params.arrays["lstm0.w_x"]
        assert np.abs(w).max() <= 1.0 / np.sqrt(100)

    def test_negative_seed_accepted(self):
        params = init_params(Architecture(2, (3,), (2,)), seed=-1)
        assert np.isfinite(params.arrays["lstm0.w_x"]).all()


class TestForward:
    def test_zero_network_outputs_softplus_floor(self):
        params = _zero_params(Architecture(3, (4,), (2,)))
        pred = forward(params, np.zeros((5, 3)))
        assert np.all(pred.means == 0.0)
        assert np.allclose(pred.variances, np.log(2.0) + VAR_FLOOR)

    def test_causality_prefix_invariance(self):
        # prefix outputs must match the full run at shared steps; tolerance
        # is rounding-level only (the input projection is batched over T, so
        # BLAS blocking can flip last bits between differently sized calls)
        params = init_params(Architecture(3, (4, 3), (2,)), seed=5)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 3))
        full = forward(params, x)
        for t in (1, 3):
            part = forward(params, x[:t])
            assert np.allclose(part.means, full.means[:t], rtol=1e-12, atol=1e-14)
            assert np.allclose(part.variances, full.variances[:t],
                               rtol=1e-12, atol=1e-14)

    def test_future_edits_do_not_change_past_outputs(self):
        # editing inputs at times > t leaves the prediction at t bit-identical
        # (same sequence length, so the batched projection takes one code path)
        params = init_params(Architecture(3, (4, 3), (2,)), seed=5)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        edited = x.copy()
        edited[4:] += 100.0
        a, b = forward(params, x), forward(params, edited)
        assert np.array_equal(a.means[:4], b.means[:4])
        assert np.array_equal(a.variances[:4], b.variances[:4])
        assert not np.allclose(a.means[4:], b.means[4:])

    def test_variance_positive_over_many_draws(self):
        # 10^4 random (net, input) draws including saturating magnitudes
        from rulens.network import _forward_batch

        rng = np.random.default_rng(99)
        for _ in range(10):
            params = init_params(Architecture(3, (4,), (2,)),
                                 seed=int(rng.integers(0, 2**31)))
            scale = rng.choice([0.3, 3.0, 300.0])
            x = rng.normal(scale=scale, size=(1000, 6, 3))
            mu, var, _ = _forward_batch(params, x, keep_cache=False)
            assert np.isfinite(mu).all()
            assert np.isfinite(var).all()
            assert np.all(var > 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_outputs_finite_variances_positive(self, seed):
        rng = np.random.default_rng(seed)
        params = init_params(Architecture(3, (4,), (2,)), seed=seed)
        # occasionally large inputs to probe saturation
        x = rng.normal(scale=rng.choice([0.5, 3.0, 30.0]), size=(7, 3))
        pred = forward(params, x)
        assert np.isfinite(pred.means).all()
        assert np.isfinite(pred.variances).all()
        assert np.all(pred.variances > 0)

    def test_input_validation(self):
        params = init_params(Architecture(3, (4,), (2,)), seed=0)
        with pytest.raises(ValueError, match="features"):
            forward(params, np.zeros((5, 2)))
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, np.full((5, 3), np.nan))
        with pytest.raises(ValueError):
            forward(params, np.zeros((0, 3)))


class TestNll:
    def test_unit_variance_zero_residual(self):
        pred = GaussianSeqPrediction(np.array([1.0, 2.0]), np.ones(2))
        assert gaussian_nll(pred, np.array([1.0, 2.0])) == \
            pytest.approx(HALF_LOG_2PI)

    def test_log_variance_term(self):
        pred = GaussianSeqPrediction(np.zeros(3), np.full(3, np.e ** 2))
        assert gaussian_nll(pred, np.zeros(3)) == pytest.approx(1 + HALF_LOG_2PI)

    def test_residual_term(self):
        pred = GaussianSeqPrediction(np.full(4, 2.0), np.ones(4))
        assert gaussian_nll(pred, np.zeros(4)) == pytest.approx(2 + HALF_LOG_2PI)

    def test_unit_variance_reduces_to_half_mse_exactly(self):
        # with variances frozen at 1 the loss is half squared error plus the
        # normalizing constant, with no tolerance at all
        rng = np.random.default_rng(3)
        mu, y = rng.normal(size=7), rng.normal(size=7)
        val = gaussian_nll(GaussianSeqPrediction(mu, np.ones(7)), y)
        assert val == float(np.mean(0.5 * (mu - y) ** 2 + HALF_LOG_2PI))

    def test_rejects_nonpositive_variance(self):
        pred = GaussianSeqPrediction(np.zeros(2), np.array([1.0, 0.0]))
        with pytest.raises(ValueError):
            gaussian_nll(pred, np.zeros(2))


def random_small_net(rng):
    """Random PNN (<= 200 params) and batch with healthy gradient magnitudes.

    Inputs and targets are biased positive so per-coordinate gradient sums do
    not cancel toward the 1e-8 clamp of the relative-error formula, where
    finite-difference roundoff would dominate. Shared with the acceptance
    suite's gradient criterion.
    """
    while True:
        f = int(rng.integers(1, 4))
        rec = tuple(int(rng.integers(2, 5)) for _ in range(int(rng.integers(1, 3))))
        dense = (3, 2) if rng.random() < 0.5 else (2,)
        arch = Architecture(f, rec, dense)
        if arch.n_params() <= 200:
            break
    params = init_params(arch, seed=int(rng.integers(0, 2**31)))
    b = int(rng.integers(1, 4))
    x = rng.normal(loc=1.0, scale=0.5, size=(b, 8, f))
    y = rng.normal(loc=6.0, scale=2.0, size=(b, 8))
    return params, x, y


# perturbation for the finite-difference oracle: measured optimum of the
# truncation-vs-roundoff tradeoff for losses at this scale
CHECK_EPS = 5e-4


class TestGrad:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(237)
        worst = 0.0
        for _ in range(20):
            params, x, y = random_small_net(rng)
            worst = max(worst, finite_diff_check(params, x, y, CHECK_EPS))
        assert worst < 1e-4

    def test_quadratic_surrogate_is_machine_exact(self):
        # all weights zero and zero inputs: the loss is constant along every
        # weight axis and quadratic along the mean bias, so the symmetric
        # difference has no truncation error, only roundoff
        arch = Architecture(2, (3,), (2,))
        params = _zero_params(arch)
        params.arrays["dense0.b"][:] = [0.3, 0.2]
        x = np.zeros((1, 4, 2))
        y = np.full((1, 4), 0.5)
        assert finite_diff_check(params, x, y, 1e-5) < 1e-9

    def test_zero_residual_kills_mean_path_gradient(self):
        # exactly-zero network on zero targets: residual is 0, so only the
        # variance bias receives gradient
        params = _zero_params(Architecture(2, (3,), (2,)))
        grads, _ = grad(params, np.zeros((2, 4, 2)), np.zeros((2, 4)))
        assert grads["dense0.b"][0] == 0.0
        assert grads["dense0.b"][1] > 0.0
        assert all(np.all(g == 0.0) for k, g in grads.items()
                   if k != "dense0.b")

    def test_gradient_of_mean_loss_scales_with_batch(self):
        arch = Architecture(2, (3,), (2,))
        params = init_params(arch, seed=1)
        x = np.random.default_rng(2).normal(size=(1, 4, 2))
        y = np.zeros((1, 4))
        g1, l1 = grad(params, x, y)
        g2, l2 = grad(params, np.repeat(x, 2, axis=0), np.repeat(y, 2, axis=0))
        assert l1 == pytest.approx(l2)
        for k in g1:
            assert np.allclose(g1[k], g2[k])

    def test_divergence_reports_sample_index(self):
        arch = Architecture(2, (3,), (2,))
        params = init_params(arch, seed=1)
        x = np.zeros((3, 4, 2))
        y = np.zeros((3, 4))
        y[2] = 1e200  # residual overflows for this sample only
        with pytest.raises(DivergenceError) as err:
            grad(params, x, y)
        assert err.value.sample_index == 2

    def test_finite_diff_check_guards(self):
        arch = Architecture(2, (3,), (2,))
        params = init_params(arch, seed=0)
        x, y = np.zeros((1, 3, 2)), np.zeros((1, 3))
        with pytest.raises(ValueError, match="epsilon"):
            finite_diff_check(params, x, y, 0.0)
        big = init_params(Architecture(18, (40, 20), (2,)), seed=0)
        assert big.arch.n_params() > 10000
        with pytest.raises(ValueError, match="10000"):
            finite_diff_check(big, np.zeros((1, 3, 18)), np.zeros((1, 3)))


class TestAdam:
    def _setup(self):
        params = init_params(Architecture(2, (3,), (2,)), seed=3)
        return params, init_adam(params, TrainingConfig())

    def test_first_step_is_signed_learning_rate(self):
        params, state = self._setup()
        grads = {k: np.full_like(v, 0.25) for k, v in params.arrays.items()}
        grads["lstm0.w_x"][0, 0] = -0.25
        new, state = adam_step(params, grads, state)
        delta = new.arrays["lstm0.w_x"] - params.arrays["lstm0.w_x"]
        assert delta[0, 0] == pytest.approx(0.001, rel=1e-6)
        assert delta[0, 1] == pytest.approx(-0.001, rel=1e-6)
        assert state.step == 1

    def test_zero_gradient_from_fresh_state_is_identity(self):
        params, state = self._setup()
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        new, _ = adam_step(params, zeros, state)
        assert all(np.array_equal(new.arrays[k], params.arrays[k])
                   for k in params.arrays)

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        params, state = self._setup()
        grads = {k: np.full_like(v, 0.7) for k, v in params.arrays.items()}
        prev = params
        for _ in range(300):
            params, state = adam_step(params, grads, state)
            step = params.arrays["dense0.w"] - prev.arrays["dense0.w"]
            prev = params
        assert np.allclose(np.abs(step), 0.001, rtol=1e-4)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        clipped, norm = clip_global_norm(grads, 2.5)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(np.sum(g * g) for g in clipped.values()))
        assert total == pytest.approx(2.5)
        same, norm2 = clip_global_norm(grads, 10.0)
        assert norm2 == pytest.approx(5.0)
        assert same is grads


class TestTrainLoop:
    def _data(self, n=40, t=6, f=2, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, t, f))
        y = x.sum(axis=-1) + 0.1 * rng.normal(size=(n, t))
        return x, y

    def test_deterministic_bitwise(self):
        x, y = self._data()
        arch = Architecture(2, (4,), (2,))
        cfg = TrainingConfig(max_epochs=4, batch_size=8)
        a, ha = train_pnn(arch, (x, y), cfg, seed=11)
        b, hb = train_pnn(arch, (x, y), cfg, seed=11)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        assert ha.epoch_losses == hb.epoch_losses

    def test_loss_decreases_on_learnable_data(self):
        x, y = self._data(n=80)
        cfg = TrainingConfig(max_epochs=12, batch_size=16)
        _, hist = train_pnn(Architecture(2, (6,), (2,)), (x, y), cfg, seed=1)
        assert hist.epoch_losses[-1] < hist.epoch_losses[0]

    def test_stop_reason_max_epochs(self):
        x, y = self._data()
        cfg = TrainingConfig(max_epochs=3, early_stop_start=35, patience=3)
        _, hist = train_pnn(Architecture(2, (3,), (2,)), (x, y), cfg, seed=2)
        assert hist.stop_reason == "max_epochs"
        assert hist.stop_epoch == 3
        assert len(hist.epoch_losses) == 3

    def test_early_stop_fires_after_patience_without_improvement(self):
        # frozen parameters (lr=0): epoch losses only jitter at ulp level
        # from shuffle-order rounding, so the plateau watcher must fire
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4, 2))
        y = np.zeros((30, 4))
        cfg = TrainingConfig(max_epochs=100, early_stop_start=6, patience=3,
                             learning_rate=0.0)
        _, hist = train_pnn(Architecture(2, (3,), (2,)), (x, y), cfg, seed=3)
        assert hist.stop_reason == "early_stop"
        assert hist.stop_epoch >= cfg.early_stop_start
        assert len(hist.epoch_losses) == hist.stop_epoch
        # firing requires `patience` consecutive epochs that failed to beat
        # the best, so the best epoch must predate that streak
        assert hist.best_epoch <= hist.stop_epoch - cfg.patience
        tail = hist.epoch_losses[hist.stop_epoch - cfg.patience:]
        assert all(loss >= hist.best_loss for loss in tail)

    def test_returns_best_snapshot(self):
        x, y = self._data(n=60)
        cfg = TrainingConfig(max_epochs=10, batch_size=16)
        params, hist = train_pnn(Architecture(2, (4,), (2,)), (x, y), cfg, seed=4)
        assert hist.best_loss == min(hist.epoch_losses)
        assert hist.best_epoch == int(np.argmin(hist.epoch_losses)) + 1
        assert hist.stop_epoch <= cfg.max_epochs

    def test_divergence_carries_epoch(self):
        x, y = self._data(n=20)
        y[3] = 1e200
        cfg = TrainingConfig(max_epochs=2)
        with pytest.raises(DivergenceError) as err:
            train_pnn(Architecture(2, (3,), (2,)), (x, y), cfg, seed=0)
        assert err.value.epoch == 1

    def test_accepts_window_samples(self):
        from rulens.cmapss import WindowSample
        x, y = self._data(n=8)
        windows = [WindowSample(1, i, x[i], y[i]) for i in range(8)]
        cfg = TrainingConfig(max_epochs=2, batch_size=4)
        params, hist = train_pnn(Architecture(2, (3,), (2,)), windows, cfg, 7)
        direct, hist2 = train_pnn(Architecture(2, (3,), (2,)), (x, y), cfg, 7)
        assert all(np.array_equal(params.arrays[k], direct.arrays[k])
                   for k in params.arrays)

    def test_batch_loss_matches_grad_loss(self):
        x, y = self._data(n=6)
        arch = Architecture(2, (3,), (2,))
        params = init_params(arch, seed=9)
        _, loss = grad(params, x, y)
        assert batch_loss(params, x, y) == pytest.approx(loss, rel=1e-12)
