import math

import numpy as np
import pytest

from fracritz.ansatz import ProblemSpec, SpecialNetParams, as_flat
from fracritz.core_ad import FnnParams, FnnShape
from fracritz.domain import Hypercube, halton_points
from fracritz.quadrature import loss_and_grad, sinc_scheme
from fracritz.training import (
    DivergenceError,
    QuadConfig,
    TrainConfig,
    init_params,
    sgd_step,
    train,
)


class TestInit:
    def test_deterministic(self):
        a = init_params(FnnShape(2, 10, 3), seed=42)
        b = init_params(FnnShape(2, 10, 3), seed=42)
        np.testing.assert_array_equal(a.to_flat(), b.to_flat())

    def test_seed_matters(self):
        a = init_params(FnnShape(2, 10, 3), seed=1)
        b = init_params(FnnShape(2, 10, 3), seed=2)
        assert not np.array_equal(a.to_flat(), b.to_flat())

    def test_decay_rates(self):
        p = init_params(FnnShape(2, 10, 3), seed=0)
        assert p.gamma1 == pytest.approx(0.5, rel=1e-15)
        assert p.gamma2 == pytest.approx(0.5, rel=1e-15)

    def test_bound(self):
        p = init_params(FnnShape(3, 100, 4), seed=3)
        assert np.all(np.abs(p.theta1.flat) <= 0.1)
        assert np.all(np.abs(p.theta2.flat) <= 0.1)

    def test_variance(self):
        # depth 10, width 100, input 101 -> just over 10^5 draws per network
        p = init_params(FnnShape(10, 100, 101), seed=5)
        draws = p.theta1.flat
        assert draws.size >= 100_000
        assert np.var(draws) == pytest.approx((2 / math.sqrt(100)) ** 2 / 12, rel=0.1)

    def test_literal_range(self):
        p = init_params(FnnShape(2, 16, 3), seed=0, init_range="literal")
        assert np.max(np.abs(p.theta1.flat)) > 1.0
        assert np.all(np.abs(p.theta1.flat) <= 4.0)

    def test_simple_kind(self):
        p = init_params(FnnShape(2, 4, 3), seed=0, kind="simple")
        assert isinstance(p, FnnParams)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            init_params(FnnShape(2, 4, 3), seed=0, kind="fancy")


class TestSgdStep:
    def test_zero_gradient(self):
        p = np.array([1.0, -2.0])
        np.testing.assert_array_equal(sgd_step(p, np.zeros(2), 0.3), p)

    def test_scalar(self):
        assert sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == pytest.approx(0.8, rel=1e-15)

    def test_quadratic(self):
        p0 = np.array([1.0])
        p1 = sgd_step(p0, p0, 0.5)  # gradient of p^2/2 is p
        assert p1[0] == 0.5
        assert 0.5 * p1[0] ** 2 < 0.5 * p0[0] ** 2

    def test_non_finite(self):
        with pytest.raises(FloatingPointError):
            sgd_step(np.zeros(2), np.array([0.0, np.nan]), 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(np.zeros(2), np.zeros(3), 0.1)


class TestTrainConfig:
    def test_schedule(self):
        cfg = TrainConfig(lr=0.4, lr_decay=0.5, lr_decay_every=10)
        assert cfg.learning_rate(0) == 0.4
        assert cfg.learning_rate(9) == 0.4
        assert cfg.learning_rate(10) == 0.2
        assert cfg.learning_rate(25) == 0.1

    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"batch_count": 0}, {"lr": -1.0}, {"lr_decay": 0.0},
        {"lr_decay_every": 0}, {"eval_every": 0}, {"init_range": "wide"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


SMALL = FnnShape(2, 6, 2)


def small_spec(s=0.5):
    return ProblemSpec(s, Hypercube.cube(1))


class TestTrain:
    def test_zero_rate_is_fixed_point(self):
        spec = small_spec()
        start = init_params(SMALL, seed=3)
        rep = train(spec, "special", SMALL, QuadConfig(h=0.5, n_points=64),
                    TrainConfig(epochs=1, lr=0.0, seed=3))
        np.testing.assert_array_equal(rep.params.to_flat(), start.to_flat())
        assert len(rep.loss_history) == 1
        assert len(rep.error_history) == 1

    def test_zero_rate_several_epochs(self):
        spec = small_spec()
        rep = train(spec, "special", SMALL, QuadConfig(h=0.5, n_points=64),
                    TrainConfig(epochs=3, batch_count=2, lr=0.0, seed=1))
        np.testing.assert_array_equal(rep.params.to_flat(), init_params(SMALL, 1).to_flat())
        values = [v for _, v in rep.loss_history]
        assert values == [values[0]] * 3

    def test_deterministic(self):
        spec = small_spec(0.3)
        cfg = TrainConfig(epochs=5, batch_count=2, lr=0.05, seed=7, eval_every=2)
        quad = QuadConfig(h=0.5, n_points=80)
        a = train(spec, "special", SMALL, quad, cfg)
        b = train(spec, "special", SMALL, quad, cfg)
        assert a.loss_history == b.loss_history
        assert a.error_history == b.error_history
        np.testing.assert_array_equal(a.params.to_flat(), b.params.to_flat())

    def test_history_cadence(self):
        rep = train(small_spec(), "simple", SMALL, QuadConfig(h=1.0, n_points=32),
                    TrainConfig(epochs=7, lr=0.01, record_every=2, eval_every=3))
        assert [e for e, _ in rep.loss_history] == [1, 2, 4, 6, 7]
        assert [e for e, _ in rep.error_history] == [1, 3, 6, 7]
        assert rep.final_error == rep.error_history[-1][1]
        assert rep.to_dict()["kind"] == "simple"

    def test_divergence_detected(self):
        with pytest.raises(DivergenceError):
            train(small_spec(), "special", SMALL, QuadConfig(h=0.5, n_points=64),
                  TrainConfig(epochs=50, lr=1e4, seed=0, divergence_factor=10.0))

    def test_callback_sees_every_step(self):
        seen = []
        train(small_spec(), "special", SMALL, QuadConfig(h=1.0, n_points=30),
              TrainConfig(epochs=2, batch_count=3, lr=0.01),
              callback=lambda epoch, losses, flat: seen.append((epoch, len(losses))))
        assert seen == [(0, 3), (1, 3)]

    def test_descent_smoke(self):
        spec = small_spec(0.5)
        rep = train(spec, "special", FnnShape(2, 16, 2), QuadConfig(n_points=2048),
                    TrainConfig(epochs=500, seed=0, eval_every=500))
        assert rep.loss_history[-1][1] < rep.loss_history[0][1]


class TestBatchGradient:
    def test_mean_of_batches_equals_full(self):
        spec = ProblemSpec(0.4, Hypercube.cube(2))
        params = init_params(FnnShape(2, 8, 3), seed=2)
        scheme = sinc_scheme(0.4, 0.5)
        sample = halton_points(spec.domain, 120, batch_count=4)
        _, full = loss_and_grad(params, spec, sample, scheme)
        parts = [loss_and_grad(params, spec, sample.batch(k), scheme)[1] for k in range(4)]
        # each batch is weighted by its own size, so weight the average accordingly
        sizes = np.array([len(b) for b in sample.batches], dtype=float)
        mean = sum(w * g for w, g in zip(sizes / sizes.sum(), parts))
        np.testing.assert_allclose(mean, full, rtol=1e-10, atol=1e-10 * np.abs(full).max())

    def test_equal_batches_plain_mean(self):
        spec = ProblemSpec(0.6, Hypercube.cube(2))
        params = init_params(FnnShape(2, 8, 3), seed=4)
        scheme = sinc_scheme(0.6, 0.5)
        sample = halton_points(spec.domain, 100, batch_count=4)
        _, full = loss_and_grad(params, spec, sample, scheme)
        parts = [loss_and_grad(params, spec, sample.batch(k), scheme)[1] for k in range(4)]
        np.testing.assert_allclose(np.mean(parts, axis=0), full, rtol=1e-10,
                                   atol=1e-10 * np.abs(full).max())
