import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advedm.optim import (
    ADDITION_WEIGHTS,
    REMOVAL_WEIGHTS,
    AttackConfig,
    LossBreakdown,
    delta_bounds,
    optimize,
    project,
    residual,
)

EPS = 8 / 255


def quadratic(center):
    def f(x):
        d = x - center
        return float((d * d).sum()), 2 * d

    return f


def feasible(x, base, eps, mode="linf"):
    if x.min() < 0.0 or x.max() > 1.0:
        return False
    if mode == "linf":
        return bool(np.all(np.abs(x - base) <= eps))
    return bool(np.linalg.norm(x - base) <= eps)


images = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).uniform(size=(4, 4, 3)))


class TestConfig:
    def test_paper_defaults(self):
        c = AttackConfig.removal()
        assert c.weights == (0.5, 2.0, 0.2) == REMOVAL_WEIGHTS
        assert c.epsilon == 8 / 255 and c.iterations == 500 and c.step_size == 0.005
        assert c.selection_mode == "top_fraction" and c.selection_param == 0.2
        a = AttackConfig.addition()
        assert a.weights == (0.8, 2.0, 0.3) == ADDITION_WEIGHTS
        assert (a.alpha, a.beta, a.region_pixels) == (0.5, 0.4, 100)

    def test_adam_constants(self):
        c = AttackConfig()
        assert c.adam_betas == (0.9, 0.999) and c.adam_eps == 1e-8 and c.norm_mode == "linf"

    def test_norm_aliases(self):
        assert AttackConfig(norm_mode="per_pixel_infinity").norm_mode == "linf"
        assert AttackConfig(norm_mode="global_l2").norm_mode == "l2"

    @pytest.mark.parametrize(
        "bad",
        [
            {"epsilon": 0.0},
            {"epsilon": 1.0},
            {"iterations": -1},
            {"step_size": 0.0},
            {"weights": (1.0, -1.0, 0.0)},
            {"weights": (1.0, 1.0)},
            {"alpha": 1.2},
            {"beta": -0.1},
            {"norm_mode": "l1"},
            {"attention_mode": "soft"},
        ],
    )
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            AttackConfig(**bad)

    def test_dict_round_trip(self):
        c = AttackConfig.addition(region=(1, 1, 2), foreground=("tree",), seed=4)
        assert AttackConfig.from_dict(c.to_dict()) == c

    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            AttackConfig.from_dict({"epsilonn": 0.1})


class TestProject:
    def test_zero_is_fixed(self):
        base = np.full((2, 2, 3), 0.5)
        assert not project(np.zeros_like(base), EPS, "linf", base).any()

    def test_linf_clamp_value(self):
        base = np.full((1, 1, 3), 0.5)
        out = project(np.full_like(base, 0.1), EPS, "linf", base)
        np.testing.assert_allclose(out, EPS, rtol=0, atol=1e-15)
        assert out[0, 0, 0] == pytest.approx(0.031373, abs=1e-6)

    def test_l2_rescale(self, rng):
        base = np.full((4, 4, 3), 0.5)
        d = rng.normal(size=base.shape)
        d *= 2 * EPS / np.linalg.norm(d)
        out = project(d, EPS, "l2", base)
        assert np.linalg.norm(out) == pytest.approx(EPS, rel=1e-14)
        assert np.linalg.norm(out) <= EPS
        np.testing.assert_allclose(out, d / 2, rtol=1e-14)

    def test_box_last(self):
        base = np.array([[[0.99, 0.01, 0.5]]])
        out = project(np.array([[[0.03, -0.03, 0.0]]]), EPS, "linf", base)
        x = base + out
        assert x.max() <= 1.0 and x.min() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project(np.zeros((2, 2, 3)), EPS, "linf", np.zeros((3, 3, 3)))

    @settings(max_examples=200, deadline=None)
    @given(images, st.integers(0, 2**31), st.floats(1e-4, 0.5), st.sampled_from(["linf", "l2"]))
    def test_idempotent_and_feasible(self, base, seed, eps, mode):
        d = np.random.default_rng(seed).normal(scale=0.3, size=base.shape)
        once = project(d, eps, mode, base)
        assert np.array_equal(project(once, eps, mode, base), once)
        assert feasible(base + once, base, eps, mode)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-6, 0.2))
    def test_float_exact_bounds_at_extremes(self, seed, eps):
        rng = np.random.default_rng(seed)
        base = rng.choice([0.0, 1.0, 1 - 1e-17, 1e-300, 0.3, 0.1 + 0.2], size=(3, 3, 3))
        lo, hi = delta_bounds(base, eps)
        for d in (lo, hi):
            x = base + d
            assert x.min() >= 0.0 and x.max() <= 1.0
            assert np.all(np.abs(x - base) <= eps)


class TestOptimize:
    def test_zero_iterations(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        r = optimize(quadratic(np.zeros_like(base)), base, AttackConfig(iterations=0))
        assert np.array_equal(r.adversarial, base)
        assert r.residual == 0.0 and r.iterations_run == 0 and len(r.trace) == 1

    def test_quadratic_interior_minimum(self, rng):
        base = 0.2 + 0.6 * rng.uniform(size=(4, 4, 3))
        center = base + rng.uniform(-0.5, 0.5, size=base.shape) * EPS
        r = optimize(quadratic(center), base, AttackConfig(iterations=1500))
        assert np.abs(r.adversarial - center).max() <= 1e-4

    def test_quadratic_outside_ball_lands_on_boundary(self, rng):
        base = np.full((2, 2, 3), 0.5)
        center = base + 0.2
        r = optimize(quadratic(center), base, AttackConfig(iterations=200))
        np.testing.assert_allclose(r.adversarial, base + EPS, atol=1e-12)

    def test_trace_length_and_contents(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        r = optimize(quadratic(np.zeros_like(base)), base, AttackConfig(iterations=7))
        assert len(r.trace) == 8 and r.iterations_run == 7
        assert all(t.residual <= EPS and 0.0 <= t.pixel_min and t.pixel_max <= 1.0 for t in r.trace)

    def test_every_iterate_feasible(self, rng):
        base = rng.uniform(size=(8, 8, 3))
        seen = []
        g = rng.normal(size=base.shape)
        optimize(lambda x: (float((g * x).sum()), g), base, AttackConfig(iterations=60, step_size=0.05),
                 on_iterate=lambda k, x: seen.append(feasible(x, base, EPS)))
        assert len(seen) == 61 and all(seen)

    def test_l2_mode_feasible(self, rng):
        base = rng.uniform(size=(8, 8, 3))
        g = rng.normal(size=base.shape)
        cfg = AttackConfig(iterations=40, step_size=0.05, norm_mode="l2", epsilon=0.5)
        seen = []
        r = optimize(lambda x: (float((g * x).sum()), g), base, cfg, on_iterate=lambda k, x: seen.append(feasible(x, base, 0.5, "l2")))
        assert all(seen) and r.residual <= 0.5

    def test_best_iterate(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        r = optimize(quadratic(np.zeros_like(base)), base, AttackConfig(iterations=30, step_size=0.05))
        totals = [t.total for t in r.trace]
        assert r.best_loss == min(totals) <= totals[-1]
        assert r.best_iteration == totals.index(min(totals))
        assert residual(r.adversarial, base) == r.residual

    def test_best_so_far_non_increasing(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        r = optimize(quadratic(rng.uniform(size=base.shape)), base, AttackConfig(iterations=50))
        best = np.minimum.accumulate([t.total for t in r.trace])
        assert np.all(np.diff(best) <= 0)

    def test_non_finite_aborts(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        calls = []

        def f(x):
            calls.append(1)
            if len(calls) == 4:
                return math.nan, np.zeros_like(x)
            return quadratic(np.zeros_like(base))(x)

        r = optimize(f, base, AttackConfig(iterations=10))
        assert r.aborted and "iteration 3" in r.diagnostic
        assert len(r.trace) == 3
        assert feasible(r.adversarial, base, EPS)

    def test_deterministic(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        cfg = AttackConfig(iterations=20, random_start=True, seed=3)
        a = optimize(quadratic(np.zeros_like(base)), base, cfg)
        b = optimize(quadratic(np.zeros_like(base)), base, cfg)
        assert np.array_equal(a.adversarial, b.adversarial)
        assert [t.total for t in a.trace] == [t.total for t in b.trace]

    def test_random_start_feasible(self, rng):
        base = rng.uniform(size=(4, 4, 3))
        starts = []
        optimize(quadratic(base), base, AttackConfig(iterations=0, random_start=True),
                 on_iterate=lambda k, x: starts.append(x))
        assert feasible(starts[0], base, EPS) and not np.array_equal(starts[0], base)

    def test_breakdown_passthrough(self, rng):
        base = rng.uniform(size=(4, 4, 3))

        def f(x):
            terms = LossBreakdown.combine((0.1, 0.2, 0.3), (1.0, 2.0, 3.0))
            return terms.total, np.zeros_like(x), terms

        r = optimize(f, base, AttackConfig(iterations=2))
        assert r.trace[0].total == pytest.approx(1.4, abs=1e-15)
        assert r.trace[0].l_p == 0.2


def test_breakdown_combine():
    b = LossBreakdown.combine((0.25, -0.5, -0.75), (0.5, 2.0, 0.2))
    assert b.total == 0.5 * 0.25 + 2.0 * -0.5 + 0.2 * -0.75
