import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import qmc

from vbllbo.acquisition import NsgaConfig, hypervolume, nsga2
from vbllbo.benchmarks import (
    HARTMANN6_ARGMIN,
    OutOfBounds,
    SobolStream,
    UnknownProblem,
    ackley,
    branin,
    evaluate_noisy,
    initial_design,
    list_problems,
    make_problem,
    reference_points,
    sobol_points,
)

BRANIN_MINIMIZERS = [(-math.pi, 12.275), (math.pi, 2.275), (9.42478, 2.475)]


class TestSingleObjective:
    def test_ackley_origin(self):
        p = make_problem("ackley2d")
        assert p.evaluate([0.0, 0.0])[0] == pytest.approx(0.0, abs=1e-14)
        assert make_problem("ackley5d").evaluate(np.zeros(5))[0] == pytest.approx(0.0, abs=1e-14)

    def test_ackley_bounds(self):
        for name, d in [("ackley2d", 2), ("ackley5d", 5)]:
            p = make_problem(name)
            np.testing.assert_array_equal(p.lower, [-5.0] * d)
            np.testing.assert_array_equal(p.upper, [10.0] * d)

    def test_branin_minimizers(self):
        p = make_problem("branin")
        for x in BRANIN_MINIMIZERS:
            assert p.evaluate(x)[0] == pytest.approx(-0.397887, abs=1e-5)
        assert p.canonical(p.evaluate(BRANIN_MINIMIZERS[1]))[0] == pytest.approx(0.397887, abs=1e-6)

    def test_branin_minimum_by_search(self):
        best = min(minimize(lambda x: branin(x[None, :])[0], x0, bounds=[(-5, 10), (0, 15)]).fun
                   for x0 in [(-3, 12), (3, 2), (9, 3)])
        assert best == pytest.approx(make_problem("branin").canonical(make_problem("branin").optimum), abs=1e-8)

    def test_hartmann6(self):
        p = make_problem("hartmann6")
        assert p.evaluate(HARTMANN6_ARGMIN)[0] == pytest.approx(3.32237, abs=1e-5)
        res = minimize(lambda x: -p.evaluate(x)[0], HARTMANN6_ARGMIN, bounds=[(0, 1)] * 6)
        assert -res.fun == pytest.approx(3.32237, abs=1e-5)

    def test_negation_convention(self):
        for name in ("branin", "ackley2d", "hartmann6"):
            p = make_problem(name)
            assert p.negated
            x = np.random.default_rng(0).uniform(p.lower, p.upper)
            raw = {"branin": branin, "ackley2d": ackley}.get(name)
            if raw is not None:
                assert p.evaluate(x)[0] == -raw(x[None, :])[0]

    def test_batch_evaluation(self):
        p = make_problem("branin")
        X = np.random.default_rng(0).uniform(p.lower, p.upper, size=(7, 2))
        Y = p.evaluate(X)
        assert Y.shape == (7, 1)
        for x, y in zip(X, Y):
            assert p.evaluate(x)[0] == y[0]


class TestNnDraw:
    def test_shape_and_determinism(self):
        a, b = make_problem("nn_draw"), make_problem("nn_draw")
        assert a.dim == 200 and a.num_objectives == 1
        X = np.random.default_rng(0).uniform(size=(5, 200))
        np.testing.assert_array_equal(a.evaluate(X), b.evaluate(X))

    def test_problem_seed_changes_function(self):
        x = np.full(200, 0.5)
        assert make_problem("nn_draw").evaluate(x)[0] != make_problem("nn_draw", {"problem_seed": 1}).evaluate(x)[0]

    def test_small_dimension(self):
        assert make_problem("nn_draw", {"dim": 3}).evaluate([0.1, 0.2, 0.3]).shape == (1,)


class TestMultiObjective:
    def test_dtlz1_front(self):
        p = make_problem("dtlz1")
        X = np.column_stack([np.linspace(0, 1, 11), np.full((11, 4), 0.5)])
        F = p.canonical(p.evaluate(X))
        np.testing.assert_allclose(F.sum(axis=1), 0.5, atol=1e-9)

    def test_dtlz2_front(self):
        p = make_problem("dtlz2")
        X = np.column_stack([np.linspace(0, 1, 11), np.full((11, 4), 0.5)])
        F = p.canonical(p.evaluate(X))
        np.testing.assert_allclose(np.linalg.norm(F, axis=1), 1.0, atol=1e-9)

    def test_dtlz_dimensions(self):
        assert make_problem("dtlz2").dim == 5 and make_problem("dtlz2").num_objectives == 2
        p = make_problem("dtlz2", {"dim": 6, "num_objectives": 3})
        assert p.evaluate(np.full(6, 0.5)).shape == (3,)

    def test_branin_currin_first_objective_is_branin(self):
        p = make_problem("branin_currin")
        x = np.array([0.3, 0.6])
        assert p.evaluate(x)[0] == pytest.approx(-branin(np.array([[15 * 0.3 - 5, 15 * 0.6]]))[0])

    def test_currin_finite_at_boundary(self):
        p = make_problem("branin_currin")
        assert np.all(np.isfinite(p.evaluate([0.5, 0.0])))

    @pytest.mark.parametrize("name,nadir", [("dtlz1", 0.5), ("dtlz2", 1.0)])
    def test_dtlz_reference_point(self, name, nadir):
        # the analytic front spans [-nadir, 0] per objective; margin is 10% of the range
        p = make_problem(name)
        np.testing.assert_allclose(p.ref_point, [-1.1 * nadir] * 2, rtol=2e-3)
        assert reference_points()[name]["max_hv"] > 0

    def test_branin_currin_reference_point(self):
        p = make_problem("branin_currin")
        np.testing.assert_array_equal(p.ref_point, reference_points()["branin_currin"]["ref_point"])
        _, F = nsga2(p.fn, 2, NsgaConfig(pop_size=60, generations=80), np.random.default_rng(0))
        assert np.all(F.min(axis=0) > p.ref_point)
        assert hypervolume(F, p.ref_point) <= reference_points()["branin_currin"]["max_hv"] * 1.001

    def test_ref_point_override(self):
        assert np.all(make_problem("branin_currin", {"ref_point": [-1, -2]}).ref_point == [-1, -2])


class TestSobol:
    def test_unscrambled_prefix(self):
        np.testing.assert_allclose(sobol_points(SobolStream(1, scramble=False), 3)[:, 0], [0.5, 0.75, 0.25])

    def test_continuation(self):
        s = SobolStream(2, scramble=False)
        a = np.vstack([sobol_points(s, 3), sobol_points(s, 5)])
        b = sobol_points(SobolStream(2, scramble=False), 8)
        np.testing.assert_array_equal(a, b)
        assert s.index == 8

    def test_unit_interval(self):
        pts = sobol_points(SobolStream(200, seed=3), 64)
        assert pts.shape == (64, 200)
        assert np.all(pts >= 0.0) and np.all(pts < 1.0)

    def test_seeded(self):
        np.testing.assert_array_equal(SobolStream(3, seed=1).draw(10), SobolStream(3, seed=1).draw(10))

    def test_discrepancy_beats_uniform(self):
        for seed in range(10):
            sob = sobol_points(SobolStream(2, seed=seed), 256)
            uni = np.random.default_rng(seed).uniform(size=(256, 2))
            assert qmc.discrepancy(sob, method="L2-star") < qmc.discrepancy(uni, method="L2-star")


class TestNoiseAndDesign:
    def test_noise_free_exact(self):
        p = make_problem("branin")
        x = np.array([1.0, 2.0])
        assert evaluate_noisy(p, x, np.random.default_rng(0))[0] == p.evaluate(x)[0]

    def test_noise_std(self):
        p = make_problem("branin", {"noise_std": 0.1})
        x = np.array([1.0, 2.0])
        rng = np.random.default_rng(0)
        ys = np.array([evaluate_noisy(p, x, rng)[0] for _ in range(10_000)])
        assert ys.std() == pytest.approx(0.1, abs=0.005)
        assert ys.mean() == pytest.approx(p.evaluate(x)[0], abs=0.005)

    def test_noise_seeded(self):
        p = make_problem("ackley2d", {"noise_std": 0.1})
        a = evaluate_noisy(p, [1.0, 1.0], np.random.default_rng(3))
        b = evaluate_noisy(p, [1.0, 1.0], np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            evaluate_noisy(make_problem("branin"), [-6.0, 1.0], np.random.default_rng(0))

    def test_initial_design_sizes(self):
        assert len(initial_design(make_problem("branin"), np.random.default_rng(0))) == 2
        assert len(initial_design(make_problem("branin_currin"), np.random.default_rng(0))) == 6
        assert len(initial_design(make_problem("ackley5d"), np.random.default_rng(0))) == 5

    def test_initial_design_in_bounds(self):
        p = make_problem("branin")
        data = initial_design(p, np.random.default_rng(1))
        assert np.all(data.X >= p.lower) and np.all(data.X <= p.upper)
        np.testing.assert_array_equal(data.Y, p.evaluate(data.X))


class TestRegistry:
    def test_unknown(self):
        with pytest.raises(UnknownProblem):
            make_problem("rosenbrock")

    def test_names(self):
        names = list_problems()
        for n in ("branin", "ackley2d", "ackley5d", "hartmann6", "nn_draw", "branin_currin", "dtlz1", "dtlz2"):
            assert n in names
        for n in names:
            make_problem(n)
