import numpy as np
import pytest
from scipy import integrate, stats

from cmarl.envs import random_chain, tabular_rollouts
from cmarl.occupation import DiscountSpec, discounted_expectation_equivalence, occupation_exact
from cmarl.risk import (
    PenaltySpec,
    WeightedSample,
    cvar_upper_bound,
    discount_weights,
    empirical_cvar,
    empirical_var,
    empirical_violation_probability,
    f_alpha_curve,
    joint_violation_indicator,
    risk_report,
    stack_samples,
    transform_penalty,
)


def equal_weights(values):
    values = np.asarray(values, dtype=np.float64)
    return values, np.full(len(values), 1.0 / len(values))


@pytest.fixture(scope="module")
def normal_samples():
    rng = np.random.default_rng(2024)
    values = rng.standard_normal(1_000_000)
    return values, np.full(len(values), 1e-6)


class TestTransform:
    def test_chance_indicator_fires(self):
        spec = PenaltySpec("chance", alpha=0.1, delta=0.1)
        np.testing.assert_allclose(transform_penalty([0.5], spec), [0.9], atol=1e-15)

    def test_chance_indicator_silent(self):
        spec = PenaltySpec("chance", alpha=0.1, delta=0.1)
        np.testing.assert_allclose(transform_penalty([0.0], spec), [-0.1], atol=1e-15)

    def test_cvar_hinge(self):
        spec = PenaltySpec("cvar", alpha=0.2, delta=0.005)
        np.testing.assert_allclose(transform_penalty([0.5], spec), [0.295], atol=1e-15)

    def test_average_is_identity(self):
        spec = PenaltySpec("average")
        c = np.array([[-0.4], [2.0], [0.0]])
        np.testing.assert_array_equal(transform_penalty(c, spec), c)

    def test_raw_never_mutated(self):
        c = np.array([0.5, -0.5])
        spec = PenaltySpec("chance", alpha=[0.1, 0.1], delta=[0.1, 0.1])
        transform_penalty(c, spec)
        np.testing.assert_array_equal(c, [0.5, -0.5])

    @pytest.mark.parametrize("seed", range(5))
    def test_chance_range_is_two_valued(self, seed):
        rng = np.random.default_rng(seed)
        spec = PenaltySpec("chance", alpha=0.3, delta=0.25)
        out = transform_penalty(rng.standard_normal((50, 1)), spec)
        assert set(np.round(out.reshape(-1), 12)) <= {-0.25, 0.75}

    @pytest.mark.parametrize("seed", range(5))
    def test_cvar_lower_bound_and_monotone(self, seed):
        rng = np.random.default_rng(10 + seed)
        spec = PenaltySpec("cvar", alpha=0.4, delta=0.05)
        c = np.sort(rng.standard_normal(100))
        out = transform_penalty(c[:, None], spec).reshape(-1)
        assert np.all(out >= -0.05 - 1e-15)
        assert np.all(np.diff(out) >= -1e-15)

    def test_chance_delta_validated(self):
        with pytest.raises(ValueError):
            PenaltySpec("chance", alpha=0.1, delta=1.5)

    def test_cvar_alpha_validated(self):
        with pytest.raises(ValueError):
            PenaltySpec("cvar", alpha=-0.1, delta=0.0)

    def test_joint_violation_is_conjunction(self):
        assert joint_violation_indicator([0.5, 0.3], [0.1, 0.1]) == 1.0
        assert joint_violation_indicator([0.5, 0.0], [0.1, 0.1]) == 0.0


class TestVar:
    def test_discrete_quantile(self):
        values, weights = equal_weights(range(1, 11))
        assert empirical_var(values, weights, 0.9) == 9.0

    def test_all_equal(self):
        values, weights = equal_weights([3.7] * 20)
        for beta in (0.1, 0.5, 0.9, 0.99):
            assert empirical_var(values, weights, beta) == 3.7

    def test_normal_quantile_oracle(self, normal_samples):
        values, weights = normal_samples
        oracle = stats.norm.ppf(0.9)
        assert abs(empirical_var(values, weights, 0.9) - oracle) < 0.01

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            empirical_var(np.array([]), np.array([]), 0.9)

    def test_weighted_sample_stack(self):
        samples = [WeightedSample(1.0, 0.25), WeightedSample(-2.0, 0.75)]
        values, weights = stack_samples(samples)
        assert empirical_var(values, weights, 0.5) == -2.0


class TestCvar:
    def test_all_equal(self):
        values, weights = equal_weights([1.5] * 7)
        assert empirical_cvar(values, weights, 0.9) == pytest.approx(1.5, abs=1e-12)

    def test_normal_tail_oracle(self, normal_samples):
        values, weights = normal_samples
        z = stats.norm.ppf(0.9)
        oracle = integrate.quad(lambda x: x * stats.norm.pdf(x), z, np.inf)[0] / 0.1
        assert abs(empirical_cvar(values, weights, 0.9) - oracle) < 0.02

    @pytest.mark.parametrize("seed", range(10))
    def test_dominates_var(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal(200)
        weights = rng.random(200)
        for beta in (0.25, 0.5, 0.9):
            v = empirical_var(values, weights, beta)
            c = empirical_cvar(values, weights, beta)
            assert c >= v - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_beta(self, seed):
        rng = np.random.default_rng(50 + seed)
        values = rng.standard_normal(300)
        weights = rng.random(300)
        betas = [0.1, 0.3, 0.5, 0.7, 0.9]
        vars_ = [empirical_var(values, weights, b) for b in betas]
        cvars = [empirical_cvar(values, weights, b) for b in betas]
        assert np.all(np.diff(vars_) >= -1e-12)
        assert np.all(np.diff(cvars) >= -1e-12)

    def test_atom_splitting(self):
        # Mass 0.95 at 0 and 0.05 at 1, beta=0.9: tail = 0.05 from the atom
        # at 1 plus 0.05 from the atom at 0 -> mean 0.5.
        values = np.array([0.0, 1.0])
        weights = np.array([0.95, 0.05])
        assert empirical_cvar(values, weights, 0.9) == pytest.approx(0.5, abs=1e-12)


class TestViolationProbability:
    def test_all_below(self):
        values, weights = equal_weights([-1.0, -2.0, 0.0])
        assert empirical_violation_probability(values, weights, 0.5) == 0.0

    def test_all_above(self):
        values, weights = equal_weights([1.0, 2.0])
        assert empirical_violation_probability(values, weights, 0.5) == 1.0

    def test_tabular_monte_carlo_vs_exact(self):
        rng = np.random.default_rng(99)
        mdp = random_chain(8, rng)
        gamma, T, n_paths, alpha = 0.9, 40, 30_000, 0.2
        mu = occupation_exact(mdp, DiscountSpec(gamma, horizon=T)).mu
        exact = float(mu @ (mdp.c >= alpha))
        paths = tabular_rollouts(mdp, T, n_paths, rng)
        w_ep = discount_weights(T + 1, gamma)
        values = mdp.c[paths].reshape(-1)
        weights = np.tile(w_ep, n_paths) / n_paths
        est = empirical_violation_probability(values, weights, alpha)
        # Episode-level variance bound: each episode contributes a [0,1] mean.
        se = 1.0 / np.sqrt(4 * n_paths)
        assert abs(est - exact) < 3 * se


class TestCvarUpperBound:
    def test_table_values(self):
        assert cvar_upper_bound(0.2, 0.005, 0.9) == pytest.approx(0.25, abs=1e-12)

    def test_zero_delta(self):
        assert cvar_upper_bound(0.3, 0.0, 0.5) == 0.3

    def test_beta_to_zero(self):
        assert cvar_upper_bound(0.2, 0.1, 1e-9) == pytest.approx(0.3, rel=1e-6)

    def test_componentwise(self):
        out = cvar_upper_bound([0.1, 0.2], [0.01, 0.02], 0.9)
        np.testing.assert_allclose(out, [0.2, 0.4], atol=1e-12)


class TestFAlphaCurve:
    def test_grid_minimizer_near_var(self):
        rng = np.random.default_rng(7)
        values = rng.standard_normal(20_000)
        weights = np.full(len(values), 1.0 / len(values))
        grid = np.linspace(-1.0, 3.0, 401)
        F = f_alpha_curve(values, weights, 0.9, grid)
        argmin = grid[np.argmin(F)]
        var = empirical_var(values, weights, 0.9)
        step = grid[1] - grid[0]
        assert abs(argmin - var) <= step + 1e-12

    def test_upper_bounds_cvar(self):
        rng = np.random.default_rng(8)
        values = rng.standard_normal(20_000)
        weights = np.full(len(values), 1.0 / len(values))
        grid = np.linspace(-1.0, 3.0, 401)
        F = f_alpha_curve(values, weights, 0.9, grid)
        cvar = empirical_cvar(values, weights, 0.9)
        step = grid[1] - grid[0]
        assert np.all(F >= cvar - 1e-9)
        assert F.min() <= cvar + step

    def test_constant_samples(self):
        values, weights = equal_weights([2.5] * 10)
        grid = np.linspace(0.0, 5.0, 101)
        F = f_alpha_curve(values, weights, 0.9, grid)
        i = np.argmin(F)
        assert grid[i] == pytest.approx(2.5, abs=0.05 + 1e-12)
        assert F[i] == pytest.approx(2.5, abs=1e-9)

    def test_exact_at_var(self):
        # F evaluated exactly at the quantile equals the CVaR under the
        # proportional atom-splitting convention.
        rng = np.random.default_rng(9)
        values = rng.standard_normal(5000)
        weights = np.full(len(values), 1.0 / len(values))
        var = empirical_var(values, weights, 0.9)
        F_var = f_alpha_curve(values, weights, 0.9, np.array([var]))[0]
        cvar = empirical_cvar(values, weights, 0.9)
        assert F_var == pytest.approx(cvar, abs=1e-10)


class TestDiscountWeights:
    @pytest.mark.parametrize("n,gamma", [(26, 0.99), (5, 0.5), (1, 0.9)])
    def test_normalized(self, n, gamma):
        w = discount_weights(n, gamma)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w > 0)

    def test_geometric_ratio(self):
        w = discount_weights(10, 0.8)
        np.testing.assert_allclose(w[1:] / w[:-1], 0.8, atol=1e-12)


class TestPropositionChainsExact:
    """Exact enumeration of the guarantee chains on tabular instances."""

    @pytest.mark.parametrize("seed", range(20))
    def test_chance_guarantee(self, seed):
        rng = np.random.default_rng(1000 + seed)
        mdp = random_chain(int(rng.integers(3, 25)), rng)
        g = rng.uniform(0.3, 0.99)
        alpha = rng.uniform(-0.5, 0.5)
        delta = rng.uniform(0.05, 0.9)
        indicator = (mdp.c >= alpha).astype(float)
        # Discounted expectation of the transformed signal via the
        # trajectory-side identity machinery.
        lhs, _, _ = discounted_expectation_equivalence(
            mdp, indicator - delta, DiscountSpec(g)
        )
        mu = occupation_exact(mdp, DiscountSpec(g)).mu
        prob = float(mu @ indicator)
        if lhs <= 0:
            assert prob <= delta + 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_cvar_guarantee(self, seed):
        rng = np.random.default_rng(2000 + seed)
        mdp = random_chain(int(rng.integers(3, 25)), rng)
        g = rng.uniform(0.3, 0.99)
        alpha = rng.uniform(0.0, 0.5)
        delta = rng.uniform(0.001, 0.2)
        beta = rng.uniform(0.5, 0.95)
        hinge = np.maximum(mdp.c - alpha, 0.0)
        lhs, _, _ = discounted_expectation_equivalence(mdp, hinge - delta, DiscountSpec(g))
        mu = occupation_exact(mdp, DiscountSpec(g)).mu
        cvar = empirical_cvar(mdp.c, mu, beta)
        if lhs <= 0:
            assert cvar <= cvar_upper_bound(alpha, delta, beta) + 1e-9


class TestRiskReport:
    def test_fields_and_consistency(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal(1000)
        weights = np.full(1000, 1e-3)
        rep = risk_report(values, weights, 0.9, 0.2, 40, "cvar", 0.005)
        assert set(rep) == {
            "metric", "beta", "alpha", "delta", "var", "cvar", "cvar_ub",
            "prob_violation", "n_episodes",
        }
        assert rep["cvar"] >= rep["var"]
        assert rep["cvar_ub"] >= rep["cvar"] - 1e-9
        assert rep["n_episodes"] == 40
