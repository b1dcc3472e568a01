import math

import numpy as np
import pytest

from fspdelab import analysis as an
from fspdelab import harnack as ha
from fspdelab import simulator as sim
from fspdelab.errors import ExplosionError, InputError
from fspdelab.segment import SegmentPath

DT = 1.0 / 128.0
DELAY = 0.25
HORIZON = 0.5


def constant_function(value=1.0):
    return ha.TestFunction(lambda view: np.full(np.shape(view.value_at(0.0))[0], value),
                           f"const_{value}", value)


def segment(vec):
    return SegmentPath.constant(np.asarray(vec, dtype=float), DELAY, DT)


class TestEstimates:
    def test_constant_function_exact(self, dini_coeffs, spec2):
        est = ha.estimate_semigroup(dini_coeffs, segment([0.2, 0.0]), constant_function(),
                                    HORIZON, 500, 3, grid_step=DT, spec=spec2)
        assert est.mean == 1.0
        assert est.stderr == 0.0

    def test_linear_functional_matches_gaussian_mean(self, spec2):
        # free dynamics with diagonal noise: E <v, X(T)> has closed form
        coeffs = sim.make_coefficients(2, diag_noise=np.ones(2))
        xi = segment([0.8, -0.4])
        v = np.array([1.0, 0.5])
        f = ha.TestFunction(lambda view: view.value_at(0.0) @ v + 3.0, "affine", 10.0)
        est = ha.estimate_semigroup(coeffs, xi, f, HORIZON, 20000, 11,
                                    grid_step=DT, spec=spec2)
        exact = float(an.semigroup_apply(spec2, HORIZON, xi.value_at(0.0)) @ v) + 3.0
        assert abs(est.mean - exact) <= 3.0 * est.stderr

    def test_disjoint_seeds_agree(self, dini_coeffs, spec2):
        f = ha.tanh_norm_function()
        xi = segment([0.3, 0.1])
        a = ha.estimate_semigroup(dini_coeffs, xi, f, HORIZON, 4000, 101,
                                  grid_step=DT, spec=spec2)
        b = ha.estimate_semigroup(dini_coeffs, xi, f, HORIZON, 4000, 202,
                                  grid_step=DT, spec=spec2)
        assert abs(a.mean - b.mean) <= 3.0 * math.hypot(a.stderr, b.stderr)

    def test_horizon_must_exceed_delay(self, dini_coeffs, spec2):
        with pytest.raises(InputError):
            ha.estimate_semigroup(dini_coeffs, segment([0.0, 0.0]), constant_function(),
                                  0.25, 500, 1, grid_step=DT, spec=spec2)

    def test_explosive_configuration_rejected(self):
        spec1 = an.Spectrum.power_law(1)
        coeffs = sim.make_coefficients(1, drift=sim.cubic_drift(1.0),
                                       diag_noise=np.array([0.1]))
        xi = SegmentPath.constant(np.array([2.0]), DELAY, DT)
        with pytest.raises(ExplosionError):
            ha.estimate_semigroup(coeffs, xi, constant_function(), 3.0, 200, 1,
                                  grid_step=DT, spec=spec1)

    def test_builtin_functions_positive_and_capped(self, spec2):
        rng = np.random.default_rng(0)
        window = rng.normal(size=(33, 50, 2))
        view = sim.SegmentView(window, DT, DELAY)
        for f in ha.builtin_test_functions(2):
            vals = f(view)
            assert np.all(vals > 0.0)
            assert np.all(vals <= f.cap + 1e-12)


class TestLogResidual:
    def test_coincident_pair_reduces_to_jensen(self, dini_coeffs, spec2):
        xi = segment([0.4, -0.1])
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        res = ha.log_harnack_residual(dini_coeffs, xi, xi, f, HORIZON, 0.0,
                                      grid_step=DT, spec=spec2, samples=4000, seed=7)
        assert res.residual >= -3.0 * res.stderr

    def test_constant_function_gives_exact_bound_term(self, dini_coeffs, spec2):
        xi, eta = segment([0.4, 0.0]), segment([-0.2, 0.3])
        res = ha.log_harnack_residual(dini_coeffs, xi, eta, constant_function(),
                                      HORIZON, 2.0, grid_step=DT, spec=spec2,
                                      samples=500, seed=3)
        assert res.residual == pytest.approx(ha.log_harnack_rhs(xi, eta, HORIZON, 2.0))
        assert res.residual >= 0.0

    def test_horizon_below_delay_rejected(self, dini_coeffs, spec2):
        xi = segment([0.0, 0.0])
        with pytest.raises(InputError):
            ha.log_harnack_residual(dini_coeffs, xi, xi, constant_function(), 0.2,
                                    0.0, grid_step=DT, spec=spec2, samples=500, seed=1)

    def test_jensen_sanity_across_pairs(self, dini_coeffs, spec2):
        # P log f <= log P f at the same start, up to Monte Carlo error
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        rng = np.random.default_rng(5)
        for _ in range(5):
            xi = segment(rng.uniform(-0.5, 0.5, size=2))
            est = ha.collect_pair_estimates(dini_coeffs, [(xi, xi)], f, HORIZON, [],
                                            grid_step=DT, spec=spec2, samples=3000,
                                            seed=int(rng.integers(1 << 30)))[0]
            gap = math.log(est.mean_f_xi) - est.mean_logf_eta
            assert gap >= -3.0 * math.hypot(est.se_f_xi / est.mean_f_xi, est.se_logf_eta)


class TestPowerResidual:
    def test_coincident_pair_power_mean_dominates(self, dini_coeffs, spec2):
        xi = segment([0.3, 0.2])
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        res = ha.power_harnack_residual(dini_coeffs, xi, xi, f, HORIZON, 2.0, 0.0,
                                        gain=0.1, grid_step=DT, spec=spec2,
                                        samples=4000, seed=9)
        assert res.residual >= -3.0 * res.stderr

    def test_constant_function_exact_exponential_gap(self, dini_coeffs, spec2):
        xi, eta = segment([0.4, 0.0]), segment([0.0, 0.4])
        c_p = 0.7
        res = ha.power_harnack_residual(dini_coeffs, xi, eta, constant_function(),
                                        HORIZON, 2.0, c_p, gain=0.1, grid_step=DT,
                                        spec=spec2, samples=500, seed=2)
        head, sup = ha.pair_distance(xi, eta)
        psi = c_p * (1.0 + head**2 / (HORIZON - DELAY) + sup**2)
        assert res.residual == pytest.approx(math.exp(psi) - 1.0)
        assert res.residual >= 0.0

    def test_power_floor_enforced(self, dini_coeffs, spec2):
        xi = segment([0.0, 0.0])
        with pytest.raises(InputError, match="admissible"):
            ha.power_harnack_residual(dini_coeffs, xi, xi, constant_function(),
                                      HORIZON, 1.2, 0.5, gain=0.2, grid_step=DT,
                                      spec=spec2, samples=500, seed=1)


class TestFormulaProperties:
    def test_bound_non_increasing_in_horizon(self):
        xi, eta = segment([0.5, 0.0]), segment([0.0, 0.5])
        values = [ha.log_harnack_rhs(xi, eta, T, 1.5) for T in (0.3, 0.5, 1.0, 2.0)]
        assert all(a >= b for a, b in zip(values[:-1], values[1:]))

    def test_residual_shrinks_with_pair_distance(self, dini_coeffs, spec2):
        # fixed constant, nested pairs, same noise: the closed-inequality
        # residual follows the bound's right-hand side down as eta -> xi
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        xi = segment([0.5, 0.0])
        residuals = []
        for scale in (1.0, 0.5, 0.25):
            eta = segment([0.5 - 0.8 * scale, 0.4 * scale])
            est = ha.collect_pair_estimates(dini_coeffs, [(xi, eta)], f, HORIZON, [],
                                            grid_step=DT, spec=spec2, samples=4000,
                                            seed=31)[0]
            res, _ = ha.log_residual_from_estimates(est, HORIZON, 2.0)
            residuals.append(res)
        assert residuals[0] > residuals[1] > residuals[2]

    def test_fitted_constants_close_training_pairs(self, dini_coeffs, spec2):
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        rng = np.random.default_rng(17)
        pairs = [(segment(rng.uniform(-0.4, 0.4, 2)), segment(rng.uniform(-0.4, 0.4, 2)))
                 for _ in range(4)]
        powers = [1.5, 2.0]
        est = ha.collect_pair_estimates(dini_coeffs, pairs, f, HORIZON, powers,
                                        grid_step=DT, spec=spec2, samples=2000, seed=23)
        c_log = ha.fit_log_constant(est, HORIZON)
        for e in est:
            res, _ = ha.log_residual_from_estimates(e, HORIZON, c_log)
            assert res >= -1e-9
        for p in powers:
            c_p = ha.fit_power_constant(est, HORIZON, p)
            for e in est:
                res, _ = ha.power_residual_from_estimates(e, HORIZON, p, c_p)
                assert res >= -1e-9
        # shared estimates make the fitted constant exactly non-increasing in p
        assert ha.fit_power_constant(est, HORIZON, 1.5) >= \
            ha.fit_power_constant(est, HORIZON, 2.0) - 1e-12


class TestConjugation:
    def test_trivial_field_identity(self, spec2):
        ref = __import__("fspdelab").zvonkin.ReferenceSemigroup(spec2, np.ones(2))
        from fspdelab import zvonkin as zv

        fld = zv.solve_u(ref, lambda t, y: np.zeros_like(np.asarray(y, dtype=float)),
                         50.0, HORIZON, zv.ZvonkinGrid(time_steps=6, nodes_per_dim=9))
        coeffs = sim.make_coefficients(
            2, delay_drift=sim.delay_tanh_drift(0.3, np.array([1.0, 0.0])),
            diag_noise=np.ones(2), delay_sup=0.3, delay_grad_bound=0.3)
        xi = SegmentPath.from_function(
            lambda s: np.array([0.3 * math.cos(s), -0.2]), DELAY, DT)
        f = ha.exp_head_function(np.array([1.0, 0.0]))
        res = ha.conjugation_check(coeffs, fld, xi, f, HORIZON, 500,
                                   grid_step=DT, spec=spec2, seed=5)
        assert res.residual == 0.0
        assert res.rms_gap == 0.0

    def test_constant_function_both_sides_one(self, field, dini_coeffs, spec2):
        xi = SegmentPath.from_function(
            lambda s: np.array([0.3 * math.cos(s), -0.2]), DELAY, DT)
        res = ha.conjugation_check(dini_coeffs, field, xi, constant_function(),
                                   HORIZON, 300, grid_step=DT, spec=spec2, seed=6)
        assert res.direct_mean == 1.0
        assert res.transformed_mean == 1.0

    def test_segment_grid_must_match(self, field, dini_coeffs, spec2):
        xi = SegmentPath.from_function(
            lambda s: np.array([0.3 * math.cos(s), -0.2]), DELAY, DT)
        with pytest.raises(InputError):
            ha.conjugation_check(dini_coeffs, field, xi, constant_function(),
                                 HORIZON, 300, grid_step=DT / 2.0, spec=spec2, seed=6)
