import math

import numpy as np
import pytest
from scipy import stats

from confined_diffusion.evaluation import (StudyReport, constraint_violation, fit_order, local_time_rate_study,
                                           mean_stderr, mmd, reflected_bm_local_time_mean,
                                           reflected_generator_expectation, stationarity_tests, terminal_reflected,
                                           weak_order_study)
from confined_diffusion.geometry import Ball, Box
from confined_diffusion.integrators import Drift
from confined_diffusion.noise import NoiseSource

SQUARE = Box.cube(-1.0, 1.0, 2)


class TestMmd:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(300, 2))
        assert mmd(x, x.copy()) == 0.0

    def test_decreasing_with_n(self):
        rng = np.random.default_rng(1)
        vals = [np.mean([mmd(rng.normal(size=(n, 2)), rng.normal(size=(n, 2))) for _ in range(3)])
                for n in (200, 800, 3200)]
        assert vals[0] > vals[1] > vals[2]

    def test_far_point_masses(self):
        assert mmd(np.zeros((1, 2)), np.array([[100.0, 0.0]]), bandwidth=1.0) == pytest.approx(math.sqrt(2))

    def test_symmetry_and_scale(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(200, 2)), rng.normal(0.3, 1, size=(250, 2))
        assert mmd(x, y) == pytest.approx(mmd(y, x), rel=1e-12)
        assert mmd(3 * x, 3 * y, bandwidth=3.0) == pytest.approx(mmd(x, y, bandwidth=1.0), rel=1e-10)
        assert mmd(x, y) >= 0

    def test_errors(self):
        with pytest.raises(ValueError):
            mmd(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            mmd(np.zeros((2, 2)), np.zeros((3, 3)))


class TestViolation:
    def test_values(self):
        pts = np.zeros((100, 2))
        assert constraint_violation(pts, SQUARE) == 0.0
        pts[7] = [1.5, 0.0]
        assert constraint_violation(pts, SQUARE) == 0.01

    def test_boundary_inside(self):
        assert constraint_violation(np.array([[1.0, -1.0]]), SQUARE) == 0.0
        assert constraint_violation(np.array([[0.0, 1.0]]), Ball([0.0, 0.0], 1.0)) == 0.0

    def test_mean_stderr(self):
        m, s = mean_stderr([1.0, 2.0, 3.0])
        assert m == 2.0 and s == pytest.approx(1 / math.sqrt(3))


class TestStationarity:
    def test_uniform_p_values(self):
        rng = np.random.default_rng(3)
        ps = [stationarity_tests(rng.uniform(-1, 1, (5000, 2)), None, SQUARE)["position"]["p_value"]
              for _ in range(40)]
        assert stats.kstest(ps, "uniform").pvalue > 0.001

    def test_shifted(self):
        x = np.random.default_rng(4).uniform(-0.8, 1.0, (20000, 2))
        assert stationarity_tests(x, None, SQUARE)["position"]["p_value"] < 1e-6

    def test_velocity_z(self):
        v = np.random.default_rng(5).normal(size=(20000, 2))
        rep = stationarity_tests(np.zeros((20000, 2)), v)
        assert max(abs(z) for z in rep["velocity"]["z_var"]) < 4

    def test_ball_cells(self):
        ball = Ball([0.0, 0.0], 1.0)
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (60000, 2))
        x = x[ball.contains(x)][:20000]
        rep = stationarity_tests(x, None, ball)
        assert rep["position"]["p_value"] > 1e-4 and rep["position"]["outside_cells"] == 0

    def test_gibbs(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(80000, 2))
        x = x[SQUARE.contains(x)][:20000]
        assert stationarity_tests(x, None, SQUARE, gibbs=True)["position"]["p_value"] > 1e-4

    def test_too_few(self):
        with pytest.raises(ValueError):
            stationarity_tests(np.zeros((10, 2)), None, SQUARE)


class TestStudies:
    def test_fit_order(self):
        h = np.array([0.1, 0.05, 0.025])
        assert fit_order(h, 3 * h) == pytest.approx(1.0)
        assert math.isnan(fit_order(h, [1.0, 0.0, 1.0]))

    def test_too_few_h(self):
        with pytest.raises(ValueError):
            weak_order_study("symmetrized", Box.cube(-1, 1, 1), [0.1, 0.05], lambda x: x[:, 0], [0.0])
        with pytest.raises(ValueError):
            local_time_rate_study([0.1, 0.05])

    def test_zero_psi(self):
        rep = local_time_rate_study([1 / 10, 1 / 20, 1 / 40], psi=lambda t, p: np.zeros(p.shape[0]), n=2000,
                                    reference="analytic")
        assert all(r["estimate"] == 0.0 for r in rep.rows)

    def test_deterministic_and_json(self, tmp_path):
        kw = dict(n=2000, seed=1, ref_factor=4)
        a = local_time_rate_study([1 / 10, 1 / 20, 1 / 40], **kw)
        b = local_time_rate_study([1 / 10, 1 / 20, 1 / 40], **kw)
        assert a.rows == b.rows and a.reference == b.reference
        back = StudyReport.from_json(a.to_json())
        assert back.rows == a.rows and back.orders == a.orders
        js, cs = a.save(tmp_path / "lt")
        assert StudyReport.from_json(js.read_text()).rows == a.rows
        assert cs.read_text().splitlines()[0] == "h,estimate,stderr,error"

    def test_chunking_independent_rows(self):
        x1, z1 = terminal_reflected(Box.cube(0, 1, 1), "symmetrized", 0.1, 1.0, Drift(), [0.5], 100,
                                    NoiseSource(0), psi=lambda t, p: np.ones(p.shape[0]))
        x2, z2 = terminal_reflected(Box.cube(0, 1, 1), "symmetrized", 0.1, 1.0, Drift(), [0.5], 100,
                                    NoiseSource(0), psi=lambda t, p: np.ones(p.shape[0]))
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(z1, z2)
        assert np.all(z1 >= 0)

    def test_pde_reference(self):
        # with zero drift E X_T^2 relaxes to the uniform second moment 1/3
        val = reflected_generator_expectation(lambda x: x * x, 0.9, 5.0, Drift("zero"), nx=801, nt=2000)
        assert val == pytest.approx(1 / 3, abs=1e-5)
        short = reflected_generator_expectation(lambda x: x * x, 0.0, 1e-3, Drift("zero"), nx=2001, nt=200)
        assert short == pytest.approx(2e-3, rel=0.02)

    def test_local_time_closed_form(self):
        # started at 1/2: short times have no boundary contact, long times grow like 2t
        assert reflected_bm_local_time_mean(0.5, 1e-3) == pytest.approx(0.0, abs=1e-12)
        assert reflected_bm_local_time_mean(0.5, 5.0) - reflected_bm_local_time_mean(0.5, 4.0) == pytest.approx(
            2.0, abs=1e-9)

    def test_small_weak_study(self):
        rep = weak_order_study("symmetrized", Box.cube(-1, 1, 1), [0.2, 0.1, 0.05], lambda x: x[:, 0] ** 2, [0.9],
                               n=20_000, seed=3, reference=0.5)
        assert len(rep.rows) == 3 and rep.reference["kind"] == "given"
