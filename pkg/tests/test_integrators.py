import math

import numpy as np
import pytest

from confined_diffusion.geometry import Ball, Box
from confined_diffusion.integrators import (CollisionError, DynamicsConfig, Drift, KineticState, a_c_step,
                                            b_step, barrier_drift, euler_aux, forward_cld_step, o_step_forward,
                                            o_step_reverse, reflected_step, simulate_cld, simulate_reflected,
                                            unconstrained_euler_step, write_event_csv, write_trajectory_csv)
from confined_diffusion.noise import NoiseSource


class ZeroNoise:
    def xi(self, step, shape, slot=0):
        return np.zeros(shape)


@pytest.fixture
def square():
    return Box.cube(-1.0, 1.0, 2)


class TestTransport:
    def test_hand_example(self, square):
        for method in ("fold", "ray"):
            x, v = a_c_step(square, np.array([0.9, 0.0]), np.array([1.0, 0.5]), 0.3, method=method)
            np.testing.assert_allclose(x, [0.8, 0.15], atol=1e-15)
            np.testing.assert_array_equal(v, [-1.0, 0.5])

    def test_zero_velocity(self, square):
        for dom in (square, Ball([0.0, 0.0], 1.0)):
            x, v = a_c_step(dom, np.array([0.3, -0.2]), np.zeros(2), 0.5)
            np.testing.assert_array_equal(x, [0.3, -0.2])
            np.testing.assert_array_equal(v, [0.0, 0.0])

    def test_reverse_moves_against_velocity(self, square):
        x, v = a_c_step(square, np.array([0.0, 0.0]), np.array([1.0, 0.0]), 0.5, reverse=True)
        np.testing.assert_allclose(x, [-0.5, 0.0])

    def test_speed_preserved(self):
        rng = np.random.default_rng(0)
        ball = Ball([0.0, 0.0], 1.0)
        x = rng.uniform(-1, 1, (20000, 2))
        x = x[np.linalg.norm(x, axis=1) < 0.99][:5000]
        v = rng.normal(size=(5000, 2))
        y, w, hits = a_c_step(ball, x, v, 0.5, return_hits=True)
        assert hits.max() >= 1
        assert np.max(np.abs(np.linalg.norm(w, axis=1) - np.linalg.norm(v, axis=1)) / np.spacing(
            np.linalg.norm(v, axis=1))) <= 4
        assert ball.contains(y, tol=0.0).all()

    def test_collision_cap(self):
        ball = Ball([0.0, 0.0], 1e-3)
        with pytest.raises(CollisionError):
            a_c_step(ball, np.array([[0.0, 0.0]]), np.array([[1.0, 0.37]]), 10.0)

    def test_fold_matches_ray_on_box(self, square):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (20000, 2))
        v = rng.normal(size=(20000, 2)) * 3
        y1, w1 = a_c_step(square, x, v, 0.4, method="fold")
        y2, w2 = a_c_step(square, x, v, 0.4, method="ray")
        assert np.max(np.abs(y1 - y2)) <= 1e-12
        np.testing.assert_array_equal(w1, w2)


class TestVelocityKernels:
    def test_o_forward(self):
        assert o_step_forward(1.0, 0.0, 1.0, 0.7) == 1.0
        assert o_step_forward(1.0, 0.1, 1.0, 0.0) == pytest.approx(0.904837418, abs=1e-9)
        assert o_step_forward(1.0, 50.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-12)

    def test_o_reverse(self):
        assert o_step_reverse(1.0, 0.0, 1.0, 0.7) == 1.0
        assert o_step_reverse(1.0, 0.1, 1.0, 0.0) == pytest.approx(1.105170918, abs=1e-9)
        xi = np.random.default_rng(2).standard_normal(400_000)
        assert np.var(o_step_reverse(0.0, 0.1, 1.0, xi)) == pytest.approx(math.exp(0.2) - 1, rel=0.01)

    def test_b_step(self):
        np.testing.assert_array_equal(b_step(np.array([0.2, 0.1]), np.array([1.0, 0.0]), 0.5, Drift()), [0.2, 0.1])
        np.testing.assert_array_equal(b_step(np.zeros(2), np.array([1.0, 0.0]), 0.5, Drift("linear")), [0.5, 0.0])
        np.testing.assert_array_equal(b_step(np.ones(2), np.array([1.0, 0.0]), 0.0, Drift("linear")), [1.0, 1.0])


class TestForwardKinetic:
    @pytest.mark.parametrize("scheme", ["AcOAc", "OAcO", "CBBK"])
    def test_fixed_point(self, square, scheme):
        st = KineticState(np.array([[0.3, -0.4]]), np.zeros((1, 2)))
        new, _ = forward_cld_step(square, scheme, st, DynamicsConfig(1.0, 0.01), ZeroNoise())
        np.testing.assert_array_equal(new.x, st.x)
        np.testing.assert_array_equal(new.v, st.v)

    def test_cbbk_hand_step(self):
        cfg = DynamicsConfig(1.0, 0.1, 1.0, Drift("linear"))
        st, _ = forward_cld_step(Box.cube(-1, 1, 1), "CBBK", KineticState(np.array([[0.5]]), np.zeros((1, 1))),
                                 cfg, ZeroNoise())
        # V_half = -0.025, X_1 = 0.4975, V_1 = (-0.025 - 0.05 * 0.4975) / 1.05
        assert st.x[0, 0] == pytest.approx(0.4975, abs=1e-15)
        assert st.v[0, 0] == pytest.approx((-0.025 - 0.024875) / 1.05, abs=1e-15)

    def test_cbbk_velocity_variance(self, square):
        # shared noise between consecutive half-kicks gives variance 1 / (1 + gamma h / 2)
        cfg = DynamicsConfig(20.0, 0.1, 1.0)
        rng = np.random.default_rng(3)
        path = simulate_cld(square, "CBBK", cfg, rng.uniform(-1, 1, (20000, 2)), rng.normal(size=(20000, 2)),
                            NoiseSource(5))
        assert np.var(path.v[-1]) == pytest.approx(1 / 1.05, rel=0.02)

    @pytest.mark.parametrize("scheme", ["AcOAc", "OAcO", "CBBK"])
    @pytest.mark.parametrize("drift", ["zero", "linear"])
    def test_constraint_adherence(self, square, scheme, drift):
        cfg = DynamicsConfig(2.0, 0.05, 1.0, Drift(drift))
        rng = np.random.default_rng(4)
        path = simulate_cld(square, scheme, cfg, rng.uniform(-1, 1, (2000, 2)), 3 * rng.normal(size=(2000, 2)),
                            NoiseSource(1))
        assert square.contains(path.x.reshape(-1, 2), tol=0.0).all()

    def test_ball_adherence(self):
        ball = Ball([0.5, 0.0], 0.7)
        rng = np.random.default_rng(5)
        x0 = ball.project(rng.uniform(-0.2, 1.2, (2000, 2)))
        path = simulate_cld(ball, "AcOAc", DynamicsConfig(1.0, 0.05), x0, rng.normal(size=(2000, 2)), NoiseSource(2))
        assert ball.contains(path.x.reshape(-1, 2), tol=0.0).all()

    def test_unknown_scheme(self, square):
        with pytest.raises(ValueError):
            forward_cld_step(square, "ABO", KineticState(np.zeros((1, 2)), np.zeros((1, 2))), DynamicsConfig(),
                             ZeroNoise())

    @pytest.mark.parametrize("drift", ["zero", "linear"])
    @pytest.mark.parametrize("gamma", [1.0, 2.0])
    def test_bounded_velocity_moments(self, square, drift, gamma):
        cfg = DynamicsConfig(100.0, 0.01, gamma, Drift(drift))
        rng = np.random.default_rng(6)
        st = KineticState(rng.uniform(-1, 1, (4096, 2)), rng.normal(size=(4096, 2)))
        noise = NoiseSource(7)
        means = np.empty(cfg.N)
        for k in range(cfg.N):
            st, _ = forward_cld_step(square, "AcOAc", st, cfg, noise)
            means[k] = np.mean(np.sum(st.v**2, axis=1))
        assert means.max() <= 5
        half = cfg.N // 2
        t = cfg.times()[half + 1:]
        assert np.polyfit(t, means[half:], 1)[0] <= 1e-3


class TestOverdampedKernels:
    def test_euler_aux(self):
        assert euler_aux(0.01, 0.0, 0.0) == 0.0
        assert euler_aux(0.01, -1.0, 0.0) == pytest.approx(-0.01)
        xi = np.random.default_rng(0).standard_normal(400_000)
        assert np.var(euler_aux(0.01, 0.0, xi)) == pytest.approx(0.02, rel=0.01)

    def test_symmetrized_example(self):
        box = Box.cube(-3.0, 3.0, 1)
        # X = 3, f = 0.4 / h, no noise, so X' = 3.4
        x, ev = reflected_step("symmetrized", box, np.array([[3.0]]), 0.1, np.array([[4.0]]), np.zeros((1, 1)))
        assert x[0, 0] == pytest.approx(2.6, abs=1e-12)
        assert ev.d[0] == pytest.approx(0.4, abs=1e-12)
        np.testing.assert_allclose(ev.p_proj, [[3.0]])
        np.testing.assert_allclose(ev.n_proj, [[1.0]])

    def test_projection(self):
        box = Box.cube(-3.0, 3.0, 1)
        x, ev = reflected_step("projection", box, np.array([[3.0]]), 0.1, np.array([[4.0]]), np.zeros((1, 1)))
        assert x[0, 0] == 3.0 and ev.exited[0]

    def test_symmetrized_ball(self):
        ball = Ball([0.0, 0.0], 1.0)
        x, ev = reflected_step("symmetrized", ball, np.array([[0.9, 0.0]]), 1.0, np.array([[0.3, 0.0]]),
                               np.zeros((1, 2)))
        np.testing.assert_allclose(x, [[0.8, 0.0]], atol=1e-12)

    def test_penalty_inside_is_plain_euler(self, square):
        x = np.array([[0.2, 0.3]])
        xi = np.array([[0.5, -0.1]])
        out, _ = reflected_step("penalty", square, x, 0.01, np.zeros((1, 2)), xi)
        np.testing.assert_allclose(out, unconstrained_euler_step(x, 0.01, 0.0, xi))

    def test_penalty_pulls_back(self, square):
        out, _ = reflected_step("penalty", square, np.array([[1.5, 0.0]]), 0.01, np.zeros((1, 2)), np.zeros((1, 2)))
        np.testing.assert_allclose(out, [[1.0, 0.0]])

    def test_barrier_magnitude_and_direction(self, square):
        drift = barrier_drift(square, np.array([[0.9, 0.0]]), eta=1.0, collar=0.5)
        np.testing.assert_allclose(drift, [[-2 / math.sinh(0.2), 0.0]], rtol=1e-12)
        assert np.linalg.norm(drift) == pytest.approx(9.933643, abs=1e-6)
        assert np.all(barrier_drift(square, np.array([[0.0, 0.0]]), eta=1.0) == 0)

    def test_barrier_clamp(self, square):
        drift = barrier_drift(square, np.array([[1.0, 0.0]]), eta=0.05)
        assert np.all(np.isfinite(drift)) and drift[0, 0] < 0

    def test_parameter_errors(self, square):
        with pytest.raises(ValueError):
            reflected_step("penalty", square, np.zeros((1, 2)), 0.01, 0.0, np.zeros((1, 2)), lam=0.0)
        with pytest.raises(ValueError):
            reflected_step("barrier", square, np.zeros((1, 2)), 0.01, 0.0, np.zeros((1, 2)), eta=0.0)
        with pytest.raises(ValueError):
            reflected_step("mirror", square, np.zeros((1, 2)), 0.01, 0.0, np.zeros((1, 2)))

    def test_unconstrained(self):
        np.testing.assert_array_equal(unconstrained_euler_step(np.array([0.5, 0.5]), 0.01, 0.0, 0.0), [0.5, 0.5])
        np.testing.assert_allclose(unconstrained_euler_step(np.zeros(2), 0.01, 0.0, np.array([1.0, 0.0])),
                                   [math.sqrt(0.02), 0.0])

    def test_unconstrained_leaves_domain(self):
        box = Box.cube(-3.0, 3.0, 2)
        rng = np.random.default_rng(1)
        path = simulate_reflected(None, "none", DynamicsConfig(1.0, 0.01, drift=Drift("linear")),
                                  rng.uniform(-3, 3, (5000, 2)), NoiseSource(3))
        assert (~box.contains(path.x[-1], tol=0.0)).mean() > 0

    @pytest.mark.parametrize("method", ["projection", "symmetrized"])
    @pytest.mark.parametrize("increments", ["gaussian", "rademacher"])
    def test_adherence(self, square, method, increments):
        rng = np.random.default_rng(2)
        path = simulate_reflected(square, method, DynamicsConfig(1.0, 0.02, increments=increments),
                                  rng.uniform(-1, 1, (3000, 2)), NoiseSource(4, increments=increments))
        assert square.contains(path.x.reshape(-1, 2), tol=0.0).all()
        assert path.exited.any()


class TestConfigAndNoise:
    def test_non_integer_steps(self):
        with pytest.raises(ValueError):
            DynamicsConfig(1.0, 0.3)

    def test_rademacher_values(self):
        xi = NoiseSource(0, increments="rademacher").xi(1, (1000,))
        assert set(np.unique(xi)) == {-1.0, 1.0}

    def test_noise_addressing(self):
        a = NoiseSource(3).xi(5, (4, 2), slot=1)
        b = NoiseSource(3).xi(5, (4, 2), slot=1)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, NoiseSource(3).xi(5, (4, 2), slot=0))


def test_dumps(tmp_path, square):
    rng = np.random.default_rng(0)
    kp = simulate_cld(square, "AcOAc", DynamicsConfig(0.1, 0.05), rng.uniform(-1, 1, (3, 2)),
                      rng.normal(size=(3, 2)), NoiseSource(0))
    write_trajectory_csv(tmp_path / "traj.csv", kp.x, kp.v, h=0.05)
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "step,t,x0,x1,v0,v1" and len(lines) == 4
    op = simulate_reflected(square, "symmetrized", DynamicsConfig(1.0, 0.1), np.array([[0.99, 0.0]]), NoiseSource(1))
    write_event_csv(tmp_path / "ev.csv", op, 0.1)
    assert (tmp_path / "ev.csv").read_text().startswith("step,t,d,p0,p1,n0,n1")
