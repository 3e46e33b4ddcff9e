import warnings

import numpy as np
import pytest

from cnstn.noise import DriverPath, make_constant_q, make_streamfunction_q, sample_brownian, zero_path
from cnstn.solver import (
    BlowUp,
    CFLWarning,
    Discretization,
    GalerkinState,
    SchemeParams,
    pressure,
    pressure_potential,
    pressure_potential_derivative,
    regularize_density,
    rhs_continuity,
    rhs_momentum,
    simulate,
    step,
    stress_divergence,
    time_derivatives,
    truncation,
    truncation_derivative,
    uniform_state,
    with_params,
)
from cnstn.spectral import ScalarField, TorusGrid, VectorField, inner, random_field
from oracles import manufactured_momentum


def params(**kw):
    base = dict(m=4, dt=1e-3, T=0.02, mu=0.1, eta=0.1)
    base.update(kw)
    return SchemeParams(**base)


def smooth_state(grid, prm, amp=0.2, vel=0.5):
    x, y = grid.coords
    rho = ScalarField.from_values(grid, 1.0 + amp * np.cos(x) + 0.5 * amp * np.sin(x + y))
    u = VectorField.from_values(grid, np.stack([vel * np.sin(y), vel * np.cos(x) - 0.3 * vel * np.sin(2 * y)]))
    return GalerkinState(0.0, rho, u, prm)


class TestParams:
    def test_beta_rule(self):
        with pytest.raises(ValueError, match="beta must exceed"):
            SchemeParams(beta=3.0, gamma=2.0)

    def test_gamma_dimension(self):
        prm = SchemeParams(gamma=1.2)
        prm.check_dimension(2)
        with pytest.raises(ValueError, match="gamma must exceed N/2"):
            prm.check_dimension(3)

    def test_steps(self):
        assert SchemeParams(dt=1e-3, T=0.5).steps == 500
        with pytest.raises(ValueError):
            SchemeParams(dt=0.3, T=0.5).steps

    def test_positive_viscosity(self):
        with pytest.raises(ValueError):
            SchemeParams(mu=0.0)


class TestPressure:
    def test_unit(self, grid16):
        p = pressure(ScalarField.constant(grid16, 1.0), params())
        assert np.allclose(p.values, 1.0)

    def test_zero(self, grid16):
        assert np.all(pressure(ScalarField.constant(grid16, 0.0), params()).values == 0.0)
        assert np.all(pressure_potential(ScalarField.constant(grid16, 0.0), params()).values == 0.0)

    def test_artificial_pressure(self, grid16):
        p = pressure(ScalarField.constant(grid16, 2.0), SchemeParams(delta=0.1, beta=4.0 + 1e-12))
        assert np.allclose(p.values, 4.0 + 0.1 * 2.0 ** (4.0 + 1e-12), rtol=1e-10)
        assert np.allclose(p.values, 5.6, rtol=1e-10)

    def test_potential(self, grid16):
        assert np.allclose(pressure_potential(ScalarField.constant(grid16, 2.0), params()).values, 4.0)

    def test_potential_identity(self, grid16, rng):
        prm = SchemeParams(gamma=1.7, delta=0.05, beta=5.5)
        rho = random_field(grid16, rng, amplitude=0.8, mean=1.0)
        lhs = pressure_potential_derivative(rho, prm).values * rho.values - pressure_potential(rho, prm).values
        assert np.allclose(lhs, pressure(rho, prm).values, atol=1e-10, rtol=0)

    def test_negative_density(self, grid16):
        with pytest.raises(BlowUp):
            pressure(ScalarField.constant(grid16, -1.0), params())


class TestStress:
    def test_solenoidal(self, grid16):
        y = grid16.coords[1]
        u = VectorField.from_values(grid16, np.stack([np.sin(y), 0 * y]))
        s = stress_divergence(u, params(mu=0.3))
        assert np.allclose(s[0].values, -0.3 * np.sin(y), atol=1e-14)
        assert np.allclose(s[1].values, 0.0, atol=1e-14)

    def test_gradient_mode(self, grid16):
        x = grid16.coords[0]
        u = VectorField.from_values(grid16, np.stack([np.cos(x), 0 * x]))
        s = stress_divergence(u, params(mu=0.3, eta=0.2))
        assert np.allclose(s[0].values, -(2 * 0.3 + 0.2) * np.cos(x), atol=1e-14)

    def test_dissipative(self, grid16):
        g = np.random.default_rng(3)
        prm = params()
        for _ in range(100):
            u = VectorField((random_field(grid16, g), random_field(grid16, g)))
            s = stress_divergence(u, prm)
            assert -(inner(s[0], u[0]) + inner(s[1], u[1])) >= -1e-13


class TestContinuity:
    def test_uniform_constant_q(self, grid16):
        st = uniform_state(grid16, params())
        r = rhs_continuity(st, make_constant_q([(1.0, 0.5)]), [2.0])
        assert np.max(np.abs(r.values)) < 1e-14

    def test_pure_diffusion(self, grid16, rng):
        prm = params(epsilon=0.05)
        rho = random_field(grid16, rng, amplitude=0.3, mean=1.0)
        st = GalerkinState(0.0, rho, VectorField.zeros(grid16), prm)
        r = rhs_continuity(st, None)
        lap = -grid16.k2 * rho.coeffs
        assert np.allclose(r.coeffs, 0.05 * lap, atol=1e-14)

    def test_mean_zero(self, grid16, rng):
        prm = params(epsilon=0.01)
        st = GalerkinState(0.0, random_field(grid16, rng, amplitude=0.3, mean=1.0),
                           VectorField((random_field(grid16, rng, cutoff=4), random_field(grid16, rng, cutoff=4))),
                           prm)
        q = make_streamfunction_q(grid16, [[(1, 2, 0.3, 0.1)]])
        assert abs(rhs_continuity(st, q, [1.3]).mean()) < 1e-14

    def test_slope_length(self, grid16):
        with pytest.raises(ValueError):
            rhs_continuity(uniform_state(grid16, params()), make_constant_q([(1, 0)]), [1.0, 2.0])


class TestMomentum:
    def test_uniform_at_rest(self, grid16):
        r = rhs_momentum(uniform_state(grid16, params()), None)
        assert np.max(np.abs(r.values)) < 1e-14

    def test_mean_zero(self, grid16, rng):
        st = GalerkinState(0.0, random_field(grid16, rng, amplitude=0.3, mean=1.0),
                           VectorField((random_field(grid16, rng, cutoff=4), random_field(grid16, rng, cutoff=4))),
                           params())
        r = rhs_momentum(st, None)
        assert np.max(np.abs([r[0].mean(), r[1].mean()])) < 1e-14

    @pytest.mark.parametrize("stress_factor", [1.0, 2.0])
    def test_manufactured_single_mode(self, stress_factor):
        grid = TorusGrid(2, 4, 16)
        prm = params(epsilon=0.03, stress_factor=stress_factor, mu=0.2, eta=0.05)
        rho_f = lambda x, y: 1.0 + 0.3 * np.cos(x)
        u_f = (lambda x, y: 0.7 * np.sin(y), lambda x, y: 0.4 * np.cos(x + y))
        q_vec = [(0.3, -0.2)]
        w = [1.7]
        x = grid.coords
        st = GalerkinState(0.0, ScalarField.from_values(grid, rho_f(*x)),
                           VectorField.from_values(grid, np.stack([f(*x) for f in u_f])), prm)
        got = rhs_momentum(st, make_constant_q(q_vec), w).coeffs
        ref = manufactured_momentum(grid, prm, rho_f, u_f, q_vec, w)
        assert np.max(np.abs(got - ref)) <= 1e-10

    def test_time_derivative_consistency(self, grid16):
        prm = params()
        st = smooth_state(grid16, prm)
        drho, du = time_derivatives(st, None)
        # d(rho u)/dt projected equals P_m(rho du/dt + u drho/dt)
        disc = Discretization(grid16, prm, None)
        lhs = disc.proj(disc.unpad(disc.pad(st.rho.coeffs) * disc.pad(du.coeffs))
                        + disc.unpad(disc.pad(st.u.coeffs) * disc.pad(drho.coeffs)))
        rhs = rhs_momentum(st, None).coeffs
        assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestMassSolver:
    def test_dense_and_cg_agree(self, grid16):
        prm = params()
        st = smooth_state(grid16, prm, amp=0.4)
        a = Discretization(grid16, prm, None, mass_solver="dense")
        b = Discretization(grid16, prm, None, mass_solver="cg")
        ea = a.evaluate(st.rho.coeffs, st.u.coeffs, np.zeros(0))
        eb = b.evaluate(st.rho.coeffs, st.u.coeffs, np.zeros(0))
        assert np.max(np.abs(ea.u_dot - eb.u_dot)) < 1e-10

    def test_bad_solver(self, grid16):
        with pytest.raises(ValueError):
            Discretization(grid16, params(), None, mass_solver="lu")


class TestStep:
    def test_fixed_point(self, grid16):
        st = uniform_state(grid16, params())
        q = make_constant_q([(1.0, 0.0)])
        nxt = step(st, q, zero_path(1, 0.02, 20))
        assert np.max(np.abs(nxt.rho.values - 1.0)) < 1e-14
        assert np.max(np.abs(nxt.u.values)) < 1e-14

    def test_fixed_point_with_noise(self, grid16):
        # uniform density at rest is stationary for any driver and constant Q
        st = uniform_state(grid16, params())
        nxt = step(st, make_constant_q([(1.0, 0.3)]), slope=[5.0])
        assert np.max(np.abs(nxt.rho.values - 1.0)) < 1e-14

    def test_second_order(self, grid16):
        T = 0.02
        base = smooth_state(grid16, params(epsilon=0.01, T=T, dt=T))
        q = make_constant_q([(0.4, 0.2)])
        drv = DriverPath(np.linspace(0, T, 2), np.array([[0.0], [0.03]]))

        def advance(dt):
            st = with_params(base, dt=dt)
            for _ in range(int(round(T / dt))):
                st = step(st, q, slope=drv.increment(0, T) / T)
            return st.rho.values

        ref = advance(T / 16)
        e1 = np.max(np.abs(advance(T) - ref))
        e2 = np.max(np.abs(advance(T / 2) - ref))
        assert 3.0 <= e1 / e2 <= 5.0

    def test_beyond_T(self, grid16):
        st = uniform_state(grid16, params(T=0.001, dt=0.001))
        st = step(st, None)
        with pytest.raises(ValueError):
            step(st, None)


class TestSimulate:
    def test_mass_drift(self, grid16):
        prm = params(T=1.0, dt=1e-3, epsilon=0.01)
        st = smooth_state(grid16, prm)
        traj = simulate(st, make_constant_q([(0.3, 0.1)]), sample_brownian(1, 1.0, 1000, seed=1),
                        ledger=False, stride=100)
        assert traj.status == "completed"
        assert np.max(np.abs(traj.mass - traj.mass[0])) / traj.mass[0] <= 1e-11

    def test_galerkin_support(self, grid16):
        prm = params(m=3, T=0.05)
        traj = simulate(smooth_state(grid16, prm), None, stride=10, ledger=False)
        for j in range(len(traj)):
            assert traj.state(j).galerkin_leak() == 0.0
        disc = Discretization(grid16, prm, None)
        u_c = np.fft.fftn(traj.u[-1], axes=(1, 2)) / 256
        assert np.max(np.abs(u_c[:, ~disc.mask])) < 1e-15

    def test_constant_trajectory(self, grid16):
        prm = params(T=0.05)
        traj = simulate(uniform_state(grid16, prm), None, stride=5)
        assert np.max(np.abs(traj.rho - 1.0)) < 1e-14
        assert np.max(np.abs(traj.u)) < 1e-14

    def test_blowup_reported(self, grid16):
        prm = params(T=1.0, dt=0.1, mu=0.1)
        st = smooth_state(grid16, prm, amp=0.6, vel=4.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CFLWarning)
            traj = simulate(st, None, ledger=False)
        assert traj.status == "blowup"
        assert traj.blowup.t > 0
        assert traj.blowup.trajectory is traj

    def test_cfl_warning(self, grid16):
        prm = params(T=0.1, dt=0.05, mu=2.0)
        with pytest.warns(CFLWarning):
            simulate(smooth_state(grid16, prm, amp=0.1, vel=0.1), None, ledger=False)

    def test_driver_grid_mismatch(self, grid16):
        prm = params()
        drv = DriverPath(np.array([0.0, 0.0105, 0.02]), np.zeros((3, 1)))
        with pytest.raises(ValueError, match="step grid"):
            simulate(uniform_state(grid16, prm), make_constant_q([(1, 0)]), drv)

    def test_deterministic(self, grid16):
        prm = params()
        q = make_constant_q([(0.3, 0.1)])
        drv = sample_brownian(1, prm.T, prm.steps, seed=5)
        a = simulate(smooth_state(grid16, prm), q, drv, stride=1)
        b = simulate(smooth_state(grid16, prm), q, drv, stride=1)
        assert np.array_equal(a.rho, b.rho)
        assert np.array_equal(a.ledger.residual, b.ledger.residual)

    def test_smooth_q_runs(self, grid16):
        prm = params(T=0.05)
        q = make_streamfunction_q(grid16, [[(1, 1, 0.2, 0.0)]])
        drv = DriverPath(np.linspace(0, 0.05, 51), np.sin(np.linspace(0, 0.05, 51))[:, None])
        traj = simulate(smooth_state(grid16, prm), q, drv, stride=10)
        assert traj.status == "completed"

    @pytest.mark.slow
    def test_desk_scale_smooth_driver(self):
        grid = TorusGrid(2, 16, 64)
        prm = SchemeParams(m=16, dt=1e-3, T=0.5)
        q = make_constant_q([(0.3, 0.1)])
        drv = DriverPath(np.linspace(0, 0.5, 501), np.sin(3 * np.linspace(0, 0.5, 501))[:, None])
        traj = simulate(smooth_state(grid, prm), q, drv, ledger=False, stride=100)
        assert traj.status == "completed"


class TestTruncation:
    def test_linear_part(self):
        assert truncation(0.5, 1.0) == 0.5

    def test_constant_part(self):
        assert truncation(5.0, 1.0) == 2.0

    def test_bridge(self):
        assert truncation(2.0, 1.0) == pytest.approx(1.75, abs=1e-15)

    @pytest.mark.parametrize("k", [0.5, 1.0, 3.0])
    def test_c1_knots(self, k):
        for z in (k, 3 * k):
            h = 1e-7 * k
            assert abs(truncation(z - h, k) - truncation(z + h, k)) <= 3 * h
            assert abs(truncation_derivative(z * (1 - 1e-15), k) - truncation_derivative(z, k)) <= 1e-12
        assert truncation_derivative(k, k) == 1.0
        assert truncation_derivative(3 * k, k) == 0.0

    def test_concave_and_bounded(self):
        z = np.linspace(0, 10, 1001)
        t = truncation(z, 1.0)
        assert np.all(np.diff(t, 2) <= 1e-12)
        assert np.max(t) == 2.0

    def test_bad_k(self):
        with pytest.raises(ValueError):
            truncation(1.0, 0.0)


class TestRegularize:
    def test_mass_and_floor(self, grid16, rng):
        rho = random_field(grid16, rng, amplitude=1.5, mean=1.0)
        r = regularize_density(rho, 3, 0.1)
        assert r.mean() == pytest.approx(1.0, rel=1e-14)
        # lifted to the floor, then rescaled by mass / (mass + lift)
        lift = max(0.0, 0.1 - np.min(rho.values))
        assert np.min(r.values) >= 0.1 / (1.0 + lift) * (1 - 1e-12)
        mask = grid16.cutoff_mask(3)
        assert np.max(np.abs(r.coeffs[~mask])) < 1e-14
