import math

import numpy as np
import pytest

from bubbleonet import integrate as it
from bubbleonet.errors import DomainError, SingularityError, StiffnessError
from bubbleonet.physics import dimensionless_groups, make_scales, rp_rhs


class TestTableau:
    def test_row_sums_match_nodes(self):
        assert np.allclose(it.A.sum(axis=1), it.C, rtol=0, atol=1e-15)

    def test_weights_sum_to_one(self):
        assert abs(it.B5.sum() - 1.0) <= 1e-15
        assert abs(it.B4.sum() - 1.0) <= 1e-15

    def test_first_same_as_last(self):
        assert np.array_equal(it.A[6, :6], it.B5[:6])
        assert it.B5[6] == 0.0

    def test_published_values_spotcheck(self):
        assert it.A[1, 0] == 1 / 5
        assert it.B5[4] == -2187 / 6784
        assert it.B4[6] == 1 / 40
        assert it.C[4] == 8 / 9


class TestStep:
    def test_zero_field(self):
        y5, y4, K = it.rk_step(lambda t, y: np.zeros_like(y), np.array([1.0, -2.0]), 0.0, 0.5)
        assert np.array_equal(y5, [1.0, -2.0])
        assert np.array_equal(y4, [1.0, -2.0])
        assert np.all(K == 0.0)

    def test_exponential(self):
        # one-step defect vs exp is C * dt^6 with C ~ 2.6e-4 for this field
        y5, _, _ = it.rk_step(lambda t, y: y, np.array([1.0]), 0.0, 0.1)
        assert y5[0] == pytest.approx(math.exp(0.1), abs=1e-9)
        errs = []
        for dt in (0.1, 0.05):
            y5, _, _ = it.rk_step(lambda t, y: y, np.array([1.0]), 0.0, dt)
            errs.append(abs(y5[0] - math.exp(dt)))
        assert errs[0] / errs[1] == pytest.approx(2**6, rel=0.15)

    def test_harmonic_energy_error_order(self):
        f = lambda t, y: np.array([y[1], -y[0]])
        for dt in (0.1, 0.05):
            y5, _, _ = it.rk_step(f, np.array([1.0, 0.0]), 0.0, dt)
            drift = abs(y5[0] ** 2 + y5[1] ** 2 - 1.0)
            assert drift < 5.0 * dt**6

    def test_fsal_reuse_matches(self):
        f = lambda t, y: np.array([math.sin(t) + y[0] * 0.1])
        y = np.array([0.7])
        _, _, K = it.rk_step(f, y, 0.0, 0.05)
        y2a, _, _ = it.rk_step(f, y, 0.0, 0.05, k1=K[0])
        y2b, _, _ = it.rk_step(f, y, 0.0, 0.05)
        assert np.array_equal(y2a, y2b)

    def test_rejects_bad_dt(self):
        with pytest.raises(DomainError):
            it.rk_step(lambda t, y: y, np.array([1.0]), 0.0, 0.0)


class TestFixedGrid:
    def test_equilibrium_stays_put(self, fluid, scales, groups):
        p_eq = fluid.P0 / scales.P_star
        f = lambda t, y: rp_rhs(y, p_eq, groups)
        out = it.integrate_fixed(f, [1.0, 0.0], np.linspace(0, 1, 2001))
        assert np.abs(out[:, 0] - 1.0).max() < 1e-9
        assert np.abs(out[:, 1]).max() < 1e-9

    def test_exponential_endpoint(self):
        out = it.integrate_fixed(lambda t, y: y, [1.0], np.linspace(0, 1, 2001))
        assert out[-1, 0] == pytest.approx(math.e, rel=1e-12)

    def test_fresh_evaluations_per_step(self):
        calls = [0]

        def f(t, y):
            calls[0] += 1
            return -y

        n_steps = 50
        it.integrate_fixed(f, [1.0], np.linspace(0, 1, n_steps + 1))
        assert calls[0] == 7 + 6 * (n_steps - 1)

    def test_convergence_order_decay(self):
        f = lambda t, y: -y
        errs = []
        for n in (500, 1000, 2000):
            grid = np.linspace(0, 20.0, n + 1)
            out = it.integrate_fixed(f, [1.0], grid)
            errs.append(np.abs(out[:, 0] - np.exp(-grid)).max())
        assert math.log2(errs[0] / errs[1]) >= 4.8
        assert math.log2(errs[1] / errs[2]) >= 4.8

    def test_convergence_order_bubble(self, fluid, scales, groups):
        p_eq = fluid.P0 / scales.P_star
        f = lambda t, y: rp_rhs(y, p_eq, groups)
        ref = it.integrate_fixed(f, [1.3, 0.0], np.linspace(0, 1, 16001))
        errs = []
        for n in (500, 1000, 2000):
            out = it.integrate_fixed(f, [1.3, 0.0], np.linspace(0, 1, n + 1))
            idx = np.linspace(0, 16000, n + 1).astype(int)
            errs.append(np.abs(out[:, 0] - ref[idx, 0]).max())
        assert math.log2(errs[0] / errs[1]) >= 4.8
        assert math.log2(errs[1] / errs[2]) >= 4.8

    def test_singularity_carries_index(self, groups):
        # strong constant overpressure collapses the bubble
        f = lambda t, y: rp_rhs(y, 50.0, groups)
        with pytest.raises(SingularityError) as exc:
            it.integrate_fixed(f, [1.0, 0.0], np.linspace(0, 1, 2001))
        assert exc.value.t_index is not None

    def test_rejects_nonuniform_grid(self):
        with pytest.raises(DomainError):
            it.integrate_fixed(lambda t, y: y, [1.0], np.array([0.0, 0.1, 0.3]))


class TestResidualOperator:
    def test_zero_on_own_prediction(self, groups):
        f = lambda t, y: rp_rhs(y, 1.0, groups)
        y0 = np.array([1.1, 0.3])
        y1, _, _ = it.rk_step(f, y0, 0.2, 1e-3)
        G = it.residual_operator(y0, y1, f, 0.2, 1e-3)
        assert np.abs(G).max() < 1e-15

    def test_affine_in_endpoint(self, groups):
        f = lambda t, y: rp_rhs(y, 1.0, groups)
        y0 = np.array([1.1, 0.3])
        y1, _, _ = it.rk_step(f, y0, 0.2, 1e-3)
        delta = np.array([3e-4, -2e-5])
        G0 = it.residual_operator(y0, y1, f, 0.2, 1e-3)
        G1 = it.residual_operator(y0, y1 + delta, f, 0.2, 1e-3)
        # exact up to the single rounding of y1 + delta
        assert np.allclose(G1 - G0, delta, rtol=0, atol=1e-15)

    def test_translation_consistency(self):
        # autonomous field: the defect cannot depend on the clock origin
        f = lambda t, y: np.array([y[1], -1.3 * y[0]])
        y0 = np.array([0.9, -0.2])
        y1 = np.array([0.905, -0.15])
        G_a = it.residual_operator(y0, y1, f, 0.0, 2e-3)
        G_b = it.residual_operator(y0, y1, f, 17.42, 2e-3)
        assert np.array_equal(G_a, G_b)

    def test_ground_truth_trajectory_defect(self, fluid, scales, groups):
        from bubbleonet.integrate import BubbleODE

        ode = BubbleODE("RP", groups, 2e5, 8e5, fluid, scales)
        grid = np.linspace(0, 1, 2000)
        _, states = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        dt = grid[1] - grid[0]
        total = 0.0
        for i in range(0, 1999, 97):
            G = it.residual_operator(states[i], states[i + 1], ode, grid[i], dt)
            total = max(total, float(G @ G))
        assert total < 1e-10


class TestAdaptive:
    def test_zero_field_single_step(self):
        calls = [0]

        def f(t, y):
            calls[0] += 1
            return np.zeros_like(y)

        t_eval = np.linspace(0, 5.0, 11)
        _, out = it.integrate_adaptive(f, [2.0, 1.0], (0, 5.0), 1e-8, 1e-10, t_eval=t_eval)
        assert np.all(out == [2.0, 1.0])
        assert calls[0] == 7  # the first trial spans the whole interval

    def test_matches_fixed_grid(self):
        f = lambda t, y: np.array([y[1], -4.0 * y[0]])
        grid = np.linspace(0, 3.0, 301)
        fine = it.integrate_fixed(f, [1.0, 0.0], np.linspace(0, 3.0, 3001))
        _, out = it.integrate_adaptive(f, [1.0, 0.0], (0, 3.0), 1e-10, 1e-12, t_eval=grid)
        assert np.abs(out - fine[::10]).max() < 1e-8

    def test_dense_output_hits_step_endpoint(self):
        f = lambda t, y: -0.7 * y
        _, K = None, None
        y5, _, K = it.rk_step(f, np.array([1.0]), 0.0, 0.3)
        dense = it.dense_eval(np.array([1.0]), K, 0.3, np.array([1.0]))
        assert dense[0, 0] == pytest.approx(y5[0], rel=1e-13)

    def test_stiffness_error(self):
        def nasty(t, y):
            return np.array([math.nan]) if t > 0.5 else -y

        with pytest.raises(StiffnessError):
            it.integrate_adaptive(nasty, [1.0], (0, 1.0), 1e-8, 1e-10)

    def test_high_amplitude_compressible_case(self, fluid):
        # hard corpus point: 1 MPa at 200 kHz over 55 us
        sc = make_scales(50e-6, 55e-6, fluid)
        g = dimensionless_groups(fluid, sc)
        ode = it.BubbleODE("KM", g, 1e6, 2e5, fluid, sc)
        grid = np.linspace(0, 1, 2000)
        _, out = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-9, 1e-11, t_eval=grid)
        assert np.all(np.isfinite(out))
        assert out[:, 0].min() > 0.0

    def test_python_and_compiled_paths_agree(self, fluid):
        sc = make_scales(50e-6, 55e-6, fluid)
        g = dimensionless_groups(fluid, sc)
        ode = it.BubbleODE("KM", g, 5e5, 9e5, fluid, sc)
        grid = np.linspace(0, 1, 500)
        _, fast = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        _, slow = it.integrate_adaptive(ode.__call__, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        assert np.abs(fast - slow).max() < 1e-8

    def test_scipy_oracle(self, fluid):
        scipy_int = pytest.importorskip("scipy.integrate")
        sc = make_scales(50e-6, 55e-6, fluid)
        g = dimensionless_groups(fluid, sc)
        ode = it.BubbleODE("KM", g, 8e5, 1.927e6, fluid, sc)
        grid = np.linspace(0, 1, 2000)
        _, mine = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        sol = scipy_int.solve_ivp(
            ode, (0, 1.0), [1.0, 0.0], method="DOP853", rtol=1e-11, atol=1e-13, t_eval=grid
        )
        assert np.abs(sol.y[0] - mine[:, 0]).max() < 1e-8

    def test_validation(self):
        with pytest.raises(DomainError):
            it.integrate_adaptive(lambda t, y: y, [1.0], (0, 1.0), -1e-8, 1e-10)
        with pytest.raises(DomainError):
            it.integrate_adaptive(lambda t, y: y, [1.0], (1.0, 0.0), 1e-8, 1e-10)

    def test_determinism(self, fluid):
        sc = make_scales(50e-6, 55e-6, fluid)
        g = dimensionless_groups(fluid, sc)
        ode = it.BubbleODE("KM", g, 6e5, 1.2e6, fluid, sc)
        grid = np.linspace(0, 1, 777)
        _, a = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        _, b = it.integrate_adaptive(ode, [1.0, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
        assert np.array_equal(a, b)
