import numpy as np
import pytest

from cmvlq import riccati
from cmvlq.errors import DomainError, NonPositiveGain, NumericalBlowup
from cmvlq.lqmodel import LqCost, LqDynamics
from cmvlq.riccati import (
    SystemicRiskParams,
    closed_form_lambda,
    delta_pm,
    ode_rhs,
    save_riccati_csv,
    solve_riccati,
    systemic_risk_model,
)

from conftest import make_interbank, random_lq

# independent RK4 integration of the scalar Riccati ODE at h = 1e-6,
# kappa=1, q=0, eta=1, c=1, sigma1=0, T=1, evaluated at t = 0
FINE_GRID_LAMBDA0 = 0.22159516602816265


def interbank_params(**kw):
    base = dict(kappa=1.0, q=0.0, eta=1.0, c=1.0, sigma0=1.0, sigma1=0.0,
                rho=0.5, T=1.0, x0=0.0)
    base.update(kw)
    return SystemicRiskParams(**base)


class TestClosedForm:
    def test_terminal_value(self):
        p = interbank_params(c=1.7)
        assert closed_form_lambda(p, p.T) == pytest.approx(0.85, abs=1e-15)

    def test_zero_solution_degenerate(self):
        # eta = q^2 and c = 0: zero forcing, zero terminal data
        p = interbank_params(q=1.0, eta=1.0, c=0.0)
        for t in (0.0, 0.3, 1.0):
            assert closed_form_lambda(p, t) == 0.0

    def test_double_root_branch(self):
        # kappa + q = sigma1^2 / 2 and eta = q^2: Lambda' = 2 Lambda^2
        p = interbank_params(kappa=0.0, q=1.0, eta=1.0, sigma1=np.sqrt(2.0), c=0.8)
        for t in (0.0, 0.5, 1.0):
            expect = 0.4 / (1.0 + 0.8 * (1.0 - t))
            assert closed_form_lambda(p, t) == pytest.approx(expect, rel=1e-12)

    def test_fine_grid_oracle(self):
        p = interbank_params()
        assert closed_form_lambda(p, 0.0) == pytest.approx(FINE_GRID_LAMBDA0, abs=1e-9)

    def test_positive_on_horizon(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            p = interbank_params(kappa=float(rng.uniform(0, 2)),
                                 q=float(rng.uniform(0, 0.9)),
                                 eta=float(rng.uniform(0.85, 3)),
                                 c=float(rng.uniform(0.1, 2)),
                                 sigma1=float(rng.uniform(-1, 1)))
            for t in np.linspace(0, p.T, 11):
                assert closed_form_lambda(p, t) > 0.0

    def test_domain_error(self):
        p = interbank_params(q=2.0, eta=1.0)
        with pytest.raises(DomainError):
            closed_form_lambda(p, 0.0)
        with pytest.raises(DomainError):
            delta_pm(p)

    def test_time_range(self):
        with pytest.raises(ValueError):
            closed_form_lambda(interbank_params(), 1.5)


class TestSystemicRiskModel:
    def test_quoted_coefficients(self):
        p = interbank_params(q=0.5)
        dyn, cost = systemic_risk_model(p)
        assert dyn.B[0, 0] == pytest.approx(-1.5, abs=0)
        assert dyn.Bbar[0, 0] == pytest.approx(1.5, abs=0)
        assert cost.Q2[0, 0] == pytest.approx(0.375, abs=0)
        assert cost.Q2bar[0, 0] == pytest.approx(-0.375, abs=0)
        assert cost.R2[0, 0] == 0.5
        assert cost.P2[0, 0] == 0.5
        assert cost.P2bar[0, 0] == -0.5
        assert not np.any(cost.M2)

    def test_full_common_noise(self):
        p = interbank_params(sigma1=0.0, rho=1.0)
        dyn, _ = systemic_risk_model(p)
        assert dyn.D[0, 0] == 0.0
        assert dyn.D0[0, 0] == 0.0
        assert dyn.theta[0] == 0.0
        assert dyn.theta0[0] == pytest.approx(p.sigma0, abs=0)
        assert dyn.D0bar[0, 0] == 0.0

    def test_generic_rhs_matches_scalar_system(self):
        # generic backward RHS vs the literal scalar equations
        rng = np.random.default_rng(31)
        for trial in range(10):
            p = interbank_params(kappa=float(rng.uniform(0, 2)),
                                 q=float(rng.uniform(0, 0.8)),
                                 eta=float(rng.uniform(0.7, 2)),
                                 c=float(rng.uniform(0.2, 2)),
                                 sigma0=float(rng.uniform(0.5, 2)),
                                 sigma1=float(rng.uniform(-1, 1)),
                                 rho=float(rng.uniform(-1, 1)))
            dyn, cost = systemic_risk_model(p)
            Lam = float(rng.uniform(0.05, 2))
            Gam = float(rng.uniform(-1, 1))
            gam = float(rng.uniform(-1, 1))
            dL, dG, dg, dc = ode_rhs(np.array([[Lam]]), np.array([[Gam]]),
                                     np.array([gam]), dyn, cost)
            rate = p.kappa + p.q - 0.5 * p.sigma1 ** 2
            s1sq, rho2 = p.sigma1 ** 2, p.rho ** 2
            exp_dL = 2 * rate * Lam + 2 * Lam ** 2 - 0.5 * (p.eta - p.q ** 2)
            exp_dG = 2 * Gam ** 2 - s1sq * rho2 * Gam - s1sq * (1 - rho2) * Lam
            exp_dg = 2 * Gam * gam - 2 * p.sigma0 * p.sigma1 * rho2 * Gam \
                - 2 * p.sigma0 * p.sigma1 * (1 - rho2) * Lam
            exp_dc = 0.5 * gam ** 2 - p.sigma0 ** 2 * rho2 * Gam \
                - p.sigma0 ** 2 * (1 - rho2) * Lam
            assert dL[0, 0] == pytest.approx(exp_dL, rel=1e-12, abs=1e-12)
            assert dG[0, 0] == pytest.approx(exp_dG, rel=1e-12, abs=1e-12)
            assert dg[0] == pytest.approx(exp_dg, rel=1e-12, abs=1e-12)
            assert dc == pytest.approx(exp_dc, rel=1e-12, abs=1e-12)


class TestSolve:
    def test_interbank_matches_closed_form(self):
        p, dyn, cost, sol, _ = make_interbank(h=1e-3, q=0.0, sigma1=0.0, x0=0.0)
        cf = np.array([closed_form_lambda(p, t) for t in sol.grid])
        assert np.max(np.abs(sol.Lam[:, 0, 0] - cf)) <= 1e-8

    def test_sigma1_zero_kills_gam_and_gam_vec(self):
        _, _, _, sol, _ = make_interbank(h=1e-3, sigma1=0.0)
        assert np.max(np.abs(sol.Gam)) <= 1e-14
        assert np.max(np.abs(sol.gam)) <= 1e-14

    def test_chi_quadrature_oracle(self):
        from scipy.integrate import quad

        p, _, _, sol, _ = make_interbank(h=1e-3, sigma1=0.0)
        oracle, _ = quad(lambda s: p.sigma0 ** 2 * (1 - p.rho ** 2)
                         * closed_form_lambda(p, s), 0.0, p.T,
                         epsabs=1e-13, epsrel=1e-13)
        assert sol.chi[0] == pytest.approx(oracle, abs=1e-10)

    def test_zero_data_zero_lambda(self):
        # P2 = Q2 = 0, M2 = 0, F = F0 = 0: zero is the exact solution
        dyn, cost = random_lq(40, d=2, m=1)
        dyn = LqDynamics(b0=dyn.b0, B=dyn.B, Bbar=dyn.Bbar, C=dyn.C, theta=dyn.theta,
                         D=dyn.D, Dbar=dyn.Dbar, F=np.zeros((2, 1)), theta0=dyn.theta0,
                         D0=dyn.D0, D0bar=dyn.D0bar, F0=np.zeros((2, 1)))
        cost = LqCost(Q2=np.zeros((2, 2)), Q2bar=cost.Q2bar, R2=cost.R2,
                      P2=np.zeros((2, 2)), P2bar=cost.P2bar)
        with pytest.warns(RuntimeWarning):
            sol = solve_riccati(dyn, cost, 1.0, 0.01)
        assert np.max(np.abs(sol.Lam)) == 0.0

    def test_terminal_conditions_exact(self):
        dyn, cost = random_lq(41, d=3, m=2)
        sol = solve_riccati(dyn, cost, 1.0, 0.01)
        assert np.array_equal(sol.Lam[-1], cost.P2)
        assert np.array_equal(sol.Gam[-1], cost.P2 + cost.P2bar)
        assert np.all(sol.gam[-1] == 0.0)
        assert sol.chi[-1] == 0.0

    def test_symmetry_every_node(self):
        dyn, cost = random_lq(42, d=3, m=2, with_m2=True)
        sol = solve_riccati(dyn, cost, 1.0, 0.01)
        assert np.max(np.abs(sol.Lam - np.swapaxes(sol.Lam, 1, 2))) <= 1e-12
        assert np.max(np.abs(sol.Gam - np.swapaxes(sol.Gam, 1, 2))) <= 1e-12

    def test_psd_under_standing_condition(self):
        for seed in (50, 51, 52):
            dyn, cost = random_lq(seed)
            sol = solve_riccati(dyn, cost, 1.0, 5e-3)
            for k in range(sol.n_nodes):
                assert np.min(np.linalg.eigvalsh(sol.Lam[k])) >= -1e-10
                assert np.min(np.linalg.eigvalsh(sol.Gam[k])) >= -1e-10
            assert np.min(sol.pd_history) > 1e-10

    def test_convergence_order(self):
        p = interbank_params(q=0.5, sigma1=0.3)
        dyn, cost = systemic_risk_model(p)
        errs = []
        for h in (4e-3, 2e-3, 1e-3, 5e-4):
            sol = solve_riccati(dyn, cost, p.T, h)
            cf = np.array([closed_form_lambda(p, t) for t in sol.grid])
            errs.append(np.max(np.abs(sol.Lam[:, 0, 0] - cf)))
        for coarse, fine in zip(errs, errs[1:]):
            assert 8.0 <= coarse / fine <= 32.0

    def test_step_validation(self):
        dyn, cost = random_lq(43, d=1, m=1)
        with pytest.raises(ValueError):
            solve_riccati(dyn, cost, 1.0, 0.3)
        with pytest.raises(ValueError):
            solve_riccati(dyn, cost, 1.0, 0.6)
        with pytest.raises(ValueError):
            solve_riccati(dyn, cost, 1.0, -0.1)

    def test_non_positive_gain(self):
        dyn, _ = random_lq(44, d=1, m=1)
        bad = LqCost(Q2=1.0, Q2bar=0.0, R2=-0.1, P2=1.0, P2bar=0.0)
        with pytest.warns(RuntimeWarning):
            with pytest.raises(NonPositiveGain) as exc:
                solve_riccati(dyn, bad, 1.0, 0.01)
        assert exc.value.min_eig <= 1e-10

    def test_blowup(self):
        # Lambda' = 2 Lambda^2 with Lambda(T) < 0 escapes in finite time
        dyn = LqDynamics(b0=0.0, B=0.0, Bbar=0.0, C=1.0, theta=0.0, D=0.0,
                         Dbar=0.0, F=0.0, theta0=0.0, D0=0.0, D0bar=0.0, F0=0.0)
        bad = LqCost(Q2=0.0, Q2bar=0.0, R2=0.5, P2=-5.0, P2bar=0.0)
        with pytest.warns(RuntimeWarning):
            with pytest.raises(NumericalBlowup):
                solve_riccati(dyn, bad, 1.0, 1e-3)


class TestEval:
    def test_terminal_node(self):
        _, _, cost, sol, _ = make_interbank(h=0.05)
        Lam, Gam, gam, chi = sol.eval(sol.T)
        assert np.array_equal(Lam, cost.P2)
        assert np.array_equal(Gam, cost.P2 + cost.P2bar)
        assert np.all(gam == 0.0) and chi == 0.0

    def test_node_hit_bitwise(self):
        _, _, _, sol, _ = make_interbank(h=0.05)
        for k in (0, 7, sol.n_nodes - 1):
            Lam, Gam, gam, chi = sol.eval(float(sol.grid[k]))
            assert np.array_equal(Lam, sol.Lam[k])
            assert np.array_equal(Gam, sol.Gam[k])
            assert np.array_equal(gam, sol.gam[k])
            assert chi == sol.chi[k]

    def test_midpoint_is_arithmetic_mean(self):
        _, _, _, sol, _ = make_interbank(h=0.05)
        k = 4
        tm = 0.5 * (sol.grid[k] + sol.grid[k + 1])
        Lam, _, _, chi = sol.eval(float(tm))
        assert np.array_equal(Lam, 0.5 * sol.Lam[k] + 0.5 * sol.Lam[k + 1])
        assert chi == 0.5 * sol.chi[k] + 0.5 * sol.chi[k + 1]

    def test_out_of_range(self):
        _, _, _, sol, _ = make_interbank(h=0.05)
        with pytest.raises(ValueError):
            sol.eval(-0.2)
        with pytest.raises(ValueError):
            sol.eval(sol.T + 0.2)

    def test_continuity(self):
        _, _, _, sol, _ = make_interbank(h=0.05)
        for t in np.linspace(0.0, sol.T, 173):
            left = sol.eval(max(float(t) - 1e-10, 0.0))[0]
            right = sol.eval(min(float(t) + 1e-10, sol.T))[0]
            assert np.max(np.abs(left - right)) < 1e-7


class TestCsv:
    def test_columns_and_values(self, tmp_path):
        dyn, cost = random_lq(45, d=2, m=1)
        sol = solve_riccati(dyn, cost, 1.0, 0.05)
        path = tmp_path / "riccati.csv"
        save_riccati_csv(sol, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == ("t,Lam_00,Lam_01,Lam_10,Lam_11,"
                            "Gam_00,Gam_01,Gam_10,Gam_11,gam_0,gam_1,chi,minEigU,minEigV")
        assert len(lines) == sol.n_nodes + 1
        last = [float(v) for v in lines[-1].split(",")]
        assert last[0] == 1.0
        assert last[1] == sol.Lam[-1, 0, 0]

    def test_deterministic_bytes(self, tmp_path):
        dyn, cost = random_lq(46, d=1, m=1)
        sol = solve_riccati(dyn, cost, 1.0, 0.05)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_riccati_csv(sol, p1)
        save_riccati_csv(sol, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            interbank_params(kappa=-1.0)
        with pytest.raises(ValueError):
            interbank_params(eta=0.0)
        with pytest.raises(ValueError):
            interbank_params(rho=1.5)
        with pytest.raises(ValueError):
            interbank_params(T=0.0)
        with pytest.raises(ValueError):
            interbank_params(sigma0=0.0)

    def test_delta_pm_roots(self):
        # delta+- solve x^2 + 2 rate x - (eta - q^2) = 0
        p = interbank_params(q=0.5, sigma1=0.3)
        rate = p.kappa + p.q - 0.5 * p.sigma1 ** 2
        for root in delta_pm(p):
            assert root ** 2 + 2 * rate * root - (p.eta - p.q ** 2) == pytest.approx(
                0.0, abs=1e-12)
