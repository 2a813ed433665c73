import numpy as np
import pytest
import scipy.linalg

from schloegl.actuation import build_actuators
from schloegl.diagnostics import (check_mlam, complement_basis, convergence_study, decay_rate,
                                  poincare_xi)
from schloegl.dynamics import ReactionParams, TargetSpec
from schloegl.errors import ConfigurationError, NumericalError
from schloegl.fem import build_grid, neumann_eigenbasis

P = ReactionParams((-1.0, 0.0, 2.0))


@pytest.fixture(scope="module")
def fine():
    return build_grid(1001, 1.0, 0.1)


def kkt_xi(fam, ops):
    """Smallest finite eigenvalue of the bordered pencil of the constrained Rayleigh quotient."""
    A, Mh, B = ops.A.dense(), ops.mass.dense(), fam.indicator_loads
    m = B.shape[1]
    lhs = np.block([[A, B], [B.T, np.zeros((m, m))]])
    rhs = np.block([[Mh, np.zeros_like(B)], [np.zeros_like(B.T), np.zeros((m, m))]])
    vals = scipy.linalg.eigvals(lhs, rhs)
    vals = vals[np.isfinite(vals)].real
    return float(np.sqrt(vals[vals > 0].min()))


def test_xi_regression_against_saddle_point_oracle(fine):
    grid, ops = fine
    fam = build_actuators(1, 0.1, grid, ops)
    xi = poincare_xi(fam, ops)
    assert xi == pytest.approx(kkt_xi(fam, ops), rel=1e-8)
    assert xi == pytest.approx(1.4095961307772515, rel=1e-8)


def test_xi_at_least_one_and_grows(fine):
    grid, ops = fine
    values = [poincare_xi(build_actuators(M, 0.1, grid, ops), ops) for M in (1, 2, 4, 8)]
    assert values[0] >= 1.0
    assert np.all(np.diff(values) >= -1e-8) and values[-1] > values[0]


def test_xi_basis_invariance(desk, rng):
    grid, ops, fam, _, _ = desk
    N = complement_basis(fam, ops)
    # M-orthonormalize, then rotate by a random orthogonal matrix
    L = np.linalg.cholesky(N.T @ (ops.mass @ N))
    W = N @ np.linalg.inv(L).T
    Qr, _ = np.linalg.qr(rng.standard_normal((W.shape[1], W.shape[1])))
    assert poincare_xi(fam, ops, W @ Qr) == pytest.approx(poincare_xi(fam, ops), abs=1e-8)
    assert np.abs(fam.indicator_loads.T @ N).max() < 1e-12


def test_mlam_constants_and_monotone(desk, rng):
    grid, ops, fam, _, _ = desk
    assert check_mlam(np.ones(grid.n_nodes), 0.0, fam, ops) == pytest.approx(1.0, rel=1e-10)
    Y = rng.standard_normal((grid.n_nodes, 10))
    ratios = [check_mlam(Y, lam, fam, ops) for lam in (0.0, 0.1, 1.0, 10.0)]
    assert np.all(np.diff(ratios) >= 0)
    with pytest.raises(ConfigurationError):
        check_mlam(Y, -1.0, fam, ops)
    with pytest.raises(ConfigurationError):
        check_mlam(np.zeros(grid.n_nodes), 1.0, fam, ops)


def test_mlam_on_high_eigenfields(desk):
    grid, ops, fam, _, _ = desk
    basis = neumann_eigenbasis(grid, ops, 30)
    K = 10
    high = basis.fields[:, K:]
    assert check_mlam(high, 0.0, fam, ops) == pytest.approx(basis.eigenvalues[K], rel=1e-8)
    assert check_mlam(high, 5.0, fam, ops) >= basis.eigenvalues[K] * (1 - 1e-12)


def test_decay_exact_exponential():
    t = np.linspace(0, 10, 1001)
    rep = decay_rate(t, np.exp(-0.7 * t))
    assert rep.mu == pytest.approx(1.4, rel=1e-10)
    assert rep.residual < 1e-10 and rep.rho == pytest.approx(1.0)


def test_decay_constant_norm():
    t = np.linspace(0, 1, 11)
    rep = decay_rate(t, np.full(11, 3.0))
    assert abs(rep.mu) < 1e-12 and rep.rho == pytest.approx(1.0)


def test_decay_recovers_prefactor():
    t = np.linspace(0, 5, 501)
    rep = decay_rate(t, np.sqrt(3.0 * np.exp(-2.5 * t)), t_start=0.0)
    assert rep.mu == pytest.approx(2.5, rel=1e-2)
    assert rep.prefactor == pytest.approx(3.0, rel=1e-2)
    assert rep.window == (0.0, 5.0) and rep.n_samples == 501


def test_decay_transient_bound():
    # an overshoot before the decay makes the transient constant exceed one
    t = np.linspace(0, 4, 401)
    norms = np.exp(-t) * (1 + 2 * np.exp(-20 * (t - 1) ** 2))
    assert decay_rate(t, norms, t_start=0.0).rho > 1.0


def test_decay_errors():
    t = np.linspace(0, 1, 11)
    with pytest.raises(NumericalError):
        decay_rate(t, np.r_[np.ones(10), 0.0])
    with pytest.raises(ConfigurationError):
        decay_rate(t, np.ones(10))
    with pytest.raises(ConfigurationError):
        decay_rate(t, np.ones(11), t_start=2.0)


def test_convergence_orders():
    rep = convergence_study(TargetSpec.separable_sin_cos(), P)
    assert len(rep.time_orders) >= 2 and len(rep.space_orders) >= 3
    assert all(1.8 <= o <= 2.2 for o in rep.time_orders + rep.space_orders)
    assert not rep.warnings


def test_convergence_round_off_for_constant_root():
    rep = convergence_study(TargetSpec.custom("-1"), P, T=0.2, dts=(0.02, 0.01, 0.005),
                            space_nodes=(11, 21, 41), space_dt=1e-3)
    assert max(rep.time_errors + rep.space_errors) < 1e-12
