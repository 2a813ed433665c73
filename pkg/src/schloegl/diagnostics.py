"""Measured counterparts of the structural quantities of the theory.

Poincare-like constants of the actuator complement, the combined
M-lambda inequality on sample fields, exponential decay fits of norm
histories and a manufactured-solution convergence study of the integrator.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .actuation import Direction, oblique_project
from .dynamics import CNABStepper, f_cubic, manufactured_forcing, step_count
from .errors import ConfigurationError, NumericalError
from .fem import build_grid

log = logging.getLogger(__name__)


def complement_basis(fam, ops):
    """Columns spanning the fields L2-orthogonal to every indicator actuator."""
    # (1_omega_j, h)_H = b_j^T h, so the complement is the null space of B^T
    return scipy.linalg.null_space(fam.indicator_loads.T)


def poincare_xi(fam, ops, basis=None):
    """Smallest ``||h||_V / ||h||_H`` over fields orthogonal to the actuators.

    ``basis`` may be any full-rank basis of the discrete complement; the
    result does not depend on the choice.
    """
    N = complement_basis(fam, ops) if basis is None else np.asarray(basis, dtype=float)
    AN = ops.A @ N
    MN = ops.mass @ N
    try:
        vals = scipy.linalg.eigh(N.T @ AN, N.T @ MN, eigvals_only=True, subset_by_index=[0, 0])
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"complement eigensolve failed for M={fam.M}: {exc}") from exc
    return float(np.sqrt(vals[0]))


def check_mlam(samples, lam, fam, ops):
    """Minimum of ``(||y||_V^2 + lam ||P y||_V^2) / ||y||_H^2`` over sample fields.

    ``samples`` holds fields as columns; ``P`` projects onto the bumps along
    the orthogonal complement of the actuators. The caller compares the
    returned ratio with the constant it wants to certify.
    """
    if lam < 0:
        raise ConfigurationError(f"lambda must be nonnegative, got {lam}")
    Y = np.atleast_2d(np.asarray(samples, dtype=float))
    if Y.shape[0] != ops.mass.size:
        Y = Y.T
    ratios = []
    for y in Y.T:
        h2 = ops.inner(y, y)
        if h2 == 0.0:
            continue
        py = oblique_project(y, fam, ops, Direction.ONTO_BUMPS_ALONG_UPERP)
        ratios.append((ops.inner_v(y, y) + lam * ops.inner_v(py, py)) / h2)
    if not ratios:
        raise ConfigurationError("no nonzero sample fields")
    return float(min(ratios))


@dataclass
class DecayReport:
    """Fit ``||z(t)||^2 ~ prefactor * exp(-mu t)`` on a window.

    ``rho`` is the smallest constant with
    ``||z(t)||^2 <= rho exp(-mu (t - s)) ||z(s)||^2`` over sampled pairs
    ``s <= t`` of the window (at least 1). ``prefactor`` is the fitted
    value of ``||z||^2`` extrapolated to ``t = 0``; ``residual`` is the RMS
    misfit of the log-linear fit.
    """

    mu: float
    rho: float
    prefactor: float
    window: tuple
    residual: float
    n_samples: int

    def to_dict(self):
        return asdict(self)


def decay_rate(times, norms, t_start=None, t_end=None, transient_fraction=0.1, max_pairs=400):
    """Exponential rate of a norm history on ``[t_start, t_end]``.

    Without ``t_start`` the first ``transient_fraction`` of the record is
    skipped. The rate uses the squared-norm convention, so
    ``||z(t)|| = exp(-0.7 t)`` gives ``mu = 1.4``.
    """
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if times.shape != norms.shape or times.size < 2:
        raise ConfigurationError("times and norms must be congruent with at least two samples")
    if t_start is None:
        t_start = times[0] + transient_fraction * (times[-1] - times[0])
    if t_end is None:
        t_end = times[-1]
    sel = (times >= t_start - 1e-12) & (times <= t_end + 1e-12)
    t, v = times[sel], norms[sel]
    if t.size < 2:
        raise ConfigurationError(f"fit window [{t_start}, {t_end}] holds fewer than two samples")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise NumericalError("decay fit needs positive finite norms on the window")
    logs = np.log(v)
    slope, intercept = np.polyfit(t, logs, 1)
    resid = float(np.sqrt(np.mean((logs - (slope * t + intercept)) ** 2)))
    mu = -2.0 * slope

    idx = np.unique(np.linspace(0, t.size - 1, min(t.size, max_pairs)).astype(int))
    ts, ls = t[idx], 2.0 * logs[idx]
    # log of exp(mu (t - s)) ||z(t)||^2 / ||z(s)||^2 for every pair s <= t
    g = ls + mu * ts
    pair = g[None, :] - g[:, None]
    upper = np.triu(np.ones_like(pair, dtype=bool))
    rho = float(max(1.0, np.exp(pair[upper].max())))
    return DecayReport(float(mu), rho, float(np.exp(2.0 * intercept)),
                       (float(t[0]), float(t[-1])), resid, int(t.size))


def _observed_orders(errors):
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log2(e[:-1] / e[1:])


@dataclass
class ConvergenceReport:
    dts: list
    time_errors: list
    time_orders: list
    n_nodes: list
    space_errors: list
    space_orders: list
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _free_run(grid, ops, target, params, T, dt):
    """State at ``T`` of the forced free dynamics started from the target."""
    h = manufactured_forcing(target, params, grid.nu)
    stepper = CNABStepper(ops, dt, implicit="K")
    y = target.value(0.0, grid.x)
    prev = None
    for n in range(step_count(T, dt)):
        t = n * dt
        load = ops.mass @ (h(t, grid.x) - f_cubic(y, params))
        if prev is None:
            prev = load
        y = stepper.step(y, load, prev)
        prev = load
    return y


def convergence_study(target, params, nu=0.1, T=1.0, dts=(0.04, 0.02, 0.01, 0.005),
                      time_nodes=101, space_nodes=(21, 41, 81, 161), space_dt=1e-4,
                      length=1.0):
    """Observed orders of the integrator on a manufactured solution.

    Time: successive differences ``||y_dt(T) - y_{dt/2}(T)||_H`` on a fixed
    grid. Space: ``||y_h(T) - I_h y_t(T)||_H`` with a small time step. The
    orders are ``log2`` of ratios of consecutive errors.
    """
    warnings = []
    grid, ops = build_grid(time_nodes, length, nu)
    finals = [_free_run(grid, ops, target, params, T, dt) for dt in dts]
    diffs = [float(np.sqrt(max(ops.inner(a - b, a - b), 0.0)))
             for a, b in zip(finals[:-1], finals[1:])]
    t_orders = _observed_orders(diffs)

    s_errors = []
    for n in space_nodes:
        g, o = build_grid(n, length, nu)
        e = _free_run(g, o, target, params, T, space_dt) - target.value(T, g.x)
        s_errors.append(float(np.sqrt(max(o.inner(e, e), 0.0))))
    s_orders = _observed_orders(s_errors)

    for name, errs in (("time", diffs), ("space", s_errors)):
        if np.any(np.diff(errs) >= 0):
            warnings.append(f"{name} errors are not monotonically decreasing: {errs}")
    for w in warnings:
        log.warning(w)
    return ConvergenceReport(list(map(float, dts[1:])), diffs, [float(v) for v in t_orders],
                             list(space_nodes), s_errors, [float(v) for v in s_orders], warnings)
