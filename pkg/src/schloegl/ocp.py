"""Finite-horizon constrained optimal control and the receding-horizon driver.

The control is piecewise constant on the simulation grid. The forward model
is the CNAB error dynamics of :mod:`schloegl.dynamics`; the adjoint below is
the exact transpose of that scheme, so the reduced gradient is the gradient
of the discrete cost (up to round-off) while still discretizing the
continuous adjoint equation with terminal value zero.

Gradients and norms of control signals use the time-discrete L2 product
``<a, b> = dt * sum_n a_n . b_n``.
"""
import logging
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .actuation import NormKind, saturate, vector_norm
from .dynamics import (CNABStepper, OpenLoop, RecordOptions, concatenate_traces,
                       df_error_coefficient, integrate_error, simulate, step_count,
                       target_values)
from .errors import BlowUpError, ConfigurationError, SchloeglError
from .fem import EigenBasis

log = logging.getLogger(__name__)


class ObservationQ:
    """Observation operator: L2-orthogonal projection onto eigenfields, or the identity."""

    def __init__(self, ops, basis=None, mode="spectral"):
        if mode not in ("spectral", "identity"):
            raise ConfigurationError(f"unknown observation mode {mode!r}")
        if mode == "spectral" and not isinstance(basis, EigenBasis):
            raise ConfigurationError("spectral observation needs an EigenBasis")
        self.ops = ops
        self.mode = mode
        self.basis = basis
        if mode == "spectral":
            self._E = basis.fields
            self._ME = ops.mass @ basis.fields

    def coefficients(self, z):
        return self._ME.T @ z

    def apply(self, z):
        if self.mode == "identity":
            return np.array(z, dtype=float)
        return self._E @ self.coefficients(z)

    def norm_sq(self, z):
        if self.mode == "identity":
            return float(np.dot(z, self.ops.mass @ z))
        c = self.coefficients(z)
        return float(np.dot(c, c))

    def gram_load(self, z):
        """Load vector ``M Q*Q z``, the derivative of ``norm_sq(z) / 2``."""
        if self.mode == "identity":
            return self.ops.mass @ z
        return self._ME @ self.coefficients(z)


@dataclass
class ControlSignal:
    """Held control values ``values[n]`` on ``[s0 + n dt, s0 + (n+1) dt)``."""

    values: np.ndarray
    dt: float
    s0: float = 0.0
    bound: float = np.inf
    norm_kind: str = "linf"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ConfigurationError("control values must have shape (steps, M_sigma)")

    @property
    def n_steps(self):
        return self.values.shape[0]

    def inner(self, other):
        other = other.values if isinstance(other, ControlSignal) else other
        return float(self.dt * np.sum(self.values * other))

    def norm(self):
        return float(np.sqrt(self.inner(self.values)))

    def is_feasible(self):
        if self.bound == np.inf:
            return True
        return all(vector_norm(u, self.norm_kind) <= self.bound for u in self.values)


def clamp_project(u, C_u, norm_kind="linf"):
    """Euclidean projection onto ``{|||v||| <= C_u}``, row-wise for 2-D input.

    For the l-infinity ball this is a componentwise clip; for the l2 ball the
    projection is radial.
    """
    u = np.asarray(u, dtype=float)
    if C_u == np.inf:
        return u.copy()
    if NormKind(norm_kind) is NormKind.LINF:
        return np.clip(u, -C_u, C_u)
    if u.ndim == 1:
        return saturate(u, C_u, NormKind.L2)
    return np.stack([saturate(row, C_u, NormKind.L2) for row in u])


@dataclass
class OptimizerOptions:
    max_iters: int = 200
    tol: float = 1e-5
    tau0: float = 1e-2
    tau_min: float = 1e-6
    tau_max: float = 1e2
    max_rejections: int = 20


@dataclass
class OcpProblem:
    grid: object
    ops: object
    fam: object
    params: object
    Q: ObservationQ
    z0: np.ndarray
    s0: float
    s1: float
    dt: float
    target: object = None  # TargetSpec, nodal trace of shape (N+1, n), or None for zero
    C_u: float = 30.0
    norm_kind: str = "linf"
    options: OptimizerOptions = field(default_factory=OptimizerOptions)
    state_weight: float = 1.0  # factor on the ||Qz||^2 term; 1 is the reference cost

    def __post_init__(self):
        if not self.s1 > self.s0:
            raise ConfigurationError(f"empty interval ({self.s0}, {self.s1})")
        if not self.C_u > 0:
            raise ConfigurationError(f"control bound must be positive, got {self.C_u}")
        if not self.state_weight > 0:
            raise ConfigurationError(f"state weight must be positive, got {self.state_weight}")
        self.z0 = np.asarray(self.z0, dtype=float)
        if not np.isfinite(self.z0).all():
            raise ConfigurationError("initial error has non-finite entries")
        self.n_steps = step_count(self.s1 - self.s0, self.dt)
        self.times = self.s0 + self.dt * np.arange(self.n_steps + 1)
        self._stepper = None
        self._yt = None

    @property
    def stepper(self):
        if self._stepper is None:
            self._stepper = CNABStepper(self.ops, self.dt, implicit="A")
        return self._stepper

    @property
    def yt(self):
        if self._yt is None:
            self._yt = target_values(self.target, self.grid.x, self.times)
        return self._yt

    def zero_control(self):
        return ControlSignal(np.zeros((self.n_steps, self.fam.M_sigma)), self.dt, self.s0,
                             self.C_u, self.norm_kind)

    def signal(self, values):
        return ControlSignal(values, self.dt, self.s0, self.C_u, self.norm_kind)

    def restricted(self, a, z_a, target=None):
        """Same problem on ``(a, s1)`` started from ``z_a``."""
        k = int(round((a - self.s0) / self.dt))
        tgt = self.target
        if tgt is not None and not hasattr(tgt, "value"):
            tgt = np.asarray(tgt)[k:]
        return replace(self, z0=z_a, s0=self.s0 + k * self.dt, target=tgt if target is None
                       else target)


def _trapezoid_weights(n_points):
    w = np.ones(n_points)
    w[0] = w[-1] = 0.5
    return w


def cost(Z, u, Q, dt, state_weight=1.0):
    """``(J, J_state, J_control)`` of a state trajectory and a held control.

    ``J_state`` integrates ``state_weight * ||Qz||^2 / 2`` with the trapezoid
    rule on the step grid; ``J_control`` integrates ``|u|^2 / 2`` exactly
    (held values).
    """
    u = u.values if isinstance(u, ControlSignal) else np.asarray(u, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if u.shape[0] != Z.shape[0] - 1:
        raise ConfigurationError(f"{Z.shape[0]} states need {Z.shape[0] - 1} control steps, "
                                 f"got {u.shape[0]}")
    q = np.array([Q.norm_sq(z) for z in Z])
    j_state = 0.5 * dt * state_weight * float(np.dot(_trapezoid_weights(len(q)), q))
    j_control = 0.5 * dt * float(np.sum(u * u))
    return j_state + j_control, j_state, j_control


def forward(u, problem):
    """Error trajectory for the held control ``u`` (array or ControlSignal)."""
    values = u.values if isinstance(u, ControlSignal) else np.asarray(u, dtype=float)
    return integrate_error(problem.z0, problem.yt, values, problem.params, problem.fam,
                           problem.stepper)


def solve_adjoint(Z, problem):
    """Adjoint trajectory ``P`` with ``P[N] = 0``.

    ``P[n]`` is the multiplier of step ``n -> n+1``; the gradient with
    respect to the held control ``u_n`` is ``u_n + (U_M^diamond)^* P[n]``.
    """
    ops, dt, Q = problem.ops, problem.dt, problem.Q
    yt, params = problem.yt, problem.params
    stepper = problem.stepper
    n_steps = Z.shape[0] - 1
    w = problem.state_weight * _trapezoid_weights(n_steps + 1)
    P = np.zeros_like(Z)  # P[k-1] holds lambda_k; P[N] is the zero terminal value
    lam_next = np.zeros(Z.shape[1])  # lambda_{k+1}
    lam_next2 = np.zeros(Z.shape[1])  # lambda_{k+2}
    for k in range(n_steps, 0, -1):
        coeff = df_error_coefficient(Z[k], yt[k], params)
        src = w[k] * Q.gram_load(Z[k]) - coeff * (ops.mass @ (1.5 * lam_next - 0.5 * lam_next2))
        lam = stepper.solve(stepper.rhs @ lam_next + dt * src)
        if not np.isfinite(lam).all():
            raise BlowUpError(f"adjoint diverged at t={problem.times[k]:.6g}",
                              time=float(problem.times[k]))
        P[k - 1] = lam
        lam_next2, lam_next = lam_next, lam
    return P


def reduced_gradient(u, problem, Z=None):
    """Gradient of the discrete cost with respect to the held control.

    Returns ``(g, Z, P)``; ``g`` is in the time-discrete L2 product.
    """
    values = u.values if isinstance(u, ControlSignal) else np.asarray(u, dtype=float)
    if Z is None:
        Z = forward(values, problem)
    P = solve_adjoint(Z, problem)
    g = values + (problem.fam.indicator_loads.T @ P[:-1].T).T
    return g, Z, P


def stationarity_residual(u, g, problem):
    values = u.values if isinstance(u, ControlSignal) else u
    step = values - clamp_project(values - g, problem.C_u, problem.norm_kind)
    nu = np.sqrt(problem.dt * np.sum(values * values))
    return float(np.sqrt(problem.dt * np.sum(step * step)) / max(1.0, nu))


@dataclass
class OcpResult:
    u: ControlSignal
    Z: np.ndarray
    P: np.ndarray
    J: float
    J_state: float
    J_control: float
    iterations: int
    converged: bool
    residual: float
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    @property
    def multiplier_norm(self):
        """H-norm proxy of ``p(s0)``, reported for information only."""
        return float(np.linalg.norm(self.P[0]))


def solve_ocp(problem, u_init=None):
    """Projected gradient with alternating Barzilai-Borwein steps.

    Stops when the stationarity residual drops below ``options.tol`` or after
    ``options.max_iters`` gradient evaluations, returning the best iterate.
    A trial that blows up counts as infinite cost: the step is halved and
    retried (at most ``options.max_rejections`` times in a row).
    """
    opt = problem.options
    started = _time.perf_counter()
    dt = problem.dt
    u = problem.zero_control().values if u_init is None else np.array(
        u_init.values if isinstance(u_init, ControlSignal) else u_init, dtype=float)
    if u.shape != (problem.n_steps, problem.fam.M_sigma):
        raise ConfigurationError(f"initial control has shape {u.shape}, expected "
                                 f"{(problem.n_steps, problem.fam.M_sigma)}")
    u = clamp_project(u, problem.C_u, problem.norm_kind)

    def evaluate(values):
        Z = forward(values, problem)
        J = cost(Z, values, problem.Q, dt, problem.state_weight)
        g, _, P = reduced_gradient(values, problem, Z)
        return Z, P, g, J

    try:
        Z, P, g, J = evaluate(u)
    except BlowUpError:
        if u_init is None:
            raise
        log.warning("warm start blew up; restarting from zero control")
        u = problem.zero_control().values
        Z, P, g, J = evaluate(u)

    best = (J[0], u, Z, P, J)
    history = [J[0]]
    iterations = 1
    residual = stationarity_residual(u, g, problem)
    converged = residual <= opt.tol
    u_prev = g_prev = None
    tau = opt.tau0
    k = 0
    while not converged and iterations < opt.max_iters:
        if u_prev is not None:
            s = u - u_prev
            y = g - g_prev
            sy = dt * np.sum(s * y)
            if sy <= 0:
                tau = opt.tau_max
            elif k % 2 == 1:
                tau = dt * np.sum(s * s) / sy
            else:
                tau = sy / (dt * np.sum(y * y))
            tau = min(max(tau, opt.tau_min), opt.tau_max)
        rejections = 0
        while True:
            trial = clamp_project(u - tau * g, problem.C_u, problem.norm_kind)
            try:
                Zt, Pt, gt, Jt = evaluate(trial)
                break
            except BlowUpError:
                rejections += 1
                iterations += 1
                if rejections > opt.max_rejections:
                    log.warning("optimizer aborted after %d rejected steps", rejections - 1)
                    Jb, ub, Zb, Pb, Jfull = best
                    return OcpResult(problem.signal(ub), Zb, Pb, *Jfull, iterations, False,
                                     residual, _time.perf_counter() - started, history)
                tau *= 0.5
        u_prev, g_prev = u, g
        u, Z, P, g, J = trial, Zt, Pt, gt, Jt
        iterations += 1
        k += 1
        history.append(J[0])
        if J[0] < best[0]:
            best = (J[0], u, Z, P, J)
        residual = stationarity_residual(u, g, problem)
        converged = residual <= opt.tol

    Jb, ub, Zb, Pb, Jfull = best
    if ub is not u:
        g_best = reduced_gradient(ub, problem, Zb)[0]
        residual = stationarity_residual(ub, g_best, problem)
        converged = residual <= opt.tol
    return OcpResult(problem.signal(ub), Zb, Pb, *Jfull, iterations, converged, residual,
                     _time.perf_counter() - started, history)


@dataclass
class WindowReport:
    index: int
    s0: float
    s1: float
    iterations: int
    J: float
    J_state: float
    J_control: float
    residual: float
    converged: bool
    wall_time: float
    multiplier_norm: float

    def to_dict(self):
        return {
            "window": self.index, "s0": self.s0, "s1": self.s1,
            "iterations": self.iterations, "J": self.J, "J_state": self.J_state,
            "J_control": self.J_control, "stationarity_residual": self.residual,
            "converged": self.converged, "wall_time": self.wall_time,
            "multiplier_norm": self.multiplier_norm,
        }


def receding_horizon(z0, T, T_rh, delta_rh, template, record=None, progress=None):
    """Receding-horizon control on ``[0, T]``.

    ``template`` is an :class:`OcpProblem` whose ``z0``, ``s0`` and ``s1`` are
    replaced per window. Window ``i`` optimizes over ``(i d, i d + T_rh)`` and
    only its first ``d = delta_rh`` time units are applied. Returns the
    concatenated trace and the list of window reports.
    """
    if not 0 < delta_rh <= T_rh:
        raise ConfigurationError(f"need 0 < delta_rh <= T_rh, got {delta_rh}, {T_rh}")
    n_windows = step_count(T, delta_rh)
    dt = template.dt
    n_apply = step_count(delta_rh, dt)
    n_horizon = step_count(T_rh, dt)
    record = record or RecordOptions(observation=template.Q)

    z = np.asarray(z0, dtype=float).copy()
    warm = None
    pieces, reports = [], []
    for i in range(n_windows):
        s0 = i * n_apply * dt
        problem = replace(template, z0=z, s0=s0, s1=s0 + n_horizon * dt)
        try:
            res = solve_ocp(problem, warm)
        except SchloeglError as exc:
            raise type(exc)(f"receding-horizon window {i}: {exc}") from exc
        reports.append(WindowReport(i, problem.s0, problem.s1, res.iterations, res.J,
                                    res.J_state, res.J_control, res.residual, res.converged,
                                    res.wall_time, res.multiplier_norm))
        if progress is not None:
            progress(reports[-1])
        applied = res.u.values[:n_apply]
        rhs = OpenLoop(template.params, template.target, template.fam, applied,
                       template.C_u, template.norm_kind)
        piece = simulate(template.grid, template.ops, z, n_apply * dt, dt, rhs, t0=s0,
                         record=record)
        pieces.append(piece)
        z = piece.final_state
        warm = np.vstack([res.u.values[n_apply:], np.zeros((n_apply, template.fam.M_sigma))])
    return concatenate_traces(pieces), reports


def dpp_gap(problem, a, first=None):
    """Dynamic-programming gap ``J*_I - (J_{I^a}(z*, u*) + J*_{I_a})``."""
    if not problem.s0 < a < problem.s1:
        raise ConfigurationError(f"split point {a} outside ({problem.s0}, {problem.s1})")
    full = first if first is not None else solve_ocp(problem)
    k = int(round((a - problem.s0) / problem.dt))
    head = cost(full.Z[:k + 1], full.u.values[:k], problem.Q, problem.dt,
                problem.state_weight)[0]
    tail_problem = problem.restricted(a, full.Z[k])
    tail = solve_ocp(tail_problem, full.u.values[k:])
    return full.J - (head + tail.J)
