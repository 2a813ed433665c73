"""Schloegl reaction term, target trajectories and the CNAB time integrator.

Time stepping is done in weak form. With ``L`` the implicit operator
(``nu*K`` for the state, ``A = nu*K + M`` for the error) and ``N`` the
explicit load::

    (M + dt/2 L) y^{n+1} = (M - dt/2 L) y^n + dt (3/2 N^n - 1/2 N^{n-1}) + dt B u^n

The first step uses ``N^{-1} = N^0``. Controls are held over each step, so
they enter through the exact integral ``dt B u^n`` rather than through the
Adams-Bashforth extrapolation.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from . import expr
from .actuation import FeedbackConfig, feedback, vector_norm
from .errors import BlowUpError, ConfigurationError
from .fem import norms as field_norms

BLOW_UP_NORM = 1e6


# --------------------------------------------------------------------------
# reaction term

def xi_coeffs(zeta):
    """Coefficients of ``f(w) = w^3 + xi2 w^2 + xi1 w + xi0``."""
    z1, z2, z3 = (float(v) for v in zeta)
    xi2 = -(z1 + z2 + z3)
    xi1 = z1 * z2 + z1 * z3 + z2 * z3
    xi0 = -z1 * z2 * z3
    return xi0, xi1, xi2


@dataclass(frozen=True)
class ReactionParams:
    zeta: tuple = (-1.0, 0.0, 2.0)

    def __post_init__(self):
        if len(self.zeta) != 3:
            raise ConfigurationError(f"zeta needs three roots, got {self.zeta}")
        object.__setattr__(self, "zeta", tuple(float(v) for v in self.zeta))

    @property
    def xi0(self):
        return xi_coeffs(self.zeta)[0]

    @property
    def xi1(self):
        return xi_coeffs(self.zeta)[1]

    @property
    def xi2(self):
        return xi_coeffs(self.zeta)[2]


def f_cubic(y, params):
    z1, z2, z3 = params.zeta
    y = np.asarray(y, dtype=float)
    return (y - z1) * (y - z2) * (y - z3)


def f_error(z, yt, params):
    """Shifted error nonlinearity ``f(z + yt) - f(yt) - z`` in expanded form."""
    _, xi1, xi2 = xi_coeffs(params.zeta)
    z = np.asarray(z, dtype=float)
    return z * (z * (z + 3.0 * yt + xi2) + (3.0 * yt * yt + 2.0 * xi2 * yt + xi1 - 1.0))


def df_error_coefficient(z, yt, params):
    """Nodal multiplier of the linearization of :func:`f_error` at ``z``."""
    _, xi1, xi2 = xi_coeffs(params.zeta)
    return 3.0 * z * z + (6.0 * yt + 2.0 * xi2) * z + (3.0 * yt * yt + 2.0 * xi2 * yt + xi1 - 1.0)


def df_error(z, yt, params, w):
    return df_error_coefficient(z, yt, params) * np.asarray(w, dtype=float)


# --------------------------------------------------------------------------
# targets

class TargetSpec:
    """Closed-form target ``y_t(t, x)`` with exact derivatives.

    Use the constructors :meth:`zero`, :meth:`separable_sin_cos` and
    :meth:`custom`. Construction fails unless ``d/dx y_t`` vanishes at both
    ends of the domain on a sample of times.
    """

    def __init__(self, kind, expression, length=1.0, description=None):
        self.kind = kind
        self.length = float(length)
        self.expression = sp.sympify(expression)
        self.description = description or str(self.expression)
        self.value = expr.to_function(self.expression)
        self.dt = expr.to_function(sp.diff(self.expression, expr.T))
        self.dx = expr.to_function(sp.diff(self.expression, expr.X))
        self.dxx = expr.to_function(sp.diff(self.expression, expr.X, 2))
        self._check_neumann()

    def _check_neumann(self):
        ends = np.array([0.0, self.length])
        for t in (0.0, 0.37, 1.1, 2.9):
            slope = self.dx(t, ends)
            scale = 1.0 + np.abs(self.value(t, np.linspace(0, self.length, 11))).max()
            if np.any(np.abs(slope) > 1e-9 * scale):
                raise ConfigurationError(
                    f"target {self.description!r} violates the Neumann condition at t={t}: "
                    f"d/dx = {slope}"
                )

    @classmethod
    def zero(cls, length=1.0):
        return cls("zero", sp.Integer(0), length, "0")

    @classmethod
    def separable_sin_cos(cls, amplitude=1.0, omega=3.0, wavenumber=1, length=1.0):
        e = sp.nsimplify(amplitude) * sp.sin(sp.nsimplify(omega) * expr.T) \
            * sp.cos(int(wavenumber) * sp.pi * expr.X / sp.nsimplify(length))
        return cls("separable_sin_cos", e, length)

    @classmethod
    def custom(cls, source, length=1.0):
        return cls("custom", expr.parse(source), length, str(source))

    def trace(self, x, times):
        """Nodal values at every time, shape ``(len(times), len(x))``."""
        return np.stack([self.value(t, x) for t in np.atleast_1d(times)])

    def __repr__(self):
        return f"TargetSpec({self.kind!r}, {self.description!r})"


def manufactured_forcing(target, params, nu):
    """Forcing ``h`` for which ``target`` solves the free dynamics; returns ``h(t, x)``."""
    def h(t, x):
        y = target.value(t, x)
        return target.dt(t, x) - nu * target.dxx(t, x) + f_cubic(y, params)
    return h


# --------------------------------------------------------------------------
# right-hand sides

@dataclass
class Free:
    """Free dynamics of the state ``y`` with optional forcing ``h(t, x)``."""
    params: ReactionParams
    forcing: object = None


@dataclass
class ClosedLoop:
    """Error dynamics driven by the saturated explicit feedback."""
    params: ReactionParams
    target: object  # TargetSpec or array of nodal target values per step
    fam: object
    config: FeedbackConfig


@dataclass
class OpenLoop:
    """Error dynamics driven by a given control sequence ``controls[n]`` on step n."""
    params: ReactionParams
    target: object
    fam: object
    controls: np.ndarray
    bound: float = np.inf
    norm_kind: str = "linf"


def target_values(target, x, times):
    if target is None:
        return np.zeros((len(times), len(x)))
    if isinstance(target, TargetSpec):
        return target.trace(x, times)
    arr = np.asarray(target, dtype=float)
    if arr.shape != (len(times), len(x)):
        raise ConfigurationError(
            f"target trace has shape {arr.shape}, expected {(len(times), len(x))}"
        )
    return arr


# --------------------------------------------------------------------------
# stepping

def step_count(T, dt):
    if not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    if not T > 0:
        raise ConfigurationError(f"final time must be positive, got {T}")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-12 * max(1.0, abs(T)) * max(1.0, n):
        raise ConfigurationError(f"T={T} is not a multiple of dt={dt}")
    return n


class CNABStepper:
    """Crank-Nicolson / Adams-Bashforth-2 step with a pre-factorized system matrix."""

    def __init__(self, ops, dt, implicit="A"):
        self.ops = ops
        self.dt = float(dt)
        if implicit == "A":
            lin = ops.A
        elif implicit == "K":
            lin = ops.stiffness.scaled(ops.nu)
        else:
            raise ValueError(f"implicit must be 'A' or 'K', got {implicit!r}")
        self.lhs = ops.mass + lin.scaled(0.5 * self.dt)
        self.rhs = ops.mass - lin.scaled(0.5 * self.dt)
        self.solver = self.lhs.factorize()

    def step(self, y, load_now, load_prev, held_load=None):
        b = self.rhs @ y + self.dt * (1.5 * load_now - 0.5 * load_prev)
        if held_load is not None:
            b += self.dt * held_load
        return self.solver.solve(b)

    def solve(self, b):
        return self.solver.solve(b)


def integrate_error(z0, yt, controls, params, fam, stepper):
    """Open-loop error trajectory, all states returned as an ``(N+1, n)`` array.

    ``yt`` holds nodal target values at the N+1 step times and ``controls``
    the N held control vectors. Raises :class:`BlowUpError` on divergence.
    """
    ops = stepper.ops
    n_steps = controls.shape[0]
    Z = np.empty((n_steps + 1, z0.size))
    Z[0] = z0
    held = fam.indicator_loads @ controls.T if fam is not None else None
    prev = None
    for n in range(n_steps):
        z = Z[n]
        load = -(ops.mass @ f_error(z, yt[n], params))
        if prev is None:
            prev = load
        Z[n + 1] = stepper.step(z, load, prev, None if held is None else held[:, n])
        prev = load
        if not np.isfinite(Z[n + 1]).all() or np.abs(Z[n + 1]).max() > BLOW_UP_NORM:
            raise BlowUpError(f"error state diverged at step {n + 1}", time=(n + 1) * stepper.dt)
    return Z


# --------------------------------------------------------------------------
# trace

@dataclass
class SimTrace:
    """Time-stamped record of a run; norms and controls at every step."""

    times: np.ndarray
    norm_H: np.ndarray
    norm_V: np.ndarray
    norm_L6: np.ndarray
    controls: np.ndarray  # shape (len(times), M_sigma)
    saturated: np.ndarray
    cost_state: np.ndarray  # cumulative
    cost_control: np.ndarray  # cumulative
    snapshot_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    snapshots: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    final_state: np.ndarray = None

    def __post_init__(self):
        n = len(self.times)
        for name in ("norm_H", "norm_V", "norm_L6", "controls", "saturated",
                     "cost_state", "cost_control"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"trace column {name} has length "
                                         f"{len(getattr(self, name))}, expected {n}")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def total_cost(self):
        return float(self.cost_state[-1] + self.cost_control[-1])

    @property
    def M_sigma(self):
        return self.controls.shape[1]

    def columns(self):
        cols = ["t", "normH", "normV", "normL6"]
        cols += [f"u_{i + 1}" for i in range(self.M_sigma)]
        cols += ["saturated", "cost_state", "cost_control"]
        return cols

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for k in range(len(self.times)):
                row = [repr(float(self.times[k])), repr(float(self.norm_H[k])),
                       repr(float(self.norm_V[k])), repr(float(self.norm_L6[k]))]
                row += [repr(float(v)) for v in self.controls[k]]
                row += [int(bool(self.saturated[k])), repr(float(self.cost_state[k])),
                        repr(float(self.cost_control[k]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if header[:4] != ["t", "normH", "normV", "normL6"] or header[-3:] != \
                ["saturated", "cost_state", "cost_control"]:
            raise ConfigurationError(f"{path}: unexpected trace columns {header}")
        m = len(header) - 7
        return cls(
            times=body[:, 0], norm_H=body[:, 1], norm_V=body[:, 2], norm_L6=body[:, 3],
            controls=body[:, 4:4 + m], saturated=body[:, 4 + m].astype(bool),
            cost_state=body[:, 5 + m], cost_control=body[:, 6 + m],
        )

    def save_snapshots(self, path, x=None):
        np.savez_compressed(path, times=self.snapshot_times, states=self.snapshots,
                            x=np.empty(0) if x is None else x)

    def snapshots_json(self, x=None):
        return json.dumps({
            "x": [] if x is None else [float(v) for v in x],
            "times": [float(t) for t in self.snapshot_times],
            "states": [[float(v) for v in s] for s in self.snapshots],
        })


def concatenate_traces(parts):
    """Join traces whose end and start times coincide (the joint sample is kept once)."""
    keep = [parts[0]]
    for p in parts[1:]:
        if abs(p.times[0] - keep[-1].times[-1]) > 1e-9:
            raise ConfigurationError("traces are not contiguous")
        keep.append(p)

    def cat(name):
        arrays = [getattr(keep[0], name)] + [getattr(p, name)[1:] for p in keep[1:]]
        return np.concatenate(arrays)

    # cumulative costs restart in each part
    cs, cc = [keep[0].cost_state], [keep[0].cost_control]
    for p in keep[1:]:
        cs.append(cs[-1][-1] + p.cost_state[1:] - p.cost_state[0])
        cc.append(cc[-1][-1] + p.cost_control[1:] - p.cost_control[0])

    # the control recorded at a joint belongs to the later part
    controls = [p.controls[:-1] for p in keep[:-1]] + [keep[-1].controls]
    saturated = [p.saturated[:-1] for p in keep[:-1]] + [keep[-1].saturated]

    snap_t, snaps = [], []
    for p in keep:
        for t, s in zip(p.snapshot_times, p.snapshots):
            if snap_t and abs(t - snap_t[-1]) < 1e-9:
                continue
            snap_t.append(t)
            snaps.append(s)

    return SimTrace(
        times=cat("times"), norm_H=cat("norm_H"), norm_V=cat("norm_V"),
        norm_L6=cat("norm_L6"), controls=np.concatenate(controls),
        saturated=np.concatenate(saturated), cost_state=np.concatenate(cs),
        cost_control=np.concatenate(cc), snapshot_times=np.array(snap_t),
        snapshots=np.array(snaps), final_state=keep[-1].final_state,
    )


@dataclass
class RecordOptions:
    snapshot_every: float = 0.01
    observation: object = None  # anything with norm_sq(z); None means ||z||_H^2


def simulate(grid, ops, initial, T, dt, rhs, t0=0.0, record=None):
    """Integrate ``rhs`` from ``initial`` over ``[t0, t0 + T]`` and return a :class:`SimTrace`."""
    record = record or RecordOptions()
    n_steps = step_count(T, dt)
    times = t0 + dt * np.arange(n_steps + 1)
    y = np.asarray(initial, dtype=float).copy()
    if y.shape != (grid.n_nodes,):
        raise ConfigurationError(f"initial field has shape {y.shape}, grid has {grid.n_nodes} nodes")

    if isinstance(rhs, Free):
        stepper = CNABStepper(ops, dt, implicit="K")
        m = 0
        yt = None
    elif isinstance(rhs, (ClosedLoop, OpenLoop)):
        stepper = CNABStepper(ops, dt, implicit="A")
        m = rhs.fam.M_sigma
        yt = target_values(rhs.target, grid.x, times)
        if isinstance(rhs, OpenLoop):
            controls_in = np.asarray(rhs.controls, dtype=float)
            if controls_in.shape != (n_steps, m):
                raise ConfigurationError(
                    f"control signal has shape {controls_in.shape}, expected {(n_steps, m)}"
                )
    else:
        raise ConfigurationError(f"unknown right-hand side {type(rhs).__name__}")

    obs = record.observation
    stride = max(1, int(round(record.snapshot_every / dt))) if record.snapshot_every else 0

    nH = np.empty(n_steps + 1)
    nV = np.empty(n_steps + 1)
    nL6 = np.empty(n_steps + 1)
    ctrl = np.zeros((n_steps + 1, m))
    sat = np.zeros(n_steps + 1, dtype=bool)
    cs = np.zeros(n_steps + 1)
    cc = np.zeros(n_steps + 1)
    snap_t, snaps = [], []

    def control_at(n, z):
        if isinstance(rhs, ClosedLoop):
            return feedback(z, rhs.fam, ops, rhs.config)
        if isinstance(rhs, OpenLoop):
            u = controls_in[min(n, n_steps - 1)]
            active = rhs.bound != np.inf and vector_norm(u, rhs.norm_kind) >= rhs.bound
            return u, bool(active)
        return np.zeros(0), False

    def observe(z):
        return obs.norm_sq(z) if obs is not None else float(np.dot(z, ops.mass @ z))

    def partial(n):
        return SimTrace(times[:n + 1], nH[:n + 1], nV[:n + 1], nL6[:n + 1], ctrl[:n + 1],
                        sat[:n + 1], cs[:n + 1], cc[:n + 1], np.array(snap_t),
                        np.array(snaps), y.copy())

    prev = None
    q_prev = observe(y)
    for n in range(n_steps + 1):
        nH[n], nV[n], nL6[n] = field_norms(y, ops, grid)
        u, flag = control_at(n, y)
        ctrl[n], sat[n] = u, flag
        if stride and (n % stride == 0 or n == n_steps):
            snap_t.append(times[n])
            snaps.append(y.copy())
        if n == n_steps:
            break

        if isinstance(rhs, Free):
            nodal = -f_cubic(y, rhs.params)
            if rhs.forcing is not None:
                nodal = nodal + rhs.forcing(times[n], grid.x)
            load = ops.mass @ nodal
            held = None
        else:
            load = -(ops.mass @ f_error(y, yt[n], rhs.params))
            held = rhs.fam.indicator_loads @ u
        if prev is None:
            prev = load
        y = stepper.step(y, load, prev, held)
        prev = load

        q_next = observe(y)
        cs[n + 1] = cs[n] + 0.25 * dt * (q_prev + q_next)
        cc[n + 1] = cc[n] + 0.5 * dt * float(np.dot(u, u))
        q_prev = q_next

        if not np.isfinite(y).all() or np.sqrt(max(q_next if obs is None else
                                                    np.dot(y, ops.mass @ y), 0.0)) > BLOW_UP_NORM:
            nH[n + 1], nV[n + 1], nL6[n + 1] = np.nan, np.nan, np.nan
            raise BlowUpError(f"state blew up at t={times[n + 1]:.6g}", time=float(times[n + 1]),
                              trace=partial(n))
    return SimTrace(times, nH, nV, nL6, ctrl, sat, cs, cc, np.array(snap_t),
                    np.array(snaps), y.copy())


def forcing_persistent_bound(forcing, grid, ops, T, tau_h=1.0, samples_per_window=100):
    """Estimate ``sup_s ||h||_{L^6((s, s + tau_h), L^2)}`` for ``s`` in ``[0, T]``.

    ``forcing`` is ``h(t, x)`` or ``None`` (zero force). The inner norm is
    the discrete L2 norm and the time integral uses the trapezoid rule.
    """
    if forcing is None:
        return 0.0
    if not tau_h > 0:
        raise ConfigurationError(f"tau_h must be positive, got {tau_h}")
    step = tau_h / samples_per_window
    times = np.arange(0.0, T + tau_h + 0.5 * step, step)
    vals = np.array([float(np.dot(v, ops.mass @ v)) ** 3 for v in
                     (forcing(t, grid.x) for t in times)])
    if not np.isfinite(vals).all():
        raise ConfigurationError("forcing is not finite on the time horizon")
    cum = np.concatenate([[0.0], np.cumsum(0.5 * step * (vals[1:] + vals[:-1]))])
    window = cum[samples_per_window:] - cum[:-samples_per_window]
    return float(max(window.max(), 0.0) ** (1.0 / 6.0))
