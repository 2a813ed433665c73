"""Indicator actuators, sin^2 bumps, oblique projections and saturated feedback.

Every inner product is the discrete L2 product ``a^T M b``. Indicator fields
are the L2-projections of exact indicator functions onto the P1 space; their
load vectors ``b_j = M u_j`` are assembled by exact integration, so
``(u_j, p)_H = b_j^T p`` holds exactly.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DegenerateFamilyError, NumericalError, ResolutionError

MIN_NODES_PER_SUPPORT = 4


class NormKind(str, Enum):
    LINF = "linf"
    L2 = "l2"


class Variant(str, Enum):
    OBLIQUE = "oblique"
    ORTHOGONAL = "orthogonal"


class Direction(str, Enum):
    ONTO_BUMPS_ALONG_UPERP = "onto_bumps_along_Uperp"
    ONTO_U_ALONG_BUMPSPERP = "onto_U_along_bumpsperp"


def vector_norm(v, norm_kind):
    v = np.asarray(v, dtype=float)
    if NormKind(norm_kind) is NormKind.LINF:
        return float(np.max(np.abs(v))) if v.size else 0.0
    return float(np.linalg.norm(v))


@dataclass(frozen=True)
class ActuatorFamily:
    M: int
    r: float
    centers: np.ndarray
    supports: np.ndarray  # shape (M_sigma, 2)
    indicator_fields: np.ndarray  # shape (n_nodes, M_sigma)
    indicator_loads: np.ndarray  # M @ indicator_fields
    bump_fields: np.ndarray  # shape (n_nodes, M_sigma)
    gram_UU: np.ndarray
    gram_UPsi: np.ndarray  # [i, j] = (1_{omega_i}, Psi_j)_H
    bump_stiffness: np.ndarray  # [i, j] = (Psi_i, Psi_j)_V
    _gram_lu: tuple = field(repr=False, compare=False)
    _gram_UU_cho: tuple = field(repr=False, compare=False)

    @property
    def M_sigma(self):
        return self.centers.size

    @property
    def measures(self):
        return self.supports[:, 1] - self.supports[:, 0]

    def bump(self, j, x):
        """Evaluate the exact bump function ``Psi_j`` at points ``x``."""
        a, b = self.supports[j]
        x = np.asarray(x, dtype=float)
        inside = (x > a) & (x < b)
        return np.where(inside, np.sin(np.pi * (x - a) / (b - a)) ** 2, 0.0)

    def solve_gram(self, rhs, transpose=False):
        return scipy.linalg.lu_solve(self._gram_lu, rhs, trans=1 if transpose else 0)

    def solve_gram_UU(self, rhs):
        return scipy.linalg.cho_solve(self._gram_UU_cho, rhs)


def _indicator_load(x, a, b):
    """Exact integrals of ``1_(a,b)`` against every P1 hat function."""
    n = x.size
    load = np.zeros(n)
    lo = np.clip(a, x[:-1], x[1:])
    hi = np.clip(b, x[:-1], x[1:])
    seg = hi - lo
    mid = 0.5 * (lo + hi)
    h = x[1:] - x[:-1]
    # hat functions are linear on each element, so the midpoint rule is exact
    load[:-1] += seg * (x[1:] - mid) / h
    load[1:] += seg * (mid - x[:-1]) / h
    return load


def build_actuators(M, r, grid, ops):
    """Actuator family with ``M`` supports covering the fraction ``r`` of the domain."""
    if int(M) != M or M < 1:
        raise ConfigurationError(f"M must be a positive integer, got {M}")
    if not 0.0 < r < 1.0:
        raise ConfigurationError(f"volume fraction r must lie in (0, 1), got {r}")
    M = int(M)
    L = grid.length
    centers = (2.0 * np.arange(1, M + 1) - 1.0) * L / (2.0 * M)
    half = r * L / (2.0 * M)
    supports = np.column_stack([centers - half, centers + half])

    x = grid.x
    loads = np.empty((grid.n_nodes, M))
    bumps = np.empty((grid.n_nodes, M))
    for j, (a, b) in enumerate(supports):
        n_inside = int(np.count_nonzero((x > a) & (x < b)))
        if n_inside < MIN_NODES_PER_SUPPORT:
            raise ResolutionError(
                f"actuator {j} support ({a:.6g}, {b:.6g}) holds {n_inside} nodes; "
                f"need at least {MIN_NODES_PER_SUPPORT} (increase n_nodes)"
            )
        loads[:, j] = _indicator_load(x, a, b)
        inside = (x > a) & (x < b)
        bumps[:, j] = np.where(inside, np.sin(np.pi * (x - a) / (b - a)) ** 2, 0.0)

    indicators = np.column_stack([ops.solve_mass(loads[:, j]) for j in range(M)])
    gram_UU = indicators.T @ loads
    gram_UPsi = loads.T @ bumps
    bump_stiffness = bumps.T @ (ops.A @ bumps)

    lu = scipy.linalg.lu_factor(gram_UPsi)
    if np.linalg.cond(gram_UPsi) > 1e12:
        raise DegenerateFamilyError("indicator/bump Gram matrix is singular to working precision")
    cho = scipy.linalg.cho_factor(0.5 * (gram_UU + gram_UU.T))

    return ActuatorFamily(
        M=M,
        r=float(r),
        centers=centers,
        supports=supports,
        indicator_fields=indicators,
        indicator_loads=loads,
        bump_fields=bumps,
        gram_UU=gram_UU,
        gram_UPsi=gram_UPsi,
        bump_stiffness=bump_stiffness,
        _gram_lu=lu,
        _gram_UU_cho=cho,
    )


def u_diamond(u, fam):
    """Field ``sum_i u_i 1_{omega_i}`` in the P1 space."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != fam.M_sigma:
        raise ConfigurationError(f"control has length {u.shape[0]}, family has {fam.M_sigma} actuators")
    return fam.indicator_fields @ u


def u_diamond_adjoint(p, fam, ops=None):
    """Vector of ``(p, 1_{omega_i})_H``; also accepts a stack of fields as columns."""
    return fam.indicator_loads.T @ np.asarray(p, dtype=float)


def oblique_project(z, fam, ops, direction):
    """Oblique projection in the L2 product.

    ``onto_bumps_along_Uperp``: result lies in span(bumps), residual is
    orthogonal to every indicator. ``onto_U_along_bumpsperp``: result lies in
    span(indicators), residual is orthogonal to every bump.
    """
    direction = Direction(direction)
    z = np.asarray(z, dtype=float)
    if direction is Direction.ONTO_BUMPS_ALONG_UPERP:
        c = fam.solve_gram(fam.indicator_loads.T @ z)
        return fam.bump_fields @ c
    d = fam.solve_gram(fam.bump_fields.T @ (ops.mass @ z), transpose=True)
    return fam.indicator_fields @ d


def bump_coefficients(z, fam):
    """Coefficients of the projection onto span(bumps) along the indicators' complement."""
    return fam.solve_gram(fam.indicator_loads.T @ np.asarray(z, dtype=float))


def saturate(v, C_u, norm_kind=NormKind.LINF):
    """Radial projection onto the ball of radius ``C_u`` (``C_u`` may be ``inf``)."""
    v = np.asarray(v, dtype=float)
    if C_u == np.inf:
        return v.copy()
    if C_u <= 0.0:
        return np.zeros_like(v)
    nv = vector_norm(v, norm_kind)
    if nv <= C_u:
        return v.copy()
    out = (C_u / nv) * v
    # rounding in the scaling may overshoot by an ulp; the bound must hold exactly
    if NormKind(norm_kind) is NormKind.LINF:
        return np.clip(out, -C_u, C_u)
    while vector_norm(out, norm_kind) > C_u:
        out *= 1.0 - np.finfo(float).eps
    return out


@dataclass(frozen=True)
class FeedbackConfig:
    lam: float
    C_u: float = np.inf
    norm_kind: NormKind = NormKind.LINF
    variant: Variant = Variant.OBLIQUE

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ConfigurationError(f"feedback gain must be nonnegative, got {self.lam}")
        if not self.C_u >= 0.0:
            raise ConfigurationError(f"control bound must be nonnegative, got {self.C_u}")
        object.__setattr__(self, "norm_kind", NormKind(self.norm_kind))
        object.__setattr__(self, "variant", Variant(self.variant))


def unsaturated_feedback(z, fam, ops, cfg):
    """The linear feedback value ``v`` before saturation."""
    z = np.asarray(z, dtype=float)
    if cfg.variant is Variant.ORTHOGONAL:
        return -cfg.lam * fam.solve_gram_UU(fam.indicator_loads.T @ z)
    c = bump_coefficients(z, fam)
    # A applied in weak form: (Psi_i, A Psi c)_H = (Psi_i, Psi c)_V
    d = fam.solve_gram(fam.bump_stiffness @ c, transpose=True)
    return -cfg.lam * d


def feedback(z, fam, ops, cfg):
    """Saturated explicit feedback; returns ``(u, saturated)``."""
    v = unsaturated_feedback(z, fam, ops, cfg)
    u = saturate(v, cfg.C_u, cfg.norm_kind)
    saturated = bool(cfg.C_u != np.inf and vector_norm(v, cfg.norm_kind) > cfg.C_u)
    return u, saturated


def feedback_operator_matrix(fam):
    """Matrix ``R`` with ``U_M w = R @ (indicator loads)^T w`` (the gain-free feedback)."""
    g_inv_stiff = fam.solve_gram(fam.bump_stiffness, transpose=True)
    return fam.solve_gram(g_inv_stiff.T, transpose=True).T


def frak_u_norm(fam, ops, norm_kind=NormKind.LINF, tol=1e-8, max_iter=10_000):
    """Operator norm of the gain-free feedback from L2 into (R^M, |||.|||)."""
    R = feedback_operator_matrix(fam)
    if NormKind(norm_kind) is NormKind.LINF:
        # row i is the functional w -> (rho_i, w)_H with rho_i = indicator_fields @ R[i]
        per_row = np.einsum("ij,jk,ik->i", R, fam.gram_UU, R)
        return float(np.sqrt(per_row.max()))

    N = R @ fam.gram_UU @ R.T
    x = np.ones(N.shape[0]) / np.sqrt(N.shape[0])
    est = 0.0
    for _ in range(max_iter):
        y = N @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - est) <= tol * new:
            return float(np.sqrt(new))
        est = new
    raise NumericalError(f"power iteration did not converge in {max_iter} steps")


def frak_u_apply(w, fam):
    """``U_M w`` for a field ``w`` (no gain, no saturation)."""
    return feedback_operator_matrix(fam) @ (fam.indicator_loads.T @ np.asarray(w, dtype=float))


def cu_star(lam, D, frak_norm):
    """Saturation threshold ``lam * |||U_M||| * D`` above which the feedback stays linear."""
    if lam < 0 or D < 0 or frak_norm < 0:
        raise ConfigurationError("cu_star arguments must be nonnegative")
    return float(lam * frak_norm * D)
