"""P1 finite elements on the interval (0, L) with homogeneous Neumann conditions.

All matrices are symmetric tridiagonal. They are kept as (diagonal,
off-diagonal) pairs so that time stepping can use the LAPACK tridiagonal
routines directly; ``.sparse()`` gives a scipy matrix for everything else.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.linalg import lapack

from .errors import ConfigurationError, NumericalError

# 3-point Gauss-Legendre rule on the reference interval [0, 1]
GAUSS3_POINTS = 0.5 + 0.5 * np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
GAUSS3_WEIGHTS = 0.5 * np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


@dataclass(frozen=True)
class Tridiagonal:
    """Symmetric tridiagonal matrix stored by its two bands."""

    diag: np.ndarray
    off: np.ndarray

    def __matmul__(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            out = self.diag * z
            out[:-1] += self.off * z[1:]
            out[1:] += self.off * z[:-1]
            return out
        # columns are vectors
        out = self.diag[:, None] * z
        out[:-1] += self.off[:, None] * z[1:]
        out[1:] += self.off[:, None] * z[:-1]
        return out

    def __add__(self, other):
        return Tridiagonal(self.diag + other.diag, self.off + other.off)

    def __sub__(self, other):
        return Tridiagonal(self.diag - other.diag, self.off - other.off)

    def scaled(self, a):
        return Tridiagonal(a * self.diag, a * self.off)

    @property
    def size(self):
        return self.diag.size

    def sparse(self):
        return scipy.sparse.diags([self.off, self.diag, self.off], [-1, 0, 1], format="csr")

    def dense(self):
        return self.sparse().toarray()

    def factorize(self):
        return TridiagonalSolver(self)


class TridiagonalSolver:
    """LDL^T factorization of an SPD tridiagonal matrix (LAPACK pttrf)."""

    def __init__(self, mat):
        d, e, info = lapack.dpttrf(mat.diag, mat.off)
        if info != 0:
            raise NumericalError(f"tridiagonal factorization failed (info={info}); matrix not SPD")
        self._d = d
        self._e = e

    def solve(self, b):
        x, info = lapack.dpttrs(self._d, self._e, b)
        if info != 0:
            raise NumericalError(f"tridiagonal solve failed (info={info})")
        return x


@dataclass(frozen=True)
class Grid:
    n_nodes: int
    length: float
    nu: float
    x: np.ndarray = field(repr=False)

    @property
    def h(self):
        return self.length / (self.n_nodes - 1)


@dataclass(frozen=True)
class FemOperators:
    """Consistent mass ``M``, stiffness ``K`` and the shifted operator ``A = nu*K + M``."""

    mass: Tridiagonal
    stiffness: Tridiagonal
    nu: float
    _mass_solver: TridiagonalSolver = field(repr=False, compare=False)

    @property
    def A(self):
        return self.stiffness.scaled(self.nu) + self.mass

    def inner(self, a, b):
        """L2 inner product of two P1 fields."""
        return float(np.dot(a, self.mass @ b))

    def inner_v(self, a, b):
        return float(np.dot(a, self.A @ b))

    def solve_mass(self, b):
        """Apply ``M^{-1}`` (turns a load vector into a field)."""
        return self._mass_solver.solve(b)


def build_grid(n_nodes, length, nu):
    """Uniform grid of ``n_nodes`` nodes on (0, length) and its P1 matrices."""
    if int(n_nodes) != n_nodes or n_nodes < 3:
        raise ConfigurationError(f"n_nodes must be an integer >= 3, got {n_nodes}")
    if not length > 0:
        raise ConfigurationError(f"domain length must be positive, got {length}")
    if not nu > 0:
        raise ConfigurationError(f"diffusion nu must be positive, got {nu}")
    n_nodes = int(n_nodes)
    x = np.linspace(0.0, length, n_nodes)
    grid = Grid(n_nodes, float(length), float(nu), x)
    h = grid.h

    md = np.full(n_nodes, 4.0 * h / 6.0)
    md[0] = md[-1] = 2.0 * h / 6.0
    mass = Tridiagonal(md, np.full(n_nodes - 1, h / 6.0))

    kd = np.full(n_nodes, 2.0 / h)
    kd[0] = kd[-1] = 1.0 / h
    stiffness = Tridiagonal(kd, np.full(n_nodes - 1, -1.0 / h))

    ops = FemOperators(mass, stiffness, float(nu), mass.factorize())
    return grid, ops


def element_quadrature(grid, func):
    """Integrate ``func(x)`` over the domain with 3-point Gauss on each element."""
    a = grid.x[:-1]
    xq = a[:, None] + grid.h * GAUSS3_POINTS[None, :]
    return float(grid.h * np.sum(func(xq) * GAUSS3_WEIGHTS[None, :]))


def p1_at_gauss_points(grid, z):
    """Values of the P1 interpolant of ``z`` at the Gauss points, shape (elements, 3)."""
    z = np.asarray(z)
    return z[:-1, None] * (1.0 - GAUSS3_POINTS[None, :]) + z[1:, None] * GAUSS3_POINTS[None, :]


def norms(z, ops, grid):
    """Return ``(||z||_H, ||z||_V, ||z||_{L^6})`` of a nodal field."""
    z = np.asarray(z, dtype=float)
    if z.shape != (grid.n_nodes,):
        raise ConfigurationError(f"field has shape {z.shape}, grid has {grid.n_nodes} nodes")
    nh2 = max(np.dot(z, ops.mass @ z), 0.0)
    nv2 = max(np.dot(z, ops.A @ z), 0.0)
    zq = p1_at_gauss_points(grid, z)
    l6 = grid.h * np.sum(zq ** 6 * GAUSS3_WEIGHTS[None, :])
    return float(np.sqrt(nh2)), float(np.sqrt(nv2)), float(l6 ** (1.0 / 6.0))


@dataclass(frozen=True)
class EigenBasis:
    """First ``count`` M-orthonormal eigenfields of ``A e = alpha M e``."""

    fields: np.ndarray  # shape (n_nodes, count)
    eigenvalues: np.ndarray

    @property
    def count(self):
        return self.eigenvalues.size


def neumann_eigenbasis(grid, ops, count):
    if not 1 <= count <= grid.n_nodes:
        raise ConfigurationError(f"count must lie in [1, {grid.n_nodes}], got {count}")
    try:
        vals, vecs = scipy.linalg.eigh(
            ops.A.dense(), ops.mass.dense(), subset_by_index=[0, count - 1]
        )
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"generalized eigensolve failed for count={count}: {exc}") from exc

    # re-normalize in the mass inner product, then fix signs
    for k in range(count):
        v = vecs[:, k]
        v /= np.sqrt(np.dot(v, ops.mass @ v))
        first = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())[0]
        if v[first] < 0:
            v *= -1.0
        vecs[:, k] = v
    return EigenBasis(vecs, vals)
