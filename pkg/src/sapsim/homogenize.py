"""Periodic cell problems and the effective diffusion factor of the stem.

The reference cell is a unit square with a circular inclusion (the slow
region inside the coupling circle) removed.  Solving one Laplace problem
per coordinate direction with zero normal flux on the inclusion boundary
yields corrector fields whose averaged gradients give the effective
diffusion tensor.  For this geometry the tensor is a scalar multiple of
the identity; the scalar multiplies the macroscale conduction operator.

Discretization is a 5-point finite-volume scheme on a uniform periodic
grid.  The inclusion enters through exact open-length fractions of cell
faces and exact open areas of cut cells, so no mesh generator is needed
and the geometry carries no quadrature noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla


class HomogenizeError(RuntimeError):
    """Raised for cell-problem solve failures or anisotropic results."""


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(12)


@dataclass
class CellProblemMesh:
    """Uniform periodic grid of the unit cell minus the inclusion.

    ``fx[i, j]`` is the open fraction of the face between cells (i, j) and
    (i+1 mod n, j); ``fy[i, j]`` between (i, j) and (i, j+1 mod n); ``w``
    the open area fraction of each cell.  The inclusion is a disk of the
    given radius (in units of the cell side) centered in the cell.
    """

    n: int
    radius: float
    fx: np.ndarray
    fy: np.ndarray
    w: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def open_area(self) -> float:
        return float(self.w.sum() * self.h ** 2)


def _chord_half(x: np.ndarray, rho: float) -> np.ndarray:
    return np.sqrt(np.maximum(rho * rho - x * x, 0.0))


def _face_open_fractions(n: int, rho: float) -> np.ndarray:
    """Open fraction of east faces: face i at x=(i+1)h-1/2, cell row j."""
    h = 1.0 / n
    xf = (np.arange(n) + 1.0) * h - 0.5          # face abscissae
    y0 = np.arange(n) * h - 0.5                  # row lower edges
    c = _chord_half(xf, rho)[:, None]            # (n, 1)
    lo = np.maximum(y0[None, :], -c)
    hi = np.minimum(y0[None, :] + h, c)
    blocked = np.maximum(hi - lo, 0.0)
    return 1.0 - blocked / h


def _disk_rect_area(x0: float, x1: float, y0: float, y1: float, rho: float) -> float:
    """Exact area of the disk of radius rho (centered at 0) inside a rectangle."""
    brk = {x0, x1}
    for val in (rho, -rho):
        if x0 < val < x1:
            brk.add(val)
    for yb in (abs(y0), abs(y1)):
        if yb < rho:
            xs = math.sqrt(rho * rho - yb * yb)
            for val in (xs, -xs):
                if x0 < val < x1:
                    brk.add(val)
    pts = sorted(brk)
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        xs = mid + half * _GAUSS_X
        c = _chord_half(xs, rho)
        seg = np.maximum(np.minimum(y1, c) - np.maximum(y0, -c), 0.0)
        total += half * float(np.dot(_GAUSS_W, seg))
    return total


def _cell_open_fractions(n: int, rho: float) -> np.ndarray:
    h = 1.0 / n
    edges = np.arange(n + 1) * h - 0.5
    w = np.ones((n, n))
    if rho <= 0.0:
        return w
    # bounding classification by distance of cell corners to the center
    for i in range(n):
        x0, x1 = edges[i], edges[i + 1]
        px = max(abs(x0), abs(x1))
        qx = x0 if x0 > 0 else (x1 if x1 < 0 else 0.0)
        for j in range(n):
            y0, y1 = edges[j], edges[j + 1]
            py = max(abs(y0), abs(y1))
            qy = y0 if y0 > 0 else (y1 if y1 < 0 else 0.0)
            far2 = px * px + py * py
            near2 = qx * qx + qy * qy
            if far2 <= rho * rho:
                w[i, j] = 0.0
            elif near2 >= rho * rho:
                w[i, j] = 1.0
            else:
                w[i, j] = 1.0 - _disk_rect_area(x0, x1, y0, y1, rho) / (h * h)
    return w


def build_cell_mesh(inclusion_ratio: float, n: int = 128) -> CellProblemMesh:
    """Mesh the unit cell with a centered disk inclusion of the given radius.

    ``inclusion_ratio`` is the disk radius over the cell side length and
    must stay below 1/2 so the fast region percolates.
    """
    if not 0.0 <= inclusion_ratio < 0.5:
        raise HomogenizeError(f"inclusion ratio must be in [0, 0.5), got {inclusion_ratio}")
    if n < 8:
        raise HomogenizeError(f"grid too coarse: n = {n}")
    fx = _face_open_fractions(n, inclusion_ratio)
    fy = fx.T.copy()          # disk and grid are symmetric under (x, y) swap
    w = _cell_open_fractions(n, inclusion_ratio)
    return CellProblemMesh(n=n, radius=inclusion_ratio, fx=fx, fy=fy, w=w)


def _operator(mesh: CellProblemMesh):
    """Sparse FV operator and per-direction right-hand sides."""
    n = mesh.n
    h = mesh.h
    idx = np.arange(n * n).reshape(n, n)
    east = np.roll(idx, -1, axis=0)
    north = np.roll(idx, -1, axis=1)

    rows, cols, vals = [], [], []
    rhs = np.zeros((2, n * n))

    def add_faces(frac, nb_idx, axis):
        f = frac.ravel()
        c = idx.ravel()
        nb = nb_idx.ravel()
        rows.extend([c, c, nb, nb])
        cols.extend([c, nb, nb, c])
        vals.extend([-f, f, -f, f])
        # flux of the unit forcing through the open face
        rhs[axis, c] -= f * h
        rhs[axis, nb] += f * h

    add_faces(mesh.fx, east, 0)
    add_faces(mesh.fy, north, 1)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))

    # isolated fully-closed cells get identity rows so the matrix stays regular
    closed = (np.abs(A).sum(axis=1).A1 == 0.0)
    if closed.any():
        ic = np.flatnonzero(closed)
        A = A + sparse.csr_matrix((np.ones(ic.size), (ic, ic)), shape=A.shape)
    return A, rhs, closed


def solve_cell_problem(mesh: CellProblemMesh, direction: int) -> np.ndarray:
    """Corrector field for one coordinate direction, zero-mean over the open region.

    Solves the periodic Laplace problem in which the sum of the unit field
    e_direction and the corrector gradient has zero normal flux on the
    inclusion boundary.
    """
    if direction not in (0, 1):
        raise HomogenizeError(f"direction must be 0 or 1, got {direction}")
    A, rhs, _ = _operator(mesh)
    b = rhs[direction].copy()
    # pin the constant nullspace at the corner cell (always open, ratio < 1/2)
    A = A.tolil()
    A[0, :] = 0.0
    A[0, 0] = 1.0
    b[0] = 0.0
    mu = spla.spsolve(A.tocsr(), b)
    if not np.all(np.isfinite(mu)):
        raise HomogenizeError("cell problem linear solve failed")
    mu = mu.reshape(mesh.n, mesh.n)
    wsum = mesh.w.sum()
    if wsum > 0:
        mu = mu - (mu * mesh.w).sum() / wsum
    return mu


def cell_problem_residual(mesh: CellProblemMesh, mu: np.ndarray, direction: int) -> float:
    """Max-norm residual of the discrete elliptic operator (pre-pinning)."""
    A, rhs, closed = _operator(mesh)
    r = A @ mu.ravel() - rhs[direction]
    r[closed] = 0.0
    return float(np.abs(r).max())


def assemble_pi(mesh: CellProblemMesh, mus) -> np.ndarray:
    """Effective diffusion tensor from the solved corrector fields.

    Each entry is the conserved current of (e_i + grad mu_i) through a
    periodic cross-section, divided by the open area; columns of faces all
    carry the same current, so the average over columns is taken.
    """
    mu_x, mu_y = mus
    area = mesh.open_area
    if area <= 0:
        raise HomogenizeError("empty fast region")
    h = mesh.h

    def currents(mu, forced_axis):
        jump_x = np.roll(mu, -1, axis=0) - mu
        jump_y = np.roll(mu, -1, axis=1) - mu
        ex = h if forced_axis == 0 else 0.0
        ey = h if forced_axis == 1 else 0.0
        jx = (mesh.fx * (jump_x + ex)).sum(axis=1).mean()
        jy = (mesh.fy * (jump_y + ey)).sum(axis=0).mean()
        return jx, jy

    jxx, jyx = currents(mu_x, 0)
    jxy, jyy = currents(mu_y, 1)
    return np.array([[jxx, jxy], [jyx, jyy]]) / area


def effective_radial_coefficient(pi: np.ndarray) -> float:
    """Scalar multiplier for the radially symmetric macroscale operator.

    The square-with-circular-hole geometry makes the tensor isotropic;
    anisotropy beyond 1% indicates a broken mesh and raises.
    """
    pi = np.asarray(pi, dtype=float)
    scale = abs(pi[0, 0])
    if scale == 0.0:
        raise HomogenizeError("degenerate effective tensor")
    aniso = max(abs(pi[0, 0] - pi[1, 1]), abs(pi[0, 1]), abs(pi[1, 0])) / scale
    if aniso > 0.01:
        raise HomogenizeError(f"effective tensor anisotropic beyond 1%: {pi}")
    return float(pi[0, 0])


_PI_CACHE: dict = {}


def pi_hat(inclusion_ratio: float, resolution: int = 128) -> float:
    """Cached scalar effective coefficient for a given inclusion ratio.

    The coefficient is purely geometric and time-independent, so one solve
    per geometry suffices; the cache is write-once, read-shared.
    """
    key = (round(float(inclusion_ratio), 12), int(resolution))
    if key not in _PI_CACHE:
        mesh = build_cell_mesh(inclusion_ratio, resolution)
        mus = (solve_cell_problem(mesh, 0), solve_cell_problem(mesh, 1))
        _PI_CACHE[key] = effective_radial_coefficient(assemble_pi(mesh, mus))
    return _PI_CACHE[key]


def pi_hat_for_params(params, resolution: int = 128) -> float:
    """Effective coefficient for the reference-cell geometry of a parameter set."""
    return pi_hat(params.R_gamma / params.eps, resolution)
