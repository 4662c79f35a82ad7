"""Discrete pressure Poisson problem with ghost-point Neumann rows.

The pressure unknowns are the inner plus ghost node values. Inner nodes
carry 5-point Laplacian rows; each ghost node carries one Neumann row
approximating the outward normal derivative at its boundary point from a
quadratic interpolant through 6 nearby nodes (the ghost always among
them). The stacked system is square with the constants as exact nullspace
and is solved in the minimum-norm least-squares sense through a bordered
normal-equation factorization computed once per geometry. An optional
projection subtracts the mean solvability defect from the Neumann data so
the discrete compatibility identity holds exactly even for states with
nonzero divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import DomainClassification, GeometryError, StaggeredGrid, _greedy_pick
from .operators import GridOperators

__all__ = [
    "PressureSystem",
    "PoissonRhs",
    "assemble_pressure_matrix",
    "assemble_poisson_rhs",
    "boundary_quadrature",
    "solvability_defect",
    "project_rhs",
    "solve_pressure",
]


@dataclass(frozen=True)
class PressureSystem:
    """Stacked Laplacian/Neumann matrix with its solve factorization."""

    laplacian: sp.csr_matrix     # (N_a, N)
    neumann: sp.csr_matrix       # (N_b, N)
    stacked: sp.csr_matrix       # (N, N)
    quad_weights: np.ndarray     # (N_e,) arc-length shares, sum = perimeter
    perimeter: float
    h: float
    n_inner: int
    n_ghost: int
    _solver: object              # bordered normal-equation LU

    @property
    def n(self) -> int:
        return self.n_inner + self.n_ghost


@dataclass(frozen=True)
class PoissonRhs:
    """Interior source a, Neumann data b, and the projection defect used."""

    a: np.ndarray
    b: np.ndarray
    defect: float = 0.0


def boundary_quadrature(cls: DomainClassification, domain) -> np.ndarray:
    """Arc-length share per boundary point: half the gap to each neighbor
    along its boundary component (components close periodically)."""
    xb = cls.boundary_points
    comp, t, length = domain.boundary_parameter(xb[:, 0], xb[:, 1])
    comp = np.atleast_1d(comp)
    t = np.atleast_1d(t)
    length = np.atleast_1d(length)
    w = np.zeros(len(xb))
    for c in np.unique(comp):
        idx = np.flatnonzero(comp == c)
        order = idx[np.argsort(t[idx], kind="stable")]
        tc = t[order]
        lc = float(length[order[0]])
        gaps = np.diff(tc, append=tc[0] + lc)  # gap following each point
        w[order] = 0.5 * (gaps + np.roll(gaps, 1))
    return w


def _neumann_row(grid, cls, ghost_rank, cand_cols, cand_xy, reach):
    """One normal-derivative row from a 6-node quadratic interpolant.

    Node selection starts from the owning ghost node and fills greedily by
    distance, skipping nodes that would degenerate the quadratic fit (six
    grid points on two grid lines lie on a conic). Exact for quadratics.
    """
    h = grid.h
    px, py = cls.boundary_points[ghost_rank]
    nx_, ny_ = cls.boundary_normals[ghost_rank]
    cx, cy = cand_xy
    d = grid.dist(cx, cy, px, py)
    order = np.argsort(d, kind="stable")
    order = [int(i) for i in order if d[i] <= reach]
    ghost_col = cls.n_inner + ghost_rank
    gpos = next((k for k, i in enumerate(order) if cand_cols[i] == ghost_col), None)
    if gpos is None:
        raise GeometryError(f"ghost node {ghost_rank} is not near its boundary point")
    if len(order) < 6:
        raise GeometryError(
            f"fewer than 6 pressure nodes near boundary point {ghost_rank}")

    dx, dy = grid.delta(cx[order] - px, cy[order] - py)
    xi, eta = dx / h, dy / h
    basis = np.stack([np.ones_like(xi), xi, eta, xi * xi, xi * eta, eta * eta])
    picked_local = _greedy_pick(basis, [gpos], 6, list(range(len(order))),
                                min_resid=1e-8)
    if picked_local is None:
        raise GeometryError(
            f"rank-deficient Neumann stencil at boundary point {ghost_rank}")
    pick = [order[k] for k in picked_local]
    v = basis[:, picked_local].T  # (6 nodes, 6 basis)
    sv = np.linalg.svd(v, compute_uv=False)
    if sv[-1] < 1e-8 * sv[0]:
        raise GeometryError(
            f"degenerate Neumann stencil at boundary point {ghost_rank}")
    # n·grad of the interpolant at the expansion point is a combination of
    # the xi and eta coefficients.
    target = np.zeros(6)
    target[1] = nx_ / h
    target[2] = ny_ / h
    weights = np.linalg.solve(v.T, target)
    cols = [int(cand_cols[i]) for i in pick]
    # Pin the exact constant nullspace: absorb the roundoff row sum into the
    # ghost coefficient.
    gslot = cols.index(ghost_col)
    weights[gslot] -= weights.sum()
    return cols, weights


def assemble_pressure_matrix(grid: StaggeredGrid, cls: DomainClassification,
                             domain) -> PressureSystem:
    """Build L, B, the stacked matrix and its minimum-norm solver."""
    h = grid.h
    n_a, n_b = cls.n_inner, cls.n_ghost
    n = n_a + n_b

    rows, cols, vals = [], [], []
    for r, (i, j) in enumerate(cls.inner_pressure):
        rows.append(r)
        cols.append(cls.node_col[i, j])
        vals.append(-4.0 / (h * h))
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            c = cls.node_col[i + di, grid.wrap_j(j + dj)]
            if c < 0:
                raise GeometryError(f"incomplete pressure stencil at ({i},{j})")
            rows.append(r)
            cols.append(c)
            vals.append(1.0 / (h * h))
    laplacian = sp.csr_matrix((vals, (rows, cols)), shape=(n_a, n))

    # Candidate nodes for the Neumann fits: all of C_p with coordinates.
    all_nodes = np.concatenate([cls.inner_pressure, cls.ghost_pressure])
    ax, ay = grid.node_xy(all_nodes[:, 0], all_nodes[:, 1])
    cand_cols = np.arange(n)

    rows, cols, vals = [], [], []
    for g in range(n_b):
        ccols, w = _neumann_row(grid, cls, g, cand_cols, (ax, ay), reach=4.0 * h)
        for c, wk in zip(ccols, w):
            rows.append(g)
            cols.append(c)
            vals.append(wk)
    neumann = sp.csr_matrix((vals, (rows, cols)), shape=(n_b, n))

    stacked = sp.vstack([laplacian, neumann]).tocsr()
    # Bordered normal equations, with the constant-vector Lagrange row: the
    # solution is the least-squares minimizer of zero mean, which for a
    # solution set p + span(1) is also the minimum-norm one.
    ata = (stacked.T @ stacked).tocsr()
    ones = sp.csr_matrix(np.ones((1, n)))
    bordered = sp.bmat([[ata, ones.T], [ones, None]], format="csc")
    solver = spla.splu(bordered)

    quad = boundary_quadrature(cls, domain)
    return PressureSystem(
        laplacian=laplacian,
        neumann=neumann,
        stacked=stacked,
        quad_weights=quad,
        perimeter=float(quad.sum()),
        h=h,
        n_inner=n_a,
        n_ghost=n_b,
        _solver=solver,
    )


def assemble_poisson_rhs(system: PressureSystem, ops: GridOperators,
                         case, w: np.ndarray, t: float, mu: float,
                         lam: float, adv_edges: np.ndarray | None = None,
                         adv_at_xb: np.ndarray | None = None) -> PoissonRhs:
    """Source and Neumann data at one time level.

    a = centered divergence of the analytic forcing at inner nodes (minus
    the advective source when supplied); b combines the analytic forcing,
    boundary data and its rate with the patch-extrapolated Laplacian and
    velocity of the current state, plus the feedback term.
    """
    f_u = case.forcing(*ops.u_mid, t, mu)[0]
    f_v = case.forcing(*ops.v_mid, t, mu)[1]
    f_edges = np.concatenate([f_u, f_v])
    a = ops.div_inner @ f_edges
    if adv_edges is not None:
        a = a - ops.div_inner @ adv_edges

    xb, yb = ops.xb[:, 0], ops.xb[:, 1]
    nx_, ny_ = ops.normals[:, 0], ops.normals[:, 1]
    fbx, fby = case.forcing(xb, yb, t, mu)
    gx, gy = case.velocity(xb, yb, t)
    gtx, gty = case.velocity_t(xb, yb, t)
    lap_n = ops.lap_at_xb_u @ w * nx_ + ops.lap_at_xb_v @ w * ny_
    vel_n = ops.u_at_xb @ w * nx_ + ops.v_at_xb @ w * ny_
    b = (nx_ * (fbx - gtx) + ny_ * (fby - gty)
         + mu * lap_n
         + lam * (vel_n - (nx_ * gx + ny_ * gy)))
    if adv_at_xb is not None:
        b = b - (nx_ * adv_at_xb[:, 0] + ny_ * adv_at_xb[:, 1])
    return PoissonRhs(a=a, b=b)


def solvability_defect(system: PressureSystem, rhs: PoissonRhs) -> float:
    """Mean flux-minus-source imbalance of the Neumann problem.

    Discrete form of the compatibility defect: boundary quadrature of b
    minus the cell-weighted sum of a, normalized by the perimeter.
    """
    h2 = system.h * system.h
    return float((system.quad_weights @ rhs.b - h2 * rhs.a.sum())
                 / system.perimeter)


def project_rhs(system: PressureSystem, rhs: PoissonRhs) -> PoissonRhs:
    """Subtract the defect from the Neumann data; the projected data
    satisfies the discrete compatibility identity exactly."""
    c = solvability_defect(system, rhs)
    return PoissonRhs(a=rhs.a, b=rhs.b - c, defect=c)


def solve_pressure(system: PressureSystem, rhs: PoissonRhs,
                   project: bool = True) -> np.ndarray:
    """Minimum-norm least-squares pressure for the stacked system."""
    if project:
        rhs = project_rhs(system, rhs)
    full = np.concatenate([rhs.a, rhs.b])
    z = system.stacked.T @ full
    sol = system._solver.solve(np.concatenate([z, [0.0]]))
    return sol[:-1]
