"""Sparse least squares and kernel utilities for the boundary systems.

Matrices are scipy.sparse throughout. The constrained solve follows the
nullspace route: a particular solution of the equality constraints plus a
kernel-basis correction chosen by unconstrained least squares. Divergence
constraint matrices assembled from the grid have 0/±1 entries with at most
two nonzeros per column, so their kernel has an exact integer basis built
from spanning-forest cycles; a rational-elimination fallback covers general
0/±1 input.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lstsq as dense_lstsq

__all__ = [
    "LsqReport",
    "InfeasibleConstraintError",
    "UnderdeterminedBoundaryError",
    "from_entries",
    "lsq_solve",
    "kernel_basis",
    "particular_solution",
    "constrained_lsq",
]

_DENSE_LIMIT = 6000  # densify below this many columns; all shipped systems fit


class InfeasibleConstraintError(RuntimeError):
    """Constraint right-hand side is not in the range of the matrix."""


class UnderdeterminedBoundaryError(RuntimeError):
    """The reduced least-squares matrix lost column rank; the boundary
    condition implementation would leave boundary velocities free."""


@dataclass(frozen=True)
class LsqReport:
    residual_norm: float
    rank_deficient: bool
    dropped_singular_values: int


def from_entries(rows: int, cols: int, entries) -> sp.csr_matrix:
    """Build a CSR matrix from (row, col, value) triplets.

    Duplicate coordinates are rejected rather than summed.
    """
    entries = list(entries)
    if entries:
        r = np.array([e[0] for e in entries], dtype=np.int64)
        c = np.array([e[1] for e in entries], dtype=np.int64)
        v = np.array([e[2] for e in entries], dtype=float)
    else:
        r = np.zeros(0, dtype=np.int64)
        c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    if len(set(zip(r.tolist(), c.tolist()))) != len(entries):
        raise ValueError("duplicate (row, col) coordinates")
    m = sp.coo_matrix((v, (r, c)), shape=(rows, cols))
    m.eliminate_zeros()
    return m.tocsr()


def lsq_solve(a, rhs, rcond: float = 1e-12):
    """Minimum-norm least-squares solution of a @ x = rhs.

    Among all minimizers of the residual, returns the one of smallest
    Euclidean norm (this pins nullspace components such as the Neumann
    pressure constant). Rank deficiency is reported, not raised.
    """
    a = sp.csr_matrix(a)
    rhs = np.asarray(rhs, dtype=float).ravel()
    if a.shape[0] != rhs.shape[0]:
        raise ValueError(f"matrix has {a.shape[0]} rows but rhs has {rhs.shape[0]}")
    if a.shape[1] <= _DENSE_LIMIT:
        x, _, rank, _ = dense_lstsq(a.toarray(), rhs, cond=rcond,
                                    lapack_driver="gelsd")
        dropped = min(a.shape) - rank
    else:
        res = sp.linalg.lsmr(a, rhs, atol=1e-14, btol=1e-14, conlim=1e14,
                             maxiter=50 * a.shape[1])
        x = res[0]
        dropped = 0
    resid = float(np.linalg.norm(a @ x - rhs))
    return x, LsqReport(residual_norm=resid,
                        rank_deficient=dropped > 0,
                        dropped_singular_values=int(dropped))


# ---------------------------------------------------------------------------
# Kernel basis
# ---------------------------------------------------------------------------

def kernel_basis(d) -> sp.csr_matrix:
    """Sparse basis P for the kernel of a 0/±1 matrix, with d @ P = 0 exact.

    Columns carry at most two nonzeros for matrices assembled from the
    staggered divergence, which makes them signed node-edge incidences whose
    kernel is a cycle space with an integer basis (exact in floating point).
    General 0/±1 input falls back to rational elimination.
    """
    d = sp.csc_matrix(d)
    if d.data.size and np.any(np.abs(np.abs(d.data) - 1.0) > 0):
        raise ValueError("kernel_basis expects entries 0 and ±1")
    if np.all(np.diff(d.indptr) <= 2):
        return _cycle_space_kernel(d)
    return _rational_kernel(d)


def _cycle_space_kernel(d: sp.csc_matrix) -> sp.csr_matrix:
    """Kernel via fundamental cycles of a spanning forest.

    Rows become graph nodes plus one virtual ground that absorbs missing
    column endpoints (ground has no balance equation). Each non-tree edge
    seeds a unit flow whose endpoint imbalances are pushed up tree paths;
    vanishing root imbalance yields an exact integer kernel column. A
    leftover at a groundless root marks a gauge-odd cycle: the first one in
    a component carries rank and later ones pair with it.
    """
    m_rows, n = d.shape
    ground = m_rows
    endpoints = []  # per column: list of (row, value); [] means free column
    for c in range(n):
        lo, hi = d.indptr[c], d.indptr[c + 1]
        endpoints.append([(int(r), float(v))
                          for r, v in zip(d.indices[lo:hi], d.data[lo:hi])])

    adj: dict[int, list[tuple[int, int]]] = {}
    for e, epts in enumerate(endpoints):
        if not epts:
            continue
        nodes = [r for r, _ in epts]
        if len(nodes) == 1:
            nodes.append(ground)
        a, b = nodes
        adj.setdefault(a, []).append((b, e))
        adj.setdefault(b, []).append((a, e))

    parent: dict[int, tuple[int, int]] = {}  # node -> (parent node, edge)
    depth: dict[int, int] = {}
    root_of: dict[int, int] = {}
    tree_edges: set[int] = set()
    seen: set[int] = set()
    roots = ([ground] if ground in adj else []) + sorted(r for r in adj if r != ground)
    for root in roots:
        if root in seen:
            continue
        seen.add(root)
        depth[root] = 0
        root_of[root] = root
        queue = [root]
        while queue:
            node = queue.pop(0)
            for nb, e in sorted(adj[node], key=lambda t: (t[1], t[0])):
                if nb in seen:
                    continue
                seen.add(nb)
                parent[nb] = (node, e)
                depth[nb] = depth[node] + 1
                root_of[nb] = root
                tree_edges.add(e)
                queue.append(nb)

    def edge_values(e, node):
        """(value at node, value at the other endpoint, other endpoint)."""
        epts = endpoints[e]
        if len(epts) == 1:
            (r, v), = epts
            return (v, 0.0, ground) if r == node else (0.0, v, r)
        (r1, v1), (r2, v2) = epts
        if r1 == node:
            return v1, v2, r2
        return v2, v1, r1

    def resolve(imbalance: dict[int, float]):
        """Push imbalances up tree paths, deepest node first.

        Returns (edge coefficients, leftover at a groundless root)."""
        coeffs: dict[int, float] = {}
        heap = [(-depth[r], r) for r in imbalance]
        heapq.heapify(heap)
        pending = dict(imbalance)
        done = set()
        while heap:
            _, node = heapq.heappop(heap)
            if node in done:
                continue
            done.add(node)
            beta = pending.pop(node, 0.0)
            if beta == 0.0 or node == ground:
                continue
            if node not in parent:
                return coeffs, {node: beta}
            par, e = parent[node]
            v_here, v_par, other = edge_values(e, node)
            x = -beta / v_here
            coeffs[e] = coeffs.get(e, 0.0) + x
            if par != ground:
                if par not in pending and par not in done:
                    heapq.heappush(heap, (-depth[par], par))
                pending[par] = pending.get(par, 0.0) + x * v_par
        return coeffs, {}

    cols: list[dict[int, float]] = []
    first_odd: dict[int, tuple[dict[int, float], dict[int, float]]] = {}
    for e, epts in enumerate(endpoints):
        if not epts:
            cols.append({e: 1.0})
            continue
        if e in tree_edges:
            continue
        imbalance: dict[int, float] = {}
        for r, v in epts:
            imbalance[r] = imbalance.get(r, 0.0) + v
        coeffs, leftover = resolve(imbalance)
        coeffs[e] = coeffs.get(e, 0.0) + 1.0
        if not leftover:
            cols.append({k: v for k, v in coeffs.items() if v != 0.0})
            continue
        comp = root_of[epts[0][0]]
        if comp in first_odd:
            coeffs0, left0 = first_odd[comp]
            (_, beta), = leftover.items()
            (_, beta0), = left0.items()
            scale = -beta / beta0
            combined = dict(coeffs)
            for k, v in coeffs0.items():
                combined[k] = combined.get(k, 0.0) + scale * v
            cols.append({k: v for k, v in combined.items() if v != 0.0})
        else:
            first_odd[comp] = (coeffs, leftover)

    if not cols:
        return sp.csr_matrix((n, 0))
    rows_i, cols_i, vals = [], [], []
    for k, col in enumerate(cols):
        for e, v in sorted(col.items()):
            rows_i.append(e)
            cols_i.append(k)
            vals.append(v)
    return sp.csr_matrix((vals, (rows_i, cols_i)), shape=(n, len(cols)))


def _rational_kernel(d: sp.csc_matrix) -> sp.csr_matrix:
    """Exact kernel by Gauss-Jordan elimination over rationals."""
    m_rows, n = d.shape
    mat = [[Fraction(0)] * n for _ in range(m_rows)]
    coo = d.tocoo()
    for r, c, v in zip(coo.row, coo.col, coo.data):
        mat[r][c] = Fraction(int(round(v)))
    pivots = []
    row = 0
    for col in range(n):
        sel = next((r for r in range(row, m_rows) if mat[r][col] != 0), None)
        if sel is None:
            continue
        mat[row], mat[sel] = mat[sel], mat[row]
        pv = mat[row][col]
        mat[row] = [x / pv for x in mat[row]]
        for r in range(m_rows):
            if r != row and mat[r][col] != 0:
                f = mat[r][col]
                mat[r] = [a - f * b for a, b in zip(mat[r], mat[row])]
        pivots.append(col)
        row += 1
        if row == m_rows:
            break
    free = [c for c in range(n) if c not in pivots]
    cols = []
    for fc in free:
        vec = [Fraction(0)] * n
        vec[fc] = Fraction(1)
        for r, pc in enumerate(pivots):
            vec[pc] = -mat[r][fc]
        cols.append(vec)
    if not cols:
        return sp.csr_matrix((n, 0))
    dense = np.array([[float(x) for x in col] for col in cols]).T
    return sp.csr_matrix(dense)


def particular_solution(d, s, rtol: float = 1e-10):
    """Minimum-norm y with d @ y = s; raises if s is out of range."""
    d = sp.csr_matrix(d)
    s = np.asarray(s, dtype=float).ravel()
    y, report = lsq_solve(d, s)
    if report.residual_norm > rtol * max(1.0, float(np.linalg.norm(s))):
        raise InfeasibleConstraintError(
            f"constraint residual {report.residual_norm:.3e} exceeds tolerance; "
            "geometry/assembly produced an infeasible divergence system")
    return y


def constrained_lsq(d, s, e, t):
    """Minimize ||e @ y - t|| subject to d @ y = s.

    Uses y = y_p + P c with P spanning ker d; the reduced matrix e @ P must
    have full column rank, otherwise the boundary conditions leave the
    solution underdetermined.
    """
    d = sp.csr_matrix(d)
    e = sp.csr_matrix(e)
    if d.shape[1] != e.shape[1]:
        raise ValueError("constraint and objective matrices disagree on unknowns")
    y_p = particular_solution(d, s)
    p = kernel_basis(d)
    if p.shape[1] == 0:
        return y_p
    f = (e @ p).toarray()
    rhs = np.asarray(t, dtype=float).ravel() - e @ y_p
    sv = np.linalg.svd(f, compute_uv=False)
    if sv.size < f.shape[1] or sv[-1] <= 1e-10 * max(1.0, sv[0]):
        raise UnderdeterminedBoundaryError(
            "boundary conditions underdetermined: E P lost column rank")
    c, *_ = np.linalg.lstsq(f, rhs, rcond=None)
    return y_p + p @ c
