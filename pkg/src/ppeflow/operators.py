"""Discrete operators over the classified staggered grid.

Velocity values live in a single vector w = [u at C_u u-edges, v at C_u
v-edges] in classification order; pressure unknowns are inner nodes then
ghost nodes. Everything here is assembled once per geometry and reused
every time step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import (DomainClassification, GeometryError, Patch,
                       StaggeredGrid, _affine_vandermonde, _greedy_pick)

__all__ = ["EdgeLayout", "GridOperators", "build_operators"]


@dataclass(frozen=True)
class EdgeLayout:
    """Index bookkeeping for the packed velocity vector."""

    n_u: int
    n_v: int
    inner_u: np.ndarray      # indices into u part, inner edges
    inner_v: np.ndarray
    boundary_u: np.ndarray
    boundary_v: np.ndarray

    @property
    def n_w(self) -> int:
        return self.n_u + self.n_v

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_u) + len(self.boundary_v)

    def boundary_w_indices(self) -> np.ndarray:
        """Positions of the boundary velocities y inside w (u block first)."""
        return np.concatenate([self.boundary_u, self.n_u + self.boundary_v])


def _edge_neighbors_matrix(cls, component):
    """5-point Laplacian rows at inner edges of one component, over w."""
    grid = cls.grid
    h2 = grid.h * grid.h
    if component == "u":
        edges, mask, eid, off = cls.u_edges, cls.u_inner_mask, cls.u_id, 0
    else:
        edges, mask, eid, off = cls.v_edges, cls.v_inner_mask, cls.v_id, len(cls.u_edges)
    inner = np.flatnonzero(mask)
    rows, cols, vals = [], [], []
    for r, k in enumerate(inner):
        i, j = edges[k]
        rows.append(r)
        cols.append(off + k)
        vals.append(-4.0 / h2)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jj = grid.wrap_j(j + dj)
            nb = eid[i + di, jj]
            rows.append(r)
            cols.append(off + nb)
            vals.append(1.0 / h2)
    n_w = len(cls.u_edges) + len(cls.v_edges)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(inner), n_w))


def _pressure_gradient_matrix(cls, component):
    """Centered pressure gradient at inner edges of one component."""
    grid = cls.grid
    h = grid.h
    if component == "u":
        edges, mask = cls.u_edges, cls.u_inner_mask
    else:
        edges, mask = cls.v_edges, cls.v_inner_mask
    inner = np.flatnonzero(mask)
    rows, cols, vals = [], [], []
    for r, k in enumerate(inner):
        i, j = edges[k]
        if component == "u":
            a = cls.node_col[i, j]
            b = cls.node_col[i + 1, j]
        else:
            a = cls.node_col[i, j]
            b = cls.node_col[i, grid.wrap_j(j + 1)]
        rows += [r, r]
        cols += [b, a]
        vals += [1.0 / h, -1.0 / h]
    n = cls.n_pressure
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(inner), n))


def _node_adjacent_edges(cls, i, j):
    """The four (w index, divergence sign) pairs at node (i, j), or None."""
    grid = cls.grid
    n_u = len(cls.u_edges)
    out = []
    for arr, off, ei, ej, sign in ((cls.u_id, 0, i, j, +1.0),
                                   (cls.u_id, 0, i - 1, j, -1.0),
                                   (cls.v_id, n_u, i, j, +1.0),
                                   (cls.v_id, n_u, i, j - 1, -1.0)):
        if ei < 0 or ei >= arr.shape[0]:
            return None
        ej = grid.wrap_j(ej)
        if ej < 0 or ej >= arr.shape[1]:
            return None
        e = arr[ei, ej]
        if e < 0:
            return None
        out.append((off + e, sign))
    return out


def _divergence_matrix(cls, nodes):
    """Centered divergence rows (scaled by 1/h) at the given nodes."""
    h = cls.grid.h
    rows, cols, vals = [], [], []
    for r, (i, j) in enumerate(nodes):
        adj = _node_adjacent_edges(cls, i, j)
        if adj is None:
            raise GeometryError(f"divergence stencil incomplete at node ({i},{j})")
        for c, sgn in adj:
            rows.append(r)
            cols.append(c)
            vals.append(sgn / h)
    n_w = len(cls.u_edges) + len(cls.v_edges)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(nodes), n_w))


def _affine_sampler(grid, cand_x, cand_y, cand_ids, points, n_cols,
                    what="field"):
    """Sparse operator evaluating an affine fit of nearby samples at points.

    For each target point the 6 nearest candidates (greedy, conditioning
    aware) define a least-squares affine fit whose value at the point gives
    one sparse row over the n_cols-long value vector.
    """
    rows, cols, vals = [], [], []
    for r, (px, py) in enumerate(points):
        d = grid.dist(cand_x, cand_y, px, py)
        order = np.argsort(d, kind="stable")
        order = [int(i) for i in order if d[i] <= 4.0 * grid.h]
        if len(order) < 6:
            raise GeometryError(
                f"domain too thin: fewer than 6 {what} samples near ({px:g},{py:g})")
        colsV = _affine_vandermonde(grid, cand_x[order], cand_y[order], px, py).T
        pick_local = _greedy_pick(colsV, [0], 6, list(range(len(order))))
        if pick_local is None:
            raise GeometryError(f"degenerate {what} sampler near ({px:g},{py:g})")
        picked = [order[k] for k in pick_local]
        v = _affine_vandermonde(grid, cand_x[picked], cand_y[picked], px, py)
        w = np.array([1.0, 0.0, 0.0]) @ np.linalg.pinv(v, rcond=1e-10)
        for k, wk in zip(picked, w):
            rows.append(r)
            cols.append(int(cand_ids[k]))
            vals.append(wk)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(points), n_cols))


@dataclass(frozen=True)
class GridOperators:
    """Precomputed sparse operators for one (grid, classification) pair."""

    layout: EdgeLayout
    lap_u: sp.csr_matrix          # (n inner u, n_w) Laplacian
    lap_v: sp.csr_matrix
    grad_p_u: sp.csr_matrix       # (n inner u, N) pressure gradient
    grad_p_v: sp.csr_matrix
    div_inner: sp.csr_matrix      # (N_a, n_w) divergence at inner nodes
    div_at_divnodes: sp.csr_matrix  # (M_d, n_w) full divergence rows
    d_constraint: sp.csr_matrix   # (M_d, M) 0/±1 part on boundary velocities
    s_inner: sp.csr_matrix        # (M_d, n_w) known-edge part (h scaled out)
    u_at_xb: sp.csr_matrix        # (N_e, n_w) patch value extrapolation
    v_at_xb: sp.csr_matrix
    lap_at_xb_u: sp.csr_matrix    # (N_e, n_w) Laplacian extrapolated to x_b
    lap_at_xb_v: sp.csr_matrix
    e_boundary: sp.csr_matrix     # (3 N_e, M) tangential rows, unknown part
    e_inner: sp.csr_matrix        # (3 N_e, n_w) tangential rows, known part
    e_targets: np.ndarray         # (3 N_e,) boundary point index per row
    inner_u_mid: tuple[np.ndarray, np.ndarray]
    inner_v_mid: tuple[np.ndarray, np.ndarray]
    u_mid: tuple[np.ndarray, np.ndarray]
    v_mid: tuple[np.ndarray, np.ndarray]
    xb: np.ndarray                # (N_e, 2)
    normals: np.ndarray           # (N_e, 2)
    tangents: np.ndarray          # (N_e, 2)
    adv_spread_u: sp.csr_matrix | None = None  # transverse average for advection
    adv_spread_v: sp.csr_matrix | None = None
    dx_u: sp.csr_matrix | None = None
    dy_u: sp.csr_matrix | None = None
    dx_v: sp.csr_matrix | None = None
    dy_v: sp.csr_matrix | None = None
    extend_to_bedges: sp.csr_matrix | None = None


def _centered_first_derivatives(cls, component):
    """Centered d/dx, d/dy at inner edges of one component, over w."""
    grid = cls.grid
    two_h = 2.0 * grid.h
    if component == "u":
        edges, mask, eid, off = cls.u_edges, cls.u_inner_mask, cls.u_id, 0
    else:
        edges, mask, eid, off = cls.v_edges, cls.v_inner_mask, cls.v_id, len(cls.u_edges)
    inner = np.flatnonzero(mask)
    n_w = len(cls.u_edges) + len(cls.v_edges)

    def build(di, dj):
        rows, cols, vals = [], [], []
        for r, k in enumerate(inner):
            i, j = edges[k]
            p = eid[i + di, grid.wrap_j(j + dj)]
            m = eid[i - di, grid.wrap_j(j - dj)]
            rows += [r, r]
            cols += [off + p, off + m]
            vals += [1.0 / two_h, -1.0 / two_h]
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(inner), n_w))

    return build(1, 0), build(0, 1)


def _transverse_average(cls, patches, component):
    """Average of the other component at inner edges of this component.

    Uses the four surrounding edges where available; near-boundary gaps use
    the nearest other-component patch evaluated at the edge midpoint.
    """
    grid = cls.grid
    n_u = len(cls.u_edges)
    n_w = n_u + len(cls.v_edges)
    if component == "u":
        edges, mask = cls.u_edges, cls.u_inner_mask
        oid, ooff = cls.v_id, n_u
        other_patches = [p for p in patches if p.component == "v"]
        def corners(i, j):
            return ((i, j), (i + 1, j), (i, j - 1), (i + 1, j - 1))
    else:
        edges, mask = cls.v_edges, cls.v_inner_mask
        oid, ooff = cls.u_id, 0
        other_patches = [p for p in patches if p.component == "u"]
        def corners(i, j):
            return ((i, j), (i - 1, j), (i, j + 1), (i - 1, j + 1))
    inner = np.flatnonzero(mask)
    rows, cols, vals = [], [], []
    centers = np.array([p.center for p in other_patches])
    for r, k in enumerate(inner):
        i, j = edges[k]
        ids = []
        for ci, cj in corners(i, j):
            if 0 <= ci < oid.shape[0]:
                cj = grid.wrap_j(cj)
                if 0 <= cj < oid.shape[1]:
                    e = oid[ci, cj]
                    if e >= 0:
                        ids.append(e)
                        continue
            ids = None
            break
        if ids is not None:
            for e in ids:
                rows.append(r)
                cols.append(ooff + e)
                vals.append(0.25)
            continue
        # Patch-extrapolated transverse value near the boundary.
        if component == "u":
            mx, my = grid.u_mid(i, j)
        else:
            mx, my = grid.v_mid(i, j)
        d = grid.dist(centers[:, 0], centers[:, 1], mx, my)
        p = other_patches[int(np.argmin(d))]
        w = p.weights_at(grid, mx, my)
        for e, wk in zip(p.edge_indices, w):
            rows.append(r)
            cols.append(ooff + int(e))
            vals.append(float(wk))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(inner), n_w))


def build_operators(grid: StaggeredGrid, cls: DomainClassification,
                    patches: list[Patch], advect: bool = False) -> GridOperators:
    n_u, n_v = len(cls.u_edges), len(cls.v_edges)
    layout = EdgeLayout(
        n_u=n_u, n_v=n_v,
        inner_u=np.flatnonzero(cls.u_inner_mask),
        inner_v=np.flatnonzero(cls.v_inner_mask),
        boundary_u=cls.boundary_u,
        boundary_v=cls.boundary_v,
    )
    lap_u = _edge_neighbors_matrix(cls, "u")
    lap_v = _edge_neighbors_matrix(cls, "v")
    grad_p_u = _pressure_gradient_matrix(cls, "u")
    grad_p_v = _pressure_gradient_matrix(cls, "v")
    div_inner = _divergence_matrix(cls, cls.inner_pressure)
    div_nodes = _divergence_matrix(cls, cls.divergence_nodes)

    # Split divergence rows at the constraint nodes into the 0/±1 matrix on
    # boundary velocities (h scaled out) and the known inner part.
    w_boundary = layout.boundary_w_indices()
    bpos = -np.ones(layout.n_w, dtype=np.int64)
    bpos[w_boundary] = np.arange(len(w_boundary))
    coo = (div_nodes * grid.h).tocoo()  # back to ±1 entries
    d_rows, d_cols, d_vals = [], [], []
    s_rows, s_cols, s_vals = [], [], []
    for r, c, v in zip(coo.row, coo.col, coo.data):
        v = round(float(v))
        if bpos[c] >= 0:
            d_rows.append(r)
            d_cols.append(bpos[c])
            d_vals.append(float(v))
        else:
            s_rows.append(r)
            s_cols.append(c)
            s_vals.append(float(v))
    m_d = div_nodes.shape[0]
    m = len(w_boundary)
    d_constraint = sp.csr_matrix((d_vals, (d_rows, d_cols)), shape=(m_d, m))
    s_inner = sp.csr_matrix((s_vals, (s_rows, s_cols)), shape=(m_d, layout.n_w))

    # Patch extrapolation of velocity values to the boundary points.
    u_patches = {p.owner: p for p in patches if p.component == "u"}
    v_patches = {p.owner: p for p in patches if p.component == "v"}
    n_e = cls.n_boundary_points
    if set(u_patches) != set(range(n_e)) or set(v_patches) != set(range(n_e)):
        raise GeometryError("need one u-patch and one v-patch per boundary point")

    def value_rows(pdict, off):
        rows, cols, vals = [], [], []
        for j in range(n_e):
            p = pdict[j]
            w = p.weights_at(grid, *cls.boundary_points[j])
            for e, wk in zip(p.edge_indices, w):
                rows.append(j)
                cols.append(off + int(e))
                vals.append(float(wk))
        return sp.csr_matrix((vals, (rows, cols)), shape=(n_e, layout.n_w))

    u_at_xb = value_rows(u_patches, 0)
    v_at_xb = value_rows(v_patches, n_u)

    # Laplacian extrapolated to boundary points from inner-edge samples.
    iux, iuy = cls.u_mid_xy()
    ivx, ivy = cls.v_mid_xy()
    pts = [(float(x), float(y)) for x, y in cls.boundary_points]
    lap_sample_u = _affine_sampler(grid, iux[layout.inner_u], iuy[layout.inner_u],
                                   np.arange(len(layout.inner_u)), pts,
                                   lap_u.shape[0], what="u-Laplacian")
    lap_sample_v = _affine_sampler(grid, ivx[layout.inner_v], ivy[layout.inner_v],
                                   np.arange(len(layout.inner_v)), pts,
                                   lap_v.shape[0], what="v-Laplacian")
    lap_at_xb_u = (lap_sample_u @ lap_u).tocsr()
    lap_at_xb_v = (lap_sample_v @ lap_v).tocsr()

    # Tangential equations: 3 per boundary point, linking neighbor patches.
    normals = cls.boundary_normals
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    e_rows, e_cols, e_vals = [], [], []
    ei_rows, ei_cols, ei_vals = [], [], []
    e_targets = np.zeros(3 * n_e, dtype=np.int64)
    for j in range(n_e):
        pu, pv = u_patches[j], v_patches[j]
        for slot in range(3):
            tgt = int(pu.target_boundary_points[slot])
            row = 3 * j + slot
            e_targets[row] = tgt
            tx, ty = tangents[tgt]
            for p, off, tc in ((pu, 0, tx), (pv, n_u, ty)):
                if tc == 0.0:
                    continue
                for e, wk in zip(p.edge_indices, p.extrapolation_weights[slot]):
                    c = off + int(e)
                    if bpos[c] >= 0:
                        e_rows.append(row)
                        e_cols.append(bpos[c])
                        e_vals.append(tc * float(wk))
                    else:
                        ei_rows.append(row)
                        ei_cols.append(c)
                        ei_vals.append(tc * float(wk))
    e_boundary = sp.csr_matrix((e_vals, (e_rows, e_cols)), shape=(3 * n_e, m))
    e_inner = sp.csr_matrix((ei_vals, (ei_rows, ei_cols)), shape=(3 * n_e, layout.n_w))

    kwargs = {}
    if advect:
        dx_u, dy_u = _centered_first_derivatives(cls, "u")
        dx_v, dy_v = _centered_first_derivatives(cls, "v")
        kwargs.update(
            adv_spread_u=_transverse_average(cls, patches, "u"),
            adv_spread_v=_transverse_average(cls, patches, "v"),
            dx_u=dx_u, dy_u=dy_u, dx_v=dx_v, dy_v=dy_v,
            extend_to_bedges=_extend_to_boundary_edges(grid, cls, layout),
        )

    return GridOperators(
        layout=layout,
        lap_u=lap_u, lap_v=lap_v,
        grad_p_u=grad_p_u, grad_p_v=grad_p_v,
        div_inner=div_inner,
        div_at_divnodes=div_nodes,
        d_constraint=d_constraint,
        s_inner=s_inner,
        u_at_xb=u_at_xb, v_at_xb=v_at_xb,
        lap_at_xb_u=lap_at_xb_u, lap_at_xb_v=lap_at_xb_v,
        e_boundary=e_boundary, e_inner=e_inner, e_targets=e_targets,
        inner_u_mid=(iux[layout.inner_u], iuy[layout.inner_u]),
        inner_v_mid=(ivx[layout.inner_v], ivy[layout.inner_v]),
        u_mid=(iux, iuy), v_mid=(ivx, ivy),
        xb=cls.boundary_points.copy(),
        normals=normals.copy(),
        tangents=tangents,
        **kwargs,
    )


def _extend_to_boundary_edges(grid, cls, layout):
    """Affine extrapolation of an inner-edge field onto boundary edges.

    Maps a w-shaped vector (values meaningful at inner edges) to a w-shaped
    vector with rows only at boundary edges. Used for the advective term.
    """
    iux, iuy = cls.u_mid_xy()
    ivx, ivy = cls.v_mid_xy()
    blocks = []
    for comp, off, (ex, ey) in (("u", 0, (iux, iuy)), ("v", layout.n_u, (ivx, ivy))):
        inner = layout.inner_u if comp == "u" else layout.inner_v
        bnd = layout.boundary_u if comp == "u" else layout.boundary_v
        pts = [(float(ex[k]), float(ey[k])) for k in bnd]
        samp = _affine_sampler(grid, ex[inner], ey[inner], off + inner, pts,
                               layout.n_w, what=f"{comp}-advection")
        rows = off + bnd
        lift = sp.csr_matrix(
            (np.ones(len(rows)), (rows, np.arange(len(rows)))),
            shape=(layout.n_w, len(rows)))
        blocks.append(lift @ samp)
    return (blocks[0] + blocks[1]).tocsr()
