"""Staggered grid, implicit domain shapes, and classification of pressure
nodes, velocity edges, boundary points and extrapolation patches.

The layout is a uniform Cartesian staggered grid: pressure at the grid
nodes, horizontal velocity u at the midpoints of horizontal edges, and
vertical velocity v at the midpoints of vertical edges. Domains are given
implicitly through a signed distance function and may be immersed in the
grid (non-conforming boundaries). The y direction can be periodic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "StaggeredGrid",
    "Rectangle",
    "Disk",
    "RectangleMinusDisk",
    "DomainClassification",
    "Patch",
    "build_grid",
    "classify",
    "build_patches",
]

# Relative tolerance (in units of h) for deciding whether a node sits on the
# boundary; keeps conforming walls robust against roundoff in n*h.
_ON_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for inconsistent or under-resolved grid/domain combinations."""


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaggeredGrid:
    """Uniform staggered grid with square cells (dx = dy = h).

    Pressure node (i, j) sits at ``origin + (i*h, j*h)``. The u component
    lives on horizontal edges (node (i,j) to (i+1,j)), midpoint offset by
    (h/2, 0); v lives on vertical edges (node (i,j) to (i,j+1)), midpoint
    offset by (0, h/2). With ``periodic_y`` the j index wraps modulo ny and
    no node row exists at j = ny.
    """

    nx: int
    ny: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)
    periodic_y: bool = False

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise GeometryError("grid needs nx, ny >= 4")
        if self.h <= 0:
            raise GeometryError("grid spacing must be positive")

    @property
    def node_rows(self) -> int:
        return self.ny if self.periodic_y else self.ny + 1

    @property
    def node_cols(self) -> int:
        return self.nx + 1

    @property
    def y_extent(self) -> float:
        return self.ny * self.h

    def wrap_j(self, j):
        """Wrap a node-row index into range (identity when not periodic)."""
        if self.periodic_y:
            return j % self.ny
        return j

    def node_xy(self, i, j):
        return (self.origin[0] + np.asarray(i) * self.h,
                self.origin[1] + np.asarray(j) * self.h)

    def u_mid(self, i, j):
        return (self.origin[0] + (np.asarray(i) + 0.5) * self.h,
                self.origin[1] + np.asarray(j) * self.h)

    def v_mid(self, i, j):
        return (self.origin[0] + np.asarray(i) * self.h,
                self.origin[1] + (np.asarray(j) + 0.5) * self.h)

    def delta(self, dx, dy):
        """Displacement with minimum-image convention in y when periodic."""
        dx = np.asarray(dx, dtype=float)
        dy = np.asarray(dy, dtype=float)
        if self.periodic_y:
            span = self.y_extent
            dy = dy - span * np.round(dy / span)
        return dx, dy

    def dist(self, ax, ay, bx, by):
        dx, dy = self.delta(np.asarray(ax) - bx, np.asarray(ay) - by)
        return np.hypot(dx, dy)


# ---------------------------------------------------------------------------
# Implicit domain shapes
# ---------------------------------------------------------------------------

class DomainShape:
    """Implicit domain: signed distance negative inside, with an analytic
    closest-point projection onto the boundary.

    Subclasses provide vectorized ``signed_distance`` and
    ``closest_boundary_point``; the latter returns the foot point and the
    outward unit normal there. ``boundary_parameter`` maps boundary points
    to (component id, arc-length parameter) for quadrature ordering.
    """

    periodic_y = False
    y_period = None

    def inside(self, x, y):
        return self.signed_distance(x, y) < 0

    def signed_distance(self, x, y):
        raise NotImplementedError

    def closest_boundary_point(self, x, y):
        raise NotImplementedError

    def boundary_parameter(self, x, y):
        raise NotImplementedError

    def bounding_box(self):
        raise NotImplementedError

    def feature_sizes(self):
        """(fluid thickness, smallest boundary curvature radius)."""
        return (math.inf, math.inf)


@dataclass(frozen=True)
class Rectangle(DomainShape):
    """Axis-aligned rectangular domain, fluid inside."""

    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def signed_distance(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.maximum.reduce([self.x0 - x, x - self.x1,
                                  self.y0 - y, y - self.y1])

    def closest_boundary_point(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        # Distance deficit to each wall; the largest (least negative inside)
        # picks the nearest wall. Ties resolve by smallest normal angle
        # from +x, i.e. order +x wall, +y, -x, -y.
        walls = np.stack([x - self.x1, y - self.y1, self.x0 - x, self.y0 - y])
        pick = np.argmax(walls, axis=0)
        bx = np.clip(x, self.x0, self.x1)
        by = np.clip(y, self.y0, self.y1)
        nx_ = np.zeros_like(bx)
        ny_ = np.zeros_like(by)
        bx = np.where(pick == 0, self.x1, bx)
        nx_ = np.where(pick == 0, 1.0, nx_)
        by = np.where(pick == 1, self.y1, by)
        ny_ = np.where(pick == 1, 1.0, ny_)
        bx = np.where(pick == 2, self.x0, bx)
        nx_ = np.where(pick == 2, -1.0, nx_)
        by = np.where(pick == 3, self.y0, by)
        ny_ = np.where(pick == 3, -1.0, ny_)
        return bx, by, nx_, ny_

    def boundary_parameter(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        w = self.x1 - self.x0
        hgt = self.y1 - self.y0
        per = 2 * (w + hgt)
        # Walk the perimeter counterclockwise from (x0, y0).
        on_bottom = np.isclose(y, self.y0)
        on_right = np.isclose(x, self.x1)
        on_top = np.isclose(y, self.y1)
        t = np.full(np.shape(x), np.nan, dtype=float)
        t = np.where(on_top, 2 * w + hgt - (x - self.x0) + w, t)
        t = np.where(~on_top & ~on_bottom & ~on_right, 2 * w + 2 * hgt - (y - self.y0), t)
        t = np.where(on_right, w + (y - self.y0), t)
        t = np.where(on_bottom, x - self.x0, t)
        comp = np.zeros(np.shape(x), dtype=int)
        return comp, t % per, np.full(np.shape(x), per)

    def bounding_box(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def feature_sizes(self):
        return (min(self.x1 - self.x0, self.y1 - self.y0), math.inf)


@dataclass(frozen=True)
class Disk(DomainShape):
    """Circular domain, fluid inside."""

    cx: float = 0.0
    cy: float = 0.0
    radius: float = 1.0

    def signed_distance(self, x, y):
        return np.hypot(np.asarray(x, dtype=float) - self.cx,
                        np.asarray(y, dtype=float) - self.cy) - self.radius

    def closest_boundary_point(self, x, y):
        dx = np.asarray(x, dtype=float) - self.cx
        dy = np.asarray(y, dtype=float) - self.cy
        r = np.hypot(dx, dy)
        # Center projects ambiguously; take angle 0.
        nx_ = np.where(r > 0, dx / np.where(r > 0, r, 1.0), 1.0)
        ny_ = np.where(r > 0, dy / np.where(r > 0, r, 1.0), 0.0)
        return self.cx + self.radius * nx_, self.cy + self.radius * ny_, nx_, ny_

    def boundary_parameter(self, x, y):
        ang = np.arctan2(np.asarray(y, dtype=float) - self.cy,
                         np.asarray(x, dtype=float) - self.cx)
        per = 2 * math.pi * self.radius
        comp = np.zeros(np.shape(x), dtype=int)
        return comp, (ang % (2 * math.pi)) * self.radius, np.full(np.shape(x), per)

    def bounding_box(self):
        return (self.cx - self.radius, self.cy - self.radius,
                self.cx + self.radius, self.cy + self.radius)

    def feature_sizes(self):
        return (self.radius, self.radius)


@dataclass(frozen=True)
class RectangleMinusDisk(DomainShape):
    """Rectangle with a circular hole removed; optionally periodic in y.

    With ``periodic_y`` the y walls vanish (the domain is a cylinder of
    period y1-y0) and the hole repeats with that period.
    """

    x0: float = 0.0
    y0: float = 0.0
    x1: float = 2.0
    y1: float = 2.0
    cx: float = 0.75
    cy: float = 1.0
    radius: float = 0.25
    periodic_y: bool = False

    @property
    def y_period(self):
        return self.y1 - self.y0 if self.periodic_y else None

    def _hole_delta(self, x, y):
        dx = np.asarray(x, dtype=float) - self.cx
        dy = np.asarray(y, dtype=float) - self.cy
        if self.periodic_y:
            span = self.y1 - self.y0
            dy = dy - span * np.round(dy / span)
        return dx, dy

    def _rect_sd(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.periodic_y:
            return np.maximum(self.x0 - x, x - self.x1)
        return np.maximum.reduce([self.x0 - x, x - self.x1,
                                  self.y0 - y, y - self.y1])

    def signed_distance(self, x, y):
        dx, dy = self._hole_delta(x, y)
        hole = self.radius - np.hypot(dx, dy)  # positive inside the hole
        return np.maximum(self._rect_sd(x, y), hole)

    def closest_boundary_point(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx, dy = self._hole_delta(x, y)
        r = np.hypot(dx, dy)
        hole_dist = np.abs(r - self.radius)
        if self.periodic_y:
            rect_dist = np.minimum(np.abs(x - self.x0), np.abs(x - self.x1))
            rbx = np.where(np.abs(x - self.x0) <= np.abs(x - self.x1), self.x0, self.x1)
            rnx = np.where(np.abs(x - self.x0) <= np.abs(x - self.x1), -1.0, 1.0)
            rby = y
            rny = np.zeros_like(y)
        else:
            rect = Rectangle(self.x0, self.y0, self.x1, self.y1)
            rbx, rby, rnx, rny = rect.closest_boundary_point(x, y)
            rect_dist = np.abs(rect.signed_distance(x, y))
        safe_r = np.where(r > 0, r, 1.0)
        ux = np.where(r > 0, dx / safe_r, 1.0)
        uy = np.where(r > 0, dy / safe_r, 0.0)
        hbx = x - dx + self.radius * ux
        hby = y - dy + self.radius * uy
        # Outward (from the fluid) normal on the hole points into the hole.
        hnx, hny = -ux, -uy
        use_hole = hole_dist < rect_dist
        bx = np.where(use_hole, hbx, rbx)
        by = np.where(use_hole, hby, rby)
        nx_ = np.where(use_hole, hnx, rnx)
        ny_ = np.where(use_hole, hny, rny)
        return bx, by, nx_, ny_

    def boundary_parameter(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx, dy = self._hole_delta(x, y)
        on_hole = np.abs(np.hypot(dx, dy) - self.radius) < np.abs(self._rect_sd(x, y))
        per_hole = 2 * math.pi * self.radius
        t_hole = (np.arctan2(dy, dx) % (2 * math.pi)) * self.radius
        if self.periodic_y:
            span = self.y1 - self.y0
            on_left = np.abs(x - self.x0) <= np.abs(x - self.x1)
            comp = np.where(on_hole, 2, np.where(on_left, 0, 1))
            t = np.where(on_hole, t_hole, (y - self.y0) % span)
            length = np.where(on_hole, per_hole, span)
            return comp, t, length
        rect = Rectangle(self.x0, self.y0, self.x1, self.y1)
        rcomp, rt, rlen = rect.boundary_parameter(x, y)
        comp = np.where(on_hole, 1, rcomp)
        t = np.where(on_hole, t_hole, rt)
        length = np.where(on_hole, per_hole, rlen)
        return comp, t, length

    def bounding_box(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def feature_sizes(self):
        if self.periodic_y:
            gap = min(self.cx - self.radius - self.x0,
                      self.x1 - self.cx - self.radius)
        else:
            gap = min(self.cx - self.radius - self.x0,
                      self.x1 - self.cx - self.radius,
                      self.cy - self.radius - self.y0,
                      self.y1 - self.cy - self.radius)
        return (gap, self.radius)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    """Six same-component velocity edges used to extrapolate that component
    to nearby boundary points with second-order (affine) accuracy."""

    component: str                    # "u" or "v"
    owner: int                        # boundary point the patch belongs to
    edge_indices: np.ndarray          # (6,) indices into the component edge list
    target_boundary_points: np.ndarray  # (3,) indices into boundary_points
    extrapolation_weights: np.ndarray   # (3, 6)
    # Affine fit data: pinv of the scaled [1, xi, eta] Vandermonde, plus the
    # expansion point, so weights at arbitrary nearby targets can be formed.
    fit_pinv: np.ndarray = field(repr=False, default=None)
    center: tuple[float, float] = (0.0, 0.0)

    def weights_at(self, grid: StaggeredGrid, x, y):
        """Extrapolation weights for this patch evaluated at (x, y)."""
        dx, dy = grid.delta(x - self.center[0], y - self.center[1])
        phi = np.array([1.0, dx / grid.h, dy / grid.h])
        return phi @ self.fit_pinv


@dataclass(frozen=True)
class DomainClassification:
    """Index sets produced by :func:`classify`.

    Pressure nodes are split into inner (strictly inside) and ghost
    (outside/on the boundary, completing some inner 5-point stencil);
    velocity edges into inner (full Laplacian stencil available) and
    boundary. One boundary point, with outward normal, is attached to each
    ghost node. Column/value orderings are fixed and deterministic: pressure
    unknowns are inner nodes then ghost nodes; boundary velocities are the
    boundary u-edges then boundary v-edges, each in (i, j) lex order.
    """

    grid: StaggeredGrid
    inner_pressure: np.ndarray        # (N_a, 2) node (i, j)
    ghost_pressure: np.ndarray        # (N_b, 2)
    boundary_points: np.ndarray       # (N_e, 2) coordinates
    boundary_normals: np.ndarray      # (N_e, 2) unit outward normals
    u_edges: np.ndarray               # (n_u, 2) C_u horizontal edges (i, j)
    v_edges: np.ndarray               # (n_v, 2) C_u vertical edges (i, j)
    u_inner_mask: np.ndarray          # (n_u,) bool
    v_inner_mask: np.ndarray          # (n_v,) bool
    divergence_nodes: np.ndarray      # (M_d, 2)
    node_col: np.ndarray              # (nx+1, rows) -> pressure column or -1
    u_id: np.ndarray                  # (nx, rows) -> u edge index or -1
    v_id: np.ndarray                  # (nx+1, ny) -> v edge index or -1

    @property
    def n_inner(self) -> int:
        return len(self.inner_pressure)

    @property
    def n_ghost(self) -> int:
        return len(self.ghost_pressure)

    @property
    def n_pressure(self) -> int:
        return self.n_inner + self.n_ghost

    @property
    def n_boundary_points(self) -> int:
        return len(self.boundary_points)

    @property
    def boundary_u(self) -> np.ndarray:
        """Indices (into u_edges) of boundary u-edges, in order."""
        return np.flatnonzero(~self.u_inner_mask)

    @property
    def boundary_v(self) -> np.ndarray:
        return np.flatnonzero(~self.v_inner_mask)

    @property
    def n_boundary_edges(self) -> int:
        return len(self.boundary_u) + len(self.boundary_v)

    def u_mid_xy(self):
        return self.grid.u_mid(self.u_edges[:, 0], self.u_edges[:, 1])

    def v_mid_xy(self):
        return self.grid.v_mid(self.v_edges[:, 0], self.v_edges[:, 1])

    def node_xy_of(self, nodes):
        return self.grid.node_xy(nodes[:, 0], nodes[:, 1])


def build_grid(domain: DomainShape, n: int, periodic_y: bool = False) -> StaggeredGrid:
    """Grid over the domain's bounding box with n cells across x.

    The y extent must be an integer multiple of h = width/n. With
    ``periodic_y`` the domain itself must be y-periodic with the box height
    as period.
    """
    if n < 4:
        raise GeometryError("need at least 4 cells per axis")
    x0, y0, x1, y1 = domain.bounding_box()
    h = (x1 - x0) / n
    ny_f = (y1 - y0) / h
    ny = round(ny_f)
    if abs(ny_f - ny) > 1e-9 or ny < 4:
        raise GeometryError("domain bounding box is not an integer number of cells high")
    if periodic_y and not domain.periodic_y:
        raise GeometryError("periodic grid over a non-periodic domain")
    if domain.periodic_y and not periodic_y:
        raise GeometryError("y-periodic domain requires a periodic grid")
    return StaggeredGrid(nx=n, ny=ny, h=h, origin=(x0, y0), periodic_y=periodic_y)


def _node_grids(grid: StaggeredGrid):
    ii, jj = np.meshgrid(np.arange(grid.node_cols), np.arange(grid.node_rows),
                         indexing="ij")
    return ii, jj


def classify(grid: StaggeredGrid, domain: DomainShape) -> DomainClassification:
    """Partition pressure nodes and velocity edges against the domain.

    Raises GeometryError when the domain is under-resolved: a needed stencil
    node falls outside the grid, or a boundary feature is too small relative
    to h (fluid thickness below 3h, or boundary curvature radius below 1.5h).
    """
    h = grid.h
    thickness, curvature = domain.feature_sizes()
    if thickness < 3.0 * h or curvature < 1.5 * h:
        raise GeometryError(
            f"domain too thin for resolution h={h:g} "
            f"(feature sizes {thickness:g}, {curvature:g})")

    tol = _ON_TOL * h
    ii, jj = _node_grids(grid)
    nx_, ny_ = grid.node_xy(ii, jj)
    sd = domain.signed_distance(nx_, ny_)
    inner = sd < -tol            # strictly inside
    on_bnd = np.abs(sd) <= tol   # on the boundary within roundoff

    # Ghosts: non-inner nodes completing some inner node's 5-point stencil.
    ghost = np.zeros_like(inner)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        src = inner.copy()
        if di:
            shifted = np.zeros_like(inner)
            if di == 1:
                shifted[1:, :] = src[:-1, :]
                if src[-1, :].any():
                    raise GeometryError("inner node stencil leaves the grid in +x")
            else:
                shifted[:-1, :] = src[1:, :]
                if src[0, :].any():
                    raise GeometryError("inner node stencil leaves the grid in -x")
        else:
            if grid.periodic_y:
                shifted = np.roll(src, dj, axis=1)
            else:
                shifted = np.zeros_like(inner)
                if dj == 1:
                    shifted[:, 1:] = src[:, :-1]
                    if src[:, -1].any():
                        raise GeometryError("inner node stencil leaves the grid in +y")
                else:
                    shifted[:, :-1] = src[:, 1:]
                    if src[:, 0].any():
                        raise GeometryError("inner node stencil leaves the grid in -y")
        ghost |= shifted & ~inner

    inner_nodes = np.argwhere(inner)
    ghost_nodes = np.argwhere(ghost)
    n_a, n_b = len(inner_nodes), len(ghost_nodes)
    if n_a == 0:
        raise GeometryError("domain contains no interior pressure nodes")

    node_col = np.full(inner.shape, -1, dtype=np.int64)
    node_col[inner_nodes[:, 0], inner_nodes[:, 1]] = np.arange(n_a)
    node_col[ghost_nodes[:, 0], ghost_nodes[:, 1]] = n_a + np.arange(n_b)

    gx, gy = grid.node_xy(ghost_nodes[:, 0], ghost_nodes[:, 1])
    bx, by, bnx, bny = domain.closest_boundary_point(gx, gy)
    boundary_points = np.column_stack([np.atleast_1d(bx), np.atleast_1d(by)])
    boundary_normals = np.column_stack([np.atleast_1d(bnx), np.atleast_1d(bny)])

    # Extended pressure set: C_p plus nodes edge-connected to an on-boundary
    # ghost. Velocity edges need both endpoints extended and one endpoint
    # inside-or-on the boundary.
    ghost_on = ghost & on_bnd
    in_cp = inner | ghost
    ep = in_cp.copy()
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        if di:
            shifted = np.zeros_like(ghost_on)
            if di == 1:
                shifted[1:, :] = ghost_on[:-1, :]
            else:
                shifted[:-1, :] = ghost_on[1:, :]
        else:
            if grid.periodic_y:
                shifted = np.roll(ghost_on, dj, axis=1)
            else:
                shifted = np.zeros_like(ghost_on)
                if dj == 1:
                    shifted[:, 1:] = ghost_on[:, :-1]
                else:
                    shifted[:, :-1] = ghost_on[:, 1:]
        ep |= shifted
    closed = inner | on_bnd  # inside or on the boundary

    rows = grid.node_rows

    # u edges: (i, j) joins nodes (i, j)-(i+1, j).
    u_in_cu = ep[:-1, :] & ep[1:, :] & (closed[:-1, :] | closed[1:, :])
    # v edges: (i, j) joins nodes (i, j)-(i, j+1) (wrapping when periodic).
    if grid.periodic_y:
        ep_up = np.roll(ep, -1, axis=1)
        closed_up = np.roll(closed, -1, axis=1)
        v_in_cu = ep & ep_up & (closed | closed_up)
    else:
        v_in_cu = ep[:, :-1] & ep[:, 1:] & (closed[:, :-1] | closed[:, 1:])

    def laplacian_complete(mask, periodic):
        """Edges whose four same-component neighbors are all present."""
        ok = mask.copy()
        full = np.zeros_like(mask)
        full[1:, :] = mask[:-1, :]
        ok &= full
        full = np.zeros_like(mask)
        full[:-1, :] = mask[1:, :]
        ok &= full
        if periodic:
            ok &= np.roll(mask, 1, axis=1)
            ok &= np.roll(mask, -1, axis=1)
        else:
            full = np.zeros_like(mask)
            full[:, 1:] = mask[:, :-1]
            ok &= full
            full = np.zeros_like(mask)
            full[:, :-1] = mask[:, 1:]
            ok &= full
        return ok

    u_full = laplacian_complete(u_in_cu, grid.periodic_y)
    v_full = laplacian_complete(v_in_cu, grid.periodic_y)

    u_edges = np.argwhere(u_in_cu)
    v_edges = np.argwhere(v_in_cu)
    u_inner_mask = u_full[u_edges[:, 0], u_edges[:, 1]]
    v_inner_mask = v_full[v_edges[:, 0], v_edges[:, 1]]

    u_id = np.full(u_in_cu.shape, -1, dtype=np.int64)
    u_id[u_edges[:, 0], u_edges[:, 1]] = np.arange(len(u_edges))
    v_id = np.full(v_in_cu.shape, -1, dtype=np.int64)
    v_id[v_edges[:, 0], v_edges[:, 1]] = np.arange(len(v_edges))

    # Divergence nodes: C_p nodes whose four adjacent edges all exist and at
    # least one of them is a boundary velocity.
    def edge_at(arr, i, j, wrap):
        j = grid.wrap_j(j) if wrap else j
        if np.any(i < 0) or np.any(i >= arr.shape[0]):
            return None
        if not grid.periodic_y and (np.any(j < 0) or np.any(j >= arr.shape[1])):
            return None
        return arr[i, j]

    div_nodes = []
    cp_nodes = np.concatenate([inner_nodes, ghost_nodes]) if n_b else inner_nodes
    for i, j in cp_nodes:
        eids = []
        for arr, ei, ej in ((u_id, i - 1, j), (u_id, i, j),
                            (v_id, i, j - 1), (v_id, i, j)):
            if ei < 0 or ei >= arr.shape[0]:
                eids = None
                break
            ej = grid.wrap_j(ej)
            if ej < 0 or ej >= arr.shape[1]:
                eids = None
                break
            e = arr[ei, ej]
            if e < 0:
                eids = None
                break
            eids.append((arr is u_id, e))
        if eids is None:
            continue
        has_boundary = any(
            (not u_inner_mask[e]) if is_u else (not v_inner_mask[e])
            for is_u, e in eids)
        if has_boundary:
            div_nodes.append((i, j))
    divergence_nodes = np.array(sorted(div_nodes), dtype=np.int64).reshape(-1, 2)

    cls = DomainClassification(
        grid=grid,
        inner_pressure=inner_nodes,
        ghost_pressure=ghost_nodes,
        boundary_points=boundary_points,
        boundary_normals=boundary_normals,
        u_edges=u_edges,
        v_edges=v_edges,
        u_inner_mask=u_inner_mask,
        v_inner_mask=v_inner_mask,
        divergence_nodes=divergence_nodes,
        node_col=node_col,
        u_id=u_id,
        v_id=v_id,
    )
    _check_classification(cls, domain)
    return cls


def _check_classification(cls: DomainClassification, domain: DomainShape):
    grid = cls.grid
    h = grid.h
    if cls.n_boundary_points != cls.n_ghost:
        raise GeometryError("one boundary point per ghost node expected")
    if cls.n_boundary_points < 3:
        raise GeometryError("domain too coarse: fewer than 3 boundary points")
    nrm = np.hypot(cls.boundary_normals[:, 0], cls.boundary_normals[:, 1])
    if np.any(np.abs(nrm - 1.0) > 1e-12):
        raise GeometryError("boundary normals are not unit length")
    sd = domain.signed_distance(cls.boundary_points[:, 0], cls.boundary_points[:, 1])
    if np.any(np.abs(sd) > 1e-10 * h + 1e-13):
        raise GeometryError("closest boundary points do not lie on the zero level set")
    if len(cls.divergence_nodes):
        dx_, dy_ = cls.node_xy_of(cls.divergence_nodes)
        dist = np.abs(domain.signed_distance(dx_, dy_))
        if np.any(dist > math.sqrt(2.0) * h * (1 + 1e-9)):
            raise GeometryError("divergence node farther than sqrt(2) h from the boundary")
    # Inner velocity edges must have both endpoint pressures available for
    # the pressure gradient.
    for edges, mask, horizontal in ((cls.u_edges, cls.u_inner_mask, True),
                                    (cls.v_edges, cls.v_inner_mask, False)):
        if not len(edges):
            continue
        inner_e = edges[mask]
        if not len(inner_e):
            raise GeometryError("no inner velocity edges: domain under-resolved")
        i, j = inner_e[:, 0], inner_e[:, 1]
        if horizontal:
            a = cls.node_col[i, j]
            b = cls.node_col[i + 1, j]
        else:
            a = cls.node_col[i, j]
            b = cls.node_col[i, grid.wrap_j(j + 1)]
        if np.any(a < 0) or np.any(b < 0):
            raise GeometryError("inner velocity edge lacks endpoint pressure nodes")


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def _affine_vandermonde(grid, xs, ys, cx, cy):
    dx, dy = grid.delta(xs - cx, ys - cy)
    return np.column_stack([np.ones_like(dx), dx / grid.h, dy / grid.h])


def _greedy_pick(cand_cols, mandatory, k, prefer_order, min_resid=1e-6):
    """Pick k column indices spanning a well-conditioned subspace.

    cand_cols is (dim, n) with one basis-sample column per candidate.
    Mandatory candidates are taken first; remaining slots are filled in
    prefer_order, skipping candidates whose orthogonal residual is below a
    fraction of the best available (keeps the fit conditioned while staying
    local). Falls back to the best-conditioned candidate when no near
    candidate qualifies.
    """
    dim, n = cand_cols.shape
    chosen: list[int] = []
    q = np.zeros((dim, 0))

    def residual(idx):
        c = cand_cols[:, idx].astype(float)
        if q.shape[1]:
            c = c - q @ (q.T @ c)
        return c, np.linalg.norm(c)

    def push(idx):
        nonlocal q
        c, nrm = residual(idx)
        chosen.append(idx)
        if nrm > 1e-13:
            q = np.column_stack([q, c / nrm])

    for idx in mandatory:
        push(idx)
    while len(chosen) < k:
        rest = [i for i in prefer_order if i not in chosen]
        if not rest:
            return None
        if q.shape[1] >= dim:
            # Basis already complete; take the nearest remaining candidate.
            push(rest[0])
            continue
        norms = {}
        best = 0.0
        for i in rest:
            _, nrm = residual(i)
            norms[i] = nrm
            best = max(best, nrm)
        if best < min_resid:
            # Nothing extends the basis; nearest candidate keeps locality.
            push(rest[0])
            continue
        pick = next((i for i in rest if norms[i] >= 0.35 * best), None)
        if pick is None:
            pick = max(rest, key=lambda i: norms[i])
        push(pick)
    return chosen


def _build_patch(grid, cls, comp, bp_index, forced=()):
    """Assemble one 6-edge patch for boundary point bp_index."""
    if comp == "u":
        edges, mask = cls.u_edges, cls.u_inner_mask
        ex, ey = cls.u_mid_xy()
    else:
        edges, mask = cls.v_edges, cls.v_inner_mask
        ex, ey = cls.v_mid_xy()
    px, py = cls.boundary_points[bp_index]
    d = grid.dist(ex, ey, px, py)
    order = np.argsort(d, kind="stable")
    reach = 4.0 * grid.h
    order = [int(i) for i in order if d[i] <= reach]
    if len(order) < 6:
        raise GeometryError(
            f"domain too thin: fewer than 6 {comp}-edges near boundary point {bp_index}")
    near_bnd = next((i for i in order if not mask[i]), None)
    near_in = next((i for i in order if mask[i]), None)
    if near_bnd is None or near_in is None:
        raise GeometryError(
            f"no inner and boundary {comp}-edges both available near boundary point {bp_index}")
    mandatory = list(dict.fromkeys([*forced, near_bnd, near_in]))
    cols = _affine_vandermonde(grid, ex[order], ey[order], px, py).T
    local = {g: k for k, g in enumerate(order)}
    pick_local = _greedy_pick(cols, [local[m] for m in mandatory], 6,
                              list(range(len(order))))
    if pick_local is None:
        raise GeometryError(f"cannot assemble a {comp}-patch at boundary point {bp_index}")
    picked = [order[k] for k in pick_local]
    v = _affine_vandermonde(grid, ex[picked], ey[picked], px, py)
    s = np.linalg.svd(v, compute_uv=False)
    if s[-1] < 1e-7 * s[0]:
        raise GeometryError(
            f"degenerate affine fit for {comp}-patch at boundary point {bp_index}")
    fit_pinv = np.linalg.pinv(v, rcond=1e-10)

    # Targets: three nearest boundary points to the patch's own boundary
    # point (itself first); shared by the u and v patches of that point so
    # their extrapolations pair into tangential equations.
    bd = grid.dist(cls.boundary_points[:, 0], cls.boundary_points[:, 1], px, py)
    targets = np.argsort(bd, kind="stable")[:3]
    w = np.zeros((3, 6))
    for r, tgt in enumerate(targets):
        tx, ty = cls.boundary_points[tgt]
        dxt, dyt = grid.delta(tx - px, ty - py)
        w[r] = np.array([1.0, dxt / grid.h, dyt / grid.h]) @ fit_pinv
    return Patch(component=comp,
                 owner=int(bp_index),
                 edge_indices=np.array(picked, dtype=np.int64),
                 target_boundary_points=np.asarray(targets, dtype=np.int64),
                 extrapolation_weights=w,
                 fit_pinv=fit_pinv,
                 center=(float(px), float(py)))


def build_patches(grid: StaggeredGrid, cls: DomainClassification,
                  domain: DomainShape) -> list[Patch]:
    """One u-patch and one v-patch per boundary point, covering all boundary
    velocity edges.

    The nearest boundary edge and nearest inner edge of the right component
    are always included; remaining members are filled greedily, preferring
    near edges subject to the affine fit staying well conditioned. Boundary
    edges left uncovered are forced into the patch of their nearest boundary
    point and the patch is rebuilt.
    """
    n_e = cls.n_boundary_points
    forced: dict[tuple[str, int], list[int]] = {}
    for _ in range(cls.n_boundary_edges + 1):
        patches = []
        for bp in range(n_e):
            for comp in ("u", "v"):
                patches.append(_build_patch(grid, cls, comp, bp,
                                            forced.get((comp, bp), ())))
        missing = _uncovered_boundary_edges(cls, patches)
        if not missing:
            return patches
        for comp, edge in missing:
            if comp == "u":
                exf, eyf = cls.u_mid_xy()
            else:
                exf, eyf = cls.v_mid_xy()
            d = grid.dist(cls.boundary_points[:, 0], cls.boundary_points[:, 1],
                          exf[edge], eyf[edge])
            bp = int(np.argmin(d))
            forced.setdefault((comp, bp), []).append(edge)
    raise GeometryError("patch coverage repair did not converge")


def _uncovered_boundary_edges(cls, patches):
    covered_u = set()
    covered_v = set()
    for p in patches:
        dst = covered_u if p.component == "u" else covered_v
        dst.update(int(e) for e in p.edge_indices)
    missing = [("u", int(e)) for e in cls.boundary_u if int(e) not in covered_u]
    missing += [("v", int(e)) for e in cls.boundary_v if int(e) not in covered_v]
    return missing
