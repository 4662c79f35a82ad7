"""Explicit momentum right-hand side and boundary velocity reconstruction.

Inner velocity edges are advanced with centered second-order differences;
the boundary velocities y are then rebuilt from two conditions: the
centered divergence vanishes exactly at the near-boundary divergence
nodes (D y = s, entries 0/±1), and the patch-extrapolated tangential
velocity matches the boundary data in the least-squares sense (E y = t).
The constrained minimizer is y = y_p + P c with P an exact kernel basis of
D; for stepping, the affine maps from (s, t) to y are precomputed as dense
operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import sparsela
from .operators import GridOperators

__all__ = [
    "FlowState",
    "BoundaryExtension",
    "interior_rhs",
    "build_boundary_extension",
    "extend_boundary",
    "advection_term",
]


@dataclass
class FlowState:
    """Discrete fields at one time level.

    u and v hold one value per computational edge (inner and boundary);
    p is the stacked pressure vector (inner then ghost nodes).
    """

    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def w(self) -> np.ndarray:
        return np.concatenate([self.u, self.v])

    def y(self, ops: GridOperators) -> np.ndarray:
        """Boundary velocity vector mirrored out of the edge arrays."""
        return self.w()[ops.layout.boundary_w_indices()]

    def copy(self) -> "FlowState":
        return FlowState(self.u.copy(), self.v.copy(), self.p.copy(), self.t)


@dataclass(frozen=True)
class BoundaryExtension:
    """Prebuilt boundary reconstruction y = T_s s + T_t t."""

    d: sp.csr_matrix              # (M_d, M), entries 0/±1
    e: sp.csr_matrix              # (3 N_e, M)
    p: sp.csr_matrix              # kernel basis of d, d @ p = 0 exactly
    t_s: np.ndarray = field(repr=False)   # (M, M_d)
    t_t: np.ndarray = field(repr=False)   # (M, 3 N_e)

    @property
    def n_boundary(self) -> int:
        return self.d.shape[1]


def interior_rhs(ops: GridOperators, state: FlowState, p_hat: np.ndarray,
                 case, mu: float, advect: bool = False):
    """Momentum rate at inner edges: mu Δu - grad p - (u·grad)u + f."""
    w = state.w()
    f_u = case.forcing(*ops.inner_u_mid, state.t, mu)[0]
    f_v = case.forcing(*ops.inner_v_mid, state.t, mu)[1]
    rate_u = mu * (ops.lap_u @ w) - ops.grad_p_u @ p_hat + f_u
    rate_v = mu * (ops.lap_v @ w) - ops.grad_p_v @ p_hat + f_v
    if advect:
        adv_u, adv_v = advection_term(ops, w)
        rate_u = rate_u - adv_u
        rate_v = rate_v - adv_v
    return rate_u, rate_v


def advection_term(ops: GridOperators, w: np.ndarray):
    """(u·grad)u at inner edges with centered differences; the transverse
    component is the 4-point average, patch-extrapolated near the boundary."""
    if ops.dx_u is None:
        raise RuntimeError("operators were built without advection support")
    lay = ops.layout
    u_self = w[:lay.n_u][lay.inner_u]
    v_self = w[lay.n_u:][lay.inner_v]
    v_at_u = ops.adv_spread_u @ w
    u_at_v = ops.adv_spread_v @ w
    adv_u = u_self * (ops.dx_u @ w) + v_at_u * (ops.dy_u @ w)
    adv_v = u_at_v * (ops.dx_v @ w) + v_self * (ops.dy_v @ w)
    return adv_u, adv_v


def build_boundary_extension(ops: GridOperators) -> BoundaryExtension:
    """Kernel basis, feasibility factors and the dense step operators.

    Raises UnderdeterminedBoundaryError when E P loses column rank, which
    would mean the tangential equations do not pin the divergence-free
    degrees of freedom (flawed boundary implementation).
    """
    d = ops.d_constraint
    e = ops.e_boundary
    p = sparsela.kernel_basis(d)
    d_dense = d.toarray()
    d_pinv = np.linalg.pinv(d_dense, rcond=1e-12)
    m = d.shape[1]
    if p.shape[1]:
        f = (e @ p).toarray()
        sv = np.linalg.svd(f, compute_uv=False)
        if sv.size < f.shape[1] or sv[-1] <= 1e-10 * max(1.0, sv[0]):
            raise sparsela.UnderdeterminedBoundaryError(
                "boundary conditions underdetermined: E P lost column rank "
                "(flawed boundary implementation)")
        f_pinv = np.linalg.pinv(f, rcond=1e-12)
        p_dense = p.toarray()
        t_t = p_dense @ f_pinv
        t_s = (np.eye(m) - t_t @ e.toarray()) @ d_pinv
    else:
        t_t = np.zeros((m, e.shape[0]))
        t_s = d_pinv
    return BoundaryExtension(d=d, e=e, p=p, t_s=t_s, t_t=t_t)


def boundary_targets(ops: GridOperators, case, t: float) -> np.ndarray:
    """Tangential boundary data at the per-row target points."""
    tgt = ops.e_targets
    xb = ops.xb[tgt]
    gx, gy = case.velocity(xb[:, 0], xb[:, 1], t)
    tan = ops.tangents[tgt]
    return tan[:, 0] * gx + tan[:, 1] * gy


def extend_boundary(ext: BoundaryExtension, ops: GridOperators,
                    w: np.ndarray, g_tangential: np.ndarray) -> np.ndarray:
    """Boundary velocities from inner velocities and boundary data.

    w must hold the updated inner velocities; its boundary entries are
    ignored (s_inner and e_inner carry no boundary columns). The divergence
    constraint is satisfied exactly: there is no approximation beyond the
    centered divergence itself.
    """
    s = -(ops.s_inner @ w)
    t_rhs = g_tangential - ops.e_inner @ w
    return ext.t_s @ s + ext.t_t @ t_rhs
