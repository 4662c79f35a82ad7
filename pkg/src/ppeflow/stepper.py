"""Forward-Euler time stepping of the coupled pressure/velocity system.

Each step solves the pressure problem at the current level (with the
feedback term in its Neumann data), advances the inner velocities
explicitly, reconstructs the boundary velocities at the new level, and
records stability monitors. All matrices and factorizations are built once
per geometry in :func:`build_systems`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import momentum, poisson
from .geometry import build_patches, classify
from .momentum import BoundaryExtension, FlowState
from .operators import GridOperators, build_operators
from .poisson import PoissonRhs, PressureSystem

__all__ = [
    "SolverConfig",
    "StepMonitors",
    "MonitorSeries",
    "SolverSystems",
    "InstabilityError",
    "stable_dt",
    "recommend_lambda",
    "build_systems",
    "initial_state",
    "step",
    "run",
]


class InstabilityError(RuntimeError):
    """Non-finite values appeared in the state (explicit scheme blow-up)."""

    def __init__(self, step_index: int, t: float):
        super().__init__(f"instability: non-finite state at step {step_index}, t={t:g}")
        self.step_index = step_index
        self.t = t


@dataclass(frozen=True)
class SolverConfig:
    """Run parameters. mu is the kinematic viscosity (1/Re), lam the
    feedback gain on the normal boundary velocity, cfl_c the constant in
    dt <= cfl_c h^2 / mu."""

    mu: float = 1.0
    lam: float = 10.0
    dt: float = 1e-3
    cfl_c: float = 0.2
    advect: bool = False
    project: bool = True
    perturb: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("viscosity must be positive")
        if self.lam < 0:
            raise ValueError("feedback gain must be nonnegative")
        if self.dt <= 0:
            raise ValueError("time step must be positive")


@dataclass(frozen=True)
class StepMonitors:
    div_inf: float      # max |divergence| over inner pressure nodes
    drift_inf: float    # max |n·(u - g)| over boundary points
    defect: float       # solvability defect of the last pressure solve


@dataclass
class MonitorSeries:
    t: np.ndarray
    div_inf: np.ndarray
    drift_inf: np.ndarray
    defect: np.ndarray


def stable_dt(mu: float, h: float, cfl_c: float) -> float:
    """dt = cfl_c h^2 / mu, the diffusive stability bound."""
    if mu <= 0 or h <= 0 or cfl_c <= 0:
        raise ValueError("stable_dt needs positive mu, h and cfl constant")
    return cfl_c * h * h / mu


def recommend_lambda(eps: float, delta: float, gamma: float, c_m: float) -> float:
    """Feedback gain from the drift model: eps*gamma / (delta*c_m).

    eps is the scheme's error scale, delta the acceptable normal-velocity
    deviation, gamma the noise bound and c_m the damping floor.
    """
    if min(eps, delta, gamma, c_m) <= 0:
        raise ValueError("recommend_lambda needs positive inputs")
    return eps * gamma / (delta * c_m)


@dataclass(frozen=True)
class SolverSystems:
    """Everything solve-related that depends only on the geometry."""

    grid: object
    domain: object
    classification: object
    patches: list
    ops: GridOperators
    pressure: PressureSystem
    extension: BoundaryExtension


def build_systems(grid, domain, advect: bool = False) -> SolverSystems:
    cls = classify(grid, domain)
    patches = build_patches(grid, cls, domain)
    ops = build_operators(grid, cls, patches, advect=advect)
    pressure = poisson.assemble_pressure_matrix(grid, cls, domain)
    extension = momentum.build_boundary_extension(ops)
    return SolverSystems(grid=grid, domain=domain, classification=cls,
                         patches=patches, ops=ops, pressure=pressure,
                         extension=extension)


def initial_state(systems: SolverSystems, case, t0: float = 0.0) -> FlowState:
    """Sample the case velocity at every computational edge."""
    ops = systems.ops
    u = case.velocity(*ops.u_mid, t0)[0]
    v = case.velocity(*ops.v_mid, t0)[1]
    p = np.zeros(systems.pressure.n)
    return FlowState(u=np.asarray(u, dtype=float),
                     v=np.asarray(v, dtype=float),
                     p=np.asarray(p, dtype=float), t=t0)


def _perturbation(seed: int, step_index: int, n: int) -> np.ndarray:
    """Uniform [0,1] draws keyed by (seed, step); counter-based so runs are
    reproducible and independent of evaluation order."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed),
                                               counter=np.uint64(step_index)))
    return gen.uniform(0.0, 1.0, size=n)


def monitors_of(systems: SolverSystems, state: FlowState, case,
                defect: float = 0.0) -> StepMonitors:
    ops = systems.ops
    w = state.w()
    div = ops.div_inner @ w
    nx_, ny_ = ops.normals[:, 0], ops.normals[:, 1]
    gx, gy = case.velocity(ops.xb[:, 0], ops.xb[:, 1], state.t)
    drift = (ops.u_at_xb @ w) * nx_ + (ops.v_at_xb @ w) * ny_ - (nx_ * gx + ny_ * gy)
    return StepMonitors(div_inf=float(np.max(np.abs(div))) if div.size else 0.0,
                        drift_inf=float(np.max(np.abs(drift))) if drift.size else 0.0,
                        defect=defect)


def step(state: FlowState, cfg: SolverConfig, systems: SolverSystems, case,
         step_index: int = 0) -> tuple[FlowState, StepMonitors]:
    """One forward-Euler step: pressure solve, inner update, extension."""
    ops = systems.ops
    lay = ops.layout
    w = state.w()

    adv_edges = adv_at_xb = None
    if cfg.advect:
        adv_edges, adv_at_xb = _advection_fields(systems, w)

    rhs = poisson.assemble_poisson_rhs(systems.pressure, ops, case, w, state.t,
                                       cfg.mu, cfg.lam,
                                       adv_edges=adv_edges, adv_at_xb=adv_at_xb)
    defect = poisson.solvability_defect(systems.pressure, rhs)
    if cfg.project:
        rhs = PoissonRhs(a=rhs.a, b=rhs.b - defect, defect=defect)
    if cfg.perturb:
        # Raw noise on the Neumann data, past the projection: the least
        # squares solve absorbs the incompatibility, as in the drift tests.
        noise = _perturbation(cfg.seed, step_index, len(rhs.b))
        rhs = PoissonRhs(a=rhs.a, b=rhs.b + noise, defect=rhs.defect)
    p_hat = poisson.solve_pressure(systems.pressure, rhs, project=False)

    rate_u, rate_v = momentum.interior_rhs(ops, state, p_hat, case, cfg.mu,
                                           advect=cfg.advect)
    u_new = state.u.copy()
    v_new = state.v.copy()
    u_new[lay.inner_u] += cfg.dt * rate_u
    v_new[lay.inner_v] += cfg.dt * rate_v

    t_new = state.t + cfg.dt
    w_new = np.concatenate([u_new, v_new])
    g_tan = momentum.boundary_targets(ops, case, t_new)
    y = momentum.extend_boundary(systems.extension, ops, w_new, g_tan)
    u_new[lay.boundary_u] = y[:len(lay.boundary_u)]
    v_new[lay.boundary_v] = y[len(lay.boundary_u):]

    new_state = FlowState(u=u_new, v=v_new, p=p_hat, t=t_new)
    if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new))
            and np.all(np.isfinite(p_hat))):
        raise InstabilityError(step_index, t_new)
    mons = monitors_of(systems, new_state, case, defect)
    return new_state, mons


def _advection_fields(systems: SolverSystems, w: np.ndarray):
    """Advective term at every edge plus its extrapolation to the boundary
    points, for the Poisson source and Neumann data."""
    ops = systems.ops
    lay = ops.layout
    adv_u, adv_v = momentum.advection_term(ops, w)
    adv = np.zeros_like(w)
    adv[lay.inner_u] = adv_u
    adv[lay.n_u + lay.inner_v] = adv_v
    adv = adv + ops.extend_to_bedges @ adv
    # Patch-style extrapolation of each component to the boundary points.
    n_e = ops.xb.shape[0]
    adv_xb = np.zeros((n_e, 2))
    adv_xb[:, 0] = ops.u_at_xb @ adv
    adv_xb[:, 1] = ops.v_at_xb @ adv
    return adv, adv_xb


def run(state: FlowState, cfg: SolverConfig, systems: SolverSystems, case,
        n_steps: int | None = None, t_final: float | None = None,
        callbacks=()) -> tuple[FlowState, MonitorSeries]:
    """March the system; exactly one of n_steps / t_final must be given.

    With t_final, dt is shrunk (never grown) so an integer number of steps
    lands exactly on t_final. Callbacks receive (step_index, state,
    monitors) after every step.
    """
    if (n_steps is None) == (t_final is None):
        raise ValueError("specify exactly one of n_steps or t_final")
    if t_final is not None:
        span = t_final - state.t
        if span < 0:
            raise ValueError("t_final lies before the state time")
        if span == 0:
            n_steps = 0
        else:
            n_steps = max(1, int(np.ceil(span / cfg.dt - 1e-12)))
            cfg = replace(cfg, dt=span / n_steps)
    ts = np.zeros(n_steps)
    div = np.zeros(n_steps)
    drift = np.zeros(n_steps)
    defect = np.zeros(n_steps)
    for k in range(n_steps):
        state, mons = step(state, cfg, systems, case, step_index=k)
        ts[k] = state.t
        div[k] = mons.div_inf
        drift[k] = mons.drift_inf
        defect[k] = mons.defect
        for cb in callbacks:
            cb(k, state, mons)
    return state, MonitorSeries(t=ts, div_inf=div, drift_inf=drift, defect=defect)
