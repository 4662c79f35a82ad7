"""Manufactured solutions, error norms, perturbation helper and the
convergence-study driver.

Cases are built backwards: pick a solenoidal velocity (via a stream
function for the irregular domain) and a pressure, then define the forcing
f = u_t + grad p - mu lap u so the closed forms solve the linear momentum
equation exactly. All evaluators are vectorized in numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import stepper
from .geometry import DomainShape, Rectangle, RectangleMinusDisk
from .poisson import PoissonRhs

__all__ = [
    "ManufacturedCase",
    "ConvergenceReport",
    "square_case",
    "irregular_case",
    "linf_error",
    "error_channels",
    "derivative_errors",
    "perturbed_pressure_bc",
    "convergence_study",
]


@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form fields with the analytic derivatives the solver needs.

    The boundary data g and its rate are the velocity evaluators restricted
    to boundary points, so no separate callables are stored.
    """

    name: str
    domain: DomainShape
    periodic_y: bool
    _vel: callable
    _vel_t: callable
    _vel_grad: callable       # (x, y, t) -> (u_x, u_y, v_x, v_y)
    _vel_lap: callable        # (x, y, t) -> (lap u, lap v)
    _pres: callable
    _pres_grad: callable      # (x, y, t) -> (p_x, p_y)

    def velocity(self, x, y, t):
        return self._vel(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def velocity_t(self, x, y, t):
        return self._vel_t(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def velocity_grad(self, x, y, t):
        return self._vel_grad(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def velocity_laplacian(self, x, y, t):
        return self._vel_lap(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def pressure(self, x, y, t):
        return self._pres(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def pressure_grad(self, x, y, t):
        return self._pres_grad(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t)

    def forcing(self, x, y, t, mu):
        """f = u_t + grad p - mu lap u (linear momentum balance)."""
        ut, vt = self.velocity_t(x, y, t)
        px, py = self.pressure_grad(x, y, t)
        lu, lv = self.velocity_laplacian(x, y, t)
        return ut + px - mu * lu, vt + py - mu * lv


def square_case() -> ManufacturedCase:
    """Oscillating vortex pair on the unit square with no-slip walls."""
    pi = math.pi

    def vel(x, y, t):
        c = math.cos(t)
        u = pi * c * np.sin(2 * pi * y) * np.sin(pi * x) ** 2
        v = -pi * c * np.sin(2 * pi * x) * np.sin(pi * y) ** 2
        return u, v

    def vel_t(x, y, t):
        s = math.sin(t)
        u = -pi * s * np.sin(2 * pi * y) * np.sin(pi * x) ** 2
        v = pi * s * np.sin(2 * pi * x) * np.sin(pi * y) ** 2
        return u, v

    def vel_grad(x, y, t):
        c = math.cos(t)
        ux = pi ** 2 * c * np.sin(2 * pi * x) * np.sin(2 * pi * y)
        uy = 2 * pi ** 2 * c * np.cos(2 * pi * y) * np.sin(pi * x) ** 2
        vx = -2 * pi ** 2 * c * np.cos(2 * pi * x) * np.sin(pi * y) ** 2
        vy = -ux
        return ux, uy, vx, vy

    def vel_lap(x, y, t):
        c = math.cos(t)
        lu = 2 * pi ** 3 * c * np.sin(2 * pi * y) * (
            np.cos(2 * pi * x) - 2 * np.sin(pi * x) ** 2)
        lv = -2 * pi ** 3 * c * np.sin(2 * pi * x) * (
            np.cos(2 * pi * y) - 2 * np.sin(pi * y) ** 2)
        return lu, lv

    def pres(x, y, t):
        return -math.cos(t) * np.cos(pi * x) * np.sin(pi * y)

    def pres_grad(x, y, t):
        c = math.cos(t)
        px = pi * c * np.sin(pi * x) * np.sin(pi * y)
        py = -pi * c * np.cos(pi * x) * np.cos(pi * y)
        return px, py

    return ManufacturedCase(
        name="square",
        domain=Rectangle(0.0, 0.0, 1.0, 1.0),
        periodic_y=False,
        _vel=vel, _vel_t=vel_t, _vel_grad=vel_grad, _vel_lap=vel_lap,
        _pres=pres, _pres_grad=pres_grad,
    )


def _bump_sums(x, y, k_max):
    """Sums over shifted copies of the radial bump r^2 exp(-2r) and its
    derivatives, centered at (3/4, 1) with period 2 in y.

    Returns d(psi)/dY, d/dX, the three second derivatives and the gradient
    of the Laplacian, everything summed over copies.
    """
    cx, cy = 0.75, 1.0
    X = x - cx
    sums = {k: 0.0 for k in ("sx", "sy", "sxx", "sxy", "syy", "lx", "ly")}
    for k in range(-k_max, k_max + 1):
        Y = y - cy + 2.0 * k
        r = np.hypot(X, Y)
        safe = np.where(r > 1e-300, r, 1.0)
        e = np.exp(-2.0 * r)
        lin = 2.0 * (1.0 - r) * e
        curv = 2.0 * e * (3.0 - 2.0 * r) / safe
        lgrad = e * (-18.0 + 28.0 * r - 8.0 * r * r) / safe
        sums["sx"] = sums["sx"] + lin * X
        sums["sy"] = sums["sy"] + lin * Y
        sums["sxx"] = sums["sxx"] + lin - curv * X * X
        sums["syy"] = sums["syy"] + lin - curv * Y * Y
        sums["sxy"] = sums["sxy"] - curv * X * Y
        sums["lx"] = sums["lx"] + lgrad * X
        sums["ly"] = sums["ly"] + lgrad * Y
    return sums


def irregular_case(k_max: int = 12) -> ManufacturedCase:
    """Periodic strip with a circular obstruction.

    Stream function: cos(t) times a sum of radial bumps r^2 exp(-2r)
    shifted by the period 2 in y; the truncation tail decays like
    exp(-2r) and is below 1e-14 for k_max >= 8. Velocity (psi_y, -psi_x);
    pressure sin(t) cos(pi x) sin(pi y).
    """
    if k_max < 8:
        raise ValueError("k_max below 8 leaves a visible truncation tail")
    pi = math.pi

    def vel(x, y, t):
        s = _bump_sums(x, y, k_max)
        c = math.cos(t)
        return c * s["sy"], -c * s["sx"]

    def vel_t(x, y, t):
        s = _bump_sums(x, y, k_max)
        st = math.sin(t)
        return -st * s["sy"], st * s["sx"]

    def vel_grad(x, y, t):
        s = _bump_sums(x, y, k_max)
        c = math.cos(t)
        return c * s["sxy"], c * s["syy"], -c * s["sxx"], -c * s["sxy"]

    def vel_lap(x, y, t):
        s = _bump_sums(x, y, k_max)
        c = math.cos(t)
        return c * s["ly"], -c * s["lx"]

    def pres(x, y, t):
        return math.sin(t) * np.cos(pi * x) * np.sin(pi * y)

    def pres_grad(x, y, t):
        st = math.sin(t)
        return (-pi * st * np.sin(pi * x) * np.sin(pi * y),
                pi * st * np.cos(pi * x) * np.cos(pi * y))

    return ManufacturedCase(
        name="irregular",
        domain=RectangleMinusDisk(0.0, 0.0, 2.0, 2.0, 0.75, 1.0, 0.25,
                                  periodic_y=True),
        periodic_y=True,
        _vel=vel, _vel_t=vel_t, _vel_grad=vel_grad, _vel_lap=vel_lap,
        _pres=pres, _pres_grad=pres_grad,
    )


def linf_error(numeric, exact, gauge: bool = False) -> float:
    """Max-norm difference; with gauge both fields are shifted to zero mean
    first (pressure is defined up to a constant)."""
    numeric = np.asarray(numeric, dtype=float)
    exact = np.asarray(exact, dtype=float)
    if numeric.size == 0:
        return 0.0
    if gauge:
        numeric = numeric - numeric.mean()
        exact = exact - exact.mean()
    return float(np.max(np.abs(numeric - exact)))


def error_channels(systems, state, case) -> dict:
    """All L-infinity error channels at the state's time.

    Only native inner sample locations enter: inner velocity edges, inner
    pressure nodes (gauge-fixed), derivative samples whose centered stencil
    uses stored values, and the discrete divergence at inner nodes.
    """
    ops = systems.ops
    lay = ops.layout
    t = state.t
    ux, uy = ops.inner_u_mid
    vx, vy = ops.inner_v_mid
    eu = linf_error(state.u[lay.inner_u], case.velocity(ux, uy, t)[0])
    ev = linf_error(state.v[lay.inner_v], case.velocity(vx, vy, t)[1])
    cls = systems.classification
    px, py = cls.node_xy_of(cls.inner_pressure)
    ep = linf_error(state.p[:cls.n_inner], case.pressure(px, py, t), gauge=True)
    eux, euy = derivative_errors(systems, state, case)
    ediv = float(np.max(np.abs(ops.div_inner @ state.w()))) \
        if ops.div_inner.shape[0] else 0.0
    return {"u": eu, "v": ev, "p": ep, "u_x": eux, "u_y": euy, "div": ediv}


def derivative_errors(systems, state, case) -> tuple[float, float]:
    """Centered u_x, u_y errors against the analytic derivatives.

    u_x lives at inner pressure nodes (adjacent u-edges always stored);
    u_y at cell centers inside the domain with both vertically adjacent
    u-edges stored. Locations needing values beyond stored edges are
    excluded.
    """
    cls = systems.classification
    grid = systems.grid
    h = grid.h
    t = state.t
    u = state.u

    ii, jj = cls.inner_pressure[:, 0], cls.inner_pressure[:, 1]
    e_w = cls.u_id[ii - 1, jj]
    e_e = cls.u_id[ii, jj]
    ok = (e_w >= 0) & (e_e >= 0)
    node_err = 0.0
    if np.any(ok):
        vals = (u[e_e[ok]] - u[e_w[ok]]) / h
        px, py = grid.node_xy(ii[ok], jj[ok])
        exact = case.velocity_grad(px, py, t)[0]
        node_err = float(np.max(np.abs(vals - exact)))

    ei, ej = cls.u_edges[:, 0], cls.u_edges[:, 1]
    j_up = ej + 1
    if grid.periodic_y:
        j_up = j_up % grid.ny
        in_range = np.ones(len(ei), dtype=bool)
    else:
        in_range = j_up < cls.u_id.shape[1]
    e_up = np.where(in_range, cls.u_id[ei, np.where(in_range, j_up, 0)], -1)
    cxm, cym = grid.u_mid(ei, ej)
    cym = cym + 0.5 * h
    ok = in_range & (e_up >= 0) & (systems.domain.signed_distance(cxm, cym) < 0)
    center_err = 0.0
    if np.any(ok):
        vals = (u[e_up[ok]] - u[np.flatnonzero(ok)]) / h
        exact = case.velocity_grad(cxm[ok], cym[ok], t)[1]
        center_err = float(np.max(np.abs(vals - exact)))
    return node_err, center_err


def perturbed_pressure_bc(rhs: PoissonRhs, seed: int, step_index: int = 0) -> PoissonRhs:
    """Add an independent uniform [0,1] draw to every Neumann entry.

    Draws are counter-based on (seed, step), so repeated evaluation at the
    same step reproduces the same perturbation.
    """
    noise = stepper._perturbation(seed, step_index, len(rhs.b))
    return PoissonRhs(a=rhs.a, b=rhs.b + noise, defect=rhs.defect)


@dataclass(frozen=True)
class ConvergenceReport:
    sizes: list
    hs: np.ndarray
    errors: dict           # channel -> per-size array
    slopes: dict           # channel -> per-refinement array
    diverged: list

    CHANNELS = ("u", "v", "p", "u_x", "u_y", "div")


def convergence_study(case: ManufacturedCase, sizes, t_final: float,
                      cfg: stepper.SolverConfig) -> ConvergenceReport:
    """Run the case at each grid size to the same final time and fit
    inter-size convergence slopes for every error channel."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least two grid sizes for slopes")
    if sorted(sizes) != sizes:
        raise ValueError("sizes must increase")
    from .geometry import build_grid
    hs = []
    errs = {k: [] for k in ConvergenceReport.CHANNELS}
    diverged = []
    for n in sizes:
        grid = build_grid(case.domain, n, periodic_y=case.periodic_y)
        systems = stepper.build_systems(grid, case.domain, advect=cfg.advect)
        dt = stepper.stable_dt(cfg.mu, grid.h, cfg.cfl_c)
        run_cfg = stepper.SolverConfig(mu=cfg.mu, lam=cfg.lam, dt=dt,
                                       cfl_c=cfg.cfl_c, advect=cfg.advect,
                                       project=cfg.project, perturb=cfg.perturb,
                                       seed=cfg.seed)
        state = stepper.initial_state(systems, case)
        try:
            state, _ = stepper.run(state, run_cfg, systems, case, t_final=t_final)
            ch = error_channels(systems, state, case)
        except stepper.InstabilityError:
            diverged.append(n)
            ch = {k: math.nan for k in ConvergenceReport.CHANNELS}
        hs.append(grid.h)
        for k in ConvergenceReport.CHANNELS:
            errs[k].append(ch[k])
    hs = np.array(hs)
    errors = {k: np.array(v) for k, v in errs.items()}
    slopes = {}
    for k, e in errors.items():
        with np.errstate(divide="ignore", invalid="ignore"):
            slopes[k] = np.log(e[:-1] / e[1:]) / np.log(hs[:-1] / hs[1:])
    return ConvergenceReport(sizes=sizes, hs=hs, errors=errors, slopes=slopes,
                             diverged=diverged)
