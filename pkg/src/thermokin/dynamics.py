"""Relaxation dynamics of the thermostated deformation flow.

The homogeneous state advances by Strang splitting: an exact-in-time
semi-Lagrangian transport step along the linear-drift characteristics
(the drift matrix exponentiates in closed form) wrapped around an
explicit midpoint step of the full nonlinear collision operator.  The
collision evaluation reuses the equilibrium split of the steady module
-- dense linearized action on the deviation from the Maxwellian plus
bilinear quadrature on the deviation self-product -- so the fixed point
of the step map coincides with the steady solver's state up to its
residual.

Diagnostics recorded per step: conserved moments, deformation work, the
thermostat coefficient, weighted deviation norms against a reference
steady state, the five low-order coefficients of the deviation on an
interior ball, and the deviatoric pressure moments that close the
reduced moment system.  `decay_fit` extracts the relaxation rate from
the log of the weighted sup norm; `moment_ode_residual` checks the
recorded series against the reduced energy/momentum moment equations in
the exponentially rescaled frame where those equations are autonomous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .collision import conservation_fix, q_bilinear
from .grid import (
    VelocityGrid,
    deformation_work,
    maxwellian,
    moments5,
    weight_w,
    weighted_sup_norm,
)
from .linalg3 import expm, invert3

# Stability margin for the explicit midpoint collision stage: the real-axis
# stability interval of the midpoint rule is nu*dt <= 2, and the loss term is
# the stiffest diagonal piece, so 1.5 keeps a 25% margin at the worst node.
CFL_FRACTION = 1.5

_CONSTRAINT_TOL = 1e-10
_BLOWUP_FACTOR = 1e4
_INTERP_ORDERS = {"trilinear": 1, "tricubic": 3, "triquintic": 5}

# Upper-triangle pair order of the deviatoric pressure moments.
PRESSURE_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    """Parameters of one relaxation run.

    beta_mode "fixed_steady" freezes the thermostat coefficient at the
    reference steady value; "dynamic" recomputes it from the current state
    before every transport substep.  `l` is the polynomial weight exponent of
    the deviation norms and must match the steady solve that produced the
    reference state.
    """

    alpha: float
    a: np.ndarray
    dt: float
    t_end: float
    l: int = 7
    beta_mode: str = "fixed_steady"
    interpolation: str = "tricubic"

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=float)
        if a.shape != (3, 3) or not np.all(np.isfinite(a)):
            raise ValueError("deformation matrix must be a finite 3x3 array")
        object.__setattr__(self, "a", a)
        if not (self.alpha > 0.0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.t_end >= self.dt):
            raise ValueError("t_end must cover at least one step")
        if self.l < 0:
            raise ValueError("weight exponent l must be non-negative")
        if self.beta_mode not in ("fixed_steady", "dynamic"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.interpolation not in _INTERP_ORDERS:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class TimeSeries:
    """Per-step diagnostics of one run; row k is the state after k steps."""

    t: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray          # (K, 3)
    energy: np.ndarray
    deformation_work: np.ndarray
    beta_used: np.ndarray
    sup_dev: np.ndarray           # max |w_l (G - G_st)|
    l2_dev: np.ndarray            # quadrature L2 norm of w_l (G - G_st)
    coef_a: np.ndarray            # interior projection, constant coefficient
    coef_b: np.ndarray            # (K, 3) linear coefficients
    coef_c: np.ndarray            # quadratic (energy) coefficient
    pressure: np.ndarray          # (K, 6) deviatoric moments, PRESSURE_PAIRS

    def validate(self) -> None:
        if self.t.ndim != 1 or self.t.size < 1:
            raise ValueError("empty time series")
        if np.any(np.diff(self.t) <= 0.0):
            raise ValueError("time nodes must increase strictly")
        for name in ("t", "mass", "momentum", "energy", "deformation_work",
                     "beta_used", "sup_dev", "l2_dev", "coef_a", "coef_b",
                     "coef_c", "pressure"):
            arr = getattr(self, name)
            if arr.shape[0] != self.t.size:
                raise ValueError(f"series field {name} has {arr.shape[0]} rows, "
                                 f"expected {self.t.size}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"series field {name} contains non-finite entries")


# -- characteristics and transport -------------------------------------------


def characteristic_map(delta: float, beta: float, alpha: float,
                       a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Velocity map and position displacement over a time increment delta.

    The drift matrix M = beta I + alpha A moves a velocity v backward along
    its characteristic to expm(-delta M) v; the accumulated position
    displacement per unit initial velocity is -M^{-1}(expm(-delta M) - I).
    Raises if M is singular (the displacement needs the inverse).
    """
    m = beta * np.eye(3) + alpha * np.asarray(a, dtype=float)
    v_map = expm(-delta * m)
    x_displacement = -invert3(m) @ (v_map - np.eye(3))
    return v_map, x_displacement


def advect(grid: VelocityGrid, f: np.ndarray, delta_t: float, beta: float,
           alpha: float, a: np.ndarray, interpolation: str = "tricubic") -> np.ndarray:
    """One exact-characteristic transport step of the drift -(beta I + alpha A)v.

    Semi-Lagrangian update: the new value at node v samples the old field at
    expm(delta_t (beta I + alpha A)) v and scales by the constant volume
    factor exp((3 beta + alpha tr A) delta_t); samples outside the box read
    zero.  Time discretization is exact, only interpolation error remains.
    trilinear sampling preserves positivity, tricubic is the accuracy /
    ringing compromise for relaxation runs, and triquintic cuts the moment
    leakage further for residual diagnostics at the price of more ringing.
    """
    f = grid.require_field(f)
    try:
        order = _INTERP_ORDERS[interpolation]
    except KeyError:
        raise ValueError(f"unknown interpolation {interpolation!r}") from None
    a = np.asarray(a, dtype=float)
    m = beta * np.eye(3) + alpha * a
    fwd = expm(delta_t * m)
    coords = (grid.nodes @ fwd.T + grid.v_max).T / grid.h
    n = grid.n_per_axis
    sampled = map_coordinates(f.reshape(n, n, n), coords, order=order,
                              mode="grid-constant", cval=0.0,
                              prefilter=order > 1)
    jac = math.exp((3.0 * beta + alpha * float(np.trace(a))) * delta_t)
    return jac * sampled


# -- collision substep --------------------------------------------------------


def collision_term(op, g: np.ndarray) -> np.ndarray:
    """Full nonlinear collision action on G through the equilibrium split.

    The Maxwellian self-interaction vanishes identically in this form, so the
    quadrature error of the equilibrium channel never enters; the linear part
    rides the dense operator of record and the quadratic part the bilinear
    quadrature.  The five conserved moments of the result are repaired to
    exact zero, which is what makes the midpoint stage conservative.
    """
    if op.tables is None or op.raw_matrix is None:
        raise RuntimeError("collision stepping needs keep_tables and keep_raw")
    dev = g - op.mu
    lin = -op.sqrt_mu * (op.raw_matrix @ (dev / op.sqrt_mu))
    quad = q_bilinear(op.tables, dev, dev).q
    fixed, _ = conservation_fix(op.grid, lin + quad)
    return fixed


def closure_beta(grid: VelocityGrid, g: np.ndarray, alpha: float,
                 a: np.ndarray) -> float:
    """Thermostat coefficient balancing deformation work against friction."""
    m5 = moments5(grid, g)
    if not (m5[4] > 0.0):
        raise ValueError("state has non-positive energy, thermostat undefined")
    return -alpha * deformation_work(grid, g, a) / m5[4]


def strang_step(g: np.ndarray, delta_t: float, flow: FlowConfig, op,
                beta: float | None = None) -> np.ndarray:
    """One split step: half transport, midpoint collision, half transport.

    In fixed_steady mode the caller supplies the frozen thermostat value; in
    dynamic mode it is recomputed from the current state before each
    transport substep.
    """
    grid = op.grid
    g = grid.require_field(g)
    if flow.beta_mode == "dynamic":
        beta = closure_beta(grid, g, flow.alpha, flow.a)
    elif beta is None:
        raise ValueError("fixed_steady stepping requires the frozen beta value")
    half = 0.5 * delta_t
    g = advect(grid, g, half, beta, flow.alpha, flow.a, flow.interpolation)
    k1 = collision_term(op, g)
    k2 = collision_term(op, g + (0.5 * delta_t) * k1)
    g = g + delta_t * k2
    if flow.beta_mode == "dynamic":
        beta = closure_beta(grid, g, flow.alpha, flow.a)
    return advect(grid, g, half, beta, flow.alpha, flow.a, flow.interpolation)


# -- admissibility ------------------------------------------------------------


def check_initial_constraints(grid: VelocityGrid, g0: np.ndarray,
                              steady) -> dict:
    """Report whether initial data share the steady invariants.

    Checks the mass moment against the steady state, the raw momentum moment
    against zero, and node-wise non-negativity up to a rounding floor.  Never
    raises; `evolve` turns a failed report into an error.
    """
    g0 = grid.require_field(g0)
    m0 = moments5(grid, g0)
    ms = moments5(grid, steady.g_st)
    mass_defect = float(m0[0] - ms[0])
    momentum_defect = float(np.max(np.abs(m0[1:4])))
    min_value = float(np.min(g0))
    # Positivity is judged against the reference state's own honest level:
    # a converged steady state may carry tiny negative tail nodes, and data
    # built on top of it cannot be held to a stricter floor than the
    # reference itself satisfies.  A clean reference keeps the rounding floor.
    floor = 2.0 * min(0.0, float(np.min(steady.g_st))) \
        - 10.0 * np.finfo(np.float64).eps * float(np.max(np.abs(g0)))
    mass_ok = abs(mass_defect) <= _CONSTRAINT_TOL
    momentum_ok = momentum_defect <= _CONSTRAINT_TOL
    positive_ok = min_value >= floor
    return {
        "mass_defect": mass_defect,
        "momentum_defect": momentum_defect,
        "min_value": min_value,
        "positivity_floor": floor,
        "mass_ok": mass_ok,
        "momentum_ok": momentum_ok,
        "positive_ok": positive_ok,
        "passed": mass_ok and momentum_ok and positive_ok,
    }


# -- interior projection of the deviation -------------------------------------


class _InteriorProjection:
    """Low-order coefficients of the deviation G - G_st, expanded in the
    Maxwellian-carried invariant polynomials on the interior nodes.

    Interior means the quadrature sense: nodes not touching the box boundary.
    Keeping the mask this close to global matters, because the conservation
    repair zeroes the collision moments of the whole box; a mask that cut
    deep into the Gaussian bulk would leak collision flux into the recorded
    coefficients and swamp the slow thermostat terms they are meant to track.
    The projection solves the masked Gram system of the five collision
    invariants in the decaying frame; right-hand sides contract the plain
    deviation against polynomial carriers, so nothing ever divides by the
    Maxwellian.  The deviatoric pressure moments come out of the same mask
    with the projected low-order part removed.
    """

    def __init__(self, grid: VelocityGrid):
        v = grid.nodes
        r2 = np.einsum("ij,ij->i", v, v)
        edge = grid.v_max - 0.5 * grid.h
        mask = np.all(np.abs(v) < edge, axis=1)
        wm = grid.weights * mask
        mu = maxwellian(grid)
        phi = np.stack([np.ones(grid.size), v[:, 0], v[:, 1], v[:, 2], r2 - 3.0])
        poly = np.stack([v[:, i] * v[:, j] - (r2 / 3.0 if i == j else 0.0)
                         for i, j in PRESSURE_PAIRS])
        self.gram = (phi * (wm * mu)) @ phi.T
        self.rhs_op = phi * wm
        self.pressure_op = poly * wm
        self.cross = (poly * (wm * mu)) @ phi.T

    def coefficients(self, dev: np.ndarray):
        coef = np.linalg.solve(self.gram, self.rhs_op @ dev)
        p6 = self.pressure_op @ dev - self.cross @ coef
        return coef[0], coef[1:4], coef[4], p6


def _pressure_contract(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Contract symmetric pressure moments [..., 6] with the deformation matrix."""
    a = np.asarray(a, dtype=float)
    w = np.array([a[0, 0], a[0, 1] + a[1, 0], a[0, 2] + a[2, 0],
                  a[1, 1], a[1, 2] + a[2, 1], a[2, 2]])
    return p @ w


# -- time marching ------------------------------------------------------------


def evolve(g0: np.ndarray, steady, flow: FlowConfig, op) -> TimeSeries:
    """March the state to t_end and record the diagnostic series.

    Initial data must carry the steady mass, zero momentum, node-wise
    non-negativity, and a weighted deviation no larger than alpha^2; any
    violation raises before stepping starts.  A non-finite or exploding state
    aborts with the offending step index.
    """
    grid = op.grid
    g0 = grid.require_field(g0)
    if not np.array_equal(flow.a, np.asarray(steady.a, dtype=float)):
        raise ValueError("flow and steady state disagree on the deformation matrix")
    betas = steady.betas
    if flow.alpha != betas.alpha:
        raise ValueError(
            f"flow.alpha = {flow.alpha} but the steady state was solved at "
            f"alpha = {betas.alpha}")
    numax = float(np.max(op.nu))
    if flow.dt * numax > CFL_FRACTION:
        raise ValueError(
            f"dt {flow.dt:g} exceeds the collision stability bound "
            f"{CFL_FRACTION / numax:g}")
    beta = betas.beta
    drift = beta * np.eye(3) + flow.alpha * flow.a
    if abs(np.linalg.det(drift)) <= 1e-14 * max(1.0, np.linalg.norm(drift)) ** 3:
        raise ValueError("thermostat-deformation drift matrix is singular")

    report = check_initial_constraints(grid, g0, steady)
    if not report["passed"]:
        raise ValueError(f"initial data rejected: {report}")
    dev_sup0 = weighted_sup_norm(grid, g0 - steady.g_st, flow.l)
    if dev_sup0 > flow.alpha ** 2 * (1.0 + 1e-9):
        raise ValueError(
            f"initial weighted deviation {dev_sup0:.3e} exceeds alpha^2 "
            f"= {flow.alpha ** 2:.3e}")

    n_steps = int(round(flow.t_end / flow.dt))
    proj = _InteriorProjection(grid)
    wfield = weight_w(grid, flow.l)
    blow_cap = _BLOWUP_FACTOR * max(1.0, float(np.max(np.abs(g0))))

    k_rows = n_steps + 1
    series = TimeSeries(
        t=np.arange(k_rows) * flow.dt,
        mass=np.empty(k_rows), momentum=np.empty((k_rows, 3)),
        energy=np.empty(k_rows), deformation_work=np.empty(k_rows),
        beta_used=np.empty(k_rows), sup_dev=np.empty(k_rows),
        l2_dev=np.empty(k_rows), coef_a=np.empty(k_rows),
        coef_b=np.empty((k_rows, 3)), coef_c=np.empty(k_rows),
        pressure=np.empty((k_rows, 6)),
    )

    def record(k: int, g: np.ndarray) -> None:
        m5 = moments5(grid, g)
        series.mass[k] = m5[0]
        series.momentum[k] = m5[1:4]
        series.energy[k] = m5[4]
        series.deformation_work[k] = deformation_work(grid, g, flow.a)
        if flow.beta_mode == "dynamic":
            series.beta_used[k] = closure_beta(grid, g, flow.alpha, flow.a)
        else:
            series.beta_used[k] = beta
        diff = g - steady.g_st
        wd = wfield * diff
        series.sup_dev[k] = np.max(np.abs(wd))
        series.l2_dev[k] = math.sqrt(float(grid.weights @ (wd * wd)))
        ca, cb, cc, p6 = proj.coefficients(diff)
        series.coef_a[k] = ca
        series.coef_b[k] = cb
        series.coef_c[k] = cc
        series.pressure[k] = p6

    g = g0.copy()
    record(0, g)
    for k in range(1, n_steps + 1):
        g = strang_step(g, flow.dt, flow, op, beta=beta)
        if not np.all(np.isfinite(g)) or np.max(np.abs(g)) > blow_cap:
            raise RuntimeError(
                f"state blow-up at step {k} (t = {k * flow.dt:.6g})")
        record(k, g)
    series.validate()
    return series


# -- diagnostics --------------------------------------------------------------


def decay_fit(series: TimeSeries, window: tuple[float, float]) -> tuple[float, float]:
    """Least-squares decay rate of log sup_dev over a time window.

    Returns (rate, r_squared) with rate > 0 for decay.  A constant series
    fits exactly with rate zero, in which case r_squared reports 1.
    """
    t_lo, t_hi = window
    sel = (series.t >= t_lo) & (series.t <= t_hi)
    if int(np.sum(sel)) < 3:
        raise ValueError("fit window holds fewer than three samples")
    y = series.sup_dev[sel]
    if np.any(y <= 0.0):
        raise ValueError("sup_dev must be positive throughout the fit window")
    t = series.t[sel]
    tc = t - t.mean()
    ly = np.log(y)
    slope = float(tc @ (ly - ly.mean())) / float(tc @ tc)
    resid = ly - ly.mean() - slope * tc
    ss_res = float(resid @ resid)
    ss_tot = float((ly - ly.mean()) @ (ly - ly.mean()))
    r_squared = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return -slope, r_squared


def moment_ode_residual(series: TimeSeries, steady, flow: FlowConfig) -> dict:
    """Residuals of the reduced moment equations on the recorded series.

    The recorded coefficients are rescaled by exp(lambda0 t), the frame in
    which the reduced equations close autonomously; the time derivative is
    the centered difference, so a consistent series leaves an O(dt^2)
    residual.  Residual sups are reported next to the largest participating
    term of each equation.
    """
    t = series.t
    if t.size < 3:
        raise ValueError("series too short for centered differencing")
    dt = float(t[1] - t[0])
    alpha = flow.alpha
    lam0 = steady.betas.beta1 * alpha ** 2
    scale = np.exp(lam0 * t)
    a_g = series.coef_a * scale
    c_g = series.coef_c * scale
    b_g = series.coef_b * scale[:, None]
    p_g = series.pressure * scale[:, None]
    beta_mid = series.beta_used[1:-1]

    dc = (c_g[2:] - c_g[:-2]) / (2.0 * dt)
    thermo_c = lam0 * (2.0 * c_g[1:-1] + a_g[1:-1])
    relax_c = lam0 * c_g[1:-1]
    couple_c = (alpha / 3.0) * _pressure_contract(flow.a, p_g[1:-1])
    c_residual = dc + thermo_c - relax_c + couple_c

    db = (b_g[2:] - b_g[:-2]) / (2.0 * dt)
    drift_b = (beta_mid - lam0)[:, None] * b_g[1:-1] + b_g[1:-1] @ (alpha * flow.a).T
    b_residual = db + drift_b

    def sup(x):
        return float(np.max(np.abs(x))) if x.size else 0.0

    c_dominant = max(sup(dc), sup(thermo_c), sup(relax_c), sup(couple_c))
    b_dominant = max(sup(db), sup(drift_b))
    return {
        "lambda0": float(lam0),
        "t_interior": t[1:-1],
        "c_residual": c_residual,
        "b_residual": b_residual,
        "c_residual_sup": sup(c_residual),
        "b_residual_sup": sup(b_residual),
        "c_dominant": c_dominant,
        "b_dominant": b_dominant,
        "c_ratio": sup(c_residual) / max(c_dominant, 1e-300),
        "b_ratio": sup(b_residual) / max(b_dominant, 1e-300),
    }
