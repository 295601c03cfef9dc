"""Hamiltonian flow of the principal symbol: integration, cones, trajectory checks.

The flow of p = xi^T g(x) xi is integrated with an adaptive embedded
Runge-Kutta scheme; conservation of p (and of q for block metrics) is logged
rather than structurally enforced.  Batch integration stacks many phase
points into one vectorized ODE system so that the metric evaluators are
called on whole batches.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import qmc

from .metric import MetricField, SignatureForm, bracket, conserved_symbol, principal_symbol


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xi))):
            raise ValueError("phase point entries must be finite")


@dataclass
class Trajectory:
    """A sampled integral curve with conserved-quantity logs."""

    times: np.ndarray           # strictly monotone sample times
    xs: np.ndarray              # (M, n)
    xis: np.ndarray             # (M, n)
    p_log: np.ndarray
    q_log: Optional[np.ndarray]
    integrator_tol: float

    @property
    def initial(self) -> PhasePoint:
        return PhasePoint(self.xs[0], self.xis[0])

    def p_drift(self) -> float:
        p0 = self.p_log[0]
        return float(np.max(np.abs(self.p_log - p0)) / (1.0 + abs(p0)))

    def q_drift(self) -> float:
        if self.q_log is None:
            return 0.0
        q0 = self.q_log[0]
        return float(np.max(np.abs(self.q_log - q0)) / (1.0 + abs(q0)))

    def to_csv(self, path):
        n = self.xs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i+1}" for i in range(n)]
                       + [f"xi{i+1}" for i in range(n)] + ["p", "q"])
            for m in range(len(self.times)):
                q = self.q_log[m] if self.q_log is not None else ""
                w.writerow([f"{self.times[m]:.12g}"]
                           + [f"{v:.12g}" for v in self.xs[m]]
                           + [f"{v:.12g}" for v in self.xis[m]]
                           + [f"{self.p_log[m]:.12g}", q if q == "" else f"{q:.12g}"])


@dataclass(frozen=True)
class ConeRegion:
    """Outgoing/incoming cone: |x| > R, |xi|^2 in J, sign * cos_g0 > -sigma."""

    radius: float
    energy_window: tuple
    sigma: float
    sign: int
    form: SignatureForm

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        lo, hi = self.energy_window
        if not (0 < lo < hi):
            raise ValueError("energy window must have positive endpoints")
        if not (0 < self.sigma < 1):
            raise ValueError("sigma must lie in (0, 1)")
        if self.sign not in (+1, -1):
            raise ValueError("sign must be +1 or -1")


def region_contains(region: ConeRegion, state: PhasePoint) -> bool:
    """Membership in Gamma^(sign)(R, J, sigma); xi = 0 is excluded."""
    x, xi = state.x, state.xi
    rx = np.linalg.norm(x)
    rxi = np.linalg.norm(xi)
    if rxi == 0.0:
        return False
    lo, hi = region.energy_window
    if not (rx > region.radius and lo < rxi ** 2 < hi):
        return False
    cosine = region.form.pair(x, xi) / (rx * rxi)
    return bool(region.sign * cosine > -region.sigma)


def cone_cosine(form: SignatureForm, x, xi):
    """g0(x, xi) / (|x| |xi|), batched."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return form.pair(x, xi) / (np.linalg.norm(x, axis=-1) * np.linalg.norm(xi, axis=-1))


def hamiltonian_rhs(m: MetricField, state: PhasePoint):
    """(xdot, xidot) = (2 g(x) xi, -(xi^T d_l g(x) xi)_l)."""
    xd, xid = _rhs_batch(m, state.x[None, :], state.xi[None, :])
    return xd[0], xid[0]


def _rhs_batch(m: MetricField, X, XI):
    g = m.coeff(X)
    dg = m.coeff_grad(X)
    xdot = 2.0 * np.einsum("...ij,...j->...i", g, XI)
    xidot = -np.einsum("...i,...lij,...j->...l", XI, dg, XI)
    return xdot, xidot


def integrate_flow(m: MetricField, s0: PhasePoint, t_final: float, tol: float = 1e-8,
                   t_eval=None, n_samples: int = 200) -> Trajectory:
    """Adaptive RK5(4) flow from s0 to t_final (either sign), with p/q logs."""
    traj = integrate_flow_batch(m, s0.x[None, :], s0.xi[None, :], t_final, tol,
                                t_eval=t_eval, n_samples=n_samples)[0]
    return traj


def integrate_flow_batch(m: MetricField, X0, XI0, t_final: float, tol: float = 1e-8,
                         t_eval=None, n_samples: int = 200):
    """Integrate a batch of flows as one stacked ODE system.

    Returns a list of Trajectory (shared sample times).  The stacked system
    shares adaptive steps; tolerances are enforced per component.
    """
    if not (1e-12 <= tol <= 1e-4):
        raise ValueError("tol must lie in [1e-12, 1e-4]")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    XI0 = np.atleast_2d(np.asarray(XI0, dtype=float))
    B, n = X0.shape
    y0 = np.concatenate([X0.ravel(), XI0.ravel()])

    def rhs(t, y):
        X = y[: B * n].reshape(B, n)
        XI = y[B * n:].reshape(B, n)
        xd, xid = _rhs_batch(m, X, XI)
        return np.concatenate([xd.ravel(), xid.ravel()])

    if t_eval is None:
        t_eval = np.linspace(0.0, t_final, n_samples)
    else:
        t_eval = np.asarray(t_eval, dtype=float)
    span = (0.0, t_final) if t_final >= 0 else (0.0, t_final)
    # internal tolerance is tightened so that the logged drift meets 100*tol
    rtol = max(tol * 1e-2, 1e-13)
    atol = rtol * max(1.0, np.max(np.abs(y0)))
    sol = solve_ivp(rhs, span, y0, method="RK45", t_eval=t_eval,
                    rtol=rtol, atol=atol, dense_output=False)
    if not sol.success:
        raise RuntimeError(f"stiff or singular flow: integrator failed at t={sol.t[-1] if len(sol.t) else 0.0:.6g}: {sol.message}")
    M = sol.y.shape[1]
    Xs = sol.y[: B * n].reshape(B, n, M)
    XIs = sol.y[B * n:].reshape(B, n, M)

    out = []
    has_q = m.block_split is not None
    for b in range(B):
        xs = Xs[b].T.copy()
        xis = XIs[b].T.copy()
        p_log = principal_symbol(m, xs, xis)
        q_log = conserved_symbol(m, xs, xis) if has_q else None
        out.append(Trajectory(sol.t.copy(), xs, xis, p_log, q_log, tol))
    return out


# ---------------------------------------------------------------------------
# trajectory estimate checks
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    """Empirical constants for one trajectory against the cone estimates."""

    e0_hat: float           # min_t |z(t)| / (|x| + |t||xi|)
    c1_hat: float           # max_t |zeta(t) - xi| * <x>^mu
    c1p_hat: float          # max_t |z - x - 2 t I_k xi| * <x>^mu / max(|t|, eps)
    max_dev: float          # max_t |zeta(t) - xi|
    start_radius: float
    block_outgoing: Optional[tuple] = None   # per-block radial alignment flags


def check_trajectory_bounds(traj: Trajectory, region: ConeRegion, m: MetricField,
                            eps: float = 1e-9) -> BoundReport:
    """Evaluate the escape and momentum-deviation estimates along a trajectory."""
    start = traj.initial
    if not region_contains(region, start):
        raise ValueError("initial state lies outside the cone region")
    if np.sign(traj.times[-1]) * region.sign < 0:
        raise ValueError("trajectory direction does not match the region sign")
    form = region.form
    x0, xi0 = start.x, start.xi
    t = traj.times
    rz = np.linalg.norm(traj.xs, axis=1)
    denom = np.linalg.norm(x0) + np.abs(t) * np.linalg.norm(xi0)
    e0 = float(np.min(rz / denom))
    dev = np.linalg.norm(traj.xis - xi0[None, :], axis=1)
    br = bracket(x0)
    c1 = float(np.max(dev) * br ** m.mu)
    free = x0[None, :] + 2.0 * t[:, None] * form.reflect(xi0)[None, :]
    posdev = np.linalg.norm(traj.xs - free, axis=1)
    c1p = float(np.max(posdev * br ** m.mu / np.maximum(np.abs(t), eps)))
    flags = None
    if m.block_split is not None:
        n1, _ = m.block_split
        a1 = float(np.dot(x0[:n1], xi0[:n1]))
        a2 = float(-np.dot(x0[n1:], xi0[n1:]))     # block 2 runs the reversed flow
        s = region.sign
        flags = (s * a1 >= 0.0, s * a2 >= 0.0)
    return BoundReport(e0, c1, c1p, float(np.max(dev)), float(np.linalg.norm(x0)),
                       block_outgoing=flags)


@dataclass
class BatchBoundReport:
    reports: list
    e0_min: float
    c1_max: float
    scaling_slope: float        # robust slope of log max-deviation vs log <x>
    scaling_slope_lsq: float
    n_samples: int
    passed: bool

    def summary_lines(self):
        return [
            f"e0_min = {self.e0_min:.4f}",
            f"c1_max = {self.c1_max:.4f}",
            f"deviation scaling slope (Theil-Sen) = {self.scaling_slope:.4f}",
            f"deviation scaling slope (least squares) = {self.scaling_slope_lsq:.4f}",
        ]


def outgoing_samples(region: ConeRegion, n: int, seed: int = 0, radial_decades: float = 1.5):
    """Low-discrepancy phase points inside the cone region.

    Halton samples over (log radius, position direction, energy, momentum
    direction), rejecting draws outside the cone.  Deterministic per seed.
    """
    form = region.form
    dim = form.dim
    lo, hi = region.energy_window
    eng = qmc.Halton(d=2 * dim + 2, scramble=True, seed=seed)
    xs, xis = [], []
    guard = 0
    while len(xs) < n and guard < 400 * n:
        u = eng.random(1)[0]
        guard += 1
        r = region.radius * 1.05 * 10.0 ** (u[0] * radial_decades)
        theta = _dir_from_unit(u[1:dim + 1], dim)
        en = lo + (hi - lo) * u[dim + 1]
        psi = _dir_from_unit(u[dim + 2:2 * dim + 2], dim)
        x = r * theta
        xi = np.sqrt(en) * psi
        if region_contains(region, PhasePoint(x, xi)):
            xs.append(x)
            xis.append(xi)
    if len(xs) < n:
        raise RuntimeError("cone sampler failed to reach the requested count")
    return np.array(xs), np.array(xis)


def _dir_from_unit(u, dim):
    from scipy.special import erfinv
    z = np.sqrt(2.0) * erfinv(np.clip(2 * np.asarray(u) - 1, -1 + 1e-12, 1 - 1e-12))
    nrm = np.linalg.norm(z)
    return z / nrm if nrm > 0 else np.eye(dim)[0]


def _theil_sen(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slopes = []
    for i in range(len(x)):
        dx = x[i + 1:] - x[i]
        dy = y[i + 1:] - y[i]
        good = np.abs(dx) > 1e-12
        slopes.extend((dy[good] / dx[good]).tolist())
    return float(np.median(slopes)) if slopes else 0.0


def batch_trajectory_bounds(m: MetricField, region: ConeRegion, n_samples: int = 100,
                            tol: float = 1e-8, horizon_factor: float = 4.0,
                            seed: int = 0) -> BatchBoundReport:
    """Run a cone batch, report worst constants and the deviation scaling slope.

    The slope is fitted robustly (Theil-Sen) of log max|zeta - xi| against
    log <x>: samples whose trajectories cross a block origin carry order-one
    deviations and would otherwise dominate the least-squares fit.
    """
    X0, XI0 = outgoing_samples(region, n_samples, seed=seed)
    reports = []
    # one stacked integration per radius scale keeps times comparable
    r0 = np.linalg.norm(X0, axis=1)
    t_final = region.sign * horizon_factor * (r0.max() / np.sqrt(region.energy_window[0]))
    trajs = integrate_flow_batch(m, X0, XI0, t_final, tol, n_samples=400)
    for traj in trajs:
        reports.append(check_trajectory_bounds(traj, region, m))
    e0_min = min(r.e0_hat for r in reports)
    c1_max = max(r.c1_hat for r in reports)
    logs = np.log([bracket(r0_) for r0_ in r0])
    logd = np.log([max(r.max_dev, 1e-300) for r in reports])
    slope_ts = _theil_sen(logs, logd)
    slope_lsq = float(np.polyfit(logs, logd, 1)[0]) if len(logs) > 1 else 0.0
    passed = e0_min > 0.0
    return BatchBoundReport(reports, e0_min, c1_max, slope_ts, slope_lsq,
                            n_samples, passed)


# ---------------------------------------------------------------------------
# non-trapping falsifier
# ---------------------------------------------------------------------------

@dataclass
class TrappingVerdict:
    trapped: bool
    flagged: list               # indices of samples not escaped by t_max
    inconclusive: list          # integrator failures
    escape_times: np.ndarray    # +inf when not escaped
    samples: tuple              # (X0, XI0)
    trajectories: dict          # flagged index -> Trajectory

    @property
    def message(self):
        if self.trapped:
            return f"trapping detected or not escaped: samples {self.flagged}"
        if self.inconclusive:
            return f"no trapping detected ({len(self.inconclusive)} inconclusive)"
        return "no trapping detected"


def nontrapping_scan(m: MetricField, shell=(0.5, 2.0), n_samples: int = 32,
                     t_max: float = 1000.0, escape_radius: Optional[float] = None,
                     inner_radius: float = 5.0, seed: int = 0,
                     tol: float = 1e-8) -> TrappingVerdict:
    """Falsify the escape condition from quasi-random interior phase points.

    Integrates forward and backward until |z| exceeds escape_radius or |t|
    reaches t_max.  A falsifier, not a prover.
    """
    if n_samples < 1 or t_max <= 0:
        raise ValueError("need n_samples >= 1 and t_max > 0")
    dim = m.dim
    eng = qmc.Halton(d=2 * dim + 1, scramble=True, seed=seed)
    u = eng.random(n_samples)
    X0 = (2.0 * u[:, :dim] - 1.0) * inner_radius
    dirs = np.array([_dir_from_unit(u[i, dim:2 * dim], dim) for i in range(n_samples)])
    en = shell[0] + (shell[1] - shell[0]) * u[:, 2 * dim]
    XI0 = np.sqrt(en)[:, None] * dirs
    if escape_radius is None:
        escape_radius = 10.0 * (np.max(np.linalg.norm(X0, axis=1)) + 1.0)

    flagged, inconclusive = [], []
    esc = np.full(n_samples, np.inf)
    trajs = {}
    for i in range(n_samples):
        worst = 0.0
        ok = True
        for sgn in (+1.0, -1.0):
            try:
                t_esc, traj = _escape_time(m, X0[i], XI0[i], sgn * t_max,
                                           escape_radius, tol)
            except RuntimeError:
                inconclusive.append(i)
                ok = False
                break
            if t_esc is None:
                flagged.append(i)
                trajs[i] = traj
                ok = False
                break
            worst = max(worst, abs(t_esc))
        if ok:
            esc[i] = worst
    return TrappingVerdict(bool(flagged), flagged, inconclusive, esc,
                           (X0, XI0), trajs)


def _escape_time(m, x0, xi0, t_final, escape_radius, tol):
    B = 1
    n = m.dim
    y0 = np.concatenate([x0, xi0])

    def rhs(t, y):
        xd, xid = _rhs_batch(m, y[None, :n], y[None, n:])
        return np.concatenate([xd[0], xid[0]])

    def escaped(t, y):
        return np.linalg.norm(y[:n]) - escape_radius
    escaped.terminal = True
    escaped.direction = 1.0

    rtol = max(tol * 1e-2, 1e-13)
    sol = solve_ivp(rhs, (0.0, t_final), y0, method="RK45", events=escaped,
                    rtol=rtol, atol=rtol, dense_output=False, max_step=abs(t_final) / 4)
    if not sol.success:
        raise RuntimeError("integrator failure during scan")
    if len(sol.t_events[0]):
        return float(sol.t_events[0][0]), None
    # not escaped within the horizon: attach the sampled trajectory
    ts = sol.t
    xs = sol.y[:n].T
    xis = sol.y[n:].T
    p_log = principal_symbol(m, xs, xis)
    q_log = conserved_symbol(m, xs, xis) if m.block_split is not None else None
    return None, Trajectory(ts, xs, xis, p_log, q_log, tol)
