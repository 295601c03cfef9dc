"""Long-time generating phases on outgoing/incoming cones.

The phase S(x, zeta) = x . zeta + int_0^inf [p(x, xi(t, x, zeta)) -
p(x_ref, xi(t, x_ref, zeta))] dt is built from momentum-map inversion along
the Hamiltonian flow.  The integrand decays like t^(-1-mu); the quadrature
substitutes tau = t^(-mu) on the far range and corrects the truncated tail
with a two-term fitted power law, so that raw truncation never has to reach
the (astronomically large) horizon a bare t^(-mu) tail bound would demand.
All heavy steps run on stacked sample batches through one vectorized ODE.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .hamflow import ConeRegion, PhasePoint, region_contains, _rhs_batch
from .metric import MetricField, bracket, principal_symbol


class InversionError(RuntimeError):
    """Momentum-map inversion left its contraction basin."""


def _flow_momentum_batch(m: MetricField, X, XI, t, rtol=1e-11):
    """Final momenta zeta(t, x, xi) for a stacked batch, one integration."""
    X = np.atleast_2d(X)
    XI = np.atleast_2d(XI)
    B, n = X.shape
    if t == 0.0:
        return XI.copy()
    y0 = np.concatenate([X.ravel(), XI.ravel()])

    def rhs(s, y):
        xd, xid = _rhs_batch(m, y[: B * n].reshape(B, n), y[B * n:].reshape(B, n))
        return np.concatenate([xd.ravel(), xid.ravel()])

    sol = solve_ivp(rhs, (0.0, t), y0, method="RK45", rtol=rtol, atol=rtol)
    if not sol.success:
        raise RuntimeError(f"flow integration failed at t={t:.3g}")
    return sol.y[B * n:, -1].reshape(B, n)


def momentum_preimage_batch(m: MetricField, t, X, Zeta, tol=1e-9, seed_XI=None,
                            max_iter=50):
    """Solve zeta(t, x, xi) = Zeta for xi on a batch, by damped fixed point.

    The map xi -> zeta(t,x,xi) is a small perturbation of the identity on the
    cones, so xi <- xi - (zeta - Zeta) contracts.  Iteration runs on the
    still-active subset only and stops early when the residual stagnates at
    the integrator's accuracy floor.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zeta = np.atleast_2d(np.asarray(Zeta, dtype=float))
    XI = Zeta.copy() if seed_XI is None else np.atleast_2d(np.asarray(seed_XI, dtype=float)).copy()
    B = X.shape[0]
    XI_best = XI.copy()
    active = np.ones(B, dtype=bool)
    res_per = np.full(B, np.inf)
    best_per = np.full(B, np.inf)
    stalls = np.zeros(B, dtype=int)
    R_prev = np.zeros_like(XI)
    have_prev = np.zeros(B, dtype=bool)
    floor = 100.0 * tol     # stagnation near here means the integrator's floor
    for it in range(max_iter):
        Z = _flow_momentum_batch(m, X[active], XI[active], t)
        R = np.zeros_like(XI)
        R[active] = Z - Zeta[active]
        r = np.linalg.norm(R[active], axis=1)
        res_per[active] = r
        if not np.all(np.isfinite(r)) or np.any(r > 10.0 * best_per[active] + 1.0):
            raise InversionError(f"inversion failed (diverging residual at t={t:.3g})")
        improved = res_per < best_per
        XI_best[active & improved] = XI[active & improved]
        stalls[active] = np.where((r > 0.5 * best_per[active]) & (r < floor),
                                  stalls[active] + 1, 0)
        best_per = np.minimum(best_per, res_per)
        # secant mixing along the residual change accelerates the near-identity map
        beta = np.ones(B)
        upd = active & have_prev
        if upd.any():
            dR = R[upd] - R_prev[upd]
            denom = np.sum(dR * dR, axis=1)
            num = np.sum(R[upd] * dR, axis=1)
            b = np.where(denom > 0, num / np.maximum(denom, 1e-300), 1.0)
            beta[upd] = np.clip(b, 0.25, 4.0)
        XI[active] = XI[active] - beta[active, None] * R[active]
        R_prev[active] = R[active]
        have_prev[active] = True
        done = (res_per <= tol) | (stalls >= 2)
        active = active & ~done
        if not active.any():
            return XI_best, float(np.max(best_per))
    raise InversionError(
        f"inversion failed (residual {np.max(res_per[active]):.3g} after {max_iter} iterations)")


def inverse_momentum(m: MetricField, t, x, zeta, tol=1e-10):
    """xi with zeta(t, x, xi) = zeta; Newton-type iteration seeded at zeta."""
    XI, _ = momentum_preimage_batch(m, t, np.asarray(x)[None, :],
                                    np.asarray(zeta)[None, :], tol=tol)
    return XI[0]


def hj_phase(m: MetricField, t, x, zeta, tol=1e-9, max_nodes=96):
    """Finite-time phase x.zeta + int_0^t p(x, xi(s,x,zeta)) ds.

    Composite Gauss-Legendre in s with doubling until the value settles.
    Returns (phi, dphi_dt) where dphi_dt = p(x, xi(t,x,zeta)).
    """
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if t == 0.0:
        return float(np.dot(x, zeta)), float(principal_symbol(m, x, zeta))
    prev = None
    nseg = 2
    while True:
        val = _gauss_phase_integral(m, t, x, zeta, nseg)
        if prev is not None and abs(val - prev) <= tol * (1.0 + abs(val)):
            break
        if 8 * nseg > max_nodes:
            break
        prev = val
        nseg *= 2
    xi_t = inverse_momentum(m, t, x, zeta, tol=min(1e-9, tol))
    return float(np.dot(x, zeta) + val), float(principal_symbol(m, x, xi_t))


_GL4 = np.polynomial.legendre.leggauss(4)


def _gauss_phase_integral(m, t, x, zeta, nseg):
    nodes, weights = _GL4
    edges = np.linspace(0.0, t, nseg + 1)
    total = 0.0
    seed = zeta[None, :].copy()
    for a, b in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        for w, s in zip(weights, nodes):
            ts = mid + half * s
            XI, _ = momentum_preimage_batch(m, ts, x[None, :], zeta[None, :],
                                            tol=1e-10, seed_XI=seed)
            seed = XI
            total += w * half * float(principal_symbol(m, x, XI[0]))
    return total


# ---------------------------------------------------------------------------
# the long-time phase
# ---------------------------------------------------------------------------

@dataclass
class PhaseTable:
    """Long-time phase values and gradients on a phase-space sample set."""

    xs: np.ndarray            # (B, n)
    zetas: np.ndarray         # (B, n)
    values: np.ndarray        # (B,)
    grad_x: np.ndarray        # (B, n)
    grad_zeta: Optional[np.ndarray]
    t_trunc: float
    tail_error: np.ndarray    # (B,) estimated truncation error
    region: ConeRegion
    excluded: np.ndarray      # (B,) bool, inversion failed / left patch

    def to_csv(self, path, residuals=None):
        n = self.xs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ([f"x{i+1}" for i in range(n)] + [f"zeta{i+1}" for i in range(n)]
                      + ["S"] + [f"dS_dx{i+1}" for i in range(n)]
                      + ["residual", "t_trunc", "tail_error", "excluded"])
            w.writerow(header)
            for b in range(len(self.values)):
                row = ([f"{v:.12g}" for v in self.xs[b]]
                       + [f"{v:.12g}" for v in self.zetas[b]]
                       + [f"{self.values[b]:.12g}"]
                       + [f"{v:.12g}" for v in self.grad_x[b]]
                       + ["" if residuals is None else f"{residuals[b]:.6g}",
                          f"{self.t_trunc:.6g}", f"{self.tail_error[b]:.3g}",
                          str(bool(self.excluded[b]))])
                w.writerow(row)


def _time_nodes(mu, t_near=4.0, t_mid=48.0, t_max=4000.0, n_near=10,
                n_mid_seg=2, n_mid=6, n_far=17, n_fit=8):
    """Quadrature node layout for int_0^inf of a t^-(1+mu)-tailed integrand.

    Gauss on (0, t_near]; log-segmented Gauss on [t_near, t_mid]; nodes
    uniform in tau = t^-mu on [t_mid, t_max]; geometric fit nodes on
    [t_max/16, t_max] for the tail model.
    """
    gl_n, gl_w = np.polynomial.legendre.leggauss(n_near)
    near_t = 0.5 * t_near * (gl_n + 1.0)
    near_w = 0.5 * t_near * gl_w

    gl_n2, gl_w2 = np.polynomial.legendre.leggauss(n_mid)
    edges = np.geomspace(t_near, t_mid, n_mid_seg + 1)
    mid_t, mid_w = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        mid_t.extend(0.5 * (a + b) + 0.5 * (b - a) * gl_n2)
        mid_w.extend(0.5 * (b - a) * gl_w2)
    mid_t = np.array(mid_t)
    mid_w = np.array(mid_w)

    taus = np.linspace(t_mid ** (-mu), t_max ** (-mu), n_far)
    far_t = taus ** (-1.0 / mu)

    fit_t = np.geomspace(t_max / 16.0, t_max, n_fit)
    return near_t, near_w, mid_t, mid_w, far_t, taus, fit_t


def _integrand_batch(m, X, Xref, Zeta, t_values, tol=1e-10):
    """I(t) = p(x, xi(t,x,zeta)) - p(x_ref, xi(t,x_ref,zeta)) on a time grid.

    Warm starts the inversion across consecutive times; one column of flow
    solves per time value, stacked over the doubled (x, x_ref) batch.
    """
    B = X.shape[0]
    Xall = np.vstack([X, Xref])
    Zall = np.vstack([Zeta, Zeta])
    out = np.zeros((len(t_values), B))
    seed = Zall.copy()
    order = np.argsort(t_values)
    for idx in order:
        t = t_values[idx]
        XI, _ = momentum_preimage_batch(m, t, Xall, Zall, tol=tol, seed_XI=seed)
        seed = XI
        p_all = principal_symbol(m, Xall, XI)
        out[idx] = p_all[:B] - p_all[B:]
    return out


def _fit_tail_model(mu, fit_t, I_fit, n_terms=3):
    """Least-squares I ~ sum_k A_k t^-(1+k*mu) on the fit nodes (columns of I_fit).

    Returns (coef (n_terms, B), integral over [a, inf) per column, fit residuals).
    """
    powers = np.array([1.0 + k * mu for k in range(1, n_terms + 1)])
    basis = np.stack([fit_t ** (-p) for p in powers], axis=1)
    scale = np.linalg.norm(basis, axis=0)
    coef, *_ = np.linalg.lstsq(basis / scale, I_fit, rcond=None)
    coef = coef / scale[:, None]

    def integral_from(a):
        out = np.zeros(coef.shape[1])
        for k, p in enumerate(powers):
            q = p - 1.0
            out = out + coef[k] * a ** (-q) / q
        return out

    resid = I_fit - basis @ coef
    return coef, integral_from, resid


def ik_phase_batch(m: MetricField, X, Zeta, region: ConeRegion, tol=3e-9,
                   t_max=None, n_far=17):
    """Long-time phases S(x, zeta) for a batch, with tail-corrected truncation.

    Returns (S, tail_error, excluded).  The far-range tail model acts as a
    control variate: a fitted power law is integrated exactly from the mid
    range to infinity and only the (rapidly decaying) remainder is left to
    the quadrature.  The horizon scales with the batch's largest radius: the
    integrand enters its power-law regime only once both trajectories are far
    out, i.e. for t beyond |x| / |zeta|.  Excluded samples are those whose
    momentum inversion failed (outside the diffeomorphism patch).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zeta = np.atleast_2d(np.asarray(Zeta, dtype=float))
    B = X.shape[0]
    sgn = float(region.sign)
    Xref = 2.0 * region.radius * sgn * region.form.reflect(Zeta)
    if t_max is None:
        r_max = float(np.max(np.linalg.norm(X, axis=1)))
        t_max = max(600.0, 4.0 * r_max / np.sqrt(region.energy_window[0]))
    near_t, near_w, mid_t, mid_w, far_t, taus, fit_t = _time_nodes(m.mu, t_max=t_max,
                                                                   n_far=n_far)
    t_mid_edge = far_t[0]
    t_all = np.concatenate([near_t, mid_t, far_t, fit_t]) * sgn

    excluded = np.zeros(B, dtype=bool)
    I_all = np.zeros((len(t_all), B))
    try:
        I_all = _integrand_batch(m, X, Xref, Zeta, t_all, tol=tol)
    except InversionError:
        for b in range(B):
            try:
                I_all[:, b] = _integrand_batch(m, X[b:b + 1], Xref[b:b + 1],
                                               Zeta[b:b + 1], t_all, tol=tol)[:, 0]
            except InversionError:
                excluded[b] = True
    k0, k1 = len(near_t), len(near_t) + len(mid_t)
    k2 = k1 + len(far_t)
    I_near, I_mid, I_far, I_fit = I_all[:k0], I_all[k0:k1], I_all[k1:k2], I_all[k2:]

    S_near = near_w @ I_near + mid_w @ I_mid

    coef3, integral3, resid3 = _fit_tail_model(m.mu, fit_t, I_fit, n_terms=3)
    coef2, integral2, _ = _fit_tail_model(m.mu, fit_t, I_fit, n_terms=2)

    # remainder after subtracting the model, integrated in tau = t^-mu
    basis_far = np.stack([np.abs(far_t) ** (-(1.0 + k * m.mu)) for k in (1, 2, 3)], axis=1)
    R_far = I_far - basis_far @ coef3
    g = R_far * (np.abs(far_t) ** (1.0 + m.mu))[:, None] / m.mu
    S_rem = -_simpson_nonuniform(taus, g)
    S_model = integral3(t_mid_edge)
    # only the range beyond t_max is pure extrapolation; the quadrature
    # absorbs model misfit on [t_mid, t_max]
    tail_err = (np.abs(integral3(t_max) - integral2(t_max))
                + np.max(np.abs(resid3), axis=0) * t_max ** (-m.mu) / m.mu)

    S = np.einsum("bi,bi->b", X, Zeta) + sgn * (S_near + S_rem + S_model)
    S[excluded] = np.nan
    return S, tail_err, excluded


def _simpson_nonuniform(x, y):
    """Integral over a monotone grid (columns of y), composite trapezoid-Simpson."""
    from scipy.integrate import simpson
    return simpson(y, x=x, axis=0)


def ik_phase(m: MetricField, x, zeta, region: ConeRegion, tol=3e-9,
             grad_step=0.05, t_max=None):
    """(S, grad_x S) at one sample; gradient by centered differences."""
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if not region_contains(region, PhasePoint(x, zeta)):
        raise ValueError("sample lies outside the cone region")
    n = len(x)
    pts = [x]
    for i in range(n):
        e = np.zeros(n)
        e[i] = grad_step
        pts.extend([x + e, x - e])
    X = np.array(pts)
    Z = np.tile(zeta, (len(pts), 1))
    S, tail_err, excl = ik_phase_batch(m, X, Z, region, tol=tol, t_max=t_max)
    if excl.any():
        raise InversionError("inversion failed during gradient stencil")
    grad = np.array([(S[1 + 2 * i] - S[2 + 2 * i]) / (2 * grad_step) for i in range(n)])
    return float(S[0]), grad


def build_phase_table(m: MetricField, X, Zeta, region: ConeRegion, tol=3e-9,
                      grad_step=0.05, t_max=None, with_zeta_grad=False) -> PhaseTable:
    """Phases and centered-difference gradients for a sample set, one big batch."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zeta = np.atleast_2d(np.asarray(Zeta, dtype=float))
    B, n = X.shape
    if t_max is None:
        r_max = float(np.max(np.linalg.norm(X, axis=1)))
        t_max = max(600.0, 4.0 * r_max / np.sqrt(region.energy_window[0]))
    stencil = [(X, Zeta)]
    for i in range(n):
        e = np.zeros(n)
        e[i] = grad_step
        stencil.append((X + e, Zeta))
        stencil.append((X - e, Zeta))
    if with_zeta_grad:
        for i in range(n):
            e = np.zeros(n)
            e[i] = grad_step
            stencil.append((X, Zeta + e))
            stencil.append((X, Zeta - e))
    Xs = np.vstack([s[0] for s in stencil])
    Zs = np.vstack([s[1] for s in stencil])
    S, tail_err, excl = ik_phase_batch(m, Xs, Zs, region, tol=tol, t_max=t_max)
    S = S.reshape(len(stencil), B)
    excl = excl.reshape(len(stencil), B).any(axis=0)
    tail = tail_err.reshape(len(stencil), B).max(axis=0)
    grad_x = np.stack([(S[1 + 2 * i] - S[2 + 2 * i]) / (2 * grad_step)
                       for i in range(n)], axis=1)
    grad_z = None
    if with_zeta_grad:
        off = 1 + 2 * n
        grad_z = np.stack([(S[off + 2 * i] - S[off + 2 * i + 1]) / (2 * grad_step)
                           for i in range(n)], axis=1)
    return PhaseTable(X, Zeta, S[0], grad_x, grad_z, t_max, tail, region, excl)


@dataclass
class ResidualStats:
    max: float
    median: float
    values: np.ndarray
    n_excluded: int

    def passed(self, tol_eik=1e-4):
        return self.max <= tol_eik


def eikonal_residual(m: MetricField, table: PhaseTable) -> ResidualStats:
    """rho = |grad_x S . g(x) grad_x S - g0(zeta, zeta)| per table sample."""
    ok = ~table.excluded
    g = m.coeff(table.xs[ok])
    lhs = np.einsum("bi,bij,bj->b", table.grad_x[ok], g, table.grad_x[ok])
    rhs = table.region.form.quad(table.zetas[ok])
    rho = np.abs(lhs - rhs)
    return ResidualStats(float(rho.max()), float(np.median(rho)), rho,
                         int(table.excluded.sum()))


def phase_decay_slope(m: MetricField, region: ConeRegion, direction, zeta,
                      radii, tol=3e-9, t_max=None):
    """Fitted slope of log |S - x.zeta| vs log <x> along a radial ray."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    X = np.array([r * direction for r in radii])
    Z = np.tile(np.asarray(zeta, dtype=float), (len(radii), 1))
    S, _, excl = ik_phase_batch(m, X, Z, region, tol=tol, t_max=t_max)
    dev = np.abs(S - X @ np.asarray(zeta))
    ok = (~excl) & (dev > 1e-14)
    if ok.sum() < 3:
        raise RuntimeError("not enough valid ray samples for a decay fit")
    slope = np.polyfit(np.log(bracket(X[ok])), np.log(dev[ok]), 1)[0]
    return float(slope), dev


# ---------------------------------------------------------------------------
# smooth cutoffs and the blended global phase
# ---------------------------------------------------------------------------

def _smoothstep(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=float), -1.0, 2.0)
    def f(u):
        out = np.zeros_like(u)
        pos = u > 0
        out[pos] = np.exp(-1.0 / u[pos])
        return out
    a = f(s)
    b = f(1.0 - s)
    return a / (a + b)


@dataclass(frozen=True)
class ConeCutoff:
    """Smooth phase-space cutoff supported in a cone region."""

    region: ConeRegion
    radial_spread: float = 0.5      # transition |x| in [R, R(1+spread)]
    energy_spread: float = 0.25
    angle_spread: float = 0.15

    def __call__(self, X, XI):
        X = np.asarray(X, dtype=float)
        XI = np.asarray(XI, dtype=float)
        r = np.linalg.norm(X, axis=-1)
        R = self.region.radius
        chi_r = _smoothstep((r / R - 1.0) / self.radial_spread)
        e = np.sum(XI * XI, axis=-1)
        lo, hi = self.region.energy_window
        the = (_smoothstep((e - lo) / (self.energy_spread * lo))
               * _smoothstep((hi - e) / (self.energy_spread * hi)))
        rxi = np.sqrt(np.maximum(e, 1e-300))
        cosine = self.region.form.pair(X, XI) / np.maximum(r * rxi, 1e-300)
        kap = _smoothstep((self.region.sign * cosine + self.region.sigma)
                          / self.angle_spread)
        return chi_r * the * kap
