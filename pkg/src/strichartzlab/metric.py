"""Non-degenerate signature metrics: built-in families, symbols, decay checks.

A metric here is the coefficient matrix g^{ij}(x) of the divergence-form
generator, symmetric with a fixed number of negative eigenvalues.  All
evaluators are vectorized: x may carry arbitrary leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


def bracket(x, axis=-1):
    """Smoothed radius sqrt(1 + |x|^2), batched over leading axes."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 + np.sum(x * x, axis=axis))


@dataclass(frozen=True)
class SignatureForm:
    """The constant form g0(x, y) = x^T I_k y with k trailing minus signs."""

    dim: int
    neg_count: int

    @property
    def matrix(self):
        d = np.ones(self.dim)
        if self.neg_count:
            d[self.dim - self.neg_count:] = -1.0
        return np.diag(d)

    @property
    def signs(self):
        d = np.ones(self.dim)
        if self.neg_count:
            d[self.dim - self.neg_count:] = -1.0
        return d

    def pair(self, x, y):
        """g0(x, y), batched."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.sum(x * self.signs * y, axis=-1)

    def quad(self, xi):
        """g0(xi, xi), batched."""
        return self.pair(xi, xi)

    def reflect(self, x):
        """I_k x, batched."""
        return np.asarray(x, dtype=float) * self.signs


@dataclass(frozen=True)
class MetricField:
    """Coefficient field g^{ij}(x) with analytic first and second derivatives.

    coeff:      x (..., n)        -> (..., n, n)
    coeff_grad: x (..., n)        -> (..., n, n, n)   [l, i, j] = d_l g^{ij}
    coeff_hess: x (..., n)        -> (..., n, n, n, n) [l, m, i, j]
    block_split: (n1, n2) when g = g1(x') (+) (-g2(x'')) block-diagonally,
    which is the family carrying a conserved elliptic symbol q = p1 + p2.
    """

    dim: int
    neg_count: int
    mu: float
    coeff: Callable
    coeff_grad: Callable
    coeff_hess: Callable
    block_split: Optional[tuple] = None
    label: str = "custom"

    @property
    def signature(self) -> SignatureForm:
        return SignatureForm(self.dim, self.neg_count)

    def __post_init__(self):
        if not (0 <= self.neg_count <= self.dim):
            raise ValueError("neg_count must lie in [0, dim]")
        if not (0.0 < self.mu < 1.0):
            raise ValueError("decay exponent mu must lie in (0, 1)")
        if self.block_split is not None:
            n1, n2 = self.block_split
            if n1 + n2 != self.dim or n2 != self.neg_count:
                raise ValueError("block_split must satisfy n1 + n2 = dim, n2 = neg_count")


def principal_symbol(m: MetricField, x, xi):
    """p(x, xi) = xi^T g(x) xi, batched."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.shape[-1] != m.dim or xi.shape[-1] != m.dim:
        raise ValueError("dimension mismatch between metric and phase point")
    g = m.coeff(x)
    return np.einsum("...i,...ij,...j->...", xi, g, xi)


def conserved_symbol(m: MetricField, x, xi):
    """q(x, xi) = p1 + p2 for block metrics; elliptic and Poisson-commuting with p."""
    if m.block_split is None:
        raise ValueError("no conserved symbol available for this family (block_split unset)")
    n1, _ = m.block_split
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    g = m.coeff(x)
    g1 = g[..., :n1, :n1]
    g2 = -g[..., n1:, n1:]
    q1 = np.einsum("...i,...ij,...j->...", xi[..., :n1], g1, xi[..., :n1])
    q2 = np.einsum("...i,...ij,...j->...", xi[..., n1:], g2, xi[..., n1:])
    return q1 + q2


def poisson_bracket(f, g, x, xi, fd_step=1e-4):
    """Central-difference {f, g} = sum_i d_xi f d_x g - d_x f d_xi g at (x, xi)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    n = x.shape[-1]
    total = 0.0
    for i in range(n):
        ex = np.zeros(n)
        ex[i] = fd_step
        df_dxi = (f(x, xi + ex) - f(x, xi - ex)) / (2 * fd_step)
        dg_dx = (g(x + ex, xi) - g(x - ex, xi)) / (2 * fd_step)
        df_dx = (f(x + ex, xi) - f(x - ex, xi)) / (2 * fd_step)
        dg_dxi = (g(x, xi + ex) - g(x, xi - ex)) / (2 * fd_step)
        total = total + df_dxi * dg_dx - df_dx * dg_dxi
    return total


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def _zero_grad(dim):
    def grad(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim))
    return grad


def _zero_hess(dim):
    def hess(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
    return hess


def flat_metric(dim: int, neg_count: int) -> MetricField:
    """g(x) = I_k, the constant signature matrix."""
    sig = SignatureForm(dim, neg_count)
    signs = sig.signs

    def coeff(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        idx = np.arange(dim)
        out[..., idx, idx] = signs
        return out

    split = (dim - neg_count, neg_count) if 0 < neg_count < dim or neg_count in (0, dim) else None
    return MetricField(dim, neg_count, 0.5, coeff, _zero_grad(dim), _zero_hess(dim),
                       block_split=(dim - neg_count, neg_count), label="flat")


class _RadialProfile:
    """w(r) = amp * (1 + r^2)^(-mu/2) + well * exp(-r^2 / width^2), with derivatives.

    The power term carries the long-range tail, the Gaussian term an optional
    compact feature.  Exposed as functions of the squared radius s = r^2.
    """

    def __init__(self, amp, mu, well=0.0, width=1.0):
        self.amp = amp
        self.mu = mu
        self.well = well
        self.width = width

    def value(self, s):
        v = self.amp * (1.0 + s) ** (-self.mu / 2.0)
        if self.well:
            v = v + self.well * np.exp(-s / self.width ** 2)
        return v

    def d1(self, s):
        v = self.amp * (-self.mu / 2.0) * (1.0 + s) ** (-self.mu / 2.0 - 1.0)
        if self.well:
            v = v - self.well / self.width ** 2 * np.exp(-s / self.width ** 2)
        return v

    def d2(self, s):
        v = self.amp * (self.mu / 2.0) * (self.mu / 2.0 + 1.0) * (1.0 + s) ** (-self.mu / 2.0 - 2.0)
        if self.well:
            v = v + self.well / self.width ** 4 * np.exp(-s / self.width ** 2)
        return v


def _conformal_block(dims, profiles, signs_per_block, mu, neg_count, label):
    """Assemble g = (+/-) (1 + w_b(|x_b|^2)) I on each block, with derivatives."""
    dim = sum(dims)
    starts = np.cumsum([0] + list(dims))[:-1]

    def coeff(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for b, (d, pr, sgn) in enumerate(zip(dims, profiles, signs_per_block)):
            lo = starts[b]
            xb = x[..., lo:lo + d]
            s = np.sum(xb * xb, axis=-1)
            diag = sgn * (1.0 + pr.value(s))
            for i in range(d):
                out[..., lo + i, lo + i] = diag
        return out

    def coeff_grad(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        for b, (d, pr, sgn) in enumerate(zip(dims, profiles, signs_per_block)):
            lo = starts[b]
            xb = x[..., lo:lo + d]
            s = np.sum(xb * xb, axis=-1)
            dv = sgn * pr.d1(s)
            for l in range(d):
                dl = dv * 2.0 * xb[..., l]
                for i in range(d):
                    out[..., lo + l, lo + i, lo + i] = dl
        return out

    def coeff_hess(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
        for b, (d, pr, sgn) in enumerate(zip(dims, profiles, signs_per_block)):
            lo = starts[b]
            xb = x[..., lo:lo + d]
            s = np.sum(xb * xb, axis=-1)
            d1 = sgn * pr.d1(s)
            d2 = sgn * pr.d2(s)
            for l in range(d):
                for mmi in range(d):
                    dlm = d2 * 4.0 * xb[..., l] * xb[..., mmi]
                    if l == mmi:
                        dlm = dlm + 2.0 * d1
                    for i in range(d):
                        out[..., lo + l, lo + mmi, lo + i, lo + i] = dlm
        return out

    split = (dims[0], dims[1]) if len(dims) == 2 else None
    return MetricField(dim, neg_count, mu, coeff, coeff_grad, coeff_hess,
                       block_split=split, label=label)


def block_long_range(n1: int, n2: int, mu: float = 0.5, amp1: float = 0.12,
                     amp2: float = 0.08, well1: float = 0.0, well_width: float = 1.5,
                     decay1: float = None, decay2: float = None,
                     label: str = "block_long_range") -> MetricField:
    """g = g1(x') (+) (-g2(x'')) with conformal long-range blocks.

    g1 = (1 + amp1 <x'>^-decay1 [+ well1 exp(-|x'|^2/w^2)]) Id, similarly g2.
    decay defaults to the declared mu; a faster profile decay still satisfies
    the declared rate.  The conserved symbol q = p1 + p2 Poisson-commutes
    with p because each block's flow is autonomous in its own variables.
    """
    pr1 = _RadialProfile(amp1, mu if decay1 is None else decay1, well=well1, width=well_width)
    pr2 = _RadialProfile(amp2, mu if decay2 is None else decay2)
    return _conformal_block([n1, n2], [pr1, pr2], [1.0, -1.0], mu, n2, label)


def conformal_well(dim: int, neg_count: int, depth: float = -0.9,
                   width: float = 2.0) -> MetricField:
    """g = (1 + depth exp(-|x|^2/width^2)) I_k, a compact conformal feature.

    depth in (-1, 0) carves a well of the coefficient (slow region, trapping
    candidate for neg_count = 0); depth > 0 is a fast bump.  Long-range decay
    is trivially satisfied (Gaussian tails).
    """
    if depth <= -1.0:
        raise ValueError("depth <= -1 makes the metric degenerate")
    sig = SignatureForm(dim, neg_count)
    signs = sig.signs
    pr = _RadialProfile(0.0, 0.5, well=depth, width=width)

    def coeff(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        v = 1.0 + pr.value(s)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for i in range(dim):
            out[..., i, i] = signs[i] * v
        return out

    def coeff_grad(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        d1 = pr.d1(s)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        for l in range(dim):
            dl = d1 * 2.0 * x[..., l]
            for i in range(dim):
                out[..., l, i, i] = signs[i] * dl
        return out

    def coeff_hess(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        d1 = pr.d1(s)
        d2 = pr.d2(s)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
        for l in range(dim):
            for mmi in range(dim):
                dlm = d2 * 4.0 * x[..., l] * x[..., mmi]
                if l == mmi:
                    dlm = dlm + 2.0 * d1
                for i in range(dim):
                    out[..., l, mmi, i, i] = signs[i] * dlm
        return out

    return MetricField(dim, neg_count, 0.5, coeff, coeff_grad, coeff_hess,
                       block_split=None, label="conformal_well")


def ring_well(dim: int, neg_count: int = 0, depth: float = -0.9, r0: float = 3.0,
              width: float = 1.0) -> MetricField:
    """g = (1 + depth exp(-(|x| - r0)^2 / width^2)) I_k, a slow annulus.

    For neg_count = 0 and depth near -1 the annulus acts as a circular
    waveguide: it carries a stable closed geodesic, so the flow is trapping.
    A radially centered Gaussian well never traps conformal rays (the Bouguer
    invariant r n(r) stays monotone for any depth > -1), hence the ring.
    """
    if depth <= -1.0:
        raise ValueError("depth <= -1 makes the metric degenerate")
    sig = SignatureForm(dim, neg_count)
    signs = sig.signs

    def _prof(r):
        e = np.exp(-((r - r0) / width) ** 2)
        v = depth * e
        d1 = depth * e * (-2.0 * (r - r0) / width ** 2)
        d2 = depth * e * (4.0 * (r - r0) ** 2 / width ** 4 - 2.0 / width ** 2)
        return v, d1, d2

    def coeff(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        v, _, _ = _prof(r)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for i in range(dim):
            out[..., i, i] = signs[i] * (1.0 + v)
        return out

    def coeff_grad(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.maximum(r, 1e-12)
        _, d1, _ = _prof(r)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        for l in range(dim):
            dl = d1 * x[..., l] / rs
            for i in range(dim):
                out[..., l, i, i] = signs[i] * dl
        return out

    def coeff_hess(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        rs = np.maximum(r, 1e-12)
        _, d1, d2 = _prof(r)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
        for l in range(dim):
            for mmi in range(dim):
                dlm = (d2 - d1 / rs) * x[..., l] * x[..., mmi] / rs ** 2
                if l == mmi:
                    dlm = dlm + d1 / rs
                for i in range(dim):
                    out[..., l, mmi, i, i] = signs[i] * dlm
        return out

    return MetricField(dim, neg_count, 0.5, coeff, coeff_grad, coeff_hess,
                       block_split=None, label="ring_well")


def diag_well(dim: int, neg_count: int, depth: float = -0.9,
              width: float = 1.0, axis: int = 0) -> MetricField:
    """Perturb a single diagonal entry: g^{aa} = s_a (1 + depth exp(-|x|^2/w^2))."""
    if depth <= -1.0:
        raise ValueError("depth <= -1 makes the metric degenerate")
    sig = SignatureForm(dim, neg_count)
    signs = sig.signs
    pr = _RadialProfile(0.0, 0.5, well=depth, width=width)

    def coeff(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        for i in range(dim):
            out[..., i, i] = signs[i]
        out[..., axis, axis] = signs[axis] * (1.0 + pr.value(s))
        return out

    def coeff_grad(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        d1 = pr.d1(s)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        for l in range(dim):
            out[..., l, axis, axis] = signs[axis] * d1 * 2.0 * x[..., l]
        return out

    def coeff_hess(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        d1 = pr.d1(s)
        d2 = pr.d2(s)
        out = np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
        for l in range(dim):
            for mmi in range(dim):
                dlm = d2 * 4.0 * x[..., l] * x[..., mmi]
                if l == mmi:
                    dlm = dlm + 2.0 * d1
                out[..., l, mmi, axis, axis] = signs[axis] * dlm
        return out

    return MetricField(dim, neg_count, 0.5, coeff, coeff_grad, coeff_hess,
                       block_split=None, label="diag_well")


def fd_derivative_metric(dim, neg_count, mu, coeff, label="custom_fd") -> MetricField:
    """Wrap a coefficient evaluator with central-difference derivatives.

    Step 1e-5 <x> per coordinate; meant for user-defined families without
    analytic derivatives.
    """
    def coeff_grad(x):
        x = np.asarray(x, dtype=float)
        h = 1e-5 * bracket(x)[..., None]
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        for l in range(dim):
            e = np.zeros(dim)
            e[l] = 1.0
            out[..., l, :, :] = (coeff(x + h * e) - coeff(x - h * e)) / (2.0 * h[..., None])
        return out

    def coeff_hess(x):
        x = np.asarray(x, dtype=float)
        h = 1e-4 * bracket(x)[..., None]
        out = np.zeros(x.shape[:-1] + (dim, dim, dim, dim))
        for l in range(dim):
            el = np.zeros(dim)
            el[l] = 1.0
            for mmi in range(dim):
                em = np.zeros(dim)
                em[mmi] = 1.0
                fpp = coeff(x + h * el + h * em)
                fpm = coeff(x + h * el - h * em)
                fmp = coeff(x - h * el + h * em)
                fmm = coeff(x - h * el - h * em)
                out[..., l, mmi, :, :] = (fpp - fpm - fmp + fmm) / (4.0 * h[..., None] ** 2)
        return out

    return MetricField(dim, neg_count, mu, coeff, coeff_grad, coeff_hess,
                       block_split=None, label=label)


# ---------------------------------------------------------------------------
# assumption checkers
# ---------------------------------------------------------------------------

@dataclass
class DecayReport:
    """Empirical long-range decay per derivative order."""

    mu: float
    orders: list            # derivative orders checked
    slopes: dict            # order -> fitted slope of log sup-deviation vs log <r>
    constants: dict         # order -> minimal C with dev <= C <r>^-(mu+order)
    passed: dict            # order -> bool
    inconclusive: bool = False

    @property
    def all_pass(self):
        return (not self.inconclusive) and all(self.passed.values())


def _sphere_directions(dim, count, seed=0):
    """Deterministic low-discrepancy directions on the unit sphere."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    from scipy.stats import qmc
    eng = qmc.Halton(d=dim, scramble=True, seed=seed)
    pts = eng.random(count)
    z = np.asarray([np.sqrt(2.0) * _erfinv_vec(2 * c - 1) for c in pts.T]).T
    nrm = np.linalg.norm(z, axis=1)
    nrm[nrm == 0] = 1.0
    return z / nrm[:, None]


def _erfinv_vec(y):
    from scipy.special import erfinv
    return erfinv(np.clip(y, -1 + 1e-12, 1 - 1e-12))


def check_long_range(m: MetricField, radii=None, n_directions=32,
                     deriv_order=2, seed=0, slope_margin=0.1) -> DecayReport:
    """Fit the radial decay of sup |d^a (g - I_k)| and compare with <x>^-(mu+|a|).

    PASS at order |a| when the fitted slope is <= -(mu + |a|) + slope_margin,
    or when the deviation vanishes identically (flat directions).
    """
    if radii is None:
        radii = np.geomspace(2.0, 200.0, 14)    # two decades
    radii = np.asarray(radii, dtype=float)
    if radii.max() / radii.min() < 99.0:
        raise ValueError("sample radii must span at least two decades")
    dirs = _sphere_directions(m.dim, n_directions, seed=seed)
    flat = SignatureForm(m.dim, m.neg_count).matrix

    sup = {mord: np.zeros(len(radii)) for mord in range(deriv_order + 1)}
    for ir, r in enumerate(radii):
        pts = r * dirs
        dev0 = np.abs(m.coeff(pts) - flat).sum(axis=(-2, -1))
        sup[0][ir] = dev0.max()
        if deriv_order >= 1:
            dev1 = np.abs(m.coeff_grad(pts)).sum(axis=(-3, -2, -1))
            sup[1][ir] = dev1.max()
        if deriv_order >= 2:
            dev2 = np.abs(m.coeff_hess(pts)).sum(axis=(-4, -3, -2, -1))
            sup[2][ir] = dev2.max()

    logr = np.log(np.sqrt(1.0 + radii ** 2))
    slopes, consts, passed = {}, {}, {}
    inconclusive = False
    for mord in range(deriv_order + 1):
        vals = sup[mord]
        if np.all(vals < 1e-14):
            slopes[mord] = -np.inf
            consts[mord] = 0.0
            passed[mord] = True
            continue
        if np.ptp(vals) < 1e-14 * max(1.0, vals.max()):
            # constant nonzero deviation: the fit is degenerate
            slopes[mord] = 0.0
            consts[mord] = float(vals.max())
            passed[mord] = False
            inconclusive = True
            continue
        mask = vals > 1e-300
        slope = np.polyfit(logr[mask], np.log(vals[mask]), 1)[0]
        slopes[mord] = float(slope)
        consts[mord] = float(np.max(vals * np.sqrt(1.0 + radii ** 2) ** (m.mu + mord)))
        passed[mord] = slope <= -(m.mu + mord) + slope_margin
    return DecayReport(m.mu, list(range(deriv_order + 1)), slopes, consts, passed,
                       inconclusive=inconclusive)


def nondegeneracy_min_abs_eig(m: MetricField, points) -> float:
    """Smallest |eigenvalue| of g over a batch of sample points."""
    g = m.coeff(np.asarray(points, dtype=float))
    w = np.linalg.eigvalsh(g)
    return float(np.min(np.abs(w)))


def signature_counts(m: MetricField, points):
    """(positive, negative) eigenvalue counts of g at each sample point."""
    g = m.coeff(np.asarray(points, dtype=float))
    w = np.linalg.eigvalsh(g)
    return (w > 0).sum(axis=-1), (w < 0).sum(axis=-1)
