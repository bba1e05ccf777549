"""Asymmetric multivariate Laplace, GIG and generalized hyperbolic machinery.

The AL family is carried as (m, L) with Sigma = L L^T, mirroring the
Gaussian module. Conditioning an AL block on another yields a generalized
hyperbolic law, realized either exactly (GIG mixing draw) or through a
moment-matched Gaussian, which is the default generation path because GIG
sampling is numerically delicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import diffcore as dc
from . import gmrf
from .errors import (
    ConditioningError,
    ContractError,
    DegenerateConditioningError,
    DimensionError,
    DomainError,
    NotPositiveDefinite,
    NumericError,
)

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# modified Bessel function of the second kind, log-space


def log_bessel_k(v: float, x) -> np.ndarray:
    """ln K_v(x); stable for x up to ~700 via the exponentially scaled form."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise DomainError("bessel_k requires x > 0")
    return np.log(special.kve(v, x)) - x


def bessel_k(v: float, x):
    """K_v(x) for x > 0. Symmetric in v."""
    out = np.exp(log_bessel_k(v, x))
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def bessel_ratio(s: float, x):
    """R_s(x) = K_{s+1}(x) / K_s(x), evaluated in log space."""
    out = np.exp(log_bessel_k(s + 1.0, x) - log_bessel_k(s, x))
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# asymmetric multivariate Laplace


class AsymmetricLaplace:
    """Skew/location m plus lower-triangular chol over a BlockLayout."""

    def __init__(self, m, chol, layout: gmrf.BlockLayout, validate=True):
        self.m = dc.as_var(m) if not isinstance(m, dc.Var) else m
        self.chol = dc.as_var(chol) if not isinstance(chol, dc.Var) else chol
        self.layout = layout
        D = layout.total
        if self.m.shape[-1] != D or self.chol.shape[-2:] != (D, D):
            raise DimensionError("m/chol extents do not match layout")
        if validate:
            diag = np.diagonal(self.chol.data, axis1=-2, axis2=-1)
            if not np.all(diag > 0):
                raise ContractError("chol diagonal must be strictly positive")
            if np.any(np.triu(self.chol.data, k=1) != 0):
                raise ContractError("chol must be lower triangular")

    @property
    def D(self):
        return self.layout.total

    def sigma(self) -> np.ndarray:
        c = self.chol.data
        return c @ np.swapaxes(c, -1, -2)


def al_sample(al: AsymmetricLaplace, u, e):
    """Draw m W + sqrt(W) L u with W = -ln(1 - e); differentiable in (m, chol).

    `u` are standard-normal draws shaped (..., D); `e` uniform(0,1) draws
    shaped like the leading axes of u (or scalar).
    """
    u = dc.value(u)
    e = np.asarray(e, dtype=np.float64)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DomainError("e must lie strictly inside (0, 1)")
    if u.shape[-1] != al.D:
        raise DimensionError(f"noise extent {u.shape[-1]} != D={al.D}")
    w = -np.log1p(-e)
    gauss = dc.matvec(al.chol, u)
    w_col = w[..., None] if w.ndim else w
    return dc.add(dc.mul(al.m, w_col), dc.mul(gauss, np.sqrt(w)[..., None] if w.ndim else math.sqrt(w)))


def al_log_density(al: AsymmetricLaplace, y) -> np.ndarray:
    """Log-density of the AL law; singular at y = 0 for D >= 2."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[-1] != al.D:
        raise DimensionError("y extent does not match D")
    if np.any(np.all(y == 0.0, axis=-1)):
        raise DomainError("density undefined at y = 0")
    L = al.chol.data
    d = al.D
    v = (2.0 - d) / 2.0
    w_y = np.linalg.solve(L, y.T).T              # L^{-1} y
    w_m = np.linalg.solve(L, al.m.data)
    quad_y = np.sum(w_y * w_y, axis=-1)          # y' Sigma^{-1} y
    cross = w_y @ w_m                            # y' Sigma^{-1} m
    denom = 2.0 + float(w_m @ w_m)               # 2 + m' Sigma^{-1} m
    log_det_half = np.sum(np.log(np.diag(L)))
    arg = np.sqrt(denom * quad_y)
    out = (
        math.log(2.0)
        + cross
        - 0.5 * d * LOG_2PI
        - log_det_half
        + 0.5 * v * (np.log(quad_y) - math.log(denom))
        + log_bessel_k(v, arg)
    )
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite AL log-density")
    return out[0] if out.shape == (1,) else out


# ---------------------------------------------------------------------------
# generalized inverse Gaussian


@dataclass(frozen=True)
class GigParams:
    lambda_: float
    chi: float
    psi: float

    def __post_init__(self):
        if not (self.chi > 0 and self.psi > 0):
            raise DomainError("GIG requires chi > 0 and psi > 0")


def gig_mean(p: GigParams) -> float:
    omega = math.sqrt(p.chi * p.psi)
    return math.sqrt(p.chi / p.psi) * bessel_ratio(p.lambda_, omega)


def _gig_psi(x, alpha, lam):
    return -alpha * (math.cosh(x) - 1.0) - lam * (math.exp(x) - x - 1.0)


def _gig_dpsi(x, alpha, lam):
    return -alpha * math.sinh(x) - lam * (math.exp(x) - 1.0)


def gig_draw(lambda_: float, chi: float, psi: float, rng) -> float:
    """One GIG(lambda, chi, psi) draw, density x^{lam-1} exp(-(chi/x + psi x)/2).

    Devroye's rejection scheme for the log-concave two-parameter form.
    """
    if not (chi > 0 and psi > 0):
        raise DomainError("GIG requires chi > 0 and psi > 0")
    lam = float(lambda_)
    omega = math.sqrt(chi * psi)
    swap = lam < 0
    lam = abs(lam)
    alpha = math.sqrt(omega * omega + lam * lam) - lam

    x = -_gig_psi(1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        t = 1.0
    elif x > 2.0:
        t = math.sqrt(2.0 / (alpha + lam))
    else:
        t = math.log(4.0 / (alpha + 2.0 * lam))

    x = -_gig_psi(-1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        s = 1.0
    elif x > 2.0:
        s = math.sqrt(4.0 / (alpha * math.cosh(1.0) + lam))
    else:
        if alpha == 0.0:
            s = 1.0 / lam
        else:
            root = math.log(1.0 + 1.0 / alpha + math.sqrt(1.0 / alpha**2 + 2.0 / alpha))
            s = root if lam == 0.0 else min(1.0 / lam, root)

    eta = -_gig_psi(t, alpha, lam)
    zeta = -_gig_dpsi(t, alpha, lam)
    theta = -_gig_psi(-s, alpha, lam)
    xi = _gig_dpsi(-s, alpha, lam)
    p = 1.0 / xi
    r = 1.0 / zeta
    td = t - r * eta
    sd = s - p * theta
    q = td + sd

    while True:
        u1 = rng.random()
        v = rng.random()
        w = rng.random()
        if u1 < q / (p + q + r):
            rnd = -sd + q * v
        elif u1 < (q + r) / (p + q + r):
            rnd = td - r * math.log(v)
        else:
            rnd = -sd + p * math.log(v)
        if -sd <= rnd <= td:
            env = 1.0
        elif rnd > td:
            env = math.exp(-eta - zeta * (rnd - t))
        else:
            env = math.exp(-theta + xi * (rnd + s))
        if w * env <= math.exp(_gig_psi(rnd, alpha, lam)):
            break

    out = math.exp(rnd) * (lam / omega + math.sqrt(1.0 + (lam / omega) ** 2))
    if swap:
        out = 1.0 / out
    return out * math.sqrt(chi / psi)


def gig_sample(p: GigParams, rng, size=None):
    if size is None:
        return gig_draw(p.lambda_, p.chi, p.psi, rng)
    return np.array([gig_draw(p.lambda_, p.chi, p.psi, rng) for _ in range(int(size))])


# ---------------------------------------------------------------------------
# generalized hyperbolic conditional of an AL block


@dataclass(frozen=True)
class GhParams:
    """Parameters of the GH conditional law of block i given block j."""

    lambda_: float
    alpha: float
    beta: np.ndarray
    delta: float
    mu: np.ndarray
    Delta: np.ndarray
    xi: float
    m: np.ndarray  # Delta @ beta, the skewness vector

    def __post_init__(self):
        lhs = self.alpha**2
        rhs = self.xi**2 + float(self.beta @ self.Delta @ self.beta)
        if not math.isclose(lhs, rhs, rel_tol=1e-10, abs_tol=1e-12):
            raise ContractError("alpha^2 != xi^2 + beta' Delta beta")
        if not np.allclose(self.Delta, self.Delta.T, atol=1e-10):
            raise ContractError("Delta must be symmetric")


def _al_condition_pieces(al: AsymmetricLaplace, i: int, j: int, z_j):
    if i == j:
        raise ContractError("conditioning block must differ from target block")
    z_j = np.asarray(z_j, dtype=np.float64)
    d_i, d_j = al.layout.dims[i], al.layout.dims[j]
    if z_j.shape != (d_j,):
        raise DimensionError(f"z_j shape {z_j.shape} != ({d_j},)")
    sigma = al.sigma()
    si = al.layout.block_slice(i)
    sj = al.layout.block_slice(j)
    s_jj, s_ji, s_ii = sigma[sj, sj], sigma[sj, si], sigma[si, si]
    try:
        l_jj = gmrf.cholesky(s_jj)
    except NotPositiveDefinite as e:
        raise ConditioningError(f"Sigma_jj numerically singular: {e}") from e
    w_z = np.linalg.solve(l_jj, z_j)
    s = np.linalg.solve(l_jj, s_ji)              # L^{-1} Sigma_ji
    w_m = np.linalg.solve(l_jj, al.m.data[sj])
    delta = math.sqrt(float(w_z @ w_z))
    mu = s.T @ w_z                               # Sigma_ij Sigma_jj^{-1} z_j
    Delta = s_ii - s.T @ s
    Delta = 0.5 * (Delta + Delta.T)
    xi = math.sqrt(2.0 + float(w_m @ w_m))
    m_tilde = al.m.data[si] - s.T @ w_m
    return d_i, delta, mu, Delta, xi, m_tilde


def gh_conditional_params(al: AsymmetricLaplace, i: int, j: int, z_j) -> GhParams:
    """Corollary-style GH parameters of block i given block j = z_j."""
    d_i, delta, mu, Delta, xi, m_tilde = _al_condition_pieces(al, i, j, z_j)
    l_d = gmrf.cholesky(Delta)
    beta = np.linalg.solve(l_d.T, np.linalg.solve(l_d, m_tilde))
    alpha = math.sqrt(xi**2 + float(beta @ m_tilde))
    return GhParams(
        lambda_=1.0 - d_i / 2.0,
        alpha=alpha,
        beta=beta,
        delta=delta,
        mu=mu,
        Delta=Delta,
        xi=xi,
        m=m_tilde,
    )


def gh_sample(p: GhParams, rng, size=None):
    """mu + m W + sqrt(W) X with W ~ GIG(lambda, delta^2, xi^2), X ~ N(0, Delta)."""
    gig = GigParams(p.lambda_, p.delta**2, p.xi**2)
    l_d = gmrf.cholesky(p.Delta)
    if size is None:
        w = gig_sample(gig, rng)
        x = l_d @ rng.standard_normal(p.mu.size)
        return p.mu + p.m * w + math.sqrt(w) * x
    w = gig_sample(gig, rng, size=size)
    x = rng.standard_normal((int(size), p.mu.size)) @ l_d.T
    return p.mu[None, :] + np.outer(w, p.m) + np.sqrt(w)[:, None] * x


def gh_moment_match(al: AsymmetricLaplace, i: int, j: int, z_j, q_clamp=1e-8):
    """Gaussian (mean, cov) matching the GH conditional's first two moments.

    Uses Bessel ratios of order 1 - d_i/2; the skew outer-product term carries
    the mixing variable's variance (Q/C)^2 (R_s R_{s+1} - R_s^2).
    """
    d_i, q_val, mu, Delta, c_val, m_tilde = _al_condition_pieces(al, i, j, z_j)
    if q_val < q_clamp:
        raise DegenerateConditioningError(
            f"Q(z_j) = {q_val:.3e} below clamp {q_clamp:.0e}"
        )
    s = 1.0 - d_i / 2.0
    arg = c_val * q_val
    r1 = bessel_ratio(s, arg)
    r2 = bessel_ratio(s + 1.0, arg)
    ew = (q_val / c_val) * r1
    var_w = (q_val / c_val) ** 2 * (r1 * r2 - r1 * r1)
    mean = mu + m_tilde * ew
    cov = ew * Delta + var_w * np.outer(m_tilde, m_tilde)
    cov = 0.5 * (cov + cov.T)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericError("non-finite moment-matched conditional")
    return mean, cov
