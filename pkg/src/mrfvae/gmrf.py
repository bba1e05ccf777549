"""Block-structured multivariate Gaussians parameterized by a Cholesky factor.

Everything is carried as (mu, L) with Sigma = L L^T. Conditionals, KL terms
and natural-parameter views are computed through triangular solves on L;
no covariance or precision matrix is ever inverted explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import (
    ConditioningError,
    ContractError,
    DimensionError,
    NotPositiveDefinite,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class BlockLayout:
    """Per-modality latent extents and their offsets into the joint vector."""

    dims: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        if not self.dims or any(d < 1 for d in self.dims):
            raise ContractError("block extents must all be >= 1")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        offs = np.concatenate(([0], np.cumsum(self.dims[:-1]))).astype(int)
        object.__setattr__(self, "offsets", tuple(int(o) for o in offs))
        object.__setattr__(self, "total", int(sum(self.dims)))

    @property
    def n_blocks(self):
        return len(self.dims)

    def block_slice(self, i):
        return slice(self.offsets[i], self.offsets[i] + self.dims[i])


class BlockGaussian:
    """mu plus lower-triangular chol over a BlockLayout; optionally batched.

    `mu` has shape (..., D) and `chol` shape (..., D, D). A boolean `mask`
    over the strictly-lower triangle marks permitted off-diagonal entries;
    masked-out entries must be exactly zero.
    """

    def __init__(self, mu, chol, layout: BlockLayout, mask=None, validate=True):
        self.mu = dc.as_var(mu) if not isinstance(mu, dc.Var) else mu
        self.chol = dc.as_var(chol) if not isinstance(chol, dc.Var) else chol
        self.layout = layout
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        D = layout.total
        if self.mu.shape[-1] != D or self.chol.shape[-2:] != (D, D):
            raise DimensionError(
                f"mu/chol extents {self.mu.shape}/{self.chol.shape} do not match D={D}"
            )
        if validate:
            c = self.chol.data
            diag = np.diagonal(c, axis1=-2, axis2=-1)
            if not np.all(diag > 0):
                raise ContractError("chol diagonal must be strictly positive")
            upper = np.triu(c, k=1)
            if np.any(upper != 0):
                raise ContractError("chol has nonzero entries above the diagonal")
            if self.mask is not None:
                dead = np.tril(np.ones((D, D), dtype=bool), k=-1) & ~self.mask
                if np.any(c[..., dead] != 0):
                    raise ContractError("masked-out chol entries must be exactly zero")

    @property
    def D(self):
        return self.layout.total

    def sigma(self) -> np.ndarray:
        c = self.chol.data
        return c @ np.swapaxes(c, -1, -2)

    @staticmethod
    def standard(layout: BlockLayout) -> "BlockGaussian":
        D = layout.total
        return BlockGaussian(np.zeros(D), np.eye(D), layout)


def cholesky(sigma: np.ndarray, pivot_tol: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix; fails on tiny pivots."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionError(f"expected square matrix, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ContractError("matrix is not symmetric within atol 1e-10")
    n = sigma.shape[0]
    L = np.zeros_like(sigma)
    for k in range(n):
        pivot = sigma[k, k] - L[k, :k] @ L[k, :k]
        if pivot <= pivot_tol:
            raise NotPositiveDefinite(f"pivot {pivot:.3e} at index {k}")
        L[k, k] = np.sqrt(pivot)
        if k + 1 < n:
            L[k + 1 :, k] = (sigma[k + 1 :, k] - L[k + 1 :, :k] @ L[k, :k]) / L[k, k]
    return L


def gmrf_sample(g: BlockGaussian, u):
    """Reparametrized draw mu + L u; differentiable in mu and chol.

    `u` may carry leading batch axes: shape (..., D).
    """
    u = dc.value(u)
    if u.shape[-1] != g.D:
        raise DimensionError(f"noise extent {u.shape[-1]} != D={g.D}")
    return dc.add(g.mu, dc.matvec(g.chol, u))


def log_density(g: BlockGaussian, z):
    """Gaussian log-density via one triangular solve; differentiable."""
    z = dc.as_var(z)
    if z.shape[-1] != g.D:
        raise DimensionError(f"z extent {z.shape[-1]} != D={g.D}")
    v = dc.tril_solve_vec(g.chol, dc.sub(z, g.mu))
    log_diag = dc.vsum(dc.log(dc.diag_part(g.chol)), axis=-1)
    return dc.sub(dc.sub(-0.5 * g.D * LOG_2PI, log_diag), dc.quadratic_form(v))


def entropy(g: BlockGaussian):
    """Closed-form Gaussian entropy D/2 ln(2 pi e) + sum ln L_kk."""
    log_diag = dc.vsum(dc.log(dc.diag_part(g.chol)), axis=-1)
    return dc.add(log_diag, 0.5 * g.D * (LOG_2PI + 1.0))


def kl_to_standard(g: BlockGaussian):
    """KL(g || N(0, I)); nonnegative, differentiable."""
    fro = dc.vsum(dc.square(g.chol), axis=(-2, -1))
    msq = dc.vsum(dc.square(g.mu), axis=-1)
    log_diag = dc.vsum(dc.log(dc.diag_part(g.chol)), axis=-1)
    return dc.sub(dc.mul(dc.add(fro, dc.sub(msq, float(g.D))), 0.5), log_diag)


def kl_between(q: BlockGaussian, p: BlockGaussian):
    """KL(q || p) through triangular solves on p.chol; differentiable in both."""
    if q.layout.dims != p.layout.dims:
        raise DimensionError("layouts differ")
    _check_chol_conditioning(p)
    a = dc.tril_solve(p.chol, q.chol)
    fro = dc.vsum(dc.square(a), axis=(-2, -1))
    w = dc.tril_solve_vec(p.chol, dc.sub(q.mu, p.mu))
    quad = dc.vsum(dc.square(w), axis=-1)
    log_det_q = dc.vsum(dc.log(dc.diag_part(q.chol)), axis=-1)
    log_det_p = dc.vsum(dc.log(dc.diag_part(p.chol)), axis=-1)
    return dc.add(
        dc.mul(dc.add(fro, dc.sub(quad, float(q.D))), 0.5),
        dc.sub(log_det_p, log_det_q),
    )


def _check_chol_conditioning(g: BlockGaussian, tol: float = 1e-12):
    diag = np.diagonal(g.chol.data, axis1=-2, axis2=-1)
    if np.any(diag <= tol):
        raise ConditioningError("chol diagonal at or below 1e-12")


def natural_params(g: BlockGaussian):
    """(eta, Lambda) view: Lambda = Sigma^{-1}, eta = Lambda mu."""
    _check_chol_conditioning(g)
    L = g.chol.data
    eye = np.eye(g.D)
    linv = np.linalg.solve(np.tril(L), np.broadcast_to(eye, L.shape[:-2] + (g.D, g.D)))
    lam = np.swapaxes(linv, -1, -2) @ linv
    lam = 0.5 * (lam + np.swapaxes(lam, -1, -2))
    eta = (lam @ g.mu.data[..., None])[..., 0]
    return eta, lam


def moments_from_natural(eta, lam, layout: BlockLayout) -> BlockGaussian:
    """Inverse of natural_params: recover (mu, L) from (eta, Lambda)."""
    lam = np.asarray(lam, dtype=np.float64)
    sigma = np.linalg.inv(lam)
    sigma = 0.5 * (sigma + sigma.T)
    mu = sigma @ np.asarray(eta, dtype=np.float64)
    return BlockGaussian(mu, cholesky(sigma), layout)


def _conditional_moments(sigma, layout, obs_idx, free_idx, z_obs, mu):
    """Schur-complement conditional moments via triangular solves."""
    s_oo = sigma[np.ix_(obs_idx, obs_idx)]
    s_fo = sigma[np.ix_(free_idx, obs_idx)]
    try:
        l_oo = cholesky(s_oo)
    except NotPositiveDefinite as e:
        raise ConditioningError(f"observed block is numerically singular: {e}") from e
    # K = Sigma_fo Sigma_oo^{-1} without forming the inverse
    w = np.linalg.solve(l_oo, s_fo.T)          # L^{-1} Sigma_of
    gain = np.linalg.solve(l_oo.T, w).T        # Sigma_fo Sigma_oo^{-1}
    resid = np.linalg.solve(l_oo, z_obs - mu[obs_idx])
    mu_hat = mu[free_idx] + w.T @ resid
    sigma_hat = sigma[np.ix_(free_idx, free_idx)] - w.T @ w
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    return mu_hat, sigma_hat, gain


def conditional(g: BlockGaussian, i: int, j: int, z_j):
    """Moments of block i given block j = z_j (Schur complement form)."""
    if i == j:
        raise ContractError("conditioning block must differ from target block")
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_j.shape != (g.layout.dims[j],):
        raise DimensionError(f"z_j shape {z_j.shape} != ({g.layout.dims[j]},)")
    obs_idx = np.arange(g.layout.offsets[j], g.layout.offsets[j] + g.layout.dims[j])
    free_idx = np.arange(g.layout.offsets[i], g.layout.offsets[i] + g.layout.dims[i])
    mu_hat, sigma_hat, _ = _conditional_moments(
        g.sigma(), g.layout, obs_idx, free_idx, z_j, g.mu.data
    )
    return mu_hat, sigma_hat


def conditional_multi(g: BlockGaussian, observed: dict[int, np.ndarray]) -> BlockGaussian:
    """Condition on several blocks at once; returns the remaining-block law."""
    if not observed:
        raise ContractError("observed set is empty")
    blocks = sorted(observed)
    if len(blocks) >= g.layout.n_blocks:
        raise ContractError("cannot observe every block")
    free_blocks = [b for b in range(g.layout.n_blocks) if b not in observed]
    obs_idx = np.concatenate([
        np.arange(g.layout.offsets[b], g.layout.offsets[b] + g.layout.dims[b])
        for b in blocks
    ])
    free_idx = np.concatenate([
        np.arange(g.layout.offsets[b], g.layout.offsets[b] + g.layout.dims[b])
        for b in free_blocks
    ])
    z_obs = np.concatenate([np.asarray(observed[b], dtype=np.float64) for b in blocks])
    if z_obs.shape != obs_idx.shape:
        raise DimensionError("observed values do not match block extents")
    mu_hat, sigma_hat, _ = _conditional_moments(
        g.sigma(), g.layout, obs_idx, free_idx, z_obs, g.mu.data
    )
    sub_layout = BlockLayout(tuple(g.layout.dims[b] for b in free_blocks))
    return BlockGaussian(mu_hat, cholesky(sigma_hat), sub_layout)


def conditional_gain(g: BlockGaussian, observed_blocks) -> tuple:
    """(gain, mu_free, mu_obs, chol_hat, free_blocks): batched-conditioning pieces.

    z_free | z_obs ~ N(mu_free + gain (z_obs - mu_obs), chol_hat chol_hat^T),
    with gain fixed across conditioning values, so many rows can be
    conditioned with one matrix multiply.
    """
    blocks = sorted(observed_blocks)
    free_blocks = [b for b in range(g.layout.n_blocks) if b not in blocks]
    if not blocks or not free_blocks:
        raise ContractError("observed set must be a proper nonempty subset")
    obs_idx = np.concatenate([
        np.arange(g.layout.offsets[b], g.layout.offsets[b] + g.layout.dims[b])
        for b in blocks
    ])
    free_idx = np.concatenate([
        np.arange(g.layout.offsets[b], g.layout.offsets[b] + g.layout.dims[b])
        for b in free_blocks
    ])
    mu = g.mu.data
    _, sigma_hat, gain = _conditional_moments(
        g.sigma(), g.layout, obs_idx, free_idx, np.zeros(len(obs_idx)), mu
    )
    return gain, mu[free_idx], mu[obs_idx], cholesky(sigma_hat), free_blocks
