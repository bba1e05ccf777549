"""Neural-potential MRF prior.

The joint density over the stacked latent z = (z_1, ..., z_M) is
p(z) = exp(-E(z)) / Z with

    E(z) = sum_{i<j} pair(z_i, z_j, i, j) + sum_i unary(z_i, i),

both potentials small MLPs conditioned on one-hot block positions. Z is
intractable; ln Z is estimated by importance sampling against a Gaussian MRF
proposal, and model samples come from Metropolis-Hastings random walks.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import gmrf
from .errors import ContractError, DimensionError, DomainError, NumericError


class PotentialNet:
    """Pairwise + unary potential networks over a uniform block layout."""

    def __init__(self, pair_net: dc.Mlp, unary_net: dc.Mlp, layout: gmrf.BlockLayout):
        dims = set(layout.dims)
        if len(dims) != 1:
            raise ContractError(f"block dims must be uniform, got {layout.dims}")
        d, m = layout.dims[0], len(layout.dims)
        if pair_net.dims[0] != 2 * d + 2 * m:
            raise DimensionError(
                f"pair_net input extent {pair_net.dims[0]} != 2*{d} + 2*{m}"
            )
        if unary_net.dims[0] != d + m:
            raise DimensionError(f"unary_net input extent {unary_net.dims[0]} != {d} + {m}")
        if pair_net.dims[-1] != 1 or unary_net.dims[-1] != 1:
            raise DimensionError("potential networks must output scalars")
        self.pair_net = pair_net
        self.unary_net = unary_net
        self.layout = layout

    def params(self):
        out = dict(self.pair_net.params())
        out.update(self.unary_net.params())
        return out


def make_potential_net(layout, hidden=(64,), prefix="prior", rng=None):
    """Fresh PotentialNet with relu hidden layers and linear scalar heads."""
    rng = np.random.default_rng(0) if rng is None else rng
    d, m = layout.dims[0], len(layout.dims)
    acts = ["relu"] * len(hidden) + ["linear"]
    pair = dc.Mlp([2 * d + 2 * m, *hidden, 1], acts, f"{prefix}.pair", rng)
    unary = dc.Mlp([d + m, *hidden, 1], acts, f"{prefix}.unary", rng)
    return PotentialNet(pair, unary, layout)


@dataclass(frozen=True)
class MhConfig:
    proposal_std: float = 0.5
    burn_in: int = 5000
    thinning: int = 10
    seed: int = 0
    n_chains: int = 16

    def __post_init__(self):
        if not (self.proposal_std > 0.0 and np.isfinite(self.proposal_std)):
            raise DomainError(f"proposal_std must be positive, got {self.proposal_std}")
        if self.burn_in < 0:
            raise DomainError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.thinning < 1:
            raise DomainError(f"thinning must be >= 1, got {self.thinning}")
        if self.n_chains < 1:
            raise DomainError(f"n_chains must be >= 1, got {self.n_chains}")


def _block_inputs(p: PotentialNet, z2d):
    lay = p.layout
    m = len(lay.dims)
    b = z2d.shape[0]
    blocks, onehots = [], []
    for i in range(m):
        sl = lay.block_slice(i)
        blocks.append(dc.narrow(z2d, 1, sl.start, sl.stop - sl.start))
        onehots.append(np.broadcast_to(np.eye(m)[i], (b, m)).copy())
    return blocks, onehots


def energy(p: PotentialNet, z):
    """Total energy of configuration(s) `z`; shape (..., D) -> (...)."""
    z = dc.as_var(z)
    lay = p.layout
    if z.shape[-1] != lay.total:
        raise DimensionError(f"z has extent {z.shape[-1]}, layout wants {lay.total}")
    lead = z.shape[:-1]
    z2d = dc.reshape(z, (-1, lay.total)) if z.ndim != 2 else z
    blocks, onehots = _block_inputs(p, z2d)
    m = len(lay.dims)
    acc = None
    for i in range(m):
        term = p.unary_net(dc.concat([blocks[i], onehots[i]], axis=1))
        acc = term if acc is None else dc.add(acc, term)
    for i in range(m):
        for j in range(i + 1, m):
            term = p.pair_net(
                dc.concat([blocks[i], blocks[j], onehots[i], onehots[j]], axis=1)
            )
            acc = dc.add(acc, term)
    out = dc.reshape(acc, lead)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("energy is non-finite")
    return out


def _mlp_np(mlp: dc.Mlp, x: np.ndarray) -> np.ndarray:
    # gradient-free forward pass for the MH inner loop
    for w, b, act in mlp.layers:
        x = x @ w.data + b.data
        if act == "relu":
            np.maximum(x, 0.0, out=x)
        elif act == "exp":
            np.exp(x, out=x)
        elif act == "square":
            x *= x
    return x


def energy_np(p: PotentialNet, z: np.ndarray) -> np.ndarray:
    """Plain-numpy energy of a (B, D) batch; no tape, for samplers."""
    lay = p.layout
    m = len(lay.dims)
    b = z.shape[0]
    eye = np.eye(m)
    total = np.zeros(b)
    for i in range(m):
        zi = z[:, lay.block_slice(i)]
        oh = np.broadcast_to(eye[i], (b, m))
        total += _mlp_np(p.unary_net, np.concatenate([zi, oh], axis=1))[:, 0]
        for j in range(i + 1, m):
            zj = z[:, lay.block_slice(j)]
            ohj = np.broadcast_to(eye[j], (b, m))
            total += _mlp_np(p.pair_net, np.concatenate([zi, zj, oh, ohj], axis=1))[:, 0]
    return total


def log_partition_is(p: PotentialNet, q: gmrf.BlockGaussian, K: int, rng):
    """Importance-sampled ln Z with proposal q: ln mean exp(-E(z) - ln q(z))."""
    if K < 2:
        raise ContractError(f"K must be >= 2, got {K}")
    u = rng.standard_normal((K, q.layout.total))
    z = gmrf.gmrf_sample(q, u)
    return _log_partition_from_draws(p, q, z)


def _log_partition_from_draws(p, q, z, e=None):
    if e is None:
        e = energy(p, z)
    summands = dc.sub(dc.mul(e, -1.0), gmrf.log_density(q, z))
    top = float(np.max(summands.data))
    if not np.isfinite(top):
        raise NumericError("all importance weights vanished (-inf summands)")
    k = summands.data.shape[0]
    # divergence monitor: one draw dominating the weight mass means the
    # partition integral is poorly covered by the proposal (or divergent)
    lse_val = top + math.log(np.sum(np.exp(summands.data - top)))
    if math.exp(top - lse_val) > 0.5:
        warnings.warn(
            "log_partition_is: top summand carries >50% of importance weight",
            RuntimeWarning,
            stacklevel=3,
        )
    return dc.sub(dc.logsumexp(summands, axis=-1), math.log(k))


def nnmrf_elbo(p: PotentialNet, q: gmrf.BlockGaussian, recon_loglik, K: int, rng,
               shared_draws=True):
    """ELBO with the NN-MRF prior:

    recon + H(q) - E_q[E(z)] - ln Z,   H(q) in closed form, ln Z by IS.

    `shared_draws` reuses the same K reparametrized draws for the energy
    mean and the partition estimate.
    """
    if K < 2:
        raise ContractError(f"K must be >= 2, got {K}")
    u = rng.standard_normal((K, q.layout.total))
    z = gmrf.gmrf_sample(q, u)
    e = energy(p, z)
    mean_e = dc.vmean(e)
    if shared_draws:
        ln_z = _log_partition_from_draws(p, q, z, e=e)
    else:
        ln_z = log_partition_is(p, q, K, rng)
    out = dc.sub(dc.add(dc.as_var(recon_loglik), gmrf.entropy(q)), dc.add(mean_e, ln_z))
    return out


def _run_chains(p, cfg, n, init, mask=None):
    """Vectorized random-walk MH over parallel chains.

    `init` is (C, D); `mask` (D,) boolean marks mutable coordinates (None =
    all). Returns (samples (n, D), acceptance_rate).
    """
    rng = np.random.default_rng(cfg.seed)
    chains = init.copy()
    c, d = chains.shape
    per_chain = -(-n // c)
    e_cur = energy_np(p, chains)
    kept = []
    accepted = 0
    proposed = 0
    total_steps = cfg.burn_in + per_chain * cfg.thinning
    for step in range(total_steps):
        noise = rng.standard_normal((c, d)) * cfg.proposal_std
        if mask is not None:
            noise[:, ~mask] = 0.0
        cand = chains + noise
        e_cand = energy_np(p, cand)
        accept = np.log(rng.random(c)) < (e_cur - e_cand)
        chains[accept] = cand[accept]
        e_cur[accept] = e_cand[accept]
        accepted += int(accept.sum())
        proposed += c
        if step >= cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == cfg.thinning - 1:
            kept.append(chains.copy())
    samples = np.concatenate(kept, axis=0)[:n]
    rate = accepted / proposed
    if not (0.1 <= rate <= 0.6):
        warnings.warn(
            f"MH acceptance rate {rate:.3f} outside [0.1, 0.6]; "
            "consider retuning proposal_std",
            RuntimeWarning,
            stacklevel=3,
        )
    return samples, rate


def mh_sample(p: PotentialNet, cfg: MhConfig, n: int, diagnostics=None):
    """n unconditional model draws via Metropolis-Hastings random walk."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    d = p.layout.total
    c = min(cfg.n_chains, n)
    init = np.random.default_rng(cfg.seed ^ 0x5EED).standard_normal((c, d))
    samples, rate = _run_chains(p, cfg, n, init)
    if diagnostics is not None:
        diagnostics["acceptance_rate"] = rate
    return samples


def mh_conditional_sample(p: PotentialNet, cfg: MhConfig, fixed: dict, n: int,
                          diagnostics=None):
    """MH over the free blocks with `fixed` blocks pinned bit-exactly.

    `fixed` maps block index -> value of that block's dimension. Returned
    states are full-D with the fixed coordinates unchanged in every row.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    lay = p.layout
    m = len(lay.dims)
    if not fixed:
        raise ContractError("fixed must name at least one block")
    if len(fixed) >= m:
        raise ContractError("at least one block must remain free")
    mask = np.ones(lay.total, dtype=bool)
    pinned = np.zeros(lay.total)
    for i, val in fixed.items():
        if not 0 <= i < m:
            raise ContractError(f"block index {i} out of range for {m} blocks")
        val = np.asarray(val, dtype=np.float64)
        sl = lay.block_slice(i)
        if val.shape != (sl.stop - sl.start,):
            raise DimensionError(
                f"fixed block {i} has shape {val.shape}, wants ({sl.stop - sl.start},)"
            )
        mask[sl] = False
        pinned[sl] = val
    c = min(cfg.n_chains, n)
    init = np.random.default_rng(cfg.seed ^ 0x5EED).standard_normal((c, lay.total))
    init[:, ~mask] = pinned[~mask]
    samples, rate = _run_chains(p, cfg, n, init, mask=mask)
    if diagnostics is not None:
        diagnostics["acceptance_rate"] = rate
    return samples


def mh_conditional_rows(p: PotentialNet, cfg: MhConfig, block: int,
                        values: np.ndarray, diagnostics=None) -> np.ndarray:
    """One conditional draw per row: row r pins `block` to values[r].

    Runs all rows as parallel chains sharing the proposal schedule; returns
    (n_rows, D) full states with the pinned block bit-identical per row.
    """
    lay = p.layout
    m = len(lay.dims)
    if not 0 <= block < m:
        raise ContractError(f"block index {block} out of range for {m} blocks")
    if m < 2:
        raise ContractError("at least one block must remain free")
    values = np.asarray(values, dtype=np.float64)
    sl = lay.block_slice(block)
    d = sl.stop - sl.start
    if values.ndim != 2 or values.shape[1] != d:
        raise DimensionError(f"values must be (n, {d}), got {values.shape}")
    mask = np.ones(lay.total, dtype=bool)
    mask[sl] = False
    init = np.random.default_rng(cfg.seed ^ 0x5EED).standard_normal(
        (values.shape[0], lay.total)
    )
    init[:, sl] = values
    samples, rate = _run_chains(p, cfg, values.shape[0], init, mask=mask)
    if diagnostics is not None:
        diagnostics["acceptance_rate"] = rate
    return samples


def grad_log_partition(p: PotentialNet, samples: np.ndarray):
    """Appendix-style estimator: grad ln Z = -E_p[grad_theta E(z)].

    `samples` must come from the model distribution (e.g. mh_sample).
    Returns a map param name -> gradient array.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ContractError("samples must be a nonempty (n, D) batch")
    params = p.params()
    with dc.Tape() as tape:
        mean_e = dc.vmean(energy(p, samples))
        grads = dc.backward(tape, mean_e, wrt=list(params.values()))
    return {name: -g for name, g in grads.items()}
