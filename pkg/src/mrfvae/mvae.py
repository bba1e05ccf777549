"""Multimodal VAE with MRF posterior/prior in three variants.

Per-modality encoders produce the posterior mean and the log-diagonal of the
Cholesky factor; a global covariance encoder, fed all modalities, produces
the strictly-lower entries of L with a fixed boolean mask forcing a chosen
fraction to zero. Variants differ in the latent family and regularizer:

  gmrf  -- Gaussian MRF posterior and learned Gaussian MRF prior, exact KL
  almrf -- asymmetric-Laplace posterior/prior, ln(MMD^2 + 1) regularizer
  nnmrf -- Gaussian MRF posterior, neural-potential prior, importance-sampled
           log-partition (Metropolis-Hastings at generation time)
"""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import gmrf, heavytail as ht, mmd, nnmrf
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParseError,
    TrainingError,
)

LOG_2PI = math.log(2.0 * math.pi)
VARIANTS = ("gmrf", "almrf", "nnmrf")
BETA_SWEEP = (2.5, 1.0, 0.1, 0.05, 0.001)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "gmrf"
    latent_dims: tuple = (2, 2, 2, 2)
    input_dims: tuple = (2, 2, 2, 2)
    enc_hidden: tuple = (256, 256)
    dec_hidden: tuple = (256, 256)
    cov_hidden: tuple = (256, 256)
    pot_hidden: tuple = (64,)
    mask_density: float = 0.0
    beta: float = 0.1
    recon: str = "gaussian"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    k_train: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.mask_density <= 1.0:
            raise ConfigError(f"mask_density must be in [0,1], got {self.mask_density}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if len(self.latent_dims) != len(self.input_dims):
            raise ConfigError("latent_dims and input_dims must pair up per modality")
        if any(d < 1 for d in self.latent_dims) or any(d < 1 for d in self.input_dims):
            raise ConfigError("all modality extents must be >= 1")
        if self.recon not in ("gaussian", "laplace"):
            raise ConfigError(f"recon must be gaussian or laplace, got {self.recon!r}")
        if self.lr <= 0 or self.k_train < 2:
            raise ConfigError("lr must be positive and k_train >= 2")


def _tril_indices(d):
    return np.tril_indices(d, k=-1)


def draw_mask(n_off: int, density: float, rng) -> np.ndarray:
    """Boolean keep-mask over the strictly-lower entries; keeps
    floor((1 - density) * n_off) of them."""
    keep = int(math.floor((1.0 - density) * n_off))
    mask = np.zeros(n_off, dtype=bool)
    mask[rng.permutation(n_off)[:keep]] = True
    return mask


class Model:
    def __init__(self, config: ModelConfig, _init=True):
        self.config = config
        self.layout = gmrf.BlockLayout(tuple(config.latent_dims))
        self.m = len(config.latent_dims)
        self.D = self.layout.total
        self.x_total = sum(config.input_dims)
        self.n_off = self.D * (self.D - 1) // 2
        self.loss_trace = []
        self.epochs_done = 0
        self.adam_state = None
        if not _init:
            return
        ss = np.random.SeedSequence(config.seed)
        init_seed, mask_seed = ss.spawn(2)
        rng = np.random.default_rng(init_seed)
        self.mask = draw_mask(self.n_off, config.mask_density, np.random.default_rng(mask_seed))
        self._build(rng)

    def _build(self, rng):
        cfg = self.config
        relu = lambda n: ["relu"] * n + ["linear"]
        self.encoders = [
            dc.Mlp([cfg.input_dims[i], *cfg.enc_hidden, 2 * cfg.latent_dims[i]],
                   relu(len(cfg.enc_hidden)), f"enc{i}", rng)
            for i in range(self.m)
        ]
        self.cov_encoder = dc.Mlp([self.x_total, *cfg.cov_hidden, self.n_off],
                                  relu(len(cfg.cov_hidden)), "cov", rng)
        self.decoders = [
            dc.Mlp([cfg.latent_dims[i], *cfg.dec_hidden, cfg.input_dims[i]],
                   relu(len(cfg.dec_hidden)), f"dec{i}", rng)
            for i in range(self.m)
        ]
        if cfg.variant == "gmrf":
            self.prior_mu = dc.Var(np.zeros(self.D), name="prior.mu")
            self.prior_logdiag = dc.Var(np.zeros(self.D), name="prior.logdiag")
            self.prior_off = dc.Var(np.zeros(self.n_off), name="prior.off")
        elif cfg.variant == "almrf":
            # fixed symmetric multivariate Laplace prior: m = 0, Sigma = I
            self.al_prior = ht.AsymmetricLaplace(np.zeros(self.D), np.eye(self.D),
                                                 self.layout)
        else:
            self.potentials = nnmrf.make_potential_net(self.layout, cfg.pot_hidden,
                                                       prefix="prior", rng=rng)

    # ---- parameters -----------------------------------------------------

    def params(self) -> dict:
        out = {}
        for net in (*self.encoders, self.cov_encoder, *self.decoders):
            out.update(net.params())
        if self.config.variant == "gmrf":
            for v in (self.prior_mu, self.prior_logdiag, self.prior_off):
                out[v.name] = v
        elif self.config.variant == "nnmrf":
            out.update(self.potentials.params())
        return out

    def set_params(self, values: dict):
        params = self.params()
        if set(values) != set(params):
            missing = set(params) ^ set(values)
            raise ContractError(f"parameter names mismatch: {sorted(missing)[:4]}...")
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != params[name].data.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {params[name].data.shape}")
            params[name].data = arr

    # ---- distribution assembly ------------------------------------------

    def _assemble_chol(self, logdiag, off):
        """L from batched log-diagonal (B, D) and off entries (B, n_off)."""
        d = self.D
        rows, cols = _tril_indices(d)
        flat_off = rows * d + cols
        flat_diag = np.arange(d) * (d + 1)
        p_off = np.zeros((self.n_off, d * d))
        p_off[np.arange(self.n_off), flat_off] = self.mask.astype(np.float64)
        p_diag = np.zeros((d, d * d))
        p_diag[np.arange(d), flat_diag] = 1.0
        flat = dc.add(dc.matmul(dc.mul(off, self.mask.astype(np.float64)), p_off),
                      dc.matmul(dc.exp(logdiag), p_diag))
        shape = (logdiag.data.shape[:-1] + (d, d)) if hasattr(logdiag, "data") else (d, d)
        return dc.reshape(flat, shape)

    def prior_gaussian(self) -> gmrf.BlockGaussian:
        if self.config.variant != "gmrf":
            raise ContractError("learned Gaussian prior exists only for the gmrf variant")
        chol = self._assemble_chol(self.prior_logdiag, self.prior_off)
        return gmrf.BlockGaussian(self.prior_mu, chol, self.layout, validate=False)

    def split_modalities(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.x_total:
            raise DimensionError(f"x must be (n, {self.x_total}), got {x.shape}")
        parts, at = [], 0
        for w in self.config.input_dims:
            parts.append(x[:, at:at + w])
            at += w
        return parts

    def encode(self, xs):
        """Posterior from per-modality batches; all modalities required."""
        if len(xs) != self.m:
            raise ContractError(f"need all {self.m} modalities, got {len(xs)}")
        xs = [dc.as_var(np.asarray(dc.value(x), dtype=np.float64)) for x in xs]
        for i, x in enumerate(xs):
            if x.data.ndim != 2 or x.data.shape[1] != self.config.input_dims[i]:
                raise DimensionError(
                    f"modality {i} must be (B, {self.config.input_dims[i]}), "
                    f"got {x.data.shape}"
                )
        mus, logdiags = [], []
        for i, x in enumerate(xs):
            h = self.encoders[i](x)
            d_i = self.config.latent_dims[i]
            mus.append(dc.narrow(h, 1, 0, d_i))
            logdiags.append(dc.narrow(h, 1, d_i, d_i))
        mu = dc.concat(mus, axis=1)
        logdiag = dc.concat(logdiags, axis=1)
        off = self.cov_encoder(dc.concat(xs, axis=1))
        chol = self._assemble_chol(logdiag, off)
        if self.config.variant == "almrf":
            return ht.AsymmetricLaplace(mu, chol, self.layout, validate=False)
        return gmrf.BlockGaussian(mu, chol, self.layout, validate=False)

    def decode(self, z):
        """Per-modality reconstruction means; decoder i sees slice z_i only."""
        z = dc.as_var(z)
        if z.shape[-1] != self.D:
            raise DimensionError(f"z must have extent {self.D}, got {z.shape[-1]}")
        outs = []
        for i in range(self.m):
            sl = self.layout.block_slice(i)
            outs.append(self.decoders[i](dc.narrow(z, z.ndim - 1, sl.start,
                                                   sl.stop - sl.start)))
        return outs

    # ---- objective -------------------------------------------------------

    def _recon_loglik(self, xs, x_hats):
        total = None
        for x, x_hat in zip(xs, x_hats):
            diff = dc.sub(x_hat, dc.as_var(np.asarray(dc.value(x), dtype=np.float64)))
            if self.config.recon == "gaussian":
                per = dc.add(dc.mul(dc.vsum(dc.square(diff), axis=1), -0.5),
                             -0.5 * diff.data.shape[1] * LOG_2PI)
            else:
                per = dc.add(dc.mul(dc.vsum(dc.absval(diff), axis=1), -1.0),
                             -diff.data.shape[1] * math.log(2.0))
            total = per if total is None else dc.add(total, per)
        return dc.vmean(total)

    def elbo(self, x, rng):
        """(elbo Var, term breakdown dict) on a (B, x_total) batch."""
        xs = self.split_modalities(np.asarray(dc.value(x), dtype=np.float64))
        q = self.encode(xs)
        b = xs[0].shape[0]
        cfg = self.config
        u = rng.standard_normal((b, self.D))
        if cfg.variant == "almrf":
            z = ht.al_sample(q, u, rng.random(b))
        else:
            z = gmrf.gmrf_sample(q, u)
        recon = self._recon_loglik(xs, self.decode(z))

        if cfg.variant == "gmrf":
            reg = dc.vmean(gmrf.kl_between(q, self.prior_gaussian()))
        elif cfg.variant == "almrf":
            prior_u = rng.standard_normal((b, self.D))
            prior_z = ht.al_sample(self.al_prior, prior_u, rng.random(b))
            kernel = mmd.median_heuristic_kernel(prior_z.data)
            reg = mmd.mmd_regularizer(kernel, z, prior_z)
        else:
            mean_energy = dc.vmean(nnmrf.energy(self.potentials, z))
            proposal = gmrf.BlockGaussian.standard(self.layout)
            ln_z = nnmrf.log_partition_is(self.potentials, proposal, cfg.k_train, rng)
            entropy = dc.vmean(gmrf.entropy(q))
            reg = dc.sub(dc.add(mean_energy, ln_z), entropy)
        out = dc.sub(recon, dc.mul(reg, cfg.beta))
        terms = {"recon": float(dc.value(recon)), "regularizer": float(dc.value(reg)),
                 "elbo": float(dc.value(out))}
        for name, val in terms.items():
            if not np.isfinite(val):
                raise NumericError(f"non-finite ELBO term {name!r}: {val}")
        return out, terms

    # ---- training ----------------------------------------------------------

    def _epoch_rng(self, epoch: int):
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, 1, epoch]))

    def train(self, data, epochs, batch_size=256, callback=None):
        """Adam over all parameters; deterministic for a fixed config seed.

        Resume-safe: epoch e always uses the same derived stream, so training
        10 epochs equals training 5, checkpointing, and training 5 more.
        """
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.x_total:
            raise DimensionError(f"data must be (n, {self.x_total}), got {data.shape}")
        if data.shape[0] < 1 or epochs < 0 or batch_size < 1:
            raise ContractError("need nonempty data, epochs >= 0, batch_size >= 1")
        params = self.params()
        for epoch in range(self.epochs_done, self.epochs_done + epochs):
            rng = self._epoch_rng(epoch)
            order = rng.permutation(data.shape[0])
            epoch_terms = []
            for at in range(0, data.shape[0], batch_size):
                batch = data[order[at:at + batch_size]]
                with dc.Tape() as tape:
                    try:
                        value, terms = self.elbo(batch, rng)
                    except NumericError as exc:
                        raise TrainingError(f"epoch {epoch}: {exc}", param=str(exc)) from exc
                    loss = dc.mul(value, -1.0)
                    grads = dc.backward(tape, loss, wrt=list(params.values()))
                new_vals, self.adam_state = dc.adam_step(
                    {k: v.data for k, v in params.items()}, grads, self.adam_state,
                    lr=self.config.lr, beta1=self.config.adam_beta1,
                    beta2=self.config.adam_beta2, eps=self.config.adam_eps,
                )
                for k, v in params.items():
                    v.data = new_vals[k]
                epoch_terms.append(terms)
            self._assert_mask_invariant(data[:min(8, data.shape[0])])
            trace_row = {
                "epoch": epoch,
                "elbo": float(np.mean([t["elbo"] for t in epoch_terms])),
                "recon": float(np.mean([t["recon"] for t in epoch_terms])),
                "regularizer": float(np.mean([t["regularizer"] for t in epoch_terms])),
            }
            self.loss_trace.append(trace_row)
            self.epochs_done = epoch + 1
            if callback is not None:
                callback(trace_row)
        return self.loss_trace

    def _assert_mask_invariant(self, probe):
        q = self.encode(self.split_modalities(probe))
        rows, cols = _tril_indices(self.D)
        off_vals = q.chol.data[..., rows, cols][..., ~self.mask]
        if off_vals.size and np.any(off_vals != 0.0):
            raise TrainingError("masked Cholesky entries drifted from zero",
                                param="mask")
        if np.any(q.chol.data[..., np.arange(self.D), np.arange(self.D)] <= 0.0):
            raise TrainingError("non-positive Cholesky diagonal", param="logdiag")

    # ---- generation --------------------------------------------------------

    def _decode_np(self, z: np.ndarray, blocks=None) -> np.ndarray:
        outs = []
        for i in (range(self.m) if blocks is None else blocks):
            sl = self.layout.block_slice(i)
            outs.append(dc.value(self.decoders[i](z[..., sl])))
        return np.concatenate(outs, axis=-1)

    def generate(self, n, rng) -> np.ndarray:
        """n joint samples as one (n, x_total) array in modality order."""
        if n < 1:
            raise ContractError(f"n must be >= 1, got {n}")
        if self.config.variant == "gmrf":
            z = dc.value(gmrf.gmrf_sample(self.prior_gaussian(),
                                          rng.standard_normal((n, self.D))))
        elif self.config.variant == "almrf":
            z = dc.value(ht.al_sample(self.al_prior, rng.standard_normal((n, self.D)),
                                      rng.random(n)))
        else:
            cfg = nnmrf.MhConfig(seed=int(rng.integers(2**62)), n_chains=min(64, n))
            z = nnmrf.mh_sample(self.potentials, cfg, n)
        return self._decode_np(z)

    def _encode_marginal(self, j, x_j):
        """(mu_j, diag scale) of modality j's posterior block, as arrays."""
        x_j = np.asarray(x_j, dtype=np.float64)
        if x_j.ndim != 2 or x_j.shape[1] != self.config.input_dims[j]:
            raise DimensionError(
                f"observed modality {j} must be (n, {self.config.input_dims[j]}), "
                f"got {x_j.shape}"
            )
        h = dc.value(self.encoders[j](x_j))
        d_j = self.config.latent_dims[j]
        return h[:, :d_j], np.exp(h[:, d_j:2 * d_j])

    def conditional_generate(self, j, x_j, rng, posterior_impute=False) -> np.ndarray:
        """Samples of the unobserved modalities given modality j.

        Returns (n, sum of free input_dims) in ascending modality order.
        Default path conditions through the learned prior (Prop.-1 machinery
        for gmrf, GH moment matching for almrf, pinned-block MH for nnmrf);
        posterior_impute=True instead encodes a zero-imputed full input.
        """
        if not 0 <= j < self.m:
            raise ContractError(f"modality index {j} out of range")
        mu_j, scale_j = self._encode_marginal(j, x_j)
        n = mu_j.shape[0]
        z_j = mu_j + scale_j * rng.standard_normal(mu_j.shape)
        free = [i for i in range(self.m) if i != j]
        if posterior_impute:
            full = np.zeros((n, self.x_total))
            at = sum(self.config.input_dims[:j])
            full[:, at:at + self.config.input_dims[j]] = np.asarray(x_j)
            q = self.encode(self.split_modalities(full))
            z = dc.value(gmrf.gmrf_sample(q, rng.standard_normal((n, self.D)))) \
                if self.config.variant != "almrf" else \
                dc.value(ht.al_sample(q, rng.standard_normal((n, self.D)), rng.random(n)))
            return self._decode_np(z, blocks=free)
        if self.config.variant == "gmrf":
            gain, mu_free, mu_obs, chol_hat, free_blocks = gmrf.conditional_gain(
                self.prior_gaussian(), [j]
            )
            assert free_blocks == free
            u = rng.standard_normal((n, self.D - self.config.latent_dims[j]))
            z_free = mu_free + (z_j - mu_obs) @ gain.T + u @ chol_hat.T
        elif self.config.variant == "almrf":
            z_free = self._al_conditional(j, z_j, rng)
        else:
            cfg = nnmrf.MhConfig(seed=int(rng.integers(2**62)))
            states = nnmrf.mh_conditional_rows(self.potentials, cfg, j, z_j)
            idx = np.concatenate([np.arange(self.layout.block_slice(i).start,
                                            self.layout.block_slice(i).stop)
                                  for i in free])
            z_free = states[:, idx]
        # scatter free-block latents back into full-D slots for the decoders
        z = np.zeros((n, self.D))
        at = 0
        for i in free:
            sl = self.layout.block_slice(i)
            z[:, sl] = z_free[:, at:at + (sl.stop - sl.start)]
            at += sl.stop - sl.start
        return self._decode_np(z, blocks=free)

    def _al_conditional(self, j, z_j, rng):
        """Moment-matched Gaussian conditional of the AL prior, row by row.

        The free blocks are merged into one by permuting coordinates into a
        two-block (free, observed) layout.
        """
        free = [i for i in range(self.m) if i != j]
        free_idx = np.concatenate([np.arange(self.layout.block_slice(i).start,
                                             self.layout.block_slice(i).stop)
                                   for i in free])
        obs_idx = np.arange(self.layout.block_slice(j).start,
                            self.layout.block_slice(j).stop)
        perm = np.concatenate([free_idx, obs_idx])
        sigma = self.al_prior.sigma()[np.ix_(perm, perm)]
        m_vec = self.al_prior.m.data[perm]
        lay2 = gmrf.BlockLayout((len(free_idx), len(obs_idx)))
        al2 = ht.AsymmetricLaplace(m_vec, gmrf.cholesky(sigma), lay2, validate=False)
        out = np.empty((z_j.shape[0], len(free_idx)))
        for r in range(z_j.shape[0]):
            mean, cov = ht.gh_moment_match(al2, 0, 1, z_j[r])
            out[r] = mean + gmrf.cholesky(cov) @ rng.standard_normal(len(free_idx))
        return out


# ---- checkpointing ----------------------------------------------------------


def save_model(model: Model, path):
    doc = {
        "config": asdict(model.config),
        "mask": [int(v) for v in model.mask],
        "epochs_done": model.epochs_done,
        "adam_t": 0 if model.adam_state is None else model.adam_state["t"],
        "loss_trace": model.loss_trace,
    }
    params = {k: v.data for k, v in model.params().items()}
    parts = [
        '{"meta":', json.dumps(doc, sort_keys=True),
        ',"params":', dc.params_to_json(params),
    ]
    if model.adam_state is not None:
        parts += [',"adam_m":', dc.params_to_json(model.adam_state["m"]),
                  ',"adam_v":', dc.params_to_json(model.adam_state["v"])]
    parts.append("}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(parts))


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
        meta = doc["meta"]
        cfg_dict = dict(meta["config"])
        for key in ("latent_dims", "input_dims", "enc_hidden", "dec_hidden",
                    "cov_hidden", "pot_hidden"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = ModelConfig(**cfg_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from None
    model = Model(config)
    mask = np.array(meta["mask"], dtype=bool)
    if mask.shape != model.mask.shape:
        raise ParseError("checkpoint mask has wrong length")
    model.mask = mask
    model.set_params(dc.params_from_json(json.dumps(doc["params"]))
                     if isinstance(doc["params"], dict) else doc["params"])
    model.epochs_done = int(meta["epochs_done"])
    model.loss_trace = list(meta["loss_trace"])
    if "adam_m" in doc:
        model.adam_state = {
            "t": int(meta["adam_t"]),
            "m": dc.params_from_json(json.dumps(doc["adam_m"])),
            "v": dc.params_from_json(json.dumps(doc["adam_v"])),
        }
    return model
