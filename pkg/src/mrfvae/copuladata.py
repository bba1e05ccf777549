"""Synthetic benchmark: four 2-D modalities coupled by two Gaussian copulas.

Coordinate j of every modality is a probability-integral transform of one
jointly Gaussian draw across modalities, so each coordinate is marginally
Uniform(0,1) while the copula correlation R^j ties the modalities together.
The two coordinates use independent copulas with opposite sign structure.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DomainError, NotPositiveDefinite, ParseError

_BLOCK_ROWS = 8192


def build_correlation(j: int, m: int, rho: float = 0.9) -> np.ndarray:
    """Copula correlation for coordinate j: R_{k,l} = ((-1)^j)^{k+l} * rho.

    j=2 gives the equicorrelation matrix; j=1 alternates signs with modality
    parity (a diagonal +/-1 similarity of the j=2 matrix, hence equally PD).
    """
    if j not in (1, 2):
        raise DomainError(f"coordinate index must be 1 or 2, got {j}")
    if not abs(rho) < 1.0:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    base = (-1.0) ** j
    k = np.arange(m)
    signs = np.power(base, k[:, None] + k[None, :])
    r = signs * rho
    np.fill_diagonal(r, 1.0)
    if np.linalg.eigvalsh(r).min() <= 0.0:
        raise NotPositiveDefinite(f"correlation for j={j}, m={m}, rho={rho} is not PD")
    return r


@dataclass(frozen=True)
class CopulaSpec:
    m: int = 4
    d: int = 2
    rho: float = 0.9
    mus: tuple = (3.0, 3.0)
    sigmas: tuple = (1.0, 1.0)
    n: int = 20_000
    seed: int = 0
    correlations: tuple = field(init=False)

    def __post_init__(self):
        if self.m < 2 or self.d != 2:
            raise DomainError(f"need m >= 2 modalities and exactly 2 coordinates, "
                              f"got m={self.m}, d={self.d}")
        if len(self.mus) != self.d or len(self.sigmas) != self.d:
            raise DomainError("mus/sigmas must have one entry per coordinate")
        if any(s <= 0 for s in self.sigmas):
            raise DomainError(f"scales must be positive, got {self.sigmas}")
        if self.n < 1:
            raise DomainError(f"sample count must be >= 1, got {self.n}")
        object.__setattr__(
            self,
            "correlations",
            tuple(build_correlation(j + 1, self.m, self.rho) for j in range(self.d)),
        )


def column_names(m: int = 4, d: int = 2):
    return [f"mod{i + 1}_dim{j + 1}" for i in range(m) for j in range(d)]


def _open_unit(u: np.ndarray) -> np.ndarray:
    tiny = np.nextafter(0.0, 1.0)
    top = np.nextafter(1.0, 0.0)
    return np.clip(u, tiny, top)


def sample(spec: CopulaSpec, rng=None) -> np.ndarray:
    """Draw the dataset as an (n, m*d) array in mod-major column order.

    Generation is row-blocked with per-block seeds derived from spec.seed, so
    the output is bit-identical for a fixed spec regardless of platform
    threading; `rng` may override the seed-derived stream for ad-hoc draws.
    """
    chols = [np.linalg.cholesky(np.diag(spec.sigmas[j] * np.ones(spec.m)) @ r
                                @ np.diag(spec.sigmas[j] * np.ones(spec.m)))
             for j, r in enumerate(spec.correlations)]
    n_blocks = -(-spec.n // _BLOCK_ROWS)
    if rng is None:
        seeds = np.random.SeedSequence(spec.seed).spawn(n_blocks)
        rngs = [np.random.default_rng(s) for s in seeds]
    else:
        rngs = [rng] * n_blocks
    out = np.empty((spec.n, spec.m * spec.d))
    for b in range(n_blocks):
        lo = b * _BLOCK_ROWS
        hi = min(lo + _BLOCK_ROWS, spec.n)
        rows = hi - lo
        for j in range(spec.d):
            g = rngs[b].standard_normal((rows, spec.m)) @ chols[j].T
            # location/scale cancel in the transform; applied as stated anyway
            g = g + spec.mus[j]
            u = _open_unit(ndtr((g - spec.mus[j]) / spec.sigmas[j]))
            out[lo:hi, j::spec.d] = u
    return out


def split(data: np.ndarray, n_train: int = 10_000):
    """Leading-rows train / trailing-rows held-out split."""
    if not 0 < n_train < data.shape[0]:
        raise ContractError(
            f"n_train={n_train} must split {data.shape[0]} rows into two nonempty parts"
        )
    return data[:n_train], data[n_train:]


def save(data: np.ndarray, path, m: int = 4, d: int = 2):
    """CSV with fixed header; 17 significant digits round-trip float64 exactly."""
    data = np.asarray(data, dtype=np.float64)
    names = column_names(m, d)
    if data.ndim != 2 or data.shape[1] != len(names):
        raise ContractError(f"data must be (n, {len(names)}), got {data.shape}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def load(path, m: int = 4, d: int = 2) -> np.ndarray:
    names = column_names(m, d)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.rstrip("\n").split(",") != names:
            raise ParseError(f"bad header, expected {','.join(names)}", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise ParseError(
                    f"expected {len(names)} fields, got {len(parts)}", line=lineno
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not rows:
        raise ParseError("no data rows", line=2)
    return np.array(rows, dtype=np.float64)
