"""Synthetic data: sparse factors plus optional dense confounders.

Y = X Lambda + F Omega + eps, with each sparse loading row supported on a
uniformly sized random subset of features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import List, Tuple

import numpy as np

from .model import DataMatrix, ModelError, SimTruth


@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    p: int = 500
    k_sparse: int = 10
    k_dense: int = 0
    cluster_min: int = 10
    cluster_max: int = 20
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 2:
            raise ModelError(f"need n >= 2 and p >= 2, got n={self.n}, p={self.p}")
        if self.k_sparse < 0 or self.k_dense < 0:
            raise ModelError("factor counts must be non-negative")
        if not 1 <= self.cluster_min <= self.cluster_max <= self.p:
            raise ModelError(
                f"need 1 <= cluster_min <= cluster_max <= p, got "
                f"{self.cluster_min}, {self.cluster_max}, p={self.p}"
            )
        if self.noise_sd < 0:
            raise ModelError("noise_sd must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "sim1": SimConfig(k_sparse=10, k_dense=0),
    "sim2": SimConfig(k_sparse=10, k_dense=5),
}


def preset(name: str, **overrides) -> SimConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def gen_sparse_loadings(config: SimConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse loading matrix and the support size drawn for each row."""
    Lambda = np.zeros((config.k_sparse, config.p))
    sizes = rng.integers(config.cluster_min, config.cluster_max + 1, size=config.k_sparse)
    for k, size in enumerate(sizes):
        support = rng.choice(config.p, size=int(size), replace=False)
        Lambda[k, support] = rng.standard_normal(int(size))
    return Lambda, sizes


def gen_dense_loadings(k_dense: int, p: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((k_dense, p))


def gen_dataset(config: SimConfig) -> Tuple[DataMatrix, SimTruth]:
    rng = np.random.default_rng(config.seed)
    Lambda, sizes = gen_sparse_loadings(config, rng)
    Omega = gen_dense_loadings(config.k_dense, config.p, rng)
    X = rng.standard_normal((config.n, config.k_sparse))
    F = rng.standard_normal((config.n, config.k_dense))
    eps = config.noise_sd * rng.standard_normal((config.n, config.p))
    Y = X @ Lambda + F @ Omega + eps
    # store the realized noise so that Y - X Lambda - F Omega reproduces it bitwise
    eps = Y - X @ Lambda - F @ Omega
    truth = SimTruth(X=X, Lambda=Lambda, F=F, Omega=Omega, epsilon=eps,
                     noise_sd=config.noise_sd, support_sizes=sizes)
    return DataMatrix(Y), truth


def gen_replicates(config: SimConfig, replicates: int) -> List[Tuple[DataMatrix, SimTruth]]:
    """Datasets for seeds ``config.seed .. config.seed + replicates - 1``."""
    return [gen_dataset(replace(config, seed=config.seed + r)) for r in range(replicates)]
