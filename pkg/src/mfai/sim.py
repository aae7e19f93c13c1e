"""Synthetic data generator with controlled signal-to-noise ratios.

Latent factors are nonlinear functions of uniform covariates; per-factor and
total noise precisions are calibrated so the realized proportion of variance
explained matches the requested targets exactly.
"""

from dataclasses import dataclass

import numpy as np

from .data import AuxTable, MaskedMatrix, mask_entries
from .numutil import pvar

_UNIFORM_LOW, _UNIFORM_HIGH = -10.0, 10.0
_MAX_DRAW_RETRIES = 10


def _form_linear(x, base):
    return 0.5 * x[:, base] - x[:, base + 1]


def _form_interaction(x, base):
    x1, x2 = x[:, base], x[:, base + 1]
    return x1 * x1 / 10.0 - x2 * x2 / 10.0 + x1 * x2 / 5.0


def _form_sine(x, base):
    x3 = x[:, base + 2]
    return 5.0 * np.sin(x3 ** 3 / 100.0)


_FORMS = (_form_linear, _form_interaction, _form_sine)


def factor_mean(x, k):
    """Mean surface of factor k (0-based) evaluated at covariate rows x.

    The three functional forms cycle; each group of three factors reads a
    fresh triple of covariate columns.
    """
    if isinstance(x, AuxTable):
        x = x.values
    x = np.asarray(x, dtype=float)
    need = _required_covariates(k + 1)
    if x.ndim != 2 or x.shape[1] < need:
        raise ValueError(f"factor {k} needs at least {need} covariate columns")
    base = 3 * (k // 3)
    return _FORMS[k % 3](x, base)


def _required_covariates(k_factors):
    need = 0
    for k in range(k_factors):
        base = 3 * (k // 3)
        need = max(need, base + (3 if k % 3 == 2 else 2))
    return need


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    m: int = 1000
    c: int = 3
    k: int = 3
    pve: float = 0.5
    pve_factor: float = 0.95
    missing_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("matrix dimensions must be positive")
        if not 1 <= self.k <= min(self.n, self.m):
            raise ValueError("factor count must be in [1, min(n, m)]")
        if not 0.0 < self.pve < 1.0:
            raise ValueError("total variance fraction must be in (0, 1)")
        if not 0.0 < self.pve_factor < 1.0:
            raise ValueError("factor variance fraction must be in (0, 1)")
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ValueError("missing ratio must be in [0, 1)")
        need = _required_covariates(self.k)
        if self.c < need:
            raise ValueError(
                f"{self.k} factors need at least {need} covariates, got {self.c}")


@dataclass(frozen=True)
class SimTruth:
    """One simulated dataset plus everything that generated it."""

    y: MaskedMatrix
    y_true: np.ndarray
    x: AuxTable
    z: np.ndarray
    w: np.ndarray
    tau: float
    beta: np.ndarray
    config: SimConfig


def simulate_dataset(config):
    """Draw covariates, factors, loadings, and a noisy partially observed Y.

    Noise precisions are set from the realized draws: each factor's precision
    beta_k makes Var(F_k(X)) / (Var(F_k(X)) + 1/beta_k) equal pve_factor, and
    tau makes Var(Y_true) / (Var(Y_true) + 1/tau) equal pve. Masking is
    applied after the noise.
    """
    rng = np.random.default_rng(config.seed)
    n, m, k = config.n, config.m, config.k

    for attempt in range(_MAX_DRAW_RETRIES):
        x = rng.uniform(_UNIFORM_LOW, _UNIFORM_HIGH, size=(n, config.c))
        means = [factor_mean(x, j) for j in range(k)]
        if all(pvar(f) > 0.0 for f in means):
            break
    else:
        raise ValueError(
            "covariate draw kept producing a constant factor mean; "
            "increase n or check the configuration")

    beta = np.empty(k)
    z = np.empty((n, k))
    for j, f in enumerate(means):
        var_f = pvar(f)
        beta[j] = config.pve_factor / ((1.0 - config.pve_factor) * var_f)
        z[:, j] = f + rng.normal(0.0, 1.0 / np.sqrt(beta[j]), size=n)

    w = rng.normal(0.0, 1.0, size=(m, k))
    y_true = z @ w.T

    var_y = pvar(y_true)
    if var_y <= 0.0:
        raise ValueError("signal matrix is constant; cannot calibrate noise")
    tau = config.pve / ((1.0 - config.pve) * var_y)
    y_noisy = y_true + rng.normal(0.0, 1.0 / np.sqrt(tau), size=(n, m))

    mask_seed = int(rng.integers(0, 2 ** 63 - 1))
    y = mask_entries(y_noisy, config.missing_ratio, seed=mask_seed)

    names = [f"x{i + 1}" for i in range(config.c)]
    return SimTruth(
        y=y,
        y_true=y_true,
        x=AuxTable.from_numeric(x, names),
        z=z,
        w=w,
        tau=float(tau),
        beta=beta,
        config=config,
    )


def augment_covariates(x, n_permuted, n_redundant, seed):
    """Append shuffled copies and pure-noise columns to a covariate table.

    The first n_permuted columns are copied with their rows independently
    permuted (destroying any relation to the responses while keeping the
    marginal distribution); n_redundant uniform columns are appended after
    them. Permutation requires numeric columns.
    """
    if isinstance(x, AuxTable):
        values = x.values
        names = list(x.names)
        if n_permuted > 0 and any(kind != "numeric" for kind in x.kinds):
            raise ValueError("permutation requires numeric-only covariates")
    else:
        values = np.asarray(x, dtype=float)
        names = [f"x{i + 1}" for i in range(values.shape[1])]
    if values.ndim != 2:
        raise ValueError("covariate table must be 2-dimensional")
    n, c = values.shape
    if not 0 <= n_permuted <= c:
        raise ValueError("permuted column count must be in [0, n_cols]")
    if n_redundant < 0:
        raise ValueError("redundant column count must be nonnegative")

    rng = np.random.default_rng(seed)
    blocks = [values]
    out_names = list(names)
    for j in range(n_permuted):
        blocks.append(rng.permutation(values[:, j])[:, None])
        out_names.append(f"{names[j]}_pmt")
    if n_redundant > 0:
        blocks.append(
            rng.uniform(_UNIFORM_LOW, _UNIFORM_HIGH, size=(n, n_redundant)))
        out_names.extend(f"xr{i + 1}" for i in range(n_redundant))
    return AuxTable.from_numeric(np.hstack(blocks), out_names)
