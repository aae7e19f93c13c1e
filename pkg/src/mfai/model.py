"""Multi-factor fitting: greedy ranking, automatic rank choice, backfitting.

Factors are fit one at a time on the running residual (observed entries
only). Backfitting then cycles through the factors, refitting each one on
the residual of all the others, warm-started from its current state, until
the summed per-factor bound stops moving. The fitted model is a plain value:
it can be saved to JSON and reloaded with bit-identical predictions.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .boost import TreeEnsemble
from .core import (FitOptions, FactorState, fit_single_factor,
                   PER_FEATURE, SHARED)
from .data import AuxTable, MaskedMatrix, as_masked
from .rtree import TreeParams, _covariate_values

MODEL_FORMAT = "mfai-model"
MODEL_VERSION = 1


@dataclass
class MfaiModel:
    factors: list
    n: int
    m: int
    c: int
    noise_mode: str
    schema: list
    options: FitOptions
    sweeps_run: int = None

    @property
    def k(self):
        return len(self.factors)

    def impute(self):
        """Dense completed matrix: the sum of per-factor mean products."""
        out = np.zeros((self.n, self.m))
        for st in self.factors:
            out += np.outer(st.mu, st.nu)
        return out

    def importance(self, normalize=False):
        """(k, c) per-factor covariate importance."""
        if not self.factors:
            return np.zeros((0, self.c))
        return np.vstack(
            [st.f.total_importance(normalize=normalize) for st in self.factors])


def _schema_of(x):
    if isinstance(x, AuxTable):
        return x.schema_with_levels()
    values = _covariate_values(x)
    return [{"name": f"x{i + 1}", "kind": "numeric"}
            for i in range(values.shape[1])]


def _subtract_factor(residual, state):
    return MaskedMatrix(
        residual.values - np.outer(state.mu, state.nu), residual.mask)


def _outer_variance(mu, nu):
    """Population variance of the dense rank-one product, via its sums."""
    n, m = mu.shape[0], nu.shape[0]
    mean = (mu.sum() * nu.sum()) / (n * m)
    mean_sq = (np.sum(mu * mu) * np.sum(nu * nu)) / (n * m)
    return max(float(mean_sq - mean * mean), 0.0)


def _scalar_tau(state):
    if isinstance(state.tau, np.ndarray):
        return float(np.mean(state.tau))
    return float(state.tau)


def _factor_progress(progress, label):
    if progress is None:
        return None
    return lambda it, value: progress(label, it, value)


def fit_greedy(y, x, k, options=None, progress=None):
    """Fit exactly k factors, each on the residual of the previous ones."""
    options = options or FitOptions()
    y = as_masked(y)
    if not 1 <= k <= min(y.n_rows, y.n_cols):
        raise ValueError(f"factor count must be in [1, {min(y.shape)}], got {k}")
    residual = y
    factors = []
    for j in range(k):
        state = fit_single_factor(
            residual, x, options,
            progress=_factor_progress(progress, f"factor {j + 1}"))
        factors.append(state)
        residual = _subtract_factor(residual, state)
    return MfaiModel(
        factors=factors, n=y.n_rows, m=y.n_cols,
        c=_covariate_values(x).shape[1], noise_mode=options.noise_mode,
        schema=_schema_of(x), options=options)


def fit_greedy_auto(y, x, k_max, sc=0.01, options=None, progress=None):
    """Greedy fitting with an automatic stop.

    After fitting each candidate factor, the factor is kept only if the
    variance of its dense mean product times its noise precision reaches
    ``sc``; otherwise it is discarded and fitting stops. The returned model
    may have zero factors.
    """
    options = options or FitOptions()
    y = as_masked(y)
    if not 1 <= k_max <= min(y.n_rows, y.n_cols):
        raise ValueError(
            f"maximum factor count must be in [1, {min(y.shape)}], got {k_max}")
    if sc <= 0.0:
        raise ValueError("null-check threshold must be positive")
    residual = y
    factors = []
    for j in range(k_max):
        state = fit_single_factor(
            residual, x, options,
            progress=_factor_progress(progress, f"factor {j + 1}"))
        signal = _outer_variance(state.mu, state.nu) * _scalar_tau(state)
        if signal < sc:
            break
        factors.append(state)
        residual = _subtract_factor(residual, state)
    return MfaiModel(
        factors=factors, n=y.n_rows, m=y.n_cols,
        c=_covariate_values(x).shape[1], noise_mode=options.noise_mode,
        schema=_schema_of(x), options=options)


def backfit(model, y, x, options=None, max_sweeps=100, progress=None):
    """Cyclic refitting of every factor against the others' residual.

    Returns a new model; the input model is untouched. Stops when the summed
    per-factor bound changes by less than the relative ELBO tolerance over a
    full sweep, or after max_sweeps sweeps.
    """
    options = options or model.options or FitOptions()
    y = as_masked(y)
    if y.n_rows != model.n or y.n_cols != model.m:
        raise ValueError("matrix shape does not match the model")
    factors = [st.copy() for st in model.factors]
    result = MfaiModel(
        factors=factors, n=model.n, m=model.m, c=model.c,
        noise_mode=model.noise_mode, schema=model.schema, options=options,
        sweeps_run=0)
    if not factors:
        return result

    outers = [np.outer(st.mu, st.nu) for st in factors]
    prev_obj = sum(st.elbo_trace[-1] for st in factors)
    for sweep in range(1, max_sweeps + 1):
        for j, st in enumerate(factors):
            others = np.zeros((model.n, model.m))
            for i, op in enumerate(outers):
                if i != j:
                    others += op
            residual = MaskedMatrix(y.values - others, y.mask)
            fit_single_factor(
                residual, x, options, init=st,
                progress=_factor_progress(
                    progress, f"sweep {sweep} factor {j + 1}"))
            outers[j] = np.outer(st.mu, st.nu)
        obj = sum(st.elbo_trace[-1] for st in factors)
        result.sweeps_run = sweep
        if abs(obj - prev_obj) <= options.tol_elbo_rel * (1.0 + abs(prev_obj)):
            break
        prev_obj = obj
    return result


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _levels_from_schema(schema):
    return [rec.get("levels") for rec in schema]


def _tau_to_json(tau):
    if isinstance(tau, np.ndarray):
        return [float(v) for v in tau]
    return float(tau)


def _options_to_json(options):
    tp = options.tree_params
    return {
        "max_iter": options.max_iter,
        "tol_elbo_rel": options.tol_elbo_rel,
        "shrinkage": options.shrinkage,
        "noise_mode": options.noise_mode,
        "seed": options.seed,
        "tree_params": {
            "max_depth": tp.max_depth,
            "min_node": tp.min_node,
            "min_gain": tp.min_gain,
            "max_surrogates": tp.max_surrogates,
        },
    }


def _options_from_json(rec):
    tp = rec["tree_params"]
    return FitOptions(
        max_iter=int(rec["max_iter"]),
        tol_elbo_rel=float(rec["tol_elbo_rel"]),
        shrinkage=float(rec["shrinkage"]),
        noise_mode=rec["noise_mode"],
        seed=int(rec["seed"]),
        tree_params=TreeParams(
            max_depth=int(tp["max_depth"]),
            min_node=int(tp["min_node"]),
            min_gain=float(tp["min_gain"]),
            max_surrogates=int(tp["max_surrogates"]),
        ),
    )


def model_to_dict(model):
    levels = _levels_from_schema(model.schema)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n": model.n,
        "m": model.m,
        "c": model.c,
        "k": model.k,
        "noise_mode": model.noise_mode,
        "options": _options_to_json(model.options),
        "schema": model.schema,
        "factors": [
            {
                "mu": [float(v) for v in st.mu],
                "a2": [float(v) for v in st.a2],
                "nu": [float(v) for v in st.nu],
                "b2": [float(v) for v in st.b2],
                "tau": _tau_to_json(st.tau),
                "beta": float(st.beta),
                "ensemble": st.f.to_dict(levels),
            }
            for st in model.factors
        ],
    }


def model_from_dict(rec):
    if rec.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if rec.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {rec.get('version')!r}")
    schema = rec["schema"]
    levels = _levels_from_schema(schema)
    noise_mode = rec["noise_mode"]
    if noise_mode not in (SHARED, PER_FEATURE):
        raise ValueError(f"unknown noise mode {noise_mode!r}")
    c = int(rec["c"])
    factors = []
    for fr in rec["factors"]:
        tau = fr["tau"]
        tau = np.array(tau, dtype=float) if isinstance(tau, list) else float(tau)
        factors.append(FactorState(
            mu=np.array(fr["mu"], dtype=float),
            a2=np.array(fr["a2"], dtype=float),
            nu=np.array(fr["nu"], dtype=float),
            b2=np.array(fr["b2"], dtype=float),
            tau=tau,
            beta=float(fr["beta"]),
            f=TreeEnsemble.from_dict(fr["ensemble"], c, levels),
            fx=None,
            elbo_trace=[],
            noise_mode=noise_mode,
        ))
    model = MfaiModel(
        factors=factors,
        n=int(rec["n"]), m=int(rec["m"]), c=c,
        noise_mode=noise_mode,
        schema=schema,
        options=_options_from_json(rec["options"]),
    )
    if model.k != int(rec["k"]):
        raise ValueError("factor count does not match the header")
    return model


def save_model(path, model):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
