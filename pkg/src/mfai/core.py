"""Single-factor empirical-Bayes fit.

Variational EM for the rank-one model

    Y[n, m] = z[n] * w[m] + noise,   z ~ N(F(x_n), 1/beta),   w ~ N(0, 1),

where F is a stagewise ensemble of shrunken regression trees refreshed once
per EM iteration. The variational posterior is mean-field Gaussian: q(z) has
mean ``mu`` and per-row variance ``a2``, q(w) has mean ``nu`` and per-column
variance ``b2``. Noise is either a shared precision ``tau`` or one precision
per column ("per_feature").

Within one E-step the sample-side block (a2, mu) is refreshed first and the
feature-side block (b2, nu) then uses the updated mu; both the fully observed
and the partially observed paths follow the same ordering, so the masked
formulas reduce to the dense ones when every entry is observed.

The evidence lower bound keeps every term that depends on the posterior or
on (tau, beta, F); only additive constants are dropped. The reported trace is
therefore comparable across iterations and non-decreasing up to floating
point error.
"""

from dataclasses import dataclass, field

import numpy as np

from .boost import TreeEnsemble
from .data import as_masked
from .numutil import leading_triplet, pvar
from .rtree import TreeParams, fit_tree, _covariate_values

SHARED = "shared"
PER_FEATURE = "per_feature"
NOISE_MODES = (SHARED, PER_FEATURE)


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    tol_elbo_rel: float = 1e-6
    shrinkage: float = 0.1
    noise_mode: str = SHARED
    tree_params: TreeParams = field(default_factory=TreeParams)
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol_elbo_rel <= 0.0:
            raise ValueError("ELBO tolerance must be positive")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError(f"shrinkage must be in (0, 1], got {self.shrinkage}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise mode must be one of {NOISE_MODES}")


@dataclass
class FactorState:
    """Posterior moments, precisions, and prior-mean ensemble of one factor.

    ``fx`` caches the ensemble evaluated at the training covariates so each
    iteration only adds the newest tree's predictions.
    """

    mu: np.ndarray
    a2: np.ndarray
    nu: np.ndarray
    b2: np.ndarray
    tau: object  # float, or (m,) array in per-feature mode
    beta: float
    f: TreeEnsemble
    fx: np.ndarray
    elbo_trace: list
    noise_mode: str = SHARED

    def copy(self):
        tau = self.tau.copy() if isinstance(self.tau, np.ndarray) else self.tau
        return FactorState(
            mu=self.mu.copy(), a2=self.a2.copy(),
            nu=self.nu.copy(), b2=self.b2.copy(),
            tau=tau, beta=self.beta,
            f=self.f, fx=None if self.fx is None else self.fx.copy(),
            elbo_trace=list(self.elbo_trace),
            noise_mode=self.noise_mode,
        )


def _refresh_fx(state, x):
    if state.fx is None:
        if x is None:
            raise ValueError("state has no cached prior mean; pass covariates")
        state.fx = state.f.evaluate(x)


# ---------------------------------------------------------------------------
# E-step: coordinate ascent on q(z) then q(w)
# ---------------------------------------------------------------------------

def e_step(state, y, x=None):
    """One coordinate-ascent pass over the variational posterior."""
    y = as_masked(y)
    _refresh_fx(state, x)
    mu, a2, nu, b2 = state.mu, state.a2, state.nu, state.b2
    tau, beta, fx = state.tau, state.beta, state.fx
    n, m = y.shape

    if state.noise_mode == SHARED:
        if y.fully_observed:
            yv = y.values
            a2_val = 1.0 / (beta + tau * (np.sum(nu * nu) + np.sum(b2)))
            a2 = np.full(n, a2_val)
            mu = a2 * (beta * fx + tau * np.einsum("nm,m->n", yv, nu))
            b2_val = 1.0 / (1.0 + tau * (np.sum(mu * mu) + np.sum(a2)))
            b2 = np.full(m, b2_val)
            nu = b2 * (tau * np.einsum("nm,n->m", yv, mu))
        else:
            y0 = y.filled(0.0)
            o = y.mask_f
            a2 = 1.0 / (beta + tau * np.einsum("nm,m->n", o, nu * nu + b2))
            mu = a2 * (beta * fx + tau * np.einsum("nm,m->n", y0, nu))
            b2 = 1.0 / (1.0 + tau * np.einsum("nm,n->m", o, mu * mu + a2))
            nu = b2 * (tau * np.einsum("nm,n->m", y0, mu))
    else:
        if y.fully_observed:
            yv = y.values
            a2_val = 1.0 / (beta + np.sum(tau * (nu * nu + b2)))
            a2 = np.full(n, a2_val)
            mu = a2 * (beta * fx + np.einsum("nm,m->n", yv, tau * nu))
            b2 = 1.0 / (1.0 + tau * (np.sum(mu * mu) + np.sum(a2)))
            nu = b2 * tau * np.einsum("nm,n->m", yv, mu)
        else:
            y0 = y.filled(0.0)
            o = y.mask_f
            a2 = 1.0 / (beta + np.einsum("nm,m->n", o, tau * (nu * nu + b2)))
            mu = a2 * (beta * fx + np.einsum("nm,m->n", y0, tau * nu))
            b2 = 1.0 / (1.0 + tau * np.einsum("nm,n->m", o, mu * mu + a2))
            nu = b2 * tau * np.einsum("nm,n->m", y0, mu)

    state.mu, state.a2, state.nu, state.b2 = mu, a2, nu, b2
    return state


# ---------------------------------------------------------------------------
# likelihood quadratic pieces shared by the M-step and the ELBO
# ---------------------------------------------------------------------------

def _resid_sq_cols_dense(yv, mu, nu):
    e = yv - np.outer(mu, nu)
    return np.einsum("nm,nm->m", e, e)


def _resid_sq_cols_masked(y0, o, mu, nu):
    e = (y0 - np.outer(mu, nu)) * o
    return np.einsum("nm,nm->m", e, e)


def _cross_cols_dense(mu, a2, nu, b2):
    # per-column posterior cross-variance, in the cancellation-free form
    # mu^2 b2 + a2 nu^2 + a2 b2 (entrywise nonnegative)
    sum_mu2 = np.sum(mu * mu)
    sum_a2 = np.sum(a2)
    return b2 * sum_mu2 + (nu * nu) * sum_a2 + b2 * sum_a2


def _cross_cols_masked(o, mu, a2, nu, b2):
    ot_mu2 = np.einsum("nm,n->m", o, mu * mu)
    ot_a2 = np.einsum("nm,n->m", o, a2)
    return b2 * ot_mu2 + (nu * nu) * ot_a2 + b2 * ot_a2


def _quad_cols(state, y):
    """Per-column (residual^2, cross-variance) of the expected likelihood."""
    if y.fully_observed:
        resid = _resid_sq_cols_dense(y.values, state.mu, state.nu)
        cross = _cross_cols_dense(state.mu, state.a2, state.nu, state.b2)
    else:
        y0 = y.filled(0.0)
        o = y.mask_f
        resid = _resid_sq_cols_masked(y0, o, state.mu, state.nu)
        cross = _cross_cols_masked(o, state.mu, state.a2, state.nu, state.b2)
    return resid, cross


# ---------------------------------------------------------------------------
# M-step for the precisions
# ---------------------------------------------------------------------------

def m_step_precisions(state, y, x=None):
    """Closed-form update of the noise and prior precisions."""
    y = as_masked(y)
    _refresh_fx(state, x)
    n, m = y.shape
    resid, cross = _quad_cols(state, y)

    if state.noise_mode == SHARED:
        if y.fully_observed:
            count = n * m
        else:
            count = y.n_observed
        state.tau = count / float(np.sum(resid) + np.sum(cross))
    else:
        if y.fully_observed:
            state.tau = n / (resid + cross)
        else:
            counts = np.einsum("nm->m", y.mask_f)
            denom = resid + cross
            state.tau = np.where(
                counts > 0, counts / np.where(denom > 0, denom, 1.0), state.tau)

    r = state.mu - state.fx
    state.beta = state.mu.shape[0] / float(np.sum(r * r) + np.sum(state.a2))
    return state


# ---------------------------------------------------------------------------
# M-step for the prior mean: one more shrunken tree
# ---------------------------------------------------------------------------

def m_step_function(state, x, options):
    """Fit one tree to the prior-mean residual and append it shrunken."""
    r = state.mu - state.fx
    tree = fit_tree(x, r, options.tree_params)
    pred = tree.predict(x)
    s = options.shrinkage

    new_sq = float(np.sum((r - s * pred) ** 2))
    old_sq = float(np.sum(r * r))
    # least-squares leaves make the stage a descent direction; anything else
    # indicates a broken tree fit
    if not new_sq <= old_sq * (1.0 + 1e-9) + 1e-12:
        raise AssertionError(
            f"tree stage increased the prior-mean residual: {old_sq} -> {new_sq}")

    state.f = state.f.append(tree, s)
    state.fx = state.fx + s * pred
    return state


# ---------------------------------------------------------------------------
# evidence lower bound
# ---------------------------------------------------------------------------

def elbo(state, y, x=None):
    """Variational lower bound up to an additive constant.

    All posterior- and parameter-dependent terms are kept; only constants
    (the 2*pi factors and fixed entropy offsets) are dropped, identically
    for the dense and masked paths.
    """
    y = as_masked(y)
    _refresh_fx(state, x)
    n, m = y.shape
    resid, cross = _quad_cols(state, y)

    if state.noise_mode == SHARED:
        count = n * m if y.fully_observed else y.n_observed
        loglik = 0.5 * count * np.log(state.tau) \
            - 0.5 * state.tau * float(np.sum(resid) + np.sum(cross))
    else:
        if y.fully_observed:
            counts = np.full(m, float(n))
        else:
            counts = np.einsum("nm->m", y.mask_f)
        log_tau = np.where(counts > 0, np.log(state.tau), 0.0)
        loglik = 0.5 * float(np.sum(counts * log_tau)) \
            - 0.5 * float(np.sum(state.tau * (resid + cross)))

    r = state.mu - state.fx
    prior_z = 0.5 * n * np.log(state.beta) \
        - 0.5 * state.beta * float(np.sum(r * r) + np.sum(state.a2))
    prior_w = -0.5 * float(np.sum(state.nu * state.nu) + np.sum(state.b2))
    entropy = 0.5 * float(np.sum(np.log(state.a2)) + np.sum(np.log(state.b2)))
    return float(loglik + prior_z + prior_w + entropy)


# ---------------------------------------------------------------------------
# initialization and the fit loop
# ---------------------------------------------------------------------------

def init_state(y, x, options):
    """Leading-SVD start on the mean-imputed matrix."""
    y = as_masked(y)
    n, m = y.shape
    obs = y.observed_values()
    if obs.size == 0:
        raise ValueError("cannot fit a factor with zero observed entries")
    filled = y.filled(float(np.mean(obs)))
    sigma, u, v = leading_triplet(filled)
    root = np.sqrt(sigma)
    mu = u * root
    nu = v * root

    var_obs = pvar(obs)
    tau0 = 1.0 / var_obs if var_obs > 0.0 else 1.0
    var_mu = pvar(mu)
    beta0 = 1.0 / var_mu if var_mu > 0.0 else 1.0

    n_cov = _covariate_values(x).shape[1]
    tau = np.full(m, tau0) if options.noise_mode == PER_FEATURE else tau0
    return FactorState(
        mu=mu, a2=np.ones(n), nu=nu, b2=np.ones(m),
        tau=tau, beta=beta0,
        f=TreeEnsemble(n_cov), fx=np.zeros(n),
        elbo_trace=[], noise_mode=options.noise_mode,
    )


def fit_single_factor(y, x, options=None, init=None, progress=None):
    """Run the EM loop until the ELBO change is small or max_iter is hit.

    With ``init`` the loop warm-starts from an existing state (the state is
    mutated and returned); runs at least one full iteration. ``progress``
    is an optional callable(iteration, elbo_value).
    """
    options = options or FitOptions()
    y = as_masked(y)
    values = _covariate_values(x)
    if values.shape[0] != y.n_rows:
        raise ValueError(
            f"covariate rows ({values.shape[0]}) do not match matrix rows "
            f"({y.n_rows})")
    if y.n_observed == 0:
        raise ValueError("cannot fit a factor with zero observed entries")

    state = init if init is not None else init_state(y, x, options)
    _refresh_fx(state, x)
    prev = state.elbo_trace[-1] if state.elbo_trace else None

    for _ in range(options.max_iter):
        e_step(state, y)
        m_step_precisions(state, y)
        m_step_function(state, x, options)
        value = elbo(state, y)
        if not np.isfinite(value):
            raise FloatingPointError("ELBO became non-finite")
        state.elbo_trace.append(value)
        if progress is not None:
            progress(len(state.elbo_trace), value)
        if prev is not None and abs(value - prev) <= \
                options.tol_elbo_rel * (1.0 + abs(prev)):
            break
        prev = value
    return state
