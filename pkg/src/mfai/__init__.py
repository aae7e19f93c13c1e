"""Empirical-Bayes matrix factorization guided by auxiliary covariates.

A partially observed matrix is factored into a small number of rank-one
components whose sample-side factors carry Gaussian priors centered on
learned functions of per-sample covariates; the functions are stagewise
ensembles of shrunken regression trees grown inside a variational EM loop.
"""

from .baselines import hard_impute
from .boost import TreeEnsemble
from .core import (FactorState, FitOptions, PER_FEATURE, SHARED, elbo,
                   e_step, fit_single_factor, init_state, m_step_function,
                   m_step_precisions)
from .data import (AuxTable, MaskedMatrix, ParseError, as_masked, load_aux,
                   load_matrix, mask_entries, rmse, save_aux, save_matrix,
                   split_observed)
from .model import (MfaiModel, backfit, fit_greedy, fit_greedy_auto,
                    load_model, save_model)
from .rtree import RegressionTree, TreeParams, fit_tree, tree_importance
from .sim import SimConfig, SimTruth, augment_covariates, simulate_dataset

__all__ = [
    "AuxTable", "FactorState", "FitOptions", "MaskedMatrix", "MfaiModel",
    "ParseError", "PER_FEATURE", "RegressionTree", "SHARED", "SimConfig",
    "SimTruth", "TreeEnsemble", "TreeParams", "as_masked", "augment_covariates",
    "backfit", "e_step", "elbo", "fit_greedy", "fit_greedy_auto",
    "fit_single_factor", "fit_tree", "hard_impute", "init_state", "load_aux",
    "load_matrix", "load_model", "mask_entries", "m_step_function",
    "m_step_precisions", "rmse", "save_aux", "save_matrix", "save_model",
    "simulate_dataset", "split_observed", "tree_importance",
]

__version__ = "0.1.0"
