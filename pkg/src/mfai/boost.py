"""Stagewise shrunken tree ensembles.

An ensemble is an immutable sequence of (tree, shrinkage) stages evaluating
to the shrinkage-weighted sum of tree predictions; the empty ensemble is the
zero function.
"""

import numpy as np

from .rtree import RegressionTree, tree_from_dict, tree_to_dict


class TreeEnsemble:
    """Immutable additive expansion of regression trees."""

    __slots__ = ("n_covariates", "stages")

    def __init__(self, n_covariates, stages=()):
        if n_covariates < 1:
            raise ValueError("ensemble needs at least one covariate")
        self.n_covariates = int(n_covariates)
        stages = tuple(stages)
        for tree, shrinkage in stages:
            self._check_stage(tree, shrinkage)
        self.stages = stages

    def _check_stage(self, tree, shrinkage):
        if not isinstance(tree, RegressionTree):
            raise TypeError("stage must hold a RegressionTree")
        if tree.n_covariates != self.n_covariates:
            raise ValueError(
                f"tree covers {tree.n_covariates} covariates, "
                f"ensemble expects {self.n_covariates}")
        if not 0.0 < shrinkage <= 1.0:
            raise ValueError(f"shrinkage must be in (0, 1], got {shrinkage}")

    def __len__(self):
        return len(self.stages)

    def append(self, tree, shrinkage):
        """New ensemble with one more stage; the receiver is unchanged."""
        self._check_stage(tree, shrinkage)
        return TreeEnsemble(self.n_covariates,
                            self.stages + ((tree, float(shrinkage)),))

    def evaluate(self, x):
        """Sum of shrunken tree predictions over the rows of x."""
        from .rtree import _covariate_values

        values = _covariate_values(x)
        out = np.zeros(values.shape[0])
        for tree, shrinkage in self.stages:
            out += shrinkage * tree.predict(values)
        return out

    def stage_prediction(self, x, stage):
        tree, shrinkage = self.stages[stage]
        return shrinkage * tree.predict(x)

    def total_importance(self, normalize=False):
        """Per-covariate importance summed over stages.

        With normalize=True the vector is rescaled to sum to one (all-zero
        importance stays all-zero).
        """
        total = np.zeros(self.n_covariates)
        for tree, _ in self.stages:
            total += tree.importance
        if normalize:
            s = total.sum()
            if s > 0.0:
                total = total / s
        return total

    def to_dict(self, levels):
        return [
            {"shrinkage": shrinkage, "tree": tree_to_dict(tree, levels)}
            for tree, shrinkage in self.stages
        ]

    @classmethod
    def from_dict(cls, records, n_covariates, levels):
        stages = tuple(
            (tree_from_dict(rec["tree"], levels), float(rec["shrinkage"]))
            for rec in records
        )
        return cls(n_covariates, stages)
