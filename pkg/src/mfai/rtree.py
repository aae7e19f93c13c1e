"""Least-squares regression trees with surrogate splits.

Split search conventions
------------------------
* Numeric candidates are midpoints of consecutive distinct sorted values;
  if a midpoint rounds up to the larger neighbor it is replaced by the
  smaller one, and routing is ``x <= threshold -> left``, so the realized
  partition always matches the scanned one.
* Categorical candidates order the levels present at the node by mean
  response (ties by level code) and scan prefixes of that ordering; the rule
  is a set of level codes sent left.
* Split goodness is the SSE reduction computed over the rows where the split
  variable is observed. Ties are broken toward the lowest covariate index,
  then the lowest threshold (prefix length for categorical rules).
* Child size limits apply to those observed rows; rows with the split
  variable missing are routed afterwards by the first applicable surrogate,
  else to the majority child, and can only enlarge a child.
* Surrogates are searched only when a node actually has rows with the
  primary variable missing. A surrogate is kept only if its agreement with
  the primary assignment (over rows where both variables are observed)
  strictly beats the majority-rule baseline; at most ``max_surrogates`` are
  kept, ordered by agreement descending.

Variable importance sums each primary split's goodness plus, for each kept
surrogate, goodness * (agreement - majority baseline).
"""

from dataclasses import dataclass

import numpy as np

from .data import CATEGORICAL, AuxTable

_PURE_NODE_REL_TOL = 1e-12


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 3
    min_node: int = 10
    min_gain: float = 0.0
    max_surrogates: int = 5

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        if self.min_node < 1:
            raise ValueError("min_node must be at least 1")
        if self.min_gain < 0.0:
            raise ValueError("min_gain must be nonnegative")
        if self.max_surrogates < 0:
            raise ValueError("max_surrogates must be nonnegative")


@dataclass(frozen=True)
class NumericRule:
    var: int
    threshold: float
    left_if_le: bool = True

    def applies(self, col):
        le = col <= self.threshold
        return le if self.left_if_le else ~le


@dataclass(frozen=True)
class CategoricalRule:
    var: int
    left_codes: frozenset

    def applies(self, col):
        return np.isin(col, sorted(self.left_codes))


@dataclass(frozen=True)
class Surrogate:
    rule: object
    agreement: float
    adjusted_goodness: float


@dataclass(frozen=True)
class Leaf:
    value: float
    n_rows: int


@dataclass(frozen=True)
class Split:
    rule: object
    goodness: float
    majority_left: bool
    surrogates: tuple
    left: object
    right: object
    n_rows: int


def _route_left(split, values, rows):
    """True where a row goes to the left child, following surrogates."""
    col = values[rows, split.rule.var]
    obs = ~np.isnan(col)
    left = np.empty(rows.shape[0], dtype=bool)
    left[obs] = split.rule.applies(col[obs])
    assigned = obs
    for s in split.surrogates:
        col_s = values[rows, s.rule.var]
        cand = ~assigned & ~np.isnan(col_s)
        if cand.any():
            left[cand] = s.rule.applies(col_s[cand])
            assigned = assigned | cand
    left[~assigned] = split.majority_left
    return left


class RegressionTree:
    """A fitted tree: routing structure plus cached variable importance."""

    __slots__ = ("root", "n_covariates", "importance")

    def __init__(self, root, n_covariates, importance):
        self.root = root
        self.n_covariates = n_covariates
        imp = np.array(importance, dtype=float)
        imp.setflags(write=False)
        self.importance = imp

    def predict(self, x):
        values = _covariate_values(x)
        if values.shape[1] != self.n_covariates:
            raise ValueError(
                f"tree expects {self.n_covariates} covariates, "
                f"got {values.shape[1]}")
        out = np.empty(values.shape[0])
        stack = [(self.root, np.arange(values.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            if isinstance(node, Leaf):
                out[rows] = node.value
                continue
            left = _route_left(node, values, rows)
            stack.append((node.left, rows[left]))
            stack.append((node.right, rows[~left]))
        return out

    def predict_row(self, row):
        return float(self.predict(np.asarray(row, dtype=float)[None, :])[0])

    def n_leaves(self):
        count = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                count += 1
            else:
                stack.extend((node.left, node.right))
        return count


def tree_importance(tree):
    """Per-covariate importance of one fitted tree."""
    return np.array(tree.importance)


def _covariate_values(x):
    if isinstance(x, AuxTable):
        return x.values
    values = np.asarray(x, dtype=float)
    if values.ndim != 2:
        raise ValueError("covariate array must be 2-dimensional")
    return values


def _covariate_kinds(x, n_cols):
    if isinstance(x, AuxTable):
        return x.kinds
    return ("numeric",) * n_cols


def _midpoint(a, b):
    thr = (a + b) / 2.0
    if thr == b:  # adjacent floats can round the midpoint up
        thr = a
    return float(thr)


def _best_numeric_split(xo, yo, min_node):
    """Best (gain, threshold) on observed rows, or None."""
    n = xo.shape[0]
    if n < 2 * min_node:
        return None
    order = np.argsort(xo, kind="stable")
    xs = xo[order]
    ys = yo[order]
    cum = np.cumsum(ys)
    total = cum[-1]
    n_left = np.arange(1, n)
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_node) & (n - n_left >= min_node)
    if not valid.any():
        return None
    left_sum = cum[:-1]
    gains = np.where(
        valid,
        left_sum ** 2 / n_left
        + (total - left_sum) ** 2 / (n - n_left)
        - total ** 2 / n,
        -np.inf,
    )
    i = int(np.argmax(gains))  # first max: lowest threshold on ties
    return float(gains[i]), _midpoint(xs[i], xs[i + 1])


def _best_categorical_split(xo, yo, min_node):
    """Best (gain, left_codes, prefix_len) on observed rows, or None."""
    n = xo.shape[0]
    if n < 2 * min_node:
        return None
    codes = xo.astype(int)
    counts = np.bincount(codes)
    sums = np.bincount(codes, weights=yo)
    present = np.nonzero(counts)[0]
    if present.size < 2:
        return None
    means = sums[present] / counts[present]
    order = np.lexsort((present, means))  # by mean response, ties by code
    ordered = present[order]
    cum_n = np.cumsum(counts[ordered])
    cum_s = np.cumsum(sums[ordered])
    total = cum_s[-1]
    n_left = cum_n[:-1]
    valid = (n_left >= min_node) & (n - n_left >= min_node)
    if not valid.any():
        return None
    left_sum = cum_s[:-1]
    gains = np.where(
        valid,
        left_sum ** 2 / n_left
        + (total - left_sum) ** 2 / (n - n_left)
        - total ** 2 / n,
        -np.inf,
    )
    j = int(np.argmax(gains))  # first max: shortest prefix on ties
    return float(gains[j]), frozenset(int(c) for c in ordered[: j + 1]), j + 1


def _best_numeric_surrogate(var, col, labels):
    """Best agreement rule for one numeric variable, or None.

    labels is the primary left/right assignment (True = left) over rows
    where both the primary and this variable are observed.
    """
    n = col.shape[0]
    order = np.argsort(col, kind="stable")
    xs = col[order]
    ls = labels[order].astype(float)
    cum_left = np.cumsum(ls)
    total_left = cum_left[-1]
    boundary = xs[1:] > xs[:-1]
    if not boundary.any():
        return None
    n_le = np.arange(1, n)
    # rows <= threshold predicted left: correct = lefts below + rights above
    raw_left = cum_left[:-1] + (n - n_le) - (total_left - cum_left[:-1])
    match_le_left = np.where(boundary, raw_left, -np.inf)
    match_le_right = np.where(boundary, n - raw_left, -np.inf)
    i_l = int(np.argmax(match_le_left))
    i_r = int(np.argmax(match_le_right))
    if match_le_left[i_l] >= match_le_right[i_r]:
        best, i, left_if_le = match_le_left[i_l], i_l, True
    else:
        best, i, left_if_le = match_le_right[i_r], i_r, False
    rule = NumericRule(var, _midpoint(xs[i], xs[i + 1]), left_if_le)
    return float(best) / n, rule


def _best_categorical_surrogate(var, col, labels):
    codes = col.astype(int)
    counts = np.bincount(codes)
    lefts = np.bincount(codes, weights=labels.astype(float))
    present = np.nonzero(counts)[0]
    go_left = lefts[present] >= counts[present] - lefts[present]
    matches = np.where(go_left, lefts[present],
                       counts[present] - lefts[present]).sum()
    left_codes = frozenset(int(c) for c in present[go_left])
    if not left_codes or len(left_codes) == len(present):
        return None  # one-sided rule carries no information
    return float(matches) / col.shape[0], CategoricalRule(var, left_codes)


def _rule_order_key(rule):
    if isinstance(rule, NumericRule):
        return rule.threshold
    return len(rule.left_codes)


def _find_surrogates(values, kinds, rows, primary_var, obs_primary,
                     left_obs, goodness, max_surrogates):
    """Ranked surrogates agreeing with the primary assignment."""
    found = []
    primary_rows = rows[obs_primary]
    for var in range(values.shape[1]):
        if var == primary_var:
            continue
        col = values[primary_rows, var]
        both = ~np.isnan(col)
        if not both.any():
            continue
        labels = left_obs[both]
        n_both = labels.shape[0]
        baseline = max(labels.sum(), n_both - labels.sum()) / n_both
        if kinds[var] == CATEGORICAL:
            cand = _best_categorical_surrogate(var, col[both], labels)
        else:
            cand = _best_numeric_surrogate(var, col[both], labels)
        if cand is None:
            continue
        agreement, rule = cand
        if agreement <= baseline:
            continue
        adjusted = goodness * (agreement - baseline)
        found.append(Surrogate(rule, agreement, adjusted))
    found.sort(key=lambda s: (-s.agreement, s.rule.var, _rule_order_key(s.rule)))
    return tuple(found[:max_surrogates])


def fit_tree(x, y, params=None):
    """Fit a least-squares regression tree.

    x may be an AuxTable or a numeric 2-D array (NaN = missing); y must be
    finite with one response per row.
    """
    params = params or TreeParams()
    values = _covariate_values(x)
    kinds = _covariate_kinds(x, values.shape[1])
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != values.shape[0]:
        raise ValueError("response must be 1-D with one entry per row")
    if y.shape[0] == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("response must be finite")
    if not np.any(~np.isnan(values)):
        raise ValueError("every covariate is missing in every row")

    n_cov = values.shape[1]
    importance = np.zeros(n_cov)

    def build(rows, depth):
        y_node = y[rows]
        n = rows.shape[0]
        mean = float(np.mean(y_node))
        if depth >= params.max_depth or n < 2 * params.min_node:
            return Leaf(mean, n)
        sse = float(np.sum((y_node - mean) ** 2))
        if sse <= _PURE_NODE_REL_TOL * n * (1.0 + mean * mean):
            return Leaf(mean, n)

        best = None  # (gain, var, rule)
        for var in range(n_cov):
            col = values[rows, var]
            obs = ~np.isnan(col)
            xo = col[obs]
            yo = y_node[obs]
            if kinds[var] == CATEGORICAL:
                cand = _best_categorical_split(xo, yo, params.min_node)
                if cand is None:
                    continue
                gain, left_codes, _ = cand
                rule = CategoricalRule(var, left_codes)
            else:
                cand = _best_numeric_split(xo, yo, params.min_node)
                if cand is None:
                    continue
                gain, threshold = cand
                rule = NumericRule(var, threshold)
            if gain <= 0.0 or gain < params.min_gain:
                continue
            if best is None or gain > best[0]:
                best = (gain, var, rule)
        if best is None:
            return Leaf(mean, n)

        gain, var, rule = best
        col = values[rows, var]
        obs_primary = ~np.isnan(col)
        left_obs = rule.applies(col[obs_primary])
        surrogates = ()
        if not obs_primary.all() and params.max_surrogates > 0:
            surrogates = _find_surrogates(
                values, kinds, rows, var, obs_primary, left_obs,
                gain, params.max_surrogates)
        n_left_obs = int(left_obs.sum())
        majority_left = n_left_obs >= left_obs.shape[0] - n_left_obs

        importance[var] += gain
        for s in surrogates:
            importance[s.rule.var] += s.adjusted_goodness

        shell = Split(rule, gain, majority_left, surrogates,
                      None, None, n)
        left_mask = _route_left(shell, values, rows)
        left_child = build(rows[left_mask], depth + 1)
        right_child = build(rows[~left_mask], depth + 1)
        return Split(rule, gain, majority_left, surrogates,
                     left_child, right_child, n)

    root = build(np.arange(values.shape[0]), 0)
    return RegressionTree(root, n_cov, importance)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _rule_to_dict(rule, levels):
    if isinstance(rule, NumericRule):
        return {
            "kind": "num",
            "var": rule.var,
            "threshold": repr(rule.threshold),
            "left_if_le": rule.left_if_le,
        }
    lev = levels[rule.var]
    if lev is None:
        raise ValueError(
            f"covariate {rule.var} has a categorical rule but no level list")
    return {
        "kind": "cat",
        "var": rule.var,
        "left_levels": sorted(lev[c] for c in rule.left_codes),
    }


def _rule_from_dict(rec, levels):
    var = int(rec["var"])
    if rec["kind"] == "num":
        return NumericRule(var, float(rec["threshold"]), bool(rec["left_if_le"]))
    if rec["kind"] == "cat":
        lev = levels[var]
        if lev is None:
            raise ValueError(
                f"covariate {var} has a categorical rule but no level list")
        index = {name: code for code, name in enumerate(lev)}
        return CategoricalRule(var, frozenset(index[n] for n in rec["left_levels"]))
    raise ValueError(f"unknown rule kind {rec['kind']!r}")


def _node_to_dict(node, levels):
    if isinstance(node, Leaf):
        return {"leaf": node.value, "n": node.n_rows}
    return {
        "rule": _rule_to_dict(node.rule, levels),
        "goodness": node.goodness,
        "majority_left": node.majority_left,
        "n": node.n_rows,
        "surrogates": [
            {
                "rule": _rule_to_dict(s.rule, levels),
                "agreement": s.agreement,
                "adjusted_goodness": s.adjusted_goodness,
            }
            for s in node.surrogates
        ],
        "left": _node_to_dict(node.left, levels),
        "right": _node_to_dict(node.right, levels),
    }


def _node_from_dict(rec, levels):
    if "leaf" in rec:
        return Leaf(float(rec["leaf"]), int(rec["n"]))
    return Split(
        rule=_rule_from_dict(rec["rule"], levels),
        goodness=float(rec["goodness"]),
        majority_left=bool(rec["majority_left"]),
        surrogates=tuple(
            Surrogate(
                rule=_rule_from_dict(s["rule"], levels),
                agreement=float(s["agreement"]),
                adjusted_goodness=float(s["adjusted_goodness"]),
            )
            for s in rec["surrogates"]
        ),
        left=_node_from_dict(rec["left"], levels),
        right=_node_from_dict(rec["right"], levels),
        n_rows=int(rec["n"]),
    )


def tree_to_dict(tree, levels):
    """JSON-ready encoding; levels maps covariate index -> level names."""
    return {
        "n_covariates": tree.n_covariates,
        "importance": [float(v) for v in tree.importance],
        "root": _node_to_dict(tree.root, levels),
    }


def tree_from_dict(rec, levels):
    return RegressionTree(
        root=_node_from_dict(rec["root"], levels),
        n_covariates=int(rec["n_covariates"]),
        importance=np.array(rec["importance"], dtype=float),
    )
