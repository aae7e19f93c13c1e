"""Matrix containers, masking, splitting, metrics, and file I/O.

File formats
------------
Dense CSV
    Comma-separated numeric matrix, one row per line. A single header row is
    optional and detected by attempting to parse the first line; the token
    ``NA`` (case-sensitive) marks a missing entry.

Coordinate (coo)
    A header line ``N M nnz`` followed by ``nnz`` lines ``row col value`` with
    0-based indices, whitespace-separated. Only observed entries are listed.
    A non-finite value, malformed line, out-of-range or duplicate index is a
    parse error reported with its line number.

Auxiliary covariate table
    A CSV with a required header row plus a sidecar JSON schema: a list of
    ``{"name": ..., "kind": "numeric" | "categorical"}`` records, one per
    column, in column order. ``NA`` marks a missing value in either kind of
    column.

Index set
    One ``row col`` pair per line, 0-based, whitespace-separated. Blank lines
    and lines starting with ``#`` are ignored.
"""

import csv
import json

import numpy as np

MISSING_TOKEN = "NA"


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


def _parse_error(path, lineno, message):
    return ParseError(f"{path}:{lineno}: {message}")


class MaskedMatrix:
    """A dense real matrix with an explicit observed-entry mask.

    ``values`` holds NaN at unobserved positions; ``mask`` is boolean with
    True at observed positions. Instances are immutable: operations that
    change the observed set or the values return new instances.
    """

    __slots__ = ("values", "mask", "_filled0", "_maskf")

    def __init__(self, values, mask=None):
        values = np.array(values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ValueError("matrix must be 2-dimensional")
        if mask is None:
            mask = ~np.isnan(values)
        else:
            mask = np.array(mask, dtype=bool, copy=True)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values shape")
            values = np.where(mask, values, np.nan)
        if np.any(~np.isfinite(values[mask])):
            raise ValueError("observed entries must be finite")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "_filled0", None)
        object.__setattr__(self, "_maskf", None)

    def __setattr__(self, name, value):
        raise AttributeError("MaskedMatrix is immutable")

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_observed(self):
        return int(self.mask.sum())

    @property
    def missing_ratio(self):
        return 1.0 - self.n_observed / self.mask.size

    @property
    def fully_observed(self):
        return bool(self.mask.all())

    def filled(self, fill_value=0.0):
        """Dense copy with unobserved entries replaced by fill_value."""
        if fill_value == 0.0:
            cached = object.__getattribute__(self, "_filled0")
            if cached is None:
                cached = np.where(self.mask, self.values, 0.0)
                cached.setflags(write=False)
                object.__setattr__(self, "_filled0", cached)
            return cached
        return np.where(self.mask, self.values, fill_value)

    @property
    def mask_f(self):
        """Float 0/1 view of the mask, cached for repeated contractions."""
        cached = object.__getattribute__(self, "_maskf")
        if cached is None:
            cached = self.mask.astype(float)
            cached.setflags(write=False)
            object.__setattr__(self, "_maskf", cached)
        return cached

    def observed_indices(self):
        """(n_observed, 2) int array of observed (row, col), row-major order."""
        rows, cols = np.nonzero(self.mask)
        return np.column_stack([rows, cols])

    def observed_values(self):
        """Observed entries in row-major order."""
        return self.values[self.mask]

    def __eq__(self, other):
        if not isinstance(other, MaskedMatrix):
            return NotImplemented
        return bool(
            np.array_equal(self.mask, other.mask)
            and np.array_equal(self.filled(0.0), other.filled(0.0))
        )

    def __hash__(self):
        return None  # unhashable, like ndarray

    def __repr__(self):
        return (
            f"MaskedMatrix({self.n_rows}x{self.n_cols}, "
            f"{self.n_observed} observed)"
        )


def as_masked(y):
    """Coerce an ndarray (NaN = missing) or MaskedMatrix to MaskedMatrix."""
    if isinstance(y, MaskedMatrix):
        return y
    return MaskedMatrix(np.asarray(y, dtype=float))


def mask_entries(y, ratio, seed):
    """Hide a uniformly random subset of the observed entries.

    Removes ``round(ratio * n_observed)`` entries drawn without replacement.
    ratio must lie in [0, 1) and at least one entry must stay observed.
    """
    y = as_masked(y)
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"masking ratio must be in [0, 1), got {ratio}")
    n_obs = y.n_observed
    n_remove = round(ratio * n_obs)
    if n_remove >= n_obs:
        raise ValueError("masking would remove every observed entry")
    if n_remove == 0:
        return MaskedMatrix(y.values, y.mask)
    rng = np.random.default_rng(seed)
    idx = y.observed_indices()
    chosen = rng.choice(n_obs, size=n_remove, replace=False)
    mask = np.array(y.mask)
    mask[idx[chosen, 0], idx[chosen, 1]] = False
    return MaskedMatrix(y.values, mask)


def split_observed(indices, train_ratio, seed):
    """Partition an index set into (train, test), |train| = round(ratio * n).

    Both parts are returned sorted in row-major order.
    """
    indices = np.asarray(indices, dtype=int)
    if indices.ndim != 2 or indices.shape[1] != 2:
        raise ValueError("index set must have shape (n, 2)")
    n = indices.shape[0]
    if n < 2:
        raise ValueError("need at least two indices to split")
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train ratio must be in (0, 1), got {train_ratio}")
    n_train = round(train_ratio * n)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train = indices[np.sort(perm[:n_train])]
    test = indices[np.sort(perm[n_train:])]
    return train, test


def _value_matrix(x):
    if isinstance(x, MaskedMatrix):
        return x.values
    return np.asarray(x, dtype=float)


def rmse(pred, truth, eval_set):
    """Root mean squared error between two matrices over an index set."""
    eval_set = np.asarray(eval_set, dtype=int)
    if eval_set.ndim != 2 or eval_set.shape[1] != 2:
        raise ValueError("eval set must have shape (n, 2)")
    if eval_set.shape[0] == 0:
        raise ValueError("eval set is empty")
    p = _value_matrix(pred)
    t = _value_matrix(truth)
    rows, cols = eval_set[:, 0], eval_set[:, 1]
    for name, mat in (("pred", p), ("truth", t)):
        if rows.max() >= mat.shape[0] or cols.max() >= mat.shape[1]:
            raise ValueError(f"eval set index out of bounds for {name}")
    diff = p[rows, cols] - t[rows, cols]
    if np.any(~np.isfinite(diff)):
        raise ValueError("eval set touches a missing or non-finite entry")
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------------------
# dense CSV
# ---------------------------------------------------------------------------

def _parse_cell(token):
    token = token.strip()
    if token == MISSING_TOKEN:
        return np.nan
    return float(token)


def _is_data_row(tokens):
    for tok in tokens:
        tok = tok.strip()
        if tok == MISSING_TOKEN:
            continue
        try:
            float(tok)
        except ValueError:
            return False
    return True


def load_dense_csv(path):
    """Load a dense CSV matrix; an optional header row is auto-detected."""
    rows = []
    n_cols = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, tokens in enumerate(reader, start=1):
            if not tokens or all(t.strip() == "" for t in tokens):
                continue
            if lineno == 1 and not _is_data_row(tokens):
                continue  # header
            if n_cols is None:
                n_cols = len(tokens)
            elif len(tokens) != n_cols:
                raise _parse_error(
                    path, lineno,
                    f"expected {n_cols} columns, found {len(tokens)}")
            try:
                rows.append([_parse_cell(t) for t in tokens])
            except ValueError:
                raise _parse_error(path, lineno, "unparseable numeric cell")
    if not rows:
        raise _parse_error(path, 1, "no data rows")
    return MaskedMatrix(np.array(rows, dtype=float))


def save_dense_csv(path, matrix, header=None):
    """Write a dense CSV; unobserved entries become ``NA``.

    Values are printed with 17 significant digits so reloading is lossless.
    """
    matrix = as_masked(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for i in range(matrix.n_rows):
            row = [
                format(v, ".17g") if ok else MISSING_TOKEN
                for v, ok in zip(matrix.values[i], matrix.mask[i])
            ]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# coordinate format
# ---------------------------------------------------------------------------

def load_coo(path):
    """Load a coordinate-format matrix (header ``N M nnz``)."""
    with open(path) as fh:
        lines = fh.readlines()
    if not lines:
        raise _parse_error(path, 1, "empty file, expected 'N M nnz' header")
    head = lines[0].split()
    if len(head) != 3:
        raise _parse_error(path, 1, "header must be 'N M nnz'")
    try:
        n, m, nnz = (int(t) for t in head)
    except ValueError:
        raise _parse_error(path, 1, "header must contain three integers")
    if n <= 0 or m <= 0 or nnz < 0:
        raise _parse_error(path, 1, "header dimensions must be positive")
    values = np.full((n, m), np.nan)
    mask = np.zeros((n, m), dtype=bool)
    count = 0
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise _parse_error(
                path, lineno, f"expected 'row col value', found {len(tokens)} tokens")
        try:
            r, c = int(tokens[0]), int(tokens[1])
            v = float(tokens[2])
        except ValueError:
            raise _parse_error(path, lineno, "unparseable entry")
        if not 0 <= r < n or not 0 <= c < m:
            raise _parse_error(path, lineno, f"index ({r}, {c}) out of range")
        if not np.isfinite(v):
            raise _parse_error(path, lineno, "entry value must be finite")
        if mask[r, c]:
            raise _parse_error(path, lineno, f"duplicate entry ({r}, {c})")
        values[r, c] = v
        mask[r, c] = True
        count += 1
    if count != nnz:
        raise _parse_error(
            path, len(lines), f"header promised {nnz} entries, found {count}")
    return MaskedMatrix(values, mask)


def save_coo(path, matrix):
    """Write observed entries in coordinate format, row-major order."""
    matrix = as_masked(matrix)
    idx = matrix.observed_indices()
    with open(path, "w") as fh:
        fh.write(f"{matrix.n_rows} {matrix.n_cols} {idx.shape[0]}\n")
        for r, c in idx:
            fh.write(f"{r} {c} {format(matrix.values[r, c], '.17g')}\n")


def detect_format(path):
    """Guess 'coo' vs 'dense-csv' from the first line of a file."""
    with open(path) as fh:
        first = fh.readline()
    tokens = first.split()
    if len(tokens) == 3:
        try:
            int(tokens[0]), int(tokens[1]), int(tokens[2])
            return "coo"
        except ValueError:
            pass
    return "dense-csv"


def load_matrix(path, fmt):
    """Load a matrix in the named format ('dense-csv', 'coo', or 'auto')."""
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "dense-csv":
        return load_dense_csv(path)
    if fmt == "coo":
        return load_coo(path)
    raise ValueError(f"unknown matrix format {fmt!r}")


def save_matrix(path, matrix, fmt):
    if fmt == "dense-csv":
        save_dense_csv(path, matrix)
    elif fmt == "coo":
        save_coo(path, matrix)
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


# ---------------------------------------------------------------------------
# auxiliary covariate table
# ---------------------------------------------------------------------------

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class AuxTable:
    """Covariate table: numeric and categorical columns, missing allowed.

    Values are held as a dense float matrix. Categorical columns store level
    codes (positions in the sorted level list); missing values are NaN in
    either kind of column.
    """

    __slots__ = ("values", "names", "kinds", "levels")

    def __init__(self, values, names, kinds, levels):
        values = np.array(values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ValueError("covariate table must be 2-dimensional")
        n_cols = values.shape[1]
        if not (len(names) == len(kinds) == len(levels) == n_cols):
            raise ValueError("column metadata lengths do not match")
        for kind, lev in zip(kinds, levels):
            if kind not in (NUMERIC, CATEGORICAL):
                raise ValueError(f"unknown column kind {kind!r}")
            if kind == CATEGORICAL and lev is None:
                raise ValueError("categorical column needs a level list")
            if kind == NUMERIC and lev is not None:
                raise ValueError("numeric column must not carry levels")
        values.setflags(write=False)
        self.values = values
        self.names = tuple(names)
        self.kinds = tuple(kinds)
        self.levels = tuple(tuple(l) if l is not None else None for l in levels)

    @classmethod
    def from_numeric(cls, array, names=None):
        array = np.asarray(array, dtype=float)
        if array.ndim != 2:
            raise ValueError("covariate array must be 2-dimensional")
        n_cols = array.shape[1]
        if names is None:
            names = [f"x{i + 1}" for i in range(n_cols)]
        return cls(array, names, [NUMERIC] * n_cols, [None] * n_cols)

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    def column(self, c):
        return self.values[:, c]

    def schema(self):
        """Column descriptors in sidecar-schema form."""
        return [{"name": n, "kind": k} for n, k in zip(self.names, self.kinds)]

    def schema_with_levels(self):
        out = []
        for n, k, lev in zip(self.names, self.kinds, self.levels):
            rec = {"name": n, "kind": k}
            if k == CATEGORICAL:
                rec["levels"] = list(lev)
            out.append(rec)
        return out


def load_schema(path):
    """Load a sidecar schema JSON (list of {name, kind} records)."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: schema must be a non-empty list")
    schema = []
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict) or "name" not in rec or "kind" not in rec:
            raise ValueError(f"{path}: schema record {i} needs name and kind")
        if rec["kind"] not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"{path}: unknown column kind {rec['kind']!r}")
        schema.append({"name": str(rec["name"]), "kind": rec["kind"]})
    return schema


def save_schema(path, schema):
    with open(path, "w") as fh:
        json.dump([{"name": r["name"], "kind": r["kind"]} for r in schema],
                  fh, indent=2)
        fh.write("\n")


def load_aux(csv_path, schema_path):
    """Load a covariate CSV plus its sidecar schema into an AuxTable."""
    schema = load_schema(schema_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise _parse_error(csv_path, 1, "missing header row")
        header = [h.strip() for h in header]
        if len(header) != len(schema):
            raise _parse_error(
                csv_path, 1,
                f"header has {len(header)} columns, schema has {len(schema)}")
        for col, rec in zip(header, schema):
            if col != rec["name"]:
                raise _parse_error(
                    csv_path, 1,
                    f"header column {col!r} does not match schema {rec['name']!r}")
        raw_rows = []
        for lineno, tokens in enumerate(reader, start=2):
            if not tokens or all(t.strip() == "" for t in tokens):
                continue
            if len(tokens) != len(schema):
                raise _parse_error(
                    csv_path, lineno,
                    f"expected {len(schema)} columns, found {len(tokens)}")
            raw_rows.append([t.strip() for t in tokens])
    if not raw_rows:
        raise _parse_error(csv_path, 2, "no data rows")

    n = len(raw_rows)
    c = len(schema)
    values = np.full((n, c), np.nan)
    levels = []
    for j, rec in enumerate(schema):
        col = [row[j] for row in raw_rows]
        if rec["kind"] == NUMERIC:
            for i, tok in enumerate(col):
                if tok == MISSING_TOKEN:
                    continue
                try:
                    values[i, j] = float(tok)
                except ValueError:
                    raise _parse_error(
                        csv_path, i + 2,
                        f"column {rec['name']!r}: unparseable numeric value {tok!r}")
            levels.append(None)
        else:
            present = sorted({tok for tok in col if tok != MISSING_TOKEN})
            code = {lev: k for k, lev in enumerate(present)}
            for i, tok in enumerate(col):
                if tok != MISSING_TOKEN:
                    values[i, j] = code[tok]
            levels.append(present)
    return AuxTable(values,
                    [r["name"] for r in schema],
                    [r["kind"] for r in schema],
                    levels)


def save_aux(csv_path, schema_path, aux):
    """Write an AuxTable as CSV + sidecar schema JSON."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(aux.names)
        for i in range(aux.n_rows):
            row = []
            for j in range(aux.n_cols):
                v = aux.values[i, j]
                if np.isnan(v):
                    row.append(MISSING_TOKEN)
                elif aux.kinds[j] == CATEGORICAL:
                    row.append(aux.levels[j][int(v)])
                else:
                    row.append(format(v, ".17g"))
            writer.writerow(row)
    save_schema(schema_path, aux.schema())


# ---------------------------------------------------------------------------
# index set files
# ---------------------------------------------------------------------------

def load_index_set(path):
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 2:
                raise _parse_error(path, lineno, "expected 'row col'")
            try:
                pairs.append((int(tokens[0]), int(tokens[1])))
            except ValueError:
                raise _parse_error(path, lineno, "indices must be integers")
    if not pairs:
        raise _parse_error(path, 1, "no index pairs")
    return np.array(pairs, dtype=int)


def save_index_set(path, indices):
    indices = np.asarray(indices, dtype=int)
    with open(path, "w") as fh:
        for r, c in indices:
            fh.write(f"{r} {c}\n")
