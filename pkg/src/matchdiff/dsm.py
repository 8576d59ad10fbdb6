"""Projection onto (relaxed) doubly stochastic matrices and match extraction.

Sinkhorn normalization runs in the log domain: alternating row/column
log-sum-exp subtraction, exponentiated at the end. Exact mode enforces row and
column sums of 1 (square matrices); relaxed mode appends one slack row and one
slack column of zero logit before normalizing, strips them after, then divides
each row by max(1, row sum). The final clamp keeps the sub-stochastic
invariant (all marginals <= 1) valid even when the iteration count is too
small for the alternation itself to have converged.

Both a plain-ndarray path and an unrolled differentiable path (through the
tensor module) are provided; they execute the same op sequence.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .errors import DataError, DimensionError, NumericError
from .tensor import DiffValue

MODES = ("exact", "relaxed")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise NumericError(f"unknown marginal mode {mode!r}; expected one of {MODES}")


def _log_normalize(log_m: np.ndarray, iters: int) -> np.ndarray:
    for _ in range(iters):
        log_m = log_m - tensor._logsumexp(log_m, axis=1)
        log_m = log_m - tensor._logsumexp(log_m, axis=0)
    return log_m


def sinkhorn_project_log(log_scores: np.ndarray, iters: int = 30, mode: str = "relaxed") -> np.ndarray:
    """Project log-domain scores onto the (relaxed) doubly stochastic set.

    Entries of log_scores are logits: exp(log_scores) is the positive score
    matrix being normalized. Returns probabilities, not logs.
    """
    _check_mode(mode)
    log_scores = np.asarray(log_scores, dtype=np.float64)
    if log_scores.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {log_scores.shape}")
    if iters < 1:
        raise NumericError(f"iters must be >= 1, got {iters}")
    if not np.all(np.isfinite(log_scores) | np.isneginf(log_scores)):
        raise NumericError("log scores contain nan or +inf")
    n, m = log_scores.shape
    if mode == "exact":
        if n != m:
            raise DimensionError(f"exact mode requires a square matrix, got {n}x{m}")
        with np.errstate(divide="ignore"):
            row_ok = np.isfinite(tensor._logsumexp(log_scores, axis=1)).all()
            col_ok = np.isfinite(tensor._logsumexp(log_scores, axis=0)).all()
        if not (row_ok and col_ok):
            raise NumericError("exact mode needs a positive entry in every row and column")
        return np.exp(_log_normalize(log_scores, iters))
    padded = np.zeros((n + 1, m + 1))
    padded[:n, :m] = log_scores
    out = np.exp(_log_normalize(padded, iters)[:n, :m])
    return out / np.maximum(1.0, out.sum(axis=1, keepdims=True))


def sinkhorn_project(m: np.ndarray, iters: int = 30, mode: str = "exact", tol: float = 1e-6) -> np.ndarray:
    """Sinkhorn-normalize a nonnegative score matrix.

    Equivalent to alternating row/column division by marginal sums, computed
    in the log domain. tol is only a documentation aid for callers checking
    the result with is_doubly_stochastic; iteration count is fixed by iters.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("scores contain non-finite entries")
    if np.any(m < 0.0):
        raise NumericError("scores must be nonnegative")
    with np.errstate(divide="ignore"):
        return sinkhorn_project_log(np.log(m), iters=iters, mode=mode)


def sinkhorn_unrolled(log_scores: DiffValue, iters: int = 5, mode: str = "relaxed") -> DiffValue:
    """Differentiable Sinkhorn: same op sequence as sinkhorn_project_log but
    recorded through the autodiff graph so gradients unroll the iterations."""
    _check_mode(mode)
    if log_scores.data.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {log_scores.data.shape}")
    n, m = log_scores.data.shape
    if mode == "exact" and n != m:
        raise DimensionError(f"exact mode requires a square matrix, got {n}x{m}")
    x = tensor.pad_slack(log_scores) if mode == "relaxed" else log_scores
    for _ in range(iters):
        x = tensor.sub(x, tensor.logsumexp_rows(x))
        x = tensor.sub(x, tensor.logsumexp_cols(x))
    if mode == "relaxed":
        x = tensor.crop(x, n, m)
        p = tensor.exp(x)
        return tensor.div(p, tensor.maximum_const(tensor.sum_rows(p), 1.0))
    return tensor.exp(x)


def is_doubly_stochastic(m: np.ndarray, tol: float = 1e-6, mode: str = "exact") -> bool:
    """Check the marginal constraints of the given mode within tol."""
    _check_mode(mode)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        return False
    if np.any(m < -tol):
        return False
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    if mode == "exact":
        return bool(np.all(np.abs(rows - 1.0) <= tol) and np.all(np.abs(cols - 1.0) <= tol))
    return bool(np.all(rows <= 1.0 + tol) and np.all(cols <= 1.0 + tol))


def top_k_matches(e: np.ndarray, k: int, mutual: bool = False) -> list[tuple[int, int, float]]:
    """The k highest-scoring (i, j, score) triples, descending by score, ties
    broken by ascending (i, j). mutual keeps only pairs that are both their
    row's and their column's argmax before selecting the top k."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {e.shape}")
    if e.size == 0:
        return []
    if k < 0:
        raise NumericError(f"k must be nonnegative, got {k}")
    n, m = e.shape
    if mutual:
        row_arg = e.argmax(axis=1)
        col_arg = e.argmax(axis=0)
        ii = np.arange(n)
        keep = col_arg[row_arg] == ii
        cand_i = ii[keep]
        cand_j = row_arg[keep]
    else:
        cand_i, cand_j = np.divmod(np.arange(e.size), m)
    scores = e[cand_i, cand_j]
    order = np.lexsort((cand_j, cand_i, -scores))[:k]
    return [(int(cand_i[o]), int(cand_j[o]), float(scores[o])) for o in order]


def round_to_permutation(e: np.ndarray) -> np.ndarray:
    """Greedy rounding to a permutation matrix: rows in index order each take
    their best still-unclaimed column (ties to the lowest column index)."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {e.shape}")
    n = e.shape[0]
    perm = np.zeros((n, n))
    free = np.ones(n, dtype=bool)
    cols = np.arange(n)
    for i in range(n):
        avail = cols[free]
        j = avail[np.argmax(e[i, avail])]
        perm[i, j] = 1.0
        free[j] = False
    return perm


def dump_csv(m: np.ndarray, path: str) -> None:
    """Write a matrix as CSV: first line 'rows,cols', then row-major values."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]},{m.shape[1]}\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path: str) -> np.ndarray:
    """Read a matrix written by dump_csv."""
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read matrix file {path}: {e}") from e
    if not lines:
        raise DataError(f"empty matrix file: {path}")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
        body = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    except ValueError as e:
        raise DataError(f"malformed matrix file {path}: {e}") from e
    m = np.asarray(body, dtype=np.float64)
    if m.shape != (rows, cols):
        raise DataError(
            f"matrix file {path} header says {rows}x{cols} but body is {m.shape}"
        )
    return m
