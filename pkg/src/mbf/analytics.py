"""Measurements on batch classification output matrices.

A batch output matrix ``A`` is ``B x K``: one probability row per sample.
Natural log everywhere; ``0 * log 0`` is taken as 0.

The second half of the module checks, numerically, that along the path that
moves mass between a free coordinate ``j`` and the last coordinate of a row,
the row square-sum and the row entropy always move in opposite directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-9
MIN_COORD = 1e-6


class ConstraintError(ValueError):
    """The matrix is not row-stochastic."""


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2 or A.shape[0] == 0 or A.shape[1] == 0:
        raise ValueError(f"output matrix must be a non-empty 2-D array, got shape {A.shape}")
    return A


def validate_output_matrix(A, tol: float = ROW_SUM_TOL) -> bool:
    """True iff every row sums to 1 within ``tol`` and no entry is below ``-tol``."""
    A = _as_matrix(A)
    if not np.isfinite(A).all():
        return False
    return bool(np.all(np.abs(A.sum(axis=1) - 1.0) <= tol) and np.all(A >= -tol))


def _checked(A) -> np.ndarray:
    A = _as_matrix(A)
    if not validate_output_matrix(A):
        raise ConstraintError("rows must be probability vectors (non-negative, summing to 1)")
    return np.clip(A, 0.0, None)


def xlogx(A: np.ndarray) -> np.ndarray:
    out = np.zeros_like(A)
    pos = A > 0
    out[pos] = A[pos] * np.log(A[pos])
    return out


def batch_entropy(A) -> float:
    """Mean row entropy: -(1/B) sum_ij A_ij log A_ij."""
    A = _checked(A)
    return float(-xlogx(A).sum() / A.shape[0])


def batch_frobenius(A) -> float:
    A = _checked(A)
    return float(np.sqrt((A * A).sum()))


def frobenius_bounds(B: int, K: int) -> tuple[float, float]:
    """Range of ||A||_F over row-stochastic ``B x K`` matrices."""
    return float(np.sqrt(B / K)), float(np.sqrt(B))


def entropy_bounds(K: int) -> tuple[float, float]:
    return 0.0, float(np.log(K))


def max_row_probability(A) -> float:
    """Mean over rows of the largest class probability (a confidence summary)."""
    A = _as_matrix(A)
    return float(A.max(axis=1).mean())


# ---------------------------------------------------------------------------
# opposite monotonicity of square-sum and entropy


def row_square_sum(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    return float((row * row).sum())


def row_entropy(row) -> float:
    row = np.asarray(row, dtype=np.float64)
    return float(-xlogx(row).sum())


@dataclass(frozen=True)
class RowProbe:
    """A simplex row, a free coordinate ``j`` (0-based, ``j < K-1``) and a step ``delta``.

    Perturbing adds ``delta`` to ``row[j]`` and removes it from ``row[-1]``,
    so the row stays on the simplex.
    """

    row: tuple[float, ...]
    j: int
    delta: float = 0.0

    def __post_init__(self):
        K = len(self.row)
        if K < 2:
            raise ValueError("row needs at least two coordinates")
        if not 0 <= self.j < K - 1:
            raise IndexError(f"free index j must be in [0, {K - 1}); the last coordinate is dependent")
        a, c = self.row[self.j] + self.delta, self.row[-1] - self.delta
        if not (0.0 <= a <= 1.0 and 0.0 <= c <= 1.0):
            raise ValueError("perturbation leaves the simplex")

    def perturbed(self, delta: float | None = None) -> np.ndarray:
        d = self.delta if delta is None else delta
        out = np.array(self.row, dtype=np.float64)
        out[self.j] += d
        out[-1] -= d
        return out


def row_partials(probe: RowProbe) -> tuple[float, float]:
    """Analytic partials of square-sum and entropy along the (j, last) path.

    df = 2 A_j - 2 A_K and dh = log(A_K / A_j), evaluated at the perturbed row.
    """
    row = probe.perturbed()
    a, c = row[probe.j], row[-1]
    if np.any(row <= 0.0):
        raise ValueError("entropy partial is undefined on the simplex boundary (zero entry)")
    return float(2.0 * a - 2.0 * c), float(np.log(c / a))


@dataclass
class MonotonicityReport:
    K: int
    checked: int = 0
    sign_failures: int = 0
    fd_failures: int = 0
    both_zero: int = 0

    @property
    def passed(self) -> bool:
        return self.sign_failures == 0 and self.fd_failures == 0

    def line(self) -> str:
        return f"checked={self.checked} sign_failures={self.sign_failures} fd_failures={self.fd_failures}"


def sample_simplex_rows(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Interior simplex rows from normalized exponential draws, floored at ``MIN_COORD``."""
    rows = rng.exponential(size=(n, K))
    rows /= rows.sum(axis=1, keepdims=True)
    rows = np.maximum(rows, MIN_COORD)
    return rows / rows.sum(axis=1, keepdims=True)


def _fd_step(a: np.ndarray, c: np.ndarray, step: float) -> np.ndarray:
    # keep both moving coordinates well inside (0, 1) near the boundary
    return np.minimum(step, 1e-3 * np.minimum(a, c))


def classify_partials(df: np.ndarray, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (sign_failure, both_zero) masks for arrays of partial pairs."""
    df_zero = np.abs(df) < 1e-12
    dh_zero = np.abs(dh) < 1e-9
    both_zero = df_zero & dh_zero
    one_zero = df_zero ^ dh_zero
    nonzero = ~df_zero & ~dh_zero
    sign_fail = one_zero | (nonzero & (np.sign(df) != -np.sign(dh)))
    return sign_fail, both_zero


def fd_partials(rows: np.ndarray, j: np.ndarray, step: float = 1e-6):
    """Central differences of square-sum and entropy along each row's (j, last) path.

    Only the two moving coordinates change, so only their terms are
    differenced; the remaining terms cancel exactly.
    """
    n = rows.shape[0]
    a = rows[np.arange(n), j]
    c = rows[:, -1]
    h = _fd_step(a, c, step)

    def sq(x):
        return x * x

    def negxlogx(x):
        return -x * np.log(x)

    df = ((sq(a + h) + sq(c - h)) - (sq(a - h) + sq(c + h))) / (2 * h)
    dh = ((negxlogx(a + h) + negxlogx(c - h)) - (negxlogx(a - h) + negxlogx(c + h))) / (2 * h)
    return df, dh


def verify_opposite_monotonicity(trials: int, K: int, rng_seed: int = 0,
                                 fd_tol: float = 1e-6, step: float = 1e-6) -> MonotonicityReport:
    """Sample interior rows and free indices, then check the sign relation and FD agreement."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if K < 2:
        raise ValueError("K must be at least 2")
    rng = np.random.default_rng(rng_seed)
    rows = sample_simplex_rows(trials, K, rng)
    j = rng.integers(0, K - 1, size=trials)
    a = rows[np.arange(trials), j]
    c = rows[:, -1]
    df = 2.0 * a - 2.0 * c
    dh = np.log(c / a)

    sign_fail, both_zero = classify_partials(df, dh)
    fd_f, fd_h = fd_partials(rows, j, step)
    err_f = np.abs(fd_f - df) / np.maximum(1.0, np.abs(df))
    err_h = np.abs(fd_h - dh) / np.maximum(1.0, np.abs(dh))
    fd_fail = (err_f > fd_tol) | (err_h > fd_tol)

    return MonotonicityReport(K=K, checked=trials, sign_failures=int(sign_fail.sum()),
                              fd_failures=int(fd_fail.sum()), both_zero=int(both_zero.sum()))


def check_probe(probe: RowProbe) -> str:
    """Classify a single probe as ``"opposite"``, ``"both-zero"`` or ``"failure"``."""
    df, dh = row_partials(probe)
    sign_fail, both_zero = classify_partials(np.array([df]), np.array([dh]))
    if both_zero[0]:
        return "both-zero"
    return "failure" if sign_fail[0] else "opposite"
