"""Dense linear solve and minimum-norm QP used by the constraint engine.

Matrices are plain 2-D float64 ``numpy`` arrays; :func:`as_dense` checks the
shape and finiteness invariants at the module boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, IterationLimit, SingularMatrix

PIVOT_RTOL = 1e-12
DEFAULT_SLACK_WEIGHT = 1e3
ZERO_DIRECTION = 1e-26


def as_dense(a, ndim=2) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return arr


def lu_factor(a):
    """LU factorization with partial pivoting.

    Returns ``(lu, perm)`` where ``lu`` stores unit-lower L below the diagonal
    and U on and above it, and ``perm`` is the row permutation applied to
    ``a``. Raises :class:`SingularMatrix` if a pivot falls below
    ``PIVOT_RTOL`` times the largest initial column magnitude.
    """
    lu = as_dense(a).copy()
    n, m = lu.shape
    if n != m:
        raise ValueError(f"lu_factor needs a square matrix, got {lu.shape}")
    perm = np.arange(n)
    col_scale = np.abs(lu).max(axis=0) if n else np.zeros(0)
    threshold = PIVOT_RTOL * (col_scale.max() if n else 0.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= threshold or lu[p, k] == 0.0:
            raise SingularMatrix(f"pivot {k} has magnitude {abs(lu[p, k]):.3e}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_substitute(lu, perm, b):
    y = np.asarray(b, dtype=np.float64)[perm].copy()
    n = lu.shape[0]
    for i in range(1, n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


def lu_solve(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for square ``a``."""
    b = as_dense(b, ndim=1)
    lu, perm = lu_factor(a)
    if b.shape[0] != lu.shape[0]:
        raise ValueError(f"rhs length {b.shape[0]} does not match {lu.shape[0]}")
    return lu_substitute(lu, perm, b)


@dataclass(frozen=True)
class QpProblem:
    """``min ||x||^2`` subject to ``A x >= b``.

    With ``slack_weight`` set, the rows are softened to ``A x + xi >= b`` and
    ``slack_weight * ||xi||^2`` is added to the objective.
    """

    A: np.ndarray
    b: np.ndarray
    slack_weight: float | None = None
    max_iter: int | None = None

    def __post_init__(self):
        A = as_dense(self.A)
        b = as_dense(self.b, ndim=1)
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]}")
        if A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError("QP needs at least one row and one variable")
        if self.slack_weight is not None and not self.slack_weight > 0:
            raise ValueError("slack_weight must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


@dataclass
class QpResult:
    x: np.ndarray
    active_set: list
    violations: np.ndarray
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


def _min_norm_active_set(A, b, max_iter, tol=1e-12):
    """Dual active-set (Goldfarb-Idnani) for ``min 1/2 ||x||^2, A x >= b``.

    Starts from the unconstrained optimum ``x = 0`` and adds the most violated
    row each pass, dropping rows whose multiplier would turn negative.
    """
    m, n = A.shape
    x = np.zeros(n)
    active: list[int] = []
    lam = np.zeros(0)
    scale = max(1.0, float(np.abs(b).max()))
    row_norm = np.linalg.norm(A, axis=1)
    it = 0
    while True:
        slack = A @ x - b
        # normalized violation so the row choice is scale invariant
        viol = np.where(row_norm > 0, -slack / np.where(row_norm > 0, row_norm, 1.0), -slack)
        viol[active] = -np.inf
        j = int(np.argmax(viol))
        if slack[j] >= -1e-12 * scale:
            break
        if row_norm[j] == 0.0:
            raise Infeasible(f"row {j} is zero but requires {b[j]:.6g} > 0", rows=[j])
        lam_j = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise IterationLimit(f"active-set QP exceeded {max_iter} iterations")
            a_j = A[j]
            if active:
                N = A[active]
                r, *_ = np.linalg.lstsq(N.T, a_j, rcond=None)
                z = a_j - N.T @ r
            else:
                r = np.zeros(0)
                z = a_j.copy()
            zz = float(z @ z)
            pos = r > tol
            if np.any(pos):
                ratios = lam[pos] / r[pos]
                k_rel = int(np.argmin(ratios))
                t_partial = float(ratios[k_rel])
                k_drop = int(np.flatnonzero(pos)[k_rel])
            else:
                t_partial = np.inf
                k_drop = -1
            need = b[j] - float(a_j @ x)
            # rows of kernel systems are close to collinear, so only treat z as
            # zero when it is below roughly 1e-13 of |a_j|
            if zz > ZERO_DIRECTION * float(a_j @ a_j):
                t_full = need / zz
            else:
                t_full = np.inf
            if not np.isfinite(t_full) and not np.isfinite(t_partial):
                raise Infeasible(
                    f"row {j} cannot be satisfied together with rows {active}",
                    rows=[j, *active],
                )
            t = min(t_full, t_partial)
            if np.isfinite(t_full):
                x = x + t * z
            lam = lam - t * r
            lam_j += t
            if t_full <= t_partial:
                active.append(j)
                lam = np.append(lam, lam_j)
                break
            del active[k_drop]
            lam = np.delete(lam, k_drop)
    # backward-error test: rounding in A @ x grows with |a_i| |x|
    worse = A @ x - b < -1e-8 * (scale + row_norm * np.linalg.norm(x))
    if active and worse.any():
        bad = [int(i) for i in np.flatnonzero(worse)]
        raise Infeasible(f"rows {bad} remain violated at the active-set fixed point", rows=bad + active)
    full = np.zeros(m)
    full[active] = lam
    return x, sorted(active), full, it


def solve_qp_min_norm(p: QpProblem) -> QpResult:
    """Minimum-norm point of ``{x : A x >= b}``, optionally slack-relaxed."""
    A, b = p.A, p.b
    m, n = A.shape
    max_iter = p.max_iter if p.max_iter is not None else 50 * (m + n)
    if p.slack_weight is None:
        x, active, lam, it = _min_norm_active_set(A, b, max_iter)
    else:
        # substitute y = sqrt(rho) * xi so the objective stays ||.||^2
        aug = np.hstack([A, np.eye(m) / np.sqrt(p.slack_weight)])
        y, active, lam, it = _min_norm_active_set(aug, b, max_iter + 50 * m)
        x = y[:n]
    violations = np.maximum(0.0, b - A @ x)
    return QpResult(x=x, active_set=active, violations=violations, multipliers=lam, iterations=it)
