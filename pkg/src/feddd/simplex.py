"""Dense two-phase simplex with Bland's rule for small linear programs.

Solves ``min c @ x`` subject to ``A_ub @ x <= b_ub``, ``A_eq @ x == b_eq``
and ``x >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-10


class InfeasibleError(ValueError):
    pass


class UnboundedError(ValueError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    reduced_costs: np.ndarray  # over structural variables; zero on basic ones
    basis: list[int]
    iterations: int

    def unique(self, tol: float = 1e-9) -> bool:
        """Sufficient condition for a unique optimum: every nonbasic structural
        and slack reduced cost is strictly positive."""
        mask = np.ones(self.reduced_costs.size, dtype=bool)
        mask[[b for b in self.basis if b < mask.size]] = False
        return bool(np.all(self.reduced_costs[mask] > tol))


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factor = T[:, col].copy()
    factor[row] = 0.0
    T -= np.outer(factor, T[row])


def _run(T: np.ndarray, basis: list[int], n_cols: int, max_iter: int) -> int:
    """Iterate on tableau ``T`` whose last row is the reduced-cost row.

    Only the first ``n_cols`` columns may enter the basis.
    """
    m = T.shape[0] - 1
    for it in range(max_iter):
        cost = T[-1, :n_cols]
        candidates = np.flatnonzero(cost < -TOL)
        if candidates.size == 0:
            return it
        col = int(candidates[0])
        column = T[:m, col]
        positive = column > TOL
        if not positive.any():
            raise UnboundedError("objective is unbounded below")
        ratios = np.full(m, np.inf)
        ratios[positive] = T[:m, -1][positive] / column[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + TOL * max(1.0, abs(best)))
        row = int(min(ties, key=lambda r: basis[r]))
        _pivot(T, row, col)
        basis[row] = col
    raise RuntimeError("simplex iteration limit reached")


def linprog(
    c: np.ndarray,
    A_ub: np.ndarray | None = None,
    b_ub: np.ndarray | None = None,
    A_eq: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    max_iter: int = 10_000,
) -> LPResult:
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=np.float64)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=np.float64)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # Columns: structural | slacks | artificials | rhs
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1.0
    b = np.where(neg, -b, b)

    needs_art = [i for i in range(m) if i >= m_ub or neg[i]]
    n_core = n + m_ub
    n_art = len(needs_art)
    T = np.zeros((m + 1, n_core + n_art + 1))
    T[:m, :n_core] = A
    T[:m, -1] = b
    basis = [n + i for i in range(m)]
    for j, i in enumerate(needs_art):
        T[i, n_core + j] = 1.0
        basis[i] = n_core + j

    iters = 0
    if n_art:
        T[-1, n_core : n_core + n_art] = 1.0
        for i in needs_art:
            T[-1] -= T[i]
        iters += _run(T, basis, n_core + n_art, max_iter)
        if -T[-1, -1] > 1e-9 * max(1.0, np.abs(b).max()):
            raise InfeasibleError(f"no feasible point (phase-1 residual {-T[-1, -1]:.3e})")
        # Drive remaining artificials out of the basis; drop redundant rows.
        keep = np.ones(m + 1, dtype=bool)
        for r in range(m):
            if basis[r] >= n_core:
                nz = np.flatnonzero(np.abs(T[r, :n_core]) > 1e-9)
                if nz.size:
                    _pivot(T, r, int(nz[0]))
                    basis[r] = int(nz[0])
                else:
                    keep[r] = False
        basis = [bv for r, bv in enumerate(basis) if keep[r]]
        T = T[keep]
        T = np.delete(T, np.s_[n_core : n_core + n_art], axis=1)

    full_cost = np.concatenate([c, np.zeros(m_ub)])
    T[-1, :] = 0.0
    T[-1, :n_core] = full_cost
    for r, bv in enumerate(basis):
        T[-1] -= full_cost[bv] * T[r]
    iters += _run(T, basis, n_core, max_iter)

    x_full = np.zeros(n_core)
    # Re-solve the basic system on the original matrix to shed pivot round-off.
    rows = np.flatnonzero(keep[:m]) if n_art else np.arange(m)
    B = A[rows][:, basis]
    try:
        x_full[basis] = np.linalg.solve(B, b[rows])
    except np.linalg.LinAlgError:
        x_full[basis] = T[:-1, -1]
    x_full = np.maximum(x_full, 0.0)
    x = x_full[:n]
    return LPResult(x, float(c @ x), T[-1, :n_core].copy(), list(basis), iters)
