"""Dense two-phase revised simplex with exact dual extraction.

Solves   min c'x  s.t.  A_eq x = b_eq,  A_ge x >= b_ge,  A_le x <= b_le,  x >= 0.

Dual convention (Lagrangian L = c'x - y_eq'(A_eq x - b) - y_ge'(A_ge x - b)
+ y_le'(A_le x - b)): stationarity is c - A_eq'y_eq - A_ge'y_ge + A_le'y_le >= 0
with y_ge, y_le >= 0 and y_eq free. Row duals are returned in that convention.

Pricing is Dantzig with a Bland fallback after a stall, smallest-index ratio
ties, and an explicit basis inverse updated by pivoting with periodic
refactorization. Problem sizes here are a few hundred rows/columns, so dense
linear algebra is the right tool.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-11


class LPError(RuntimeError):
    pass


class Infeasible(LPError):
    def __init__(self, message="infeasible", rows=None):
        super().__init__(message)
        self.rows = rows or []


class Unbounded(LPError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    duals_eq: np.ndarray
    duals_ge: np.ndarray
    duals_le: np.ndarray
    reduced_costs: np.ndarray
    basis: np.ndarray


class DenseLP:
    """Builder for a small dense LP over nonnegative variables."""

    def __init__(self, n_vars: int):
        self.n = n_vars
        self.c = np.zeros(n_vars)
        self._rows: list[tuple[np.ndarray, str, float]] = []

    def set_cost(self, j: int, value: float) -> None:
        self.c[j] = value

    def add_row(self, coeffs: dict[int, float], sense: str, rhs: float) -> int:
        if sense not in ("=", ">=", "<="):
            raise ValueError(f"bad sense {sense!r}")
        row = np.zeros(self.n)
        for j, v in coeffs.items():
            row[j] = v
        self._rows.append((row, sense, float(rhs)))
        return len(self._rows) - 1

    def solve(self, cost_perturbation: np.ndarray | None = None) -> LPResult:
        senses = [s for _, s, _ in self._rows]
        A = np.array([r for r, _, _ in self._rows]) if self._rows else np.zeros((0, self.n))
        b = np.array([v for _, _, v in self._rows])

        n, m = self.n, len(self._rows)
        n_slack = sum(1 for s in senses if s != "=")
        total = n + n_slack
        A_full = np.zeros((m, total))
        A_full[:, :n] = A
        c_full = np.zeros(total)
        c_full[:n] = self.c
        c_solve = c_full.copy()
        if cost_perturbation is not None:
            c_solve[:n] = c_solve[:n] + cost_perturbation

        slack_of_row = np.full(m, -1, dtype=int)
        j = n
        for i, s in enumerate(senses):
            if s == ">=":
                A_full[i, j] = -1.0  # surplus
                slack_of_row[i] = j
                j += 1
            elif s == "<=":
                A_full[i, j] = 1.0
                slack_of_row[i] = j
                j += 1

        x, basis = _two_phase(A_full, b.copy(), c_solve)

        # duals from the final basis with the *unperturbed* costs; a basic
        # artificial (redundant row) contributes an identity column at cost 0
        ext = np.hstack([A_full, np.eye(m)]) if m else A_full
        c_ext = np.concatenate([c_full, np.zeros(m)])
        B = ext[:, basis]
        y = np.linalg.solve(B.T, c_ext[basis])
        rc = c_full - A_full.T @ y
        obj = float(c_full[: n] @ x[: n])

        duals_eq = np.zeros(m)
        duals_ge = np.zeros(m)
        duals_le = np.zeros(m)
        for i, s in enumerate(senses):
            if s == "=":
                duals_eq[i] = y[i]
            elif s == ">=":
                duals_ge[i] = max(0.0, y[i])
            else:
                duals_le[i] = max(0.0, -y[i])
        return LPResult(x=x[:n].copy(), objective=obj, duals_eq=duals_eq,
                        duals_ge=duals_ge, duals_le=duals_le,
                        reduced_costs=rc[:n].copy(), basis=basis.copy())


def _two_phase(A: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, total = A.shape
    if m == 0:
        if np.any(c < -EPS):
            raise Unbounded("unconstrained negative cost")
        return np.zeros(total), np.array([], dtype=int)

    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # phase 1: artificial basis
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(total), np.ones(m)])
    basis = np.arange(total, total + m)
    x1, basis = _simplex_core(A1, b, c1, basis)
    if x1[total:].sum() > 1e-7 * max(1.0, abs(b).max()):
        bad = [int(i) for i in np.nonzero(x1[total:] > 1e-9)[0]]
        raise Infeasible("phase-1 infeasible", rows=bad)

    # drive artificials out of the basis where a real pivot exists
    basis = _purge_artificials(A1, basis, total)

    # phase 2 on real + artificial columns, artificials barred from entering
    c2 = np.concatenate([c, np.zeros(m)])
    allowed = np.ones(total + m, dtype=bool)
    allowed[total:] = False
    x2, basis = _simplex_core(A1, b, c2, basis, allowed=allowed)
    return x2[:total], basis


def _purge_artificials(A: np.ndarray, basis: np.ndarray, n_real: int) -> np.ndarray:
    m = A.shape[0]
    basis = basis.copy()
    for pos in range(m):
        if basis[pos] < n_real:
            continue
        Binv_row = np.linalg.solve(A[:, basis].T, np.eye(m)[pos])
        row_vals = Binv_row @ A[:, :n_real]
        candidates = np.nonzero(np.abs(row_vals) > 1e-9)[0]
        for j in candidates:
            if j not in basis:
                basis[pos] = j
                break
    return basis


def _simplex_core(A: np.ndarray, b: np.ndarray, c: np.ndarray, basis: np.ndarray,
                  allowed: np.ndarray | None = None,
                  max_iter: int = 20000) -> tuple[np.ndarray, np.ndarray]:
    m, total = A.shape
    basis = basis.copy()
    if allowed is None:
        allowed = np.ones(total, dtype=bool)

    Binv = np.linalg.inv(A[:, basis])
    xB = Binv @ b
    stall = 0
    bland = False

    for it in range(max_iter):
        if it % 128 == 127:  # refactorize against drift
            Binv = np.linalg.inv(A[:, basis])
            xB = Binv @ b
        y = c[basis] @ Binv
        rc = c - y @ A
        rc[basis] = 0.0
        mask = allowed & (rc < -1e-9)
        if not mask.any():
            x = np.zeros(total)
            np.maximum(xB, 0.0, out=xB)
            x[basis] = xB
            return x, basis
        if bland:
            enter = int(np.nonzero(mask)[0][0])
        else:
            cand = np.nonzero(mask)[0]
            enter = int(cand[np.argmin(rc[cand])])

        d = Binv @ A[:, enter]
        pos = d > EPS
        if not pos.any():
            raise Unbounded(f"unbounded along column {enter}")
        ratios = np.full(m, np.inf)
        ratios[pos] = xB[pos] / d[pos]
        theta = ratios.min()
        ties = np.nonzero(ratios <= theta + 1e-12)[0]
        leave = int(ties[np.argmin(basis[ties])])  # smallest basis index: anti-cycling aid

        if theta < 1e-12:
            stall += 1
            if stall > 40:
                bland = True
        else:
            stall = 0

        # pivot update of the explicit inverse
        piv = d[leave]
        row = Binv[leave] / piv
        xrow = xB[leave] / piv
        d_other = d.copy()
        d_other[leave] = 0.0
        Binv -= np.outer(d_other, row)
        xB -= d_other * xrow
        Binv[leave] = row
        xB[leave] = xrow
        basis[leave] = enter
    raise LPError("iteration limit exceeded")


def tie_break_perturbation(order: list[int], n_vars: int, scale: float,
                           magnitude: float = 1e-5) -> np.ndarray:
    """Decreasing cost perturbation along ``order``: earlier variables are
    minimized with higher priority (weighted approximation of the
    lexicographic-smallest optimal flow rule).

    The magnitude must sit well below the smallest true cost gap (times here
    are quantized far coarser than 1e-5*scale) and the per-rank step well
    above the simplex pivoting threshold, so ties resolve deterministically
    without touching the optimal face of the unperturbed program.
    """
    eps = np.zeros(n_vars)
    k = len(order)
    for rank, j in enumerate(order):
        eps[j] = magnitude * scale * (k - rank) / k
    return eps
