"""Exact solver for the tiny safety-filter QP.

    minimize   0.5*(u - u_nom)' W (u - u_nom) + 0.5*rho*|xi|^2
    subject to a_i . u + xi_i >= b_i,   xi_i >= 0,   u_min <= u <= u_max

For fixed u the optimal slack is xi_i(u) = max(0, b_i - a_i.u), so the
problem reduces to a piecewise quadratic in u alone.  With two inputs
and a handful of rows the global minimum is found exactly by active-set
enumeration: each input is free, pinned at its lower bound, or pinned
at its upper bound (9 combinations), each row's penalty is on or off
(2^m), and every combination yields one small linear solve.  Every
box-feasible candidate is scored with the true reduced objective; the
least one is the global minimizer, because the minimizer is itself the
stationary point of exactly one such combination.

W is diagonal; scaling into solver variables v = S u with weights L is
equivalent to W = S'LS here, so callers pass the product directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import product

import numpy as np

__all__ = ["QpStatus", "QpProblem", "QpSolution", "solve", "kkt_residual"]

_FREE, _LO, _HI = 0, 1, 2


class QpStatus(enum.Enum):
    Optimal = "optimal"
    NumericalFailure = "numerical_failure"


@dataclass(frozen=True)
class QpProblem:
    u_nom: np.ndarray          # (2,)
    W: np.ndarray              # (2, 2) diagonal, positive
    rho: float                 # slack penalty
    rows: tuple                # ((a: (2,), b: float), ...)
    u_min: np.ndarray          # (2,)
    u_max: np.ndarray          # (2,)

    def __post_init__(self):
        object.__setattr__(self, "u_nom", np.asarray(self.u_nom, dtype=float))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float))
        object.__setattr__(
            self,
            "rows",
            tuple((np.asarray(a, dtype=float), float(b)) for a, b in self.rows),
        )
        if self.W.shape != (2, 2) or self.W[0, 1] != 0.0 or self.W[1, 0] != 0.0:
            raise ValueError("W must be 2x2 diagonal")
        if self.W[0, 0] <= 0.0 or self.W[1, 1] <= 0.0:
            raise ValueError("W diagonal must be positive")
        if not self.rho > 0.0:
            raise ValueError("rho must be positive")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be strictly below u_max")


@dataclass(frozen=True)
class QpSolution:
    u_star: np.ndarray
    xi_star: np.ndarray
    objective: float
    status: QpStatus


def _slacks(p: QpProblem, u) -> np.ndarray:
    # np.maximum keeps NaN rows poisonous; Python's max would hide them
    raw = np.array([b - float(a @ u) for a, b in p.rows])
    return np.maximum(0.0, raw)


def _objective(p: QpProblem, u) -> float:
    d = u - p.u_nom
    xi = _slacks(p, u)
    return 0.5 * float(d @ (p.W @ d)) + 0.5 * p.rho * float(xi @ xi)


def _gradient(p: QpProblem, u) -> np.ndarray:
    # the reduced objective is C^1: d/du of 0.5*max(0, b-a.u)^2 is
    # -max(0, b-a.u)*a everywhere including the kink
    g = p.W @ (u - p.u_nom)
    for (a, b), xi in zip(p.rows, _slacks(p, u)):
        if xi > 0.0:
            g = g - p.rho * xi * a
    return g


def kkt_residual(p: QpProblem, u) -> float:
    """Projected-gradient stationarity residual (0 at the box minimum)."""
    u = np.asarray(u, dtype=float)
    step = np.clip(u - _gradient(p, u), p.u_min, p.u_max)
    return float(np.max(np.abs(u - step)))


def _gauss_solve(M, c):
    """Gaussian elimination with partial pivoting for the tiny dual
    system, in whatever precision the inputs carry."""
    n = len(c)
    M = M.copy()
    c = c.copy()
    for k in range(n):
        piv = k + int(np.argmax(np.abs(M[k:, k])))
        if M[piv, k] == 0:
            return None
        if piv != k:
            M[[k, piv]] = M[[piv, k]]
            c[[k, piv]] = c[[piv, k]]
        for i in range(k + 1, n):
            f = M[i, k] / M[k, k]
            M[i, k:] -= f * M[k, k:]
            c[i] -= f * c[k]
    x = np.zeros_like(c)
    for k in range(n - 1, -1, -1):
        x[k] = (c[k] - M[k, k + 1 :] @ x[k + 1 :]) / M[k, k]
    return x


def _solve_pattern(p: QpProblem, coord_state, active) -> np.ndarray | None:
    """Stationary point of the quadratic with the given penalty rows on
    and the given coordinates pinned.

    Solved in the dual: u_F = u_nom,F + W_F^-1 A_F' mu with
    (I/rho + A_F W_F^-1 A_F') mu = b' - A_F u_nom,F.  Assembling the
    primal normal matrix W + rho*A'A and inverting it cancels badly once
    rho*a a' dominates W; the dual matrix is a sum of nonnegative terms
    and stays well behaved.  None when the dual system is singular.
    """
    u = np.empty(2)
    free = []
    for c in range(2):
        if coord_state[c] == _LO:
            u[c] = p.u_min[c]
        elif coord_state[c] == _HI:
            u[c] = p.u_max[c]
        else:
            free.append(c)
    if not free:
        return u
    u_f = p.u_nom[free].copy()
    if active:
        w = np.diag(p.W)[free]
        A = np.array([p.rows[i][0] for i in active])
        b = np.array([p.rows[i][1] for i in active])
        for c in range(2):
            if c not in free:
                b = b - A[:, c] * u[c]
        Af = A[:, free]
        c_vec = b - Af @ u_f
        if len(active) == 1:
            q = 1.0 / p.rho + float((Af[0] / w) @ Af[0])
            step = Af[0] * (c_vec / q)
        else:
            # near-parallel rows leave the dual matrix close to singular
            # and A'mu cancels heavily; extended precision end to end
            # keeps the stationarity residual at the 1e-8 contract
            Afl = Af.astype(np.longdouble)
            M = (Afl / w) @ Afl.T
            M += np.eye(len(active), dtype=np.longdouble) / np.longdouble(p.rho)
            mu = _gauss_solve(M, c_vec.astype(np.longdouble))
            if mu is None:
                return None
            step = np.asarray(Afl.T @ mu, dtype=float)
        u_f = u_f + step / w
    for k, c in enumerate(free):
        u[c] = u_f[k]
    return u


def _polish(p: QpProblem, u: np.ndarray) -> np.ndarray:
    """Projected Newton refinement of the winning candidate.

    The dual solve leaves u within ~1e-13 of the optimum, but the KKT
    curvature (up to rho*|a|^2) amplifies that into gradient noise above
    the 1e-8 stationarity contract on near-parallel multi-row problems.
    A few semismooth Newton steps on the penetrated piece, carried in
    extended precision, pull the residual back down.  Exact-zero
    gradients take no step, so bit-exact pass-through cases survive.
    """
    lo = p.u_min.astype(np.longdouble)
    hi = p.u_max.astype(np.longdouble)
    w = np.diag(p.W).astype(np.longdouble)
    rho = np.longdouble(p.rho)
    unom = p.u_nom.astype(np.longdouble)
    rows = [(a.astype(np.longdouble), np.longdouble(b)) for a, b in p.rows]
    ul = u.astype(np.longdouble)
    for _ in range(3):
        g = w * (ul - unom)
        H = np.diag(w)
        for a, b in rows:
            xi = b - a @ ul
            if xi > 0:
                g = g - rho * xi * a
                H = H + rho * np.outer(a, a)
        free = [j for j in range(2)
                if not (ul[j] <= lo[j] and g[j] > 0)
                and not (ul[j] >= hi[j] and g[j] < 0)]
        if not free:
            break
        if len(free) == 1:
            j = free[0]
            if H[j, j] == 0:
                break
            nxt = {j: ul[j] - g[j] / H[j, j]}
        else:
            det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
            if det == 0:
                break
            nxt = {
                0: ul[0] + (g[1] * H[0, 1] - g[0] * H[1, 1]) / det,
                1: ul[1] + (g[0] * H[1, 0] - g[1] * H[0, 0]) / det,
            }
        moved = False
        for j, v in nxt.items():
            v = min(max(v, lo[j]), hi[j])
            moved = moved or v != ul[j]
            ul[j] = v
        if not moved:
            break
    out = np.asarray(ul, dtype=float)
    # W > 0 makes the minimum unique, so stationarity is the right
    # acceptance test; an objective comparison cannot see the ~1e-20
    # improvement against a ~1e5 objective and rejects valid steps
    return out if kkt_residual(p, out) <= kkt_residual(p, u) else u


def solve(p: QpProblem) -> QpSolution:
    """Global minimizer by exhaustive active-set enumeration."""
    m = len(p.rows)
    tol = 1e-9 * np.maximum(1.0, np.maximum(np.abs(p.u_min), np.abs(p.u_max)))
    best_u, best_f = None, np.inf
    for coord_state in product((_FREE, _LO, _HI), repeat=2):
        for mask in range(1 << m):
            active = [i for i in range(m) if mask >> i & 1]
            u = _solve_pattern(p, coord_state, active)
            if u is None or not np.all(np.isfinite(u)):
                continue
            if np.any(u < p.u_min - tol) or np.any(u > p.u_max + tol):
                continue
            u = np.clip(u, p.u_min, p.u_max)
            f = _objective(p, u)
            if f < best_f:
                best_u, best_f = u, f
    if best_u is None:
        nan = np.full(2, np.nan)
        return QpSolution(nan, np.full(m, np.nan), np.nan, QpStatus.NumericalFailure)
    best_u = _polish(p, best_u)
    return QpSolution(best_u, _slacks(p, best_u), _objective(p, best_u), QpStatus.Optimal)
