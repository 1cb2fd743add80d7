"""Conjugate gradients for production solves and a dense Cholesky oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .operator import DivFormOperator

ORACLE_MAX_N = 4096


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-10
    max_iter: int | None = None  # default 20 * N
    preconditioner: str = "diagonal"

    def __post_init__(self):
        if not 0 < self.rel_tol <= 1e-4:
            raise ValueError(f"rel_tol must lie in (0, 1e-4], got {self.rel_tol}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.preconditioner not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def iteration_cap(self, n: int) -> int:
        return self.max_iter if self.max_iter is not None else 20 * n


@dataclass
class SolveResult:
    solution: np.ndarray
    iterations: int
    final_residual: float  # relative: ||A x - b|| / ||b||
    converged: bool


def _matrix(op):
    return op.matrix if isinstance(op, DivFormOperator) else sp.csr_matrix(op)


def cg_solve(op, rhs: np.ndarray, cfg: SolverConfig | None = None, x0: np.ndarray | None = None) -> SolveResult:
    """Preconditioned conjugate gradients.

    Stops when ``||A x - b|| <= rel_tol ||b||`` (true residual, recomputed at
    the end).  On hitting the cap the best iterate is returned unconverged.
    """
    cfg = cfg or SolverConfig()
    a = _matrix(op)
    b = np.asarray(rhs, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return SolveResult(np.zeros(n), 0, 0.0, True)
    if cfg.preconditioner == "diagonal":
        diag = a.diagonal()
        if np.any(diag <= 0):
            raise SolverError("non-positive diagonal entry; operator is not SPD")
        minv = 1.0 / diag
    else:
        minv = np.ones(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - a @ x
    z = minv * r
    p = z.copy()
    rz = r @ z
    target = cfg.rel_tol * bnorm
    rnorm = np.linalg.norm(r)
    best_x, best_r = x.copy(), rnorm
    it = 0
    cap = cfg.iteration_cap(n)
    while rnorm > target and it < cap:
        ap = a @ p
        pap = p @ ap
        if pap <= 0:
            raise SolverError(f"operator not positive definite (p.Ap = {pap:.3e} at iteration {it})")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        if it % 50 == 0:
            r = b - a @ x  # damp drift of the recursive residual
        rnorm = np.linalg.norm(r)
        if rnorm < best_r:
            best_x, best_r = x.copy(), rnorm
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = np.linalg.norm(b - a @ best_x)
    return SolveResult(best_x, it, float(true_res / bnorm), bool(true_res <= target))


def dense_oracle_solve(op, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve; rejects ``N > 4096`` and non-SPD matrices."""
    a = _matrix(op)
    n = a.shape[0]
    if n > ORACLE_MAX_N:
        raise SolverError(f"dense oracle limited to N <= {ORACLE_MAX_N}, got {n}")
    try:
        factor = sla.cho_factor(a.toarray(), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"matrix is not SPD: {exc}") from exc
    return sla.cho_solve(factor, np.asarray(rhs, dtype=float))
