"""Sparse linear least-squares solvers for the assembled energy.

The production path is conjugate gradients on the normal equations with a
Jacobi preconditioner; a dense Cholesky solve is kept as an oracle for tests
and small systems.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class SolverError(Exception):
    pass


@dataclass
class SparseSystem:
    """Triplet-form system: minimize ||A x - rhs||^2."""

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=np.float64)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        if self.n < 1:
            raise SolverError("system has no unknowns")
        if len(self.rows) != len(self.cols) or len(self.rows) != len(self.vals):
            raise SolverError("triplet arrays disagree in length")
        if len(self.rhs) != self.m:
            raise SolverError("rhs length does not match row count")
        if len(self.rows) and (self.rows.min() < 0 or self.rows.max() >= self.m
                               or self.cols.min() < 0 or self.cols.max() >= self.n):
            raise SolverError("triplet index out of range")
        if not np.all(np.isfinite(self.vals)) or not np.all(np.isfinite(self.rhs)):
            raise SolverError("non-finite system coefficients")

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)),
                             shape=(self.m, self.n))

    def energy(self, x: np.ndarray) -> float:
        r = self.matrix() @ x - self.rhs
        return float(r @ r)


@dataclass
class Solution:
    x: np.ndarray
    final_energy: float
    iterations: int
    converged: bool


def solve_normal_cg(system: SparseSystem, tol: float = 1e-8,
                    max_iter: int = None, x0: np.ndarray = None) -> Solution:
    """Preconditioned CG on AtA x = At b.

    Deterministic: fixed-order numpy accumulation, no randomness. Convergence
    is declared when the preconditioned normal residual drops below tol
    relative to its starting value.
    """
    a = system.matrix()
    at = a.T.tocsr()
    b = system.rhs
    n = system.n
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (n,):
        raise SolverError("x0 has wrong length")

    diag = np.asarray(a.multiply(a).sum(axis=0)).ravel()
    diag[diag <= 0] = 1.0  # unknowns untouched by any row

    def ata(v):
        return at @ (a @ v)

    atb = at @ b
    r = atb - ata(x)
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    norm0 = float(np.linalg.norm(atb))
    if norm0 == 0.0:
        norm0 = 1.0
    converged = float(np.linalg.norm(r)) <= tol * norm0
    it = 0
    while not converged and it < max_iter:
        ap = ata(p)
        pap = float(p @ ap)
        if pap <= 0 or not np.isfinite(pap):
            break  # breakdown: report non-convergence
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        it += 1
        if float(np.linalg.norm(r)) <= tol * norm0:
            converged = True
            break
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return Solution(x=x, final_energy=system.energy(x), iterations=it,
                    converged=converged)


def solve_direct_dense(system: SparseSystem, max_unknowns: int = 2000) -> Solution:
    """Dense Cholesky oracle. Guarded to small systems."""
    if system.n > max_unknowns:
        raise SolverError(f"dense solve guard: n={system.n} > {max_unknowns}")
    a = system.matrix()
    ata = (a.T @ a).toarray()
    atb = a.T @ system.rhs
    try:
        chol = np.linalg.cholesky(ata)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"normal matrix not positive definite: {exc}") from exc
    y = np.linalg.solve(chol, atb)
    x = np.linalg.solve(chol.T, y)
    return Solution(x=x, final_energy=system.energy(x), iterations=1, converged=True)


def dump_system(system: SparseSystem, path) -> None:
    """Text triplet dump: 'm n nnz' header, triplets, then the rhs."""
    lines = [f"{system.m} {system.n} {len(system.vals)}"]
    for r, c, v in zip(system.rows, system.cols, system.vals):
        lines.append(f"{r} {c} {v:.17g}")
    for v in system.rhs:
        lines.append(f"{v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_system(path) -> SparseSystem:
    tokens = Path(path).read_text().split("\n")
    m, n, nnz = (int(t) for t in tokens[0].split())
    rows, cols, vals = np.empty(nnz, np.int64), np.empty(nnz, np.int64), np.empty(nnz)
    for i in range(nnz):
        r, c, v = tokens[1 + i].split()
        rows[i], cols[i], vals[i] = int(r), int(c), float(v)
    rhs = np.array([float(tokens[1 + nnz + i]) for i in range(m)])
    return SparseSystem(m=m, n=n, rows=rows, cols=cols, vals=vals, rhs=rhs)
