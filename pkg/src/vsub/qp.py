"""Equality-constrained quadratic programs and variational subspaces.

A problem instance is

    minimize    (1/2) X'HX - q'X    subject to    A'X = b

with H symmetric positive semidefinite. The subspace machinery assumes the
demands lie in known low-dimensional spans: constraint directions A = C A_c
and load vectors q = D Y. Under that assumption the minimizer is an exact
linear function of (Z, Y) where Z = A_c b are the constraint intercepts, and
the map is recovered columnwise from one saddle-point factorization.

Contents: QuadraticProgram / DemandBasis / VariationalSubspace /
ReducedSolution containers, build_subspace, solve_in_subspace, exact_solve,
mahalanobis_distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import NumericError, ValidationError

SYMMETRY_TOL = 1e-12
RANK_TOL = 1e-10
KKT_RESIDUAL_TOL = 1e-8
EXACT_SOLVE_CAP = 5000


def _max_abs(M):
    if sp.issparse(M):
        return abs(M).max() if M.nnz else 0.0
    return float(np.max(np.abs(M))) if M.size else 0.0


def _check_symmetric(H):
    asym = _max_abs(H - H.T)
    scale = _max_abs(H)
    if asym > SYMMETRY_TOL * max(scale, 1.0):
        raise ValidationError(
            f"H is not symmetric: max |H - H'| = {asym:.3e} "
            f"exceeds {SYMMETRY_TOL:.0e} * max|H| = {SYMMETRY_TOL * max(scale, 1.0):.3e}"
        )


@dataclass
class QuadraticProgram:
    """Instance data for min (1/2) X'HX - q'X subject to A'X = b.

    H may be a dense array or any scipy sparse matrix; it must be symmetric
    (enforced on construction). A holds the m constraint directions as
    columns of an n x m array; full column rank is checked when a solve is
    requested, not here, so infeasible or redundant constraint sets can be
    constructed and diagnosed later.
    """

    H: object
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.shape[0]
        if self.H.shape != (n, n):
            raise ValidationError(f"H has shape {self.H.shape}, expected ({n}, {n})")
        _check_symmetric(self.H)
        self.A = np.asarray(self.A, dtype=float)
        if self.A.ndim == 1:
            self.A = self.A.reshape(n, -1)
        if self.A.shape[0] != n:
            raise ValidationError(f"A has {self.A.shape[0]} rows, expected {n}")
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.b.shape[0] != self.A.shape[1]:
            raise ValidationError(
                f"b has {self.b.shape[0]} entries for {self.A.shape[1]} constraints"
            )

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def m(self):
        return self.A.shape[1]

    def check_constraint_rank(self):
        """Require A to have full column rank (smallest singular value
        above RANK_TOL times the largest)."""
        if self.m == 0:
            return
        s = np.linalg.svd(self.A, compute_uv=False)
        if s[-1] <= RANK_TOL * s[0]:
            raise ValidationError(
                f"constraint directions A are rank deficient: "
                f"sigma_min/sigma_max = {s[-1] / s[0]:.3e}"
            )


@dataclass
class DemandBasis:
    """Spans the admissible demands: constraints must satisfy A = C A_c and
    loads q = D Y. C must be well conditioned (condition number at most
    cond_cap) and [C D] jointly independent, both checked on construction.
    """

    C: np.ndarray
    D: np.ndarray
    cond_cap: float = 1e8

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = self.C.shape[0]
        if self.D is None:
            self.D = np.zeros((n, 0))
        self.D = np.asarray(self.D, dtype=float).reshape(n, -1)
        if self.C.shape[1] == 0:
            raise ValidationError("C must contain at least one column")
        sc = np.linalg.svd(self.C, compute_uv=False)
        if sc[-1] == 0.0 or sc[0] / sc[-1] > self.cond_cap:
            cond = np.inf if sc[-1] == 0.0 else sc[0] / sc[-1]
            raise ValidationError(
                f"C condition number {cond:.3e} exceeds cap {self.cond_cap:.3e}"
            )
        stacked = np.hstack([self.C, self.D])
        s = np.linalg.svd(stacked, compute_uv=False)
        if s[-1] <= RANK_TOL * s[0]:
            raise ValidationError(
                "[C D] is not jointly independent: "
                f"sigma_min/sigma_max = {s[-1] / max(s[0], 1e-300):.3e}"
            )

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def d(self):
        return self.C.shape[1]

    @property
    def k(self):
        return self.D.shape[1]


@dataclass
class VariationalSubspace:
    """Columnwise solution maps of the saddle system [[H, C], [C', 0]].

    N (n x d) maps constraint intercepts Z to states, UD (n x k) maps load
    coordinates Y to states; the constrained minimizer for any admissible
    demand is X = N Z + UD Y. Identities C'N = I and C'UD = 0 are verified
    on construction.
    """

    N: np.ndarray
    UD: np.ndarray
    basis: DemandBasis
    multipliers_N: np.ndarray = field(repr=False, default=None)
    multipliers_UD: np.ndarray = field(repr=False, default=None)

    @property
    def d(self):
        return self.N.shape[1]

    @property
    def k(self):
        return self.UD.shape[1]


@dataclass
class ReducedSolution:
    """Result of a subspace solve: coordinates (Z, Y), the reconstructed
    state X = N Z + UD Y, and the constraint multipliers of the reduced
    problem."""

    Z: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    multipliers: np.ndarray


def _saddle_matrix(H, C):
    n, d = C.shape
    return sp.bmat(
        [[sp.csc_matrix(H) if not sp.issparse(H) else H.tocsc(), sp.csc_matrix(C)],
         [sp.csc_matrix(C.T), None]],
        format="csc",
    )


def _rank_defect_message(K):
    side = K.shape[0]
    if side <= 2000:
        s = np.linalg.svd(K.toarray() if sp.issparse(K) else K, compute_uv=False)
        rank = int(np.sum(s > RANK_TOL * max(s[0], 1e-300)))
        return f"rank defect {side - rank}"
    return "rank defect not computed at this scale"


def build_subspace(H, basis):
    """Factor the saddle system [[H, C], [C', 0]] once and solve for all
    d + k subspace columns.

    Parameters
    ----------
    H : (n, n) dense or sparse symmetric matrix
    basis : DemandBasis

    Returns
    -------
    VariationalSubspace

    Raises
    ------
    NumericError
        If the saddle matrix is singular, with the phrase "degenerate
        subspace configuration" and a rank defect report.
    """
    _check_symmetric(H)
    n, d, k = basis.n, basis.d, basis.k
    if H.shape != (n, n):
        raise ValidationError(f"H has shape {H.shape}, expected ({n}, {n})")
    K = _saddle_matrix(H, basis.C)
    rhs = np.zeros((n + d, d + k))
    rhs[n:, :d] = np.eye(d)
    rhs[:n, d:] = basis.D
    try:
        lu = splu(K)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise NumericError(
            f"degenerate subspace configuration ({_rank_defect_message(K)}): {exc}"
        ) from exc
    residual = np.max(np.abs(K @ sol - rhs))
    scale = 1.0 + max(_max_abs(rhs), 1.0)
    if not np.isfinite(residual) or residual > KKT_RESIDUAL_TOL * scale:
        raise NumericError(
            f"degenerate subspace configuration ({_rank_defect_message(K)}): "
            f"saddle solve residual {residual:.3e}"
        )
    N, UD = sol[:n, :d], sol[:n, d:]
    gram = basis.C.T @ N
    off = basis.C.T @ UD
    err = max(np.max(np.abs(gram - np.eye(d))), np.max(np.abs(off)) if k else 0.0)
    if err > KKT_RESIDUAL_TOL:
        raise NumericError(
            f"subspace columns violate C'N = I, C'UD = 0 by {err:.3e}"
        )
    return VariationalSubspace(
        N=N, UD=UD, basis=basis,
        multipliers_N=sol[n:, :d], multipliers_UD=sol[n:, d:],
    )


def solve_in_subspace(program, subspace):
    """Solve the program restricted to X = N Z + UD Y.

    Reduces to a dense KKT system of size d + k + m over (Z, Y) and the
    m constraint multipliers. Hard constraints hold exactly up to floating
    point: the solve is rejected if the achieved residual exceeds
    1e-8 * (1 + max|b|).

    Parameters
    ----------
    program : QuadraticProgram
    subspace : VariationalSubspace

    Returns
    -------
    ReducedSolution
    """
    n = program.n
    if subspace.N.shape[0] != n:
        raise ValidationError(
            f"subspace built for n = {subspace.N.shape[0]}, program has n = {n}"
        )
    program.check_constraint_rank()
    B = np.hstack([subspace.N, subspace.UD])
    dk = B.shape[1]
    m = program.m
    HB = program.H @ B
    Hr = B.T @ HB
    Hr = 0.5 * (Hr + Hr.T)
    gr = B.T @ program.q
    Ar = B.T @ program.A

    K = np.zeros((dk + m, dk + m))
    K[:dk, :dk] = Hr
    K[:dk, dk:] = Ar
    K[dk:, :dk] = Ar.T
    rhs = np.concatenate([gr, program.b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        _diagnose_reduced_failure(Ar, program.b, exc)
        raise
    w, lam = sol[:dk], sol[dk:]
    X = B @ w
    residual = np.max(np.abs(program.A.T @ X - program.b)) if m else 0.0
    tol = KKT_RESIDUAL_TOL * (1.0 + (np.max(np.abs(program.b)) if m else 0.0))
    if not np.isfinite(residual) or residual > tol:
        _diagnose_reduced_failure(Ar, program.b, None)
        raise NumericError(
            f"reduced solve left constraint residual {residual:.3e} (tolerance {tol:.3e})"
        )
    return ReducedSolution(Z=w[:subspace.d], Y=w[subspace.d:], X=X, multipliers=lam)


def _diagnose_reduced_failure(Ar, b, cause):
    """Distinguish constraints that the subspace cannot meet from a merely
    singular reduced system."""
    if Ar.shape[1]:
        w, *_ = np.linalg.lstsq(Ar.T, b, rcond=None)
        residual = np.linalg.norm(Ar.T @ w - b)
        if residual > KKT_RESIDUAL_TOL * (1.0 + np.linalg.norm(b)):
            raise NumericError(
                "constraints are infeasible within the subspace: best achievable "
                f"residual |A'X - b| = {residual:.3e}"
            ) from cause
    raise NumericError("reduced KKT system is singular") from cause


def exact_solve(program, cap=EXACT_SOLVE_CAP):
    """Dense KKT reference solve of the full problem.

    Deliberately capped at desk scale (n <= cap, default 5000); intended as
    an oracle for subspace solves, not a production path.
    """
    n, m = program.n, program.m
    if n > cap:
        raise ValidationError(f"exact_solve is capped at n = {cap}, got n = {n}")
    program.check_constraint_rank()
    Hd = program.H.toarray() if sp.issparse(program.H) else np.asarray(program.H, dtype=float)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = Hd
    K[:n, n:] = program.A
    K[n:, :n] = program.A.T
    rhs = np.concatenate([program.q, program.b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        s = np.linalg.svd(K, compute_uv=False) if n + m <= 2000 else None
        defect = ""
        if s is not None:
            rank = int(np.sum(s > RANK_TOL * max(s[0], 1e-300)))
            defect = f" (rank defect {n + m - rank})"
        raise NumericError(f"full KKT system is singular{defect}") from exc
    residual = np.max(np.abs(K @ sol - rhs))
    if not np.isfinite(residual) or residual > KKT_RESIDUAL_TOL * (1.0 + np.max(np.abs(rhs))):
        raise NumericError(f"full KKT solve residual {residual:.3e}; system is near singular")
    return sol[:n]


def mahalanobis_distance(H, x, y):
    """Quadratic-form distance (x - y)'H(x - y) induced by the energy
    Hessian. Zero exactly when x == y; nonnegative for PSD H up to
    roundoff."""
    delta = np.asarray(x, dtype=float).ravel() - np.asarray(y, dtype=float).ravel()
    return float(delta @ (H @ delta))
