"""Hat-space analysis of constrained quadratic minimizers.

Splitting H = L'L turns the energy into a squared norm of hat coordinates
X_hat = LX, where constrained minimization, subspace restriction, and
approximation error all become Euclidean geometry: closed-form solutions
via pseudo-inverses, an orthogonal projector onto the demand subspace, and
an a priori error bound whose hypotheses are measurable per instance.

Everything here is desk scale and dense on purpose: this module is the
audit path for the sparse production solvers, not a production path
itself.

Contents: psd_factor, two_part_decompose, HatProblem / hat_transform,
exact_hat_solution, HatSubspace / hat_subspace, closest_point,
reduced_hat_solution, BoundParams / bound_rhs, lemma_inequalities_check,
are_quotient_equivalent, and the Monte Carlo sweeps behind the verify
command (run_verification).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .qp import QuadraticProgram, exact_solve

RANK_CUTOFF = 1e-10
PROJECTOR_TOL = 1e-10


def psd_factor(H):
    """Symmetric square root of a PSD matrix, rank revealed by an
    eigenvalue cutoff of 1e-10 times the largest eigenvalue.

    The symmetric choice (rather than a triangular Cholesky factor) makes
    the factor self-adjoint, so the same map L+ carries both states and
    constraint directions into hat coordinates.

    Returns
    -------
    L : (n, n) ndarray with L'L = H
    """
    L, _, _ = _psd_factor_pinv(H)
    return L


def _psd_factor_pinv(H):
    H = np.asarray(H, dtype=float)
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    cutoff = RANK_CUTOFF * max(w[-1], 0.0)
    if w[-1] > 0 and w[0] < -1e-8 * w[-1]:
        raise ValidationError(f"H has a negative eigenvalue {w[0]:.3e}; not PSD")
    keep = w > cutoff
    roots = np.sqrt(w[keep])
    Vk = V[:, keep]
    L = (Vk * roots) @ Vk.T
    Lplus = (Vk / roots) @ Vk.T if keep.any() else np.zeros_like(H)
    return L, Lplus, int(keep.sum())


def two_part_decompose(L, X, Lplus=None):
    """Split X into its energy-visible part L+LX and the kernel remainder.

    Returns (X_tilde, X_bar) with X = X_tilde + X_bar, L X_bar = 0, and
    X_tilde' X_bar = 0.
    """
    if Lplus is None:
        Lplus = np.linalg.pinv(L, rcond=RANK_CUTOFF)
    x_tilde = Lplus @ (L @ np.asarray(X, dtype=float))
    return x_tilde, X - x_tilde


@dataclass
class HatProblem:
    """A constrained quadratic program carried into hat coordinates.

    L is the symmetric factor of H, Lplus its pseudo-inverse, and the
    transformed data satisfy q_hat = L+ q, A_hat = L+ A, and
    b_hat = b - A' X_bar_min, where X_bar_min is the kernel component of
    the dense minimizer (the part of the answer the energy cannot see).
    """

    L: np.ndarray
    Lplus: np.ndarray
    q_hat: np.ndarray
    A_hat: np.ndarray
    b_hat: np.ndarray
    X_bar_min: np.ndarray
    X_min: np.ndarray = field(repr=False, default=None)
    rank: int = 0

    @property
    def n(self):
        return self.L.shape[0]


def hat_transform(program):
    """Carry a QuadraticProgram into hat coordinates.

    Uses the dense exact solution once, to split off the kernel component
    X_bar_min that the constraint offset b_hat must account for.
    """
    L, Lplus, rank = _psd_factor_pinv(
        program.H.toarray() if hasattr(program.H, "toarray") else program.H
    )
    x_min = exact_solve(program)
    _, x_bar = two_part_decompose(L, x_min, Lplus)
    return HatProblem(
        L=L,
        Lplus=Lplus,
        q_hat=Lplus @ program.q,
        A_hat=Lplus @ program.A,
        b_hat=program.b - program.A.T @ x_bar,
        X_bar_min=x_bar,
        X_min=x_min,
        rank=rank,
    )


def _require_full_column_rank(M, what):
    if M.shape[1] == 0:
        return
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= RANK_CUTOFF * max(s[0], 1e-300):
        raise NumericError(
            f"{what} is rank deficient (sigma_min/sigma_max = "
            f"{s[-1] / max(s[0], 1e-300):.3e})"
        )


def exact_hat_solution(hp):
    """Closed-form hat image of the constrained minimizer:
    (I - A^ A^+) q^ + (A^+)' b^. Requires A_hat to have full column
    rank."""
    _require_full_column_rank(hp.A_hat, "A_hat")
    Ap = np.linalg.pinv(hp.A_hat, rcond=RANK_CUTOFF)
    return hp.q_hat - hp.A_hat @ (Ap @ hp.q_hat) + Ap.T @ hp.b_hat


@dataclass
class HatSubspace:
    """Hat images of the demand spans and the derived operators.

    N_hat spans the constraint-response directions, U_hat projects onto
    the orthogonal complement of range(C_hat), and I_hat is the orthogonal
    projector onto the whole admissible subspace
    range(C_hat) + range(U_hat D_hat).
    """

    C_hat: np.ndarray
    D_hat: np.ndarray
    N_hat: np.ndarray
    U_hat: np.ndarray
    UD_hat: np.ndarray
    I_hat: np.ndarray

    @property
    def d(self):
        return self.C_hat.shape[1]

    @property
    def k(self):
        return self.D_hat.shape[1]


def hat_subspace(hp, C, D):
    """Build the hat-space demand subspace for spans C (constraints) and
    D (loads).

    Raises NumericError if the hat images [C_hat D_hat] are not jointly
    independent; the projector identities are verified on construction.
    """
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float).reshape(C.shape[0], -1)
    C_hat = hp.Lplus @ C
    D_hat = hp.Lplus @ D
    stacked = np.hstack([C_hat, D_hat])
    _require_full_column_rank(stacked, "[C_hat D_hat]")
    C_pinv = np.linalg.pinv(C_hat, rcond=RANK_CUTOFF)
    N_hat = C_pinv.T
    U_hat = np.eye(hp.n) - C_hat @ C_pinv
    UD_hat = U_hat @ D_hat
    I_hat = C_hat @ C_pinv + UD_hat @ np.linalg.pinv(UD_hat, rcond=RANK_CUTOFF)
    sym = np.max(np.abs(I_hat - I_hat.T))
    idem = np.max(np.abs(I_hat @ I_hat - I_hat))
    if max(sym, idem) > PROJECTOR_TOL:
        raise NumericError(
            f"projector identities violated: symmetry {sym:.3e}, idempotence {idem:.3e}"
        )
    return HatSubspace(
        C_hat=C_hat, D_hat=D_hat, N_hat=N_hat, U_hat=U_hat, UD_hat=UD_hat, I_hat=I_hat
    )


def closest_point(x_hat, hs):
    """Orthogonal projection onto the subspace, with its coordinates.

    Returns (projection, Z, Y) where projection = I_hat x_hat,
    Z = C_hat' x_hat and Y = (U_hat D_hat)+ x_hat, so that
    projection = N_hat Z + UD_hat Y.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    Z = hs.C_hat.T @ x_hat
    Y = np.linalg.pinv(hs.UD_hat, rcond=RANK_CUTOFF) @ x_hat
    return hs.I_hat @ x_hat, Z, Y


def reduced_hat_solution(hp, hs):
    """Closed-form minimizer restricted to the demand subspace:
    (I^ - A_p A_p+) q^ + (A_p+)' b^ with A_p = I^ A^.

    Raises NumericError("subspace cannot express the constraints") when
    the projected directions lose rank.
    """
    Ap_mat = hs.I_hat @ hp.A_hat
    if Ap_mat.shape[1]:
        s = np.linalg.svd(Ap_mat, compute_uv=False)
        if s[-1] <= RANK_CUTOFF * max(s[0], 1e-300):
            raise NumericError(
                "subspace cannot express the constraints: projected constraint "
                f"directions are rank deficient (sigma_min/sigma_max = "
                f"{s[-1] / max(s[0], 1e-300):.3e})"
            )
    Ap_pinv = np.linalg.pinv(Ap_mat, rcond=RANK_CUTOFF)
    return (
        hs.I_hat @ hp.q_hat
        - Ap_mat @ (Ap_pinv @ hp.q_hat)
        + Ap_pinv.T @ hp.b_hat
    )


@dataclass
class BoundParams:
    """Hypothesis constants of the a priori error bound.

    rho bounds |I - A^+ I^ A^| (must be below 1), omega bounds the
    condition number of A_hat (at least 1). The derived amplification
    factors are beta1 = (2 - rho)/(1 - rho) and beta2 = 1 + omega/(1 - rho).
    """

    rho: float
    omega: float

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.omega < 1.0:
            raise ValidationError(f"omega must be at least 1, got {self.omega}")

    @property
    def beta1(self):
        return (2.0 - self.rho) / (1.0 - self.rho)

    @property
    def beta2(self):
        return 1.0 + self.omega / (1.0 - self.rho)

    @classmethod
    def measure(cls, hp, hs):
        """Tightest admissible constants for one instance. Raises
        NumericError with a hypothesis report when rho would reach 1."""
        rho = measured_rho(hp, hs)
        if rho >= 1.0:
            raise NumericError(
                "bound hypothesis violated: |I - A^+ I^ A^| = "
                f"{rho:.6f} >= 1; the subspace loses too much of the "
                "constraint directions for the bound to apply"
            )
        Ap = np.linalg.pinv(hp.A_hat, rcond=RANK_CUTOFF)
        omega = np.linalg.norm(hp.A_hat, 2) * np.linalg.norm(Ap, 2)
        return cls(rho=rho, omega=max(1.0, omega))


def measured_rho(hp, hs):
    """Spectral norm of I - A^+ I^ A^ for one instance."""
    _require_full_column_rank(hp.A_hat, "A_hat")
    Ap = np.linalg.pinv(hp.A_hat, rcond=RANK_CUTOFF)
    m = hp.A_hat.shape[1]
    return float(np.linalg.norm(np.eye(m) - Ap @ hs.I_hat @ hp.A_hat, 2))


def bound_rhs(hp, hs, params=None):
    """Evaluate the a priori error bound

        |I^ q^ - q^| + (beta1 |b^| |A^+|^2 + beta2 |q^| |A^+|) |I^ A^ - A^|

    for one instance. With params=None the tightest measured constants are
    used; explicitly passed constants are checked against the measured
    quantities and rejected if they understate them.
    """
    measured = BoundParams.measure(hp, hs)
    if params is None:
        params = measured
    else:
        if params.rho < measured.rho - 1e-12:
            raise NumericError(
                f"bound hypothesis violated: supplied rho {params.rho:.6f} is below "
                f"the measured value {measured.rho:.6f}"
            )
        if params.omega < measured.omega - 1e-9:
            raise NumericError(
                f"bound hypothesis violated: supplied omega {params.omega:.6f} is "
                f"below the measured value {measured.omega:.6f}"
            )
    Ap_norm = np.linalg.norm(np.linalg.pinv(hp.A_hat, rcond=RANK_CUTOFF), 2)
    drift = np.linalg.norm(hs.I_hat @ hp.A_hat - hp.A_hat, 2)
    q_term = np.linalg.norm(hs.I_hat @ hp.q_hat - hp.q_hat)
    return float(
        q_term
        + (
            params.beta1 * np.linalg.norm(hp.b_hat) * Ap_norm**2
            + params.beta2 * np.linalg.norm(hp.q_hat) * Ap_norm
        )
        * drift
    )


def lemma_inequalities_check(hp, hs):
    """Check the two perturbation lemmas and their corollary forms on one
    instance.

    Returns a dict with one entry per inequality: lhs, rhs and
    slack = rhs - lhs, plus the measured contraction rho_t and a
    hypotheses_met flag (rho_t < 1). Slacks are meaningful only when the
    hypotheses hold.
    """
    A = hp.A_hat
    _require_full_column_rank(A, "A_hat")
    Ap = np.linalg.pinv(A, rcond=RANK_CUTOFF)
    I_hat = hs.I_hat
    m = A.shape[1]
    rho_t = float(np.linalg.norm(np.eye(m) - Ap @ I_hat @ A, 2))
    drift = float(np.linalg.norm(I_hat @ A - A, 2))
    Ap_norm = float(np.linalg.norm(Ap, 2))
    cond = float(np.linalg.norm(A, 2) * Ap_norm)
    hypotheses_met = rho_t < 1.0

    out = {"rho_t": rho_t, "drift": drift, "hypotheses_met": hypotheses_met}
    if not hypotheses_met:
        out["inequalities"] = {}
        return out

    Apz = I_hat @ A
    gram = np.linalg.inv(A.T @ A)
    gram_p = np.linalg.inv(Apz.T @ Apz)
    proj_gap = float(np.linalg.norm(A @ (gram - gram_p) @ A.T, 2))
    pinv_gap = float(np.linalg.norm(Ap - np.linalg.pinv(Apz, rcond=RANK_CUTOFF), 2))

    ineqs = {
        "gram_gap_vs_rho": (proj_gap, cond * rho_t / (1.0 - rho_t)),
        "pinv_gap_vs_rho": (
            pinv_gap,
            Ap_norm * rho_t / (1.0 - rho_t) + Ap_norm**2 * drift,
        ),
        "gram_gap_vs_drift": (proj_gap, cond * Ap_norm * drift / (1.0 - rho_t)),
        "pinv_gap_vs_drift": (
            pinv_gap,
            Ap_norm**2 * (2.0 - rho_t) / (1.0 - rho_t) * drift,
        ),
    }
    out["inequalities"] = {
        name: {"lhs": lhs, "rhs": rhs, "slack": rhs - lhs}
        for name, (lhs, rhs) in ineqs.items()
    }
    return out


def are_quotient_equivalent(p1, p2, tol=1e-9):
    """Whether two programs share the same minimizer geometry: same H, same
    A and q, and matching constraint offsets b_hat once kernel motion is
    discounted.

    Programs with different H are not comparable and raise
    ValidationError.
    """
    H1 = p1.H.toarray() if hasattr(p1.H, "toarray") else np.asarray(p1.H, dtype=float)
    H2 = p2.H.toarray() if hasattr(p2.H, "toarray") else np.asarray(p2.H, dtype=float)
    if H1.shape != H2.shape or np.max(np.abs(H1 - H2)) > 1e-12 * max(
        1.0, np.max(np.abs(H1))
    ):
        raise ValidationError("programs with different H are not comparable")
    if p1.A.shape != p2.A.shape or p1.q.shape != p2.q.shape:
        return False
    scale_a = max(1.0, np.max(np.abs(p1.A)) if p1.A.size else 0.0)
    if p1.A.size and np.max(np.abs(p1.A - p2.A)) > tol * scale_a:
        return False
    if np.max(np.abs(p1.q - p2.q)) > tol * max(1.0, np.max(np.abs(p1.q))):
        return False
    b1 = hat_transform(p1).b_hat
    b2 = hat_transform(p2).b_hat
    scale_b = max(1.0, np.linalg.norm(b1))
    return bool(np.linalg.norm(b1 - b2) <= tol * scale_b)


# ---------------------------------------------------------------------------
# Monte Carlo sweeps (the substance behind the verify command)


def _draw_instance(rng, n, admissible):
    """One random desk-scale instance. For bound sweeps the constraint
    directions are perturbed off the span so the projector has something
    to lose; admissible sweeps keep all demands inside the spans."""
    d = int(rng.integers(2, 5))
    k = int(rng.integers(1, 4))
    m = int(rng.integers(1, d + 1))
    rank = n - int(rng.integers(0, 3))
    B = rng.standard_normal((rank, n))
    H = B.T @ B
    C = rng.standard_normal((n, d))
    D = rng.standard_normal((n, k))
    if admissible:
        A = C @ rng.standard_normal((d, m))
        q = D @ rng.standard_normal(k)
    else:
        eps = float(rng.uniform(0.02, 0.3))
        A = C @ rng.standard_normal((d, m))
        A = A + eps * np.linalg.norm(A, 2) * _unit_columns(rng, n, m)
        q = rng.standard_normal(n)
    b = rng.standard_normal(m)
    program = QuadraticProgram(H=H, q=q, A=A, b=b)
    return program, C, D


def _unit_columns(rng, n, m):
    E = rng.standard_normal((n, m))
    return E / np.linalg.norm(E, 2)


def verify_bound_instance(program, C, D, params=None):
    """Error, bound and hypothesis data for one instance. Raises
    NumericError when a hypothesis fails (rank loss or rho >= 1)."""
    hp = hat_transform(program)
    hs = hat_subspace(hp, C, D)
    x_exact = exact_hat_solution(hp)
    x_reduced = reduced_hat_solution(hp, hs)
    error = float(np.linalg.norm(x_reduced - x_exact))
    measured = BoundParams.measure(hp, hs)
    bound = bound_rhs(hp, hs, params)
    lemmas = lemma_inequalities_check(hp, hs)
    return {
        "error": error,
        "bound": bound,
        "slack": bound - error,
        "rho": measured.rho,
        "omega": measured.omega,
        "hypotheses_met": bool(lemmas["hypotheses_met"]),
        "lemmas": lemmas["inequalities"],
    }


def run_verification(instances=200, n=24, seed=7, admissible=False):
    """Monte Carlo sweep: draw random instances, verify the error bound
    (or exactness, with admissible=True) on each, and return a JSON-ready
    report.

    Draws that violate the bound hypotheses (rank loss, rho >= 1,
    unsolvable dense reference) are resampled; the report counts them.
    """
    rng = np.random.default_rng(seed)
    rows = []
    rejected = 0
    while len(rows) < instances:
        try:
            program, C, D = _draw_instance(rng, n, admissible)
            if admissible:
                hp = hat_transform(program)
                hs = hat_subspace(hp, C, D)
                x_exact = exact_hat_solution(hp)
                x_reduced = reduced_hat_solution(hp, hs)
                error = float(np.linalg.norm(x_reduced - x_exact))
                rows.append(
                    {
                        "error": error,
                        "bound": None,
                        "slack": None,
                        "rho": measured_rho(hp, hs),
                        "omega": BoundParams.measure(hp, hs).omega,
                        "hypotheses_met": True,
                        "exact_within": bool(
                            error <= 1e-8 * (1.0 + np.linalg.norm(x_exact))
                        ),
                    }
                )
            else:
                rows.append(verify_bound_instance(program, C, D))
        except (NumericError, ValidationError):
            rejected += 1
            if rejected > 50 * instances:
                raise NumericError(
                    "verification could not draw enough admissible instances"
                )
    slacks = [r["slack"] for r in rows if r["slack"] is not None]
    lemma_slacks = [
        ineq["slack"]
        for r in rows
        for ineq in r.get("lemmas", {}).values()
    ]
    report = {
        "config": {
            "instances": instances,
            "n": n,
            "seed": seed,
            "mode": "admissible" if admissible else "bound",
        },
        "rejected_draws": rejected,
        "instances_data": rows,
        "summary": {
            "count": len(rows),
            "min_slack": float(min(slacks)) if slacks else 0.0,
            "all_bounded": bool(all(s >= -1e-12 for s in slacks)),
            "min_lemma_slack": float(min(lemma_slacks)) if lemma_slacks else 0.0,
            "max_error": float(max(r["error"] for r in rows)) if rows else 0.0,
        },
    }
    if admissible:
        report["summary"]["all_exact"] = bool(all(r["exact_within"] for r in rows))
    return report
