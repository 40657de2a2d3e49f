"""Interactive two-phase solver over a precomputed model.

Per frame: re-estimate the global rotation from the handles (so the
increment linearization stays near identity under large rotations), then
alternate a linear solve for the controls X with per-cluster rotation fits.

Phase 1 minimizes the reduced quadratic at fixed rotations S.  Hard handles
go through a dense KKT system, soft handles through the penalty normal
equations; both factor once per handle structure and reuse the factor while
only targets change.  Phase 2 projects each cluster's fit matrix onto the
rotations (optionally with a clamped uniform scale per cluster).

All session state is kept in a local frame; the tracked global rotation r0
maps it to world coordinates.  World vertices are r0 @ v.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericError, ParseError, ValidationError
from .mesh import Mesh, write_node_ele, write_obj

DEFAULT_ITERATIONS = 8
# penalty weight relative to the mean reduced-Hessian diagonal
SOFT_WEIGHT_SCALE = 1e4
DEFAULT_PSI_CAP = 2.0
HANDLE_RANK_TOL = 1e-10
FACTOR_TOL = 1e-12
# fits with norm below this keep the previous rotation
FIT_NORM_TOL = 1e-14


def polar_rotation(F, fallback=None):
    """Rotation (det +1) closest to F in Frobenius norm.

    Parameters
    ----------
    F : (3, 3) ndarray
        Fit matrix; need not be invertible.
    fallback : (3, 3) ndarray, optional
        Returned when ``F`` is numerically zero (identity when omitted).

    Returns
    -------
    (3, 3) ndarray
    """
    F = np.asarray(F, dtype=np.float64)
    if np.linalg.norm(F) < FIT_NORM_TOL:
        return np.eye(3) if fallback is None else np.asarray(fallback, dtype=np.float64)
    U, _, Vt = np.linalg.svd(F)
    if np.linalg.det(U @ Vt) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]  # flip the smallest singular direction
    return U @ Vt


def kabsch_rotation(base, moved, fallback=None):
    """Best rotation R with R @ base_i ~ moved_i after centering.

    Returns ``fallback`` (identity when omitted) for fewer than three points
    or a collinear configuration, where the rotation is not determined.
    """
    base = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    moved = np.asarray(moved, dtype=np.float64).reshape(-1, 3)
    fb = np.eye(3) if fallback is None else np.asarray(fallback, dtype=np.float64)
    if len(base) < 3 or len(base) != len(moved):
        return fb
    Bc = base - base.mean(axis=0)
    Mc = moved - moved.mean(axis=0)
    H = Mc.T @ Bc
    sig = np.linalg.svd(H, compute_uv=False)
    if sig[1] <= 1e-12 * max(sig[0], 1e-300):
        return fb
    return polar_rotation(H)


@dataclass
class RuntimeOptions:
    """Solver knobs; see Session."""

    iterations: int = DEFAULT_ITERATIONS
    soft: bool = False
    soft_weight: float | None = None
    conformal: bool = False
    psi_cap: float = DEFAULT_PSI_CAP
    adapt_rotation: bool = True

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValidationError("iterations must be >= 1")
        self.iterations = int(self.iterations)
        if self.soft_weight is not None and not self.soft_weight > 0:
            raise ValidationError("soft_weight must be > 0")
        if not self.psi_cap > 1.0:
            raise ValidationError("psi_cap must exceed 1")


@dataclass
class PatchGrab:
    """A user hold on a patch: a displacement and optionally a matrix."""

    index: int
    displacement: np.ndarray | None = None
    matrix: np.ndarray | None = None


@dataclass
class FrameResult:
    """State snapshot after one frame of the alternation."""

    X: np.ndarray
    S: np.ndarray
    r0: np.ndarray
    energy: float
    residual: float
    iterations: int


class Session:
    """Mutable solve state bound to one PrecomputedModel.

    Typical use::

        sess = Session(model)
        sess.set_handles(vertex_ids=[3, 17, 40])
        sess.set_targets(world_positions)
        result = sess.step()
        world_vertices = sess.reconstruct()
    """

    def __init__(self, model, options=None):
        self.model = model
        self.options = options if options is not None else RuntimeOptions()
        self._check_conformal()
        self.X = model.x_rest.copy()
        self.rotations = np.tile(np.eye(3), (model.d, 1, 1))
        self.psi = np.ones(model.d)
        self.r0 = np.eye(3)
        self.soft_weight = (
            self.options.soft_weight
            if self.options.soft_weight is not None
            else SOFT_WEIGHT_SCALE * float(np.mean(np.diag(model.L_tilde)))
        )
        self._rows = []  # row descriptors, parallel to N_eq rows / rhs entries
        self._N_eq = None
        self._U_eq = None
        self._factor = None
        self._handle_ids = np.zeros(0, dtype=np.int64)
        self._grabs = ()
        self._vertex_targets = np.zeros((0, 3))
        self._patch_poses = {}
        self._last_residual = 0.0

    # -- state views -------------------------------------------------------

    @property
    def S(self):
        """Stacked cluster matrices psi_c * R_c, row-major, (9d,)."""
        return (self.psi[:, None, None] * self.rotations).reshape(-1)

    def energy(self):
        """Reduced energy 1/2 X^T Lt X - S^T Mt X at the current state."""
        S = self.S
        return float(0.5 * self.X @ (self.model.L_tilde @ self.X) - S @ (self.model.M_tilde @ self.X))

    def reconstruct(self):
        """World-space deformed vertex positions, (n, 3)."""
        return self.model.reconstruct(self.X, self.S) @ self.r0.T

    # -- configuration -----------------------------------------------------

    def _check_conformal(self):
        if self.options.conformal and (self.model.c_vec <= 0).any():
            raise ValidationError(
                "conformal scaling needs positive cluster stiffness; a cluster has none"
            )

    def set_options(self, **updates):
        """Update solver options in place; refactors when the solve changes."""
        fields = vars(self.options) | updates
        unknown = set(fields) - set(vars(self.options))
        if unknown:
            raise ValidationError(f"unknown options: {', '.join(sorted(unknown))}")
        old = self.options
        self.options = RuntimeOptions(**fields)
        self._check_conformal()
        if "soft_weight" in updates and updates["soft_weight"] is not None:
            self.soft_weight = float(updates["soft_weight"])
        if old.soft != self.options.soft or "soft_weight" in updates:
            if self._N_eq is not None:
                self._refactor()
        if not self.options.conformal:
            self.psi[:] = 1.0

    # -- handles -----------------------------------------------------------

    def _patch_cluster(self, p_idx):
        # patches own the trailing clusters, in declaration order
        return self.model.d - self.model.s + p_idx

    def set_handles(self, vertex_ids=(), grabs=()):
        """Declare the handle structure and factor the solve for it.

        Parameters
        ----------
        vertex_ids : sequence of int
            Vertices receiving position constraints (3 rows each).
        grabs : sequence of PatchGrab
            Patches the user is holding.  Ungrabbed patches still contribute
            their mode rows ('fixed' pins pose, 'rigid' pins the matrix to
            its cluster rotation).

        Raises
        ------
        ValidationError
            For unknown ids, duplicate grabs, more rows than controls, or
            handle rows that are not independently expressible with the
            model's proxies (add linear proxies near the handles).
        """
        model = self.model
        vertex_ids = np.asarray(list(vertex_ids), dtype=np.int64)
        if vertex_ids.size != np.unique(vertex_ids).size:
            raise ValidationError("duplicate handle vertex ids")
        if vertex_ids.size and (
            vertex_ids.min() < 0 or vertex_ids.max() >= model.n
        ):
            raise ValidationError("handle vertex id out of range")
        grabs = tuple(grabs)
        seen = set()
        for g in grabs:
            if not 0 <= g.index < model.s:
                raise ValidationError(f"patch index {g.index} out of range")
            if g.index in seen:
                raise ValidationError("duplicate patch grab")
            seen.add(g.index)

        # with nothing held there is nothing to solve; patch mode rows only
        # shape solves that a user hold triggers
        if vertex_ids.size == 0 and not grabs:
            self._rows = []
            self._N_eq = None
            self._U_eq = None
            self._factor = None
            self._handle_ids = vertex_ids
            self._grabs = ()
            self._vertex_targets = np.zeros((0, 3))
            self._patch_poses = {}
            return

        rows = []  # (kind, payload) descriptors driving rhs assembly
        blocks = []  # constraint rows over X
        u_blocks = []  # matching rows over S (vertex rows only)
        nx = model.nx
        for pos, v in enumerate(vertex_ids):
            idx = slice(3 * v, 3 * v + 3)
            blocks.append(model.N_W[idx, :])
            u_blocks.append(model.U_W[idx, :])
            rows.append(("vertex", pos))
        m_v = model.m - model.s
        grabbed = {g.index: g for g in grabs}
        for p in range(model.s):
            mode = model.patches[p].mode
            g = grabbed.get(p)
            dv_cols = slice(3 * m_v + 3 * p, 3 * m_v + 3 * p + 3)
            t_cols = slice(3 * model.m + 9 * p, 3 * model.m + 9 * p + 9)
            pin_dv = g is not None or mode == "fixed"
            if g is not None and mode == "affine" and g.matrix is None:
                pin_t = False
            else:
                pin_t = g is not None or mode in ("fixed", "rigid")
            if pin_dv:
                blk = np.zeros((3, nx))
                blk[np.arange(3), np.arange(dv_cols.start, dv_cols.stop)] = 1.0
                blocks.append(blk)
                u_blocks.append(np.zeros((3, 9 * model.d)))
                rows.append(("patch_dv", p))
            if pin_t:
                blk = np.zeros((9, nx))
                blk[np.arange(9), np.arange(t_cols.start, t_cols.stop)] = 1.0
                blocks.append(blk)
                u_blocks.append(np.zeros((9, 9 * model.d)))
                rows.append(("patch_t", p))

        N_eq = np.vstack(blocks)
        if N_eq.shape[0] > nx:
            raise ValidationError(
                f"{N_eq.shape[0]} handle rows exceed the {nx} reduced controls; "
                "increase m or drop handles"
            )
        sig = np.linalg.svd(N_eq, compute_uv=False)
        if sig[-1] <= HANDLE_RANK_TOL * sig[0]:
            raise ValidationError(
                "handle constraints are not independently expressible in the "
                "reduced space; add linear proxies near the handles"
            )
        self._rows = rows
        self._N_eq = N_eq
        self._U_eq = np.vstack(u_blocks)
        self._handle_ids = vertex_ids
        self._grabs = grabs
        # default targets hold everything in place until set_targets
        self._vertex_targets = (
            self.reconstruct()[vertex_ids] if vertex_ids.size else np.zeros((0, 3))
        )
        self._patch_poses = {}
        for g in grabs:
            dv = np.zeros(3) if g.displacement is None else np.asarray(g.displacement, float)
            mat = None if g.matrix is None else np.asarray(g.matrix, float)
            self._patch_poses[g.index] = (dv, mat)
        self._refactor()

    def _refactor(self):
        model = self.model
        N_eq = self._N_eq
        if N_eq is None or N_eq.shape[0] == 0:
            self._factor = None
            return
        if self.options.soft:
            A = model.L_tilde + 2.0 * self.soft_weight * N_eq.T @ N_eq
            try:
                self._factor = ("chol", sla.cho_factor(A))
            except np.linalg.LinAlgError as exc:
                raise NumericError(
                    "soft handle system is not positive definite; the handles "
                    "do not pin the pose"
                ) from exc
        else:
            k = N_eq.shape[0]
            K = np.zeros((model.nx + k, model.nx + k))
            K[: model.nx, : model.nx] = model.L_tilde
            K[: model.nx, model.nx :] = N_eq.T
            K[model.nx :, : model.nx] = N_eq
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(K)
            diag = np.abs(np.diag(lu))
            if not np.isfinite(diag).all() or diag.min() <= FACTOR_TOL * diag.max():
                raise NumericError(
                    "handle system is singular; the handles do not pin the pose "
                    "(fix a patch or add handles)"
                )
            self._factor = ("lu", (lu, piv))

    def set_targets(self, vertex_targets=None, patch_poses=None):
        """Update world-space targets for the declared handles.

        vertex_targets: (k, 3) world positions matching set_handles order.
        patch_poses: {patch_index: (displacement, matrix-or-None)} for
        grabbed patches, world space.
        """
        if vertex_targets is not None:
            vertex_targets = np.asarray(vertex_targets, dtype=np.float64).reshape(-1, 3)
            if vertex_targets.shape[0] != self._handle_ids.size:
                raise ValidationError(
                    f"{vertex_targets.shape[0]} targets for {self._handle_ids.size} handles"
                )
            self._vertex_targets = vertex_targets
        if patch_poses is not None:
            grabbed = {g.index for g in self._grabs}
            for idx, (dv, mat) in patch_poses.items():
                if idx not in grabbed:
                    raise ValidationError(f"patch {idx} is not grabbed")
                self._patch_poses[idx] = (
                    np.asarray(dv, dtype=np.float64).reshape(3),
                    None if mat is None else np.asarray(mat, dtype=np.float64).reshape(3, 3),
                )

    # -- solve -------------------------------------------------------------

    def _grab_world_matrix(self, p):
        # world matrix a grabbed patch is held at; rest orientation default
        dv, mat = self._patch_poses.get(p, (np.zeros(3), None))
        return np.eye(3) if mat is None else mat

    def _assemble_rhs(self):
        """Constraint values in the local frame for the current targets."""
        vals = np.empty(self._N_eq.shape[0])
        r0 = self.r0
        at = 0
        grabbed = {g.index for g in self._grabs}
        for kind, payload in self._rows:
            if kind == "vertex":
                world = self._vertex_targets[payload]
                vals[at : at + 3] = r0.T @ world
                at += 3
            elif kind == "patch_dv":
                p = payload
                if p in grabbed:
                    dv, _ = self._patch_poses.get(p, (np.zeros(3), None))
                    vals[at : at + 3] = r0.T @ dv
                else:  # fixed mode holds the rest pose
                    vals[at : at + 3] = 0.0
                at += 3
            else:  # patch_t
                p = payload
                mode = self.model.patches[p].mode
                if p in grabbed:
                    if mode == "rigid" and self._patch_poses.get(p, (None, None))[1] is None:
                        t_local = self.rotations[self._patch_cluster(p)]
                    else:
                        t_local = r0.T @ self._grab_world_matrix(p)
                elif mode == "fixed":
                    t_local = r0.T
                else:  # ungrabbed rigid: track the cluster rotation
                    t_local = self.rotations[self._patch_cluster(p)]
                vals[at : at + 9] = t_local.reshape(-1)
                at += 9
        return vals

    def _phase1(self):
        model = self.model
        S = self.S
        b = model.M_tilde.T @ S
        if self._factor is None:
            self._last_residual = 0.0
            return  # nothing pins the pose; leave X unchanged
        c = self._assemble_rhs() - self._U_eq @ S
        kind, fac = self._factor
        if kind == "chol":
            rhs = b + 2.0 * self.soft_weight * self._N_eq.T @ c
            self.X = sla.cho_solve(fac, rhs)
        else:
            rhs = np.concatenate([b, c])
            self.X = sla.lu_solve(fac, rhs)[: model.nx]
        self._last_residual = (
            float(np.abs(self._N_eq @ self.X - c).max()) if c.size else 0.0
        )

    def _phase2(self):
        model = self.model
        fits = (model.M_N @ self.X + model.M_U @ self.S).reshape(model.d, 3, 3)
        for c in range(model.d):
            R = polar_rotation(fits[c], fallback=self.rotations[c])
            self.rotations[c] = R
            if self.options.conformal:
                psi = float(np.einsum("ab,ab->", R, fits[c])) / model.c_vec[c]
                self.psi[c] = np.clip(psi, 1.0 / self.options.psi_cap, self.options.psi_cap)

    def _adapt(self):
        if not self.options.adapt_rotation or self._handle_ids.size < 3:
            return
        base = self.model.mesh_vertices[self._handle_ids]
        r_new = kabsch_rotation(base, self._vertex_targets, fallback=self.r0)
        delta = r_new.T @ self.r0
        if np.abs(delta - np.eye(3)).max() < 1e-15:
            self.r0 = r_new
            return
        # re-express the local state so the world pose is unchanged
        pts = self.X[: 3 * self.model.m].reshape(-1, 3)
        self.X[: 3 * self.model.m] = (pts @ delta.T).reshape(-1)
        for p in range(self.model.s):
            sl = slice(3 * self.model.m + 9 * p, 3 * self.model.m + 9 * p + 9)
            self.X[sl] = (delta @ self.X[sl].reshape(3, 3)).reshape(-1)
        self.rotations = np.einsum("ab,cbd->cad", delta, self.rotations)
        self.r0 = r_new

    def step(self):
        """Run one frame: rotation adaption, then the two-phase alternation."""
        self._adapt()
        for _ in range(self.options.iterations):
            self._phase1()
            self._phase2()
        return FrameResult(
            X=self.X.copy(),
            S=self.S.copy(),
            r0=self.r0.copy(),
            energy=self.energy(),
            residual=self._last_residual,
            iterations=self.options.iterations,
        )


# -- batch driver -----------------------------------------------------------


def _lerp(a, b, t):
    return a + (b - a) * t


def run_batch(model, ops, csv_path=None, include_timings=False):
    """Execute a scripted deformation sequence.

    ops is an iterable of dicts (one per line in the CLI's script file):

    - {"op": "params", ...RuntimeOptions fields}
    - {"op": "handles", "vertices": [...], "patches": [{"index": i,
      "displacement"?, "matrix"?}]}
    - {"op": "targets", "values": [[x,y,z],...], "patches": [{"index": i,
      "displacement": [...], "matrix"?}], "frames": 1, "interpolate": true}
    - {"op": "export", "path": "deformed.obj"}

    Returns (rows, session); rows hold one dict per solved frame.  When
    csv_path is given the rows are also written as CSV; timing columns are
    included only when include_timings is set, keeping default output
    byte-stable across runs.
    """
    session = Session(model)
    rows = []
    frame = 0
    for op in ops:
        name = op.get("op")
        if name == "params":
            updates = {k: v for k, v in op.items() if k != "op"}
            session.set_options(**updates)
        elif name == "handles":
            grabs = tuple(
                PatchGrab(
                    index=int(g["index"]),
                    displacement=np.asarray(g["displacement"], float)
                    if g.get("displacement") is not None
                    else None,
                    matrix=np.asarray(g["matrix"], float)
                    if g.get("matrix") is not None
                    else None,
                )
                for g in op.get("patches", ())
            )
            session.set_handles(op.get("vertices", ()), grabs)
        elif name == "targets":
            frames = int(op.get("frames", 1))
            if frames < 1:
                raise ValidationError("frames must be >= 1")
            interpolate = bool(op.get("interpolate", True))
            end_v = (
                np.asarray(op["values"], dtype=np.float64).reshape(-1, 3)
                if op.get("values") is not None
                else session._vertex_targets
            )
            start_v = session._vertex_targets.copy()
            if end_v.shape != start_v.shape:
                raise ValidationError(
                    f"targets give {end_v.shape[0]} positions for "
                    f"{start_v.shape[0]} handles"
                )
            patch_end = {}
            for g in op.get("patches", ()):
                idx = int(g["index"])
                dv = np.asarray(g.get("displacement", (0.0, 0.0, 0.0)), float)
                mat = (
                    np.asarray(g["matrix"], float)
                    if g.get("matrix") is not None
                    else None
                )
                patch_end[idx] = (dv, mat)
            patch_start = {
                idx: session._patch_poses.get(idx, (np.zeros(3), None))
                for idx in patch_end
            }
            for f in range(1, frames + 1):
                t = f / frames if interpolate else 1.0
                poses = {}
                for idx, (dv_e, mat_e) in patch_end.items():
                    dv_s, _ = patch_start[idx]
                    poses[idx] = (_lerp(dv_s, dv_e, t), mat_e)
                session.set_targets(_lerp(start_v, end_v, t), poses or None)
                t0 = time.perf_counter()
                result = session.step()
                dt = time.perf_counter() - t0
                frame += 1
                row = {
                    "frame": frame,
                    "energy": result.energy,
                    "constraint_residual": result.residual,
                }
                if include_timings:
                    row["solve_ms"] = dt * 1e3
                rows.append(row)
        elif name == "export":
            path = op["path"]
            deformed = Mesh(
                session.reconstruct(), model.mesh_elements.copy(), source=model.source
            )
            if path.endswith(".obj"):
                write_obj(deformed, path)
            elif path.endswith(".node"):
                write_node_ele(deformed, path[: -len(".node")])
            else:
                raise ValidationError(f"unsupported export extension on {path!r}")
        else:
            raise ValidationError(f"unknown batch op {name!r}")
    if csv_path is not None:
        fields = ["frame", "energy", "constraint_residual"]
        if include_timings:
            fields.append("solve_ms")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    return rows, session


def load_script(path):
    """Parse a batch script: one JSON object per non-empty, non-# line."""
    ops = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                ops.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError("invalid JSON in batch script", path=path, line=ln) from exc
    return ops
