"""Deformation energy assembly and subspace precomputation.

The deformable state is ``u = [V' ; P]`` where ``V'`` stacks the n deformed
vertex positions (3n entries, xyz-interleaved) and ``P`` stacks one rotation
increment 4-vector per frame (4r entries).  An increment ``p = (q0, w1, w2,
w3)`` parameterizes the matrix ``q0*I + cross(w)``, the first-order
neighborhood of a rotation.  Cluster rotations ``S`` stack d row-major 3x3
matrices (9d entries) and are held fixed while ``u`` is solved for, so the
energy is kept in the split form

    E(u, S) = 1/2 u^T L u  -  S^T M u  +  S^T N S  +  g(S)

with ``g(S) = 1/2 sum_c tr(s_c G_c s_c^T)`` collecting the deformation-free
quadratic in S (``G_c`` is the weighted rest-edge gram of cluster c; for
orthonormal ``s_c`` the term is constant).  ``L`` is PSD by construction.

Affine patches substitute ``v' = t x + dv`` for every patch vertex, which
rewrites the energy over a reduced unknown ``z = [V'_free ; dv ; t ; P]``
via a sparse substitution matrix T: L_z = T^T L T, M_z = M T.  The reduction
stays exact because the substitution is linear.

``precompute_subspace`` solves one sparse saddle system per control
configuration: columns of N_W reproduce unit control states at zero load,
columns of U_W carry the rotation load M^T.  Both are dense (3n+4r) x small.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import NumericError, ValidationError
from .mesh import (
    ClusterAssignment,
    Mesh,
    cotangent_weights,
    lb_eigenbasis,
    linear_proxy_selector,
    rotation_clusters,
    tet_face_neighbors,
    unique_edges,
    vertex_normals,
)

# Constraint-reproduction tolerance for the precomputed bases, relative to
# the control magnitude.  Saddle solves are checked against the same figure.
SUBSPACE_TOL = 1e-8
# Columns solved per splu pass; bounds transient RHS memory for large meshes.
SOLVE_CHUNK = 24

PATCH_MODES = ("fixed", "rigid", "affine")

# Frobenius gram of the increment parameterization: ||q0*I + cross(w)||_F^2
# = 3 q0^2 + 2 ||w||^2.
_D4 = np.diag([3.0, 2.0, 2.0, 2.0])


def increment_matrix_map(e):
    """Return the 3x4 map B with ``(q0*I + cross(w)) e = B p``.

    Parameters
    ----------
    e : (3,) or (E, 3) ndarray
        Vector(s) the increment acts on.

    Returns
    -------
    (3, 4) or (E, 3, 4) ndarray
    """
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    ev = e.reshape(-1, 3)
    z = np.zeros(len(ev))
    e1, e2, e3 = ev[:, 0], ev[:, 1], ev[:, 2]
    rows = np.stack(
        [
            np.stack([e1, z, e3, -e2], axis=1),
            np.stack([e2, -e3, z, e1], axis=1),
            np.stack([e3, e2, -e1, z], axis=1),
        ],
        axis=1,
    )
    return rows[0] if single else rows


def _vec_map():
    # G (9x4): vec_rowmajor(q0*I + cross(w)) = G @ (q0, w1, w2, w3).
    G = np.zeros((9, 4))
    G[0, 0] = G[4, 0] = G[8, 0] = 1.0
    G[1, 3] = -1.0
    G[2, 2] = 1.0
    G[3, 3] = 1.0
    G[5, 1] = -1.0
    G[6, 2] = -1.0
    G[7, 1] = 1.0
    return G


_G9 = _vec_map()


@dataclass
class EnergyParams:
    """Weights of the regularization terms.

    alpha penalizes increment magnitude, beta penalizes increments that tilt
    surface normals (ignored on solids), gamma penalizes rotation disagreement
    between adjacent frames.  All are per unit measure.
    """

    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)
        if self.alpha <= 0:
            raise ValidationError("alpha must be > 0 (it pins the increment scale)")


@dataclass
class AffinePatchSpec:
    """A group of vertices sharing one affine map v' = t x + dv.

    mode controls how the runtime treats the patch handle: 'fixed' freezes it
    at rest, 'rigid' restricts t to a rotation, 'affine' leaves t free.  The
    substitution itself is identical for all three; modes only add runtime
    constraints, so the energy stays homogeneous.
    """

    vertices: np.ndarray
    mode: str = "rigid"

    def __post_init__(self):
        self.vertices = np.unique(np.asarray(self.vertices, dtype=np.int64))
        if self.vertices.size == 0:
            raise ValidationError("patch has no vertices")
        if self.mode not in PATCH_MODES:
            raise ValidationError(
                f"unknown patch mode {self.mode!r}; expected one of {PATCH_MODES}"
            )


@dataclass
class PatchLayout:
    """Index bookkeeping for the patched unknown z = [V'_free; dv; t; P]."""

    patches: tuple
    free_vertices: np.ndarray  # original ids of unpatched vertices
    T: sp.csr_matrix  # (3n+4r) x nz substitution, u = T z
    n_free: int
    d_offset: int  # start of the dv block in z
    t_offset: int  # start of the t block in z
    q_offset: int  # start of the P block in z


@dataclass
class DeformEnergy:
    """Split quadratic form of the deformation energy.

    For an unpatched energy the unknown is u = [V'; P]; with ``layout`` set it
    is the patched z.  ``parent`` holds the unpatched energy a patched one was
    derived from.
    """

    L: sp.csr_matrix
    M: sp.csr_matrix
    N: sp.csr_matrix
    edge_gram: np.ndarray  # (d, 3, 3) weighted rest-edge grams per cluster
    n: int
    r: int
    d: int
    kind: str
    params: EnergyParams
    layout: PatchLayout | None = None
    parent: "DeformEnergy | None" = None

    @property
    def size(self):
        return self.L.shape[0]

    @property
    def cluster_stiffness(self):
        # trace of the edge gram: sum of w ||e||^2 over each cluster's edges
        return np.einsum("caa->c", self.edge_gram)

    def rotation_constant(self, S):
        """g(S) = 1/2 sum_c tr(s_c G_c s_c^T); exact for any S."""
        mats = np.asarray(S, dtype=np.float64).reshape(self.d, 3, 3)
        return 0.5 * float(np.einsum("cab,cbd,cad->", mats, self.edge_gram, mats))

    def eval(self, state, S):
        """Energy at unknown vector ``state`` and stacked rotations ``S``."""
        state = np.asarray(state, dtype=np.float64).ravel()
        S = np.asarray(S, dtype=np.float64).ravel()
        if state.size != self.size or S.size != 9 * self.d:
            raise ValidationError("state/rotation size mismatch")
        return (
            0.5 * float(state @ (self.L @ state))
            - float(S @ (self.M @ state))
            + float(S @ (self.N @ S))
            + self.rotation_constant(S)
        )

    def rest_state(self, vertices):
        """The unknown vector reproducing the rest pose (increments zero)."""
        V = np.asarray(vertices, dtype=np.float64).reshape(self.n, 3)
        if self.layout is None:
            return np.concatenate([V.ravel(), np.zeros(4 * self.r)])
        lay = self.layout
        s = len(lay.patches)
        z = np.zeros(self.size)
        z[: 3 * lay.n_free] = V[lay.free_vertices].ravel()
        z[lay.t_offset : lay.t_offset + 9 * s] = np.tile(np.eye(3).ravel(), s)
        return z


def identity_rotations(d):
    return np.tile(np.eye(3).ravel(), d)


def _frame_pairs(mesh):
    # frames adjacent in the mesh: vertex pairs on surfaces, face-sharing
    # tet pairs on solids
    if mesh.is_surface:
        return unique_edges(mesh)
    return tet_face_neighbors(mesh.elements)


def assemble_energy(mesh, weights=None, clusters=None, params=None):
    """Assemble the split deformation energy for a mesh.

    Parameters
    ----------
    mesh : Mesh
    weights : FrameEdgeSets, optional
        Cotangent edge sets; computed when omitted.
    clusters : ClusterAssignment, optional
        Frame-to-cluster labels; a single cluster when omitted.
    params : EnergyParams, optional

    Returns
    -------
    DeformEnergy
    """
    params = params if params is not None else EnergyParams()
    if weights is None:
        weights = cotangent_weights(mesh)
    if clusters is None:
        clusters = ClusterAssignment(
            labels=np.zeros(weights.r, dtype=np.int64), d=1, centroids=np.zeros((1, 1))
        )
    if clusters.labels.size != weights.r:
        raise ValidationError(
            f"cluster labels cover {clusters.labels.size} frames, energy has {weights.r}"
        )
    beta = params.beta
    if beta > 0 and not mesh.is_surface:
        warnings.warn("normal pinning is surface-only; beta ignored on solid meshes")
        beta = 0.0

    n, r, d = mesh.n_vertices, weights.r, clusters.d
    nu = 3 * n + 4 * r
    V = mesh.vertices
    frame = weights.frame
    i, j, w = weights.i, weights.j, weights.weight
    a_frame = weights.measures
    e_vec = V[i] - V[j]  # (E, 3) rest edges
    cl = clusters.labels[frame]
    E = len(w)

    # --- L, vertex-vertex block: graph Laplacian of the edge sets, kron I3
    ii = np.concatenate([i, j, i, j])
    jj = np.concatenate([i, j, j, i])
    dat = np.concatenate([w, w, -w, -w])
    L_vv1 = sp.coo_matrix((dat, (ii, jj)), shape=(n, n)).tocsr()
    L_VV = sp.kron(L_vv1, sp.eye(3), format="csr")
    del ii, jj, dat, L_vv1

    # --- L, vertex-increment block: -w e'^T B(e) p per edge
    B = increment_matrix_map(e_vec)  # (E, 3, 4)
    rows_i = (3 * i)[:, None, None] + np.arange(3)[None, :, None]
    rows_j = (3 * j)[:, None, None] + np.arange(3)[None, :, None]
    cols_q = (4 * frame)[:, None, None] + np.arange(4)[None, None, :]
    wB = w[:, None, None] * B
    L_VQ = sp.coo_matrix(
        (
            np.concatenate([(-wB).ravel(), wB.ravel()]),
            (
                np.concatenate(
                    [
                        np.broadcast_to(rows_i, (E, 3, 4)).ravel(),
                        np.broadcast_to(rows_j, (E, 3, 4)).ravel(),
                    ]
                ),
                np.concatenate([np.broadcast_to(cols_q, (E, 3, 4)).ravel()] * 2),
            ),
        ),
        shape=(3 * n, 4 * r),
    ).tocsr()
    del rows_i, rows_j, cols_q

    # --- L, increment-increment block: w B^T B per edge plus regularizers,
    # accumulated per frame to keep the entry count at O(r)
    QQ = np.zeros((r, 4, 4))
    np.add.at(QQ, frame, w[:, None, None] * np.einsum("eat,eau->etu", B, B))
    QQ += 2.0 * params.alpha * a_frame[:, None, None] * _D4
    if beta > 0:
        Bn = increment_matrix_map(vertex_normals(mesh))  # frames are vertices
        QQ += (
            2.0
            * beta
            * a_frame[:, None, None]
            * np.einsum("kat,kau->ktu", Bn, Bn)
        )
    del wB, B

    gamma_LQ = None
    gamma_M = None
    N_rows, N_cols, N_dat = [], [], []
    if params.gamma > 0:
        pk, pj = _frame_pairs(mesh).T
        a_pair = params.gamma * 0.5 * (a_frame[pk] + a_frame[pj])
        # ||q_k - q_j||_F^2 -> D4 blocks on (k,k), (j,j), -(k,j), -(j,k)
        diag4 = np.array([3.0, 2.0, 2.0, 2.0])
        np.add.at(QQ, pk, 2.0 * a_pair[:, None, None] * _D4)
        np.add.at(QQ, pj, 2.0 * a_pair[:, None, None] * _D4)
        off = np.concatenate([4 * pk[:, None] + np.arange(4), 4 * pj[:, None] + np.arange(4)])
        off2 = np.concatenate([4 * pj[:, None] + np.arange(4), 4 * pk[:, None] + np.arange(4)])
        gamma_LQ = sp.coo_matrix(
            (
                np.concatenate([-2.0 * a_pair[:, None] * diag4] * 2).ravel(),
                (off.ravel(), off2.ravel()),
            ),
            shape=(4 * r, 4 * r),
        ).tocsr()
        # cross term 2 a (s_ck - s_cj) . (q_k - q_j) and the pure-S square,
        # only where the pair straddles two clusters
        ck, cj = clusters.labels[pk], clusters.labels[pj]
        mix = ck != cj
        if np.any(mix):
            mk, mj = pk[mix], pj[mix]
            mck, mcj = ck[mix], cj[mix]
            ma = a_pair[mix]
            gr, gc = np.nonzero(_G9)
            gv = _G9[gr, gc]
            # four signed blocks: (ck,k) -, (ck,j) +, (cj,k) +, (cj,j) -
            blk_r = np.concatenate([9 * mck, 9 * mck, 9 * mcj, 9 * mcj])
            blk_c = np.concatenate([4 * mk, 4 * mj, 4 * mk, 4 * mj])
            sgn = np.concatenate([-ma, ma, ma, -ma])
            m_rows = (blk_r[:, None] + gr[None, :]).ravel()
            m_cols = (blk_c[:, None] + gc[None, :]).ravel()
            m_dat = (2.0 * sgn[:, None] * gv[None, :]).ravel()
            gamma_M = sp.coo_matrix(
                (m_dat, (m_rows, m_cols)), shape=(9 * d, 4 * r)
            ).tocsr()
            # S^T N S with a (vec s_ck - vec s_cj)^2 per pair
            e9 = np.arange(9)
            for br, bc, s in (
                (mck, mck, ma),
                (mcj, mcj, ma),
                (mck, mcj, -ma),
                (mcj, mck, -ma),
            ):
                N_rows.append((9 * br[:, None] + e9).ravel())
                N_cols.append((9 * bc[:, None] + e9).ravel())
                N_dat.append(np.repeat(s, 9))

    qq_rows = (4 * np.arange(r))[:, None, None] + np.arange(4)[None, :, None]
    qq_cols = (4 * np.arange(r))[:, None, None] + np.arange(4)[None, None, :]
    L_QQ = sp.coo_matrix(
        (QQ.ravel(), (np.broadcast_to(qq_rows, QQ.shape).ravel(),
                      np.broadcast_to(qq_cols, QQ.shape).ravel())),
        shape=(4 * r, 4 * r),
    ).tocsr()
    if gamma_LQ is not None:
        L_QQ = L_QQ + gamma_LQ
    del QQ

    L = sp.bmat([[L_VV, L_VQ], [L_VQ.T, L_QQ]], format="csr")
    del L_VV, L_VQ, L_QQ

    # --- M, vertex columns: +/- w e_b at rows (cluster, 3a+b), cols 3i+a
    ab = np.arange(3)
    m_rows = (9 * cl)[:, None, None] + 3 * ab[None, :, None] + ab[None, None, :]
    m_cols_i = (3 * i)[:, None, None] + ab[None, :, None] + np.zeros((1, 1, 3), dtype=np.int64)
    m_cols_j = (3 * j)[:, None, None] + ab[None, :, None] + np.zeros((1, 1, 3), dtype=np.int64)
    we = w[:, None, None] * e_vec[:, None, :]  # (E, 1->a, b)
    we = np.broadcast_to(we, (E, 3, 3))
    M_V = sp.coo_matrix(
        (
            np.concatenate([we.ravel(), -we.ravel()]),
            (
                np.concatenate([m_rows.ravel()] * 2),
                np.concatenate(
                    [
                        np.broadcast_to(m_cols_i, (E, 3, 3)).ravel(),
                        np.broadcast_to(m_cols_j, (E, 3, 3)).ravel(),
                    ]
                ),
            ),
        ),
        shape=(9 * d, 3 * n),
    ).tocsr()
    del m_rows, m_cols_i, m_cols_j, we

    # --- M, increment columns: -w e_b B(e)[a, t], accumulated per frame;
    # the block row is the frame's cluster, the block col the frame itself
    B = increment_matrix_map(e_vec)
    MQ = np.zeros((r, 9, 4))
    vals = -np.einsum("e,eb,eat->eabt", w, e_vec, B).reshape(E, 9, 4)
    np.add.at(MQ, frame, vals)
    del vals, B
    fr = np.arange(r)
    mq_rows = (9 * clusters.labels)[:, None, None] + np.arange(9)[None, :, None]
    mq_cols = (4 * fr)[:, None, None] + np.arange(4)[None, None, :]
    M_Q = sp.coo_matrix(
        (MQ.ravel(), (np.broadcast_to(mq_rows, MQ.shape).ravel(),
                      np.broadcast_to(mq_cols, MQ.shape).ravel())),
        shape=(9 * d, 4 * r),
    ).tocsr()
    del MQ

    M = sp.hstack([M_V, M_Q], format="csr")
    if gamma_M is not None:
        M = M + sp.hstack(
            [sp.csr_matrix((9 * d, 3 * n)), gamma_M], format="csr"
        )

    if N_dat:
        N = sp.coo_matrix(
            (np.concatenate(N_dat), (np.concatenate(N_rows), np.concatenate(N_cols))),
            shape=(9 * d, 9 * d),
        ).tocsr()
    else:
        N = sp.csr_matrix((9 * d, 9 * d))

    gram = np.zeros((d, 3, 3))
    np.add.at(gram, cl, w[:, None, None] * np.einsum("ea,eb->eab", e_vec, e_vec))

    return DeformEnergy(
        L=L,
        M=M,
        N=N,
        edge_gram=gram,
        n=n,
        r=r,
        d=d,
        kind=mesh.kind,
        params=replace(params, beta=beta),
    )


def apply_affine_patches(energy, mesh, patches):
    """Substitute per-patch affine maps into the energy.

    Every patch vertex becomes ``v' = t x + dv`` with the patch's rest
    position x; the unknown shrinks to z = [V'_free; dv; t; P].

    Returns the patched DeformEnergy (layout and parent set).
    """
    if energy.layout is not None:
        raise ValidationError("energy already has patches applied")
    patches = tuple(patches)
    if not patches:
        return energy
    n, r = energy.n, energy.r
    taken = np.zeros(n, dtype=bool)
    for p in patches:
        if p.vertices.min() < 0 or p.vertices.max() >= n:
            raise ValidationError("patch vertex id out of range")
        if taken[p.vertices].any():
            raise ValidationError("patches overlap")
        taken[p.vertices] = True
    free = np.flatnonzero(~taken)
    n_free = len(free)
    s = len(patches)
    d_off = 3 * n_free
    t_off = d_off + 3 * s
    q_off = t_off + 9 * s
    nz = q_off + 4 * r

    rows, cols, dat = [], [], []
    ax = np.arange(3)
    fr_rows = (3 * free[:, None] + ax).ravel()
    fr_cols = (3 * np.arange(n_free)[:, None] + ax).ravel()
    rows.append(fr_rows)
    cols.append(fr_cols)
    dat.append(np.ones(3 * n_free))
    for p_idx, p in enumerate(patches):
        pv = p.vertices
        X = mesh.vertices[pv]  # (np, 3) rest positions
        # t block: row 3v+a takes X[b] at col t_off + 9p + 3a + b
        t_rows = (3 * pv[:, None, None] + ax[None, :, None] + np.zeros((1, 1, 3), dtype=np.int64)).ravel()
        t_cols = (t_off + 9 * p_idx + 3 * ax[None, :, None] + ax[None, None, :] + np.zeros((len(pv), 1, 1), dtype=np.int64)).ravel()
        rows.append(t_rows)
        cols.append(t_cols)
        dat.append(np.broadcast_to(X[:, None, :], (len(pv), 3, 3)).ravel())
        # dv block: identity
        rows.append((3 * pv[:, None] + ax).ravel())
        cols.append((d_off + 3 * p_idx + ax[None, :] + np.zeros((len(pv), 1), dtype=np.int64)).ravel())
        dat.append(np.ones(3 * len(pv)))
    rows.append(3 * n + np.arange(4 * r))
    cols.append(q_off + np.arange(4 * r))
    dat.append(np.ones(4 * r))

    T = sp.coo_matrix(
        (np.concatenate(dat), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * n + 4 * r, nz),
    ).tocsr()
    layout = PatchLayout(
        patches=patches,
        free_vertices=free,
        T=T,
        n_free=n_free,
        d_offset=d_off,
        t_offset=t_off,
        q_offset=q_off,
    )
    L_z = (T.T @ energy.L @ T).tocsr()
    M_z = (energy.M @ T).tocsr()
    return DeformEnergy(
        L=L_z,
        M=M_z,
        N=energy.N,
        edge_gram=energy.edge_gram,
        n=energy.n,
        r=energy.r,
        d=energy.d,
        kind=energy.kind,
        params=energy.params,
        layout=layout,
        parent=energy,
    )


@dataclass
class SubspaceBasis:
    """Dense constraint-reproducing bases over the energy unknown.

    N_W columns realize unit control values at zero rotation load; U_W
    columns carry the unit rotation loads at zero control.  W is the sparse
    control selector the bases were built against (W @ N_W = I, W @ U_W = 0).
    """

    N_W: np.ndarray
    U_W: np.ndarray
    W: sp.csr_matrix
    residual: float


def precompute_subspace(energy, W):
    """Solve the constrained stationarity systems for all basis columns.

    Parameters
    ----------
    energy : DeformEnergy
    W : (nx, size) sparse matrix
        Control selector over the energy unknown; rows must be independent.

    Returns
    -------
    SubspaceBasis

    Raises
    ------
    NumericError
        If the saddle factorization fails or a solve does not reproduce its
        right-hand side, which happens when the controls leave null motions
        (typically: proxies do not pin the rigid modes).
    """
    W = sp.csr_matrix(W)
    nu = energy.size
    nx = W.shape[0]
    if W.shape[1] != nu:
        raise ValidationError(f"selector has {W.shape[1]} columns, energy unknown is {nu}")
    if nx == 0:
        raise ValidationError("control selector has no rows")
    K = sp.bmat([[energy.L, W.T], [W, None]], format="csc")
    try:
        # symmetric-pattern ordering with relaxed pivoting: COLAMD plus
        # partial pivoting explodes the fill on these indefinite saddles
        lu = splu(
            K,
            permc_spec="MMD_AT_PLUS_A",
            options={"SymmetricMode": True, "DiagPivotThresh": 0.001},
        )
    except RuntimeError as exc:
        raise NumericError(
            "subspace saddle factorization failed; the controls do not pin "
            f"the energy's null motions ({exc})"
        ) from exc
    # a singular saddle can still factor with threshold pivoting; a collapsed
    # U pivot is the reliable sign the controls leave null motions free
    udiag = np.abs(lu.U.diagonal())
    if not np.isfinite(udiag).all() or udiag.min() <= 1e-12 * udiag.max():
        raise NumericError(
            "subspace saddle is singular; the controls do not pin the "
            "energy's null motions (add proxies that fix rigid translation)"
        )

    n_rhs = nx + 9 * energy.d
    rhs_scale = 1.0 + max(1.0, abs(energy.M).max() if energy.M.nnz else 0.0)
    N_W = np.empty((nu, nx))
    U_W = np.empty((nu, 9 * energy.d))
    Mt = energy.M.T.tocsc()
    for lo in range(0, n_rhs, SOLVE_CHUNK):
        hi = min(lo + SOLVE_CHUNK, n_rhs)
        rhs = np.zeros((nu + nx, hi - lo))
        for c, col in enumerate(range(lo, hi)):
            if col < nx:
                rhs[nu + col, c] = 1.0  # unit control, zero load
            else:
                rhs[:nu, c] = Mt[:, col - nx].toarray().ravel()
        sol = lu.solve(rhs)
        resid = np.abs(K @ sol - rhs).max()
        if not np.isfinite(sol).all() or resid > SUBSPACE_TOL * rhs_scale:
            raise NumericError(
                "subspace solve did not converge (residual "
                f"{resid:.3e}); the controls likely do not pin rigid modes"
            )
        for c, col in enumerate(range(lo, hi)):
            if col < nx:
                N_W[:, col] = sol[:nu, c]
            else:
                U_W[:, col - nx] = sol[:nu, c]
    gate = np.abs(W @ N_W - np.eye(nx)).max()
    zero = np.abs(W @ U_W).max() if U_W.size else 0.0
    resid = max(gate, zero)
    if resid > SUBSPACE_TOL:
        raise NumericError(
            f"precomputed basis violates its control constraints ({resid:.3e})"
        )
    return SubspaceBasis(N_W=N_W, U_W=U_W, W=W, residual=float(resid))


@dataclass
class PrecomputedModel:
    """Reduced deformation model: bases, reduced operators, and metadata.

    The runtime state is (X, S): X holds 3m linear controls (point samples
    first, then patch displacements) followed by 9s patch matrices; S holds
    the 9d cluster rotations.  Full coordinates are u = N_W X + U_W S.
    """

    n: int
    r: int
    d: int
    m: int
    s: int
    kind: str
    N_W: np.ndarray  # (3n+4r) x (3m+9s)
    U_W: np.ndarray  # (3n+4r) x 9d
    L_tilde: np.ndarray  # reduced Hessian, (3m+9s)^2
    M_tilde: np.ndarray  # reduced rotation coupling, 9d x (3m+9s)
    M_N: np.ndarray  # rotation-fit coupling through N_W vertex rows
    M_U: np.ndarray  # rotation-fit coupling through U_W vertex rows
    x_rest: np.ndarray
    c_vec: np.ndarray  # per-cluster stiffness sum w||e||^2
    edge_gram: np.ndarray
    params: EnergyParams
    cluster_labels: np.ndarray
    proxy_mode: str
    proxy_indices: np.ndarray  # sampled vertex ids (mode 'sample'), else empty
    proxy_labels: np.ndarray  # vertex group labels (mode 'group'), else empty
    patches: tuple = ()
    mesh_vertices: np.ndarray | None = None
    mesh_elements: np.ndarray | None = None
    source: str = ""

    @property
    def nx(self):
        return 3 * self.m + 9 * self.s

    @property
    def vertex_rows(self):
        return 3 * self.n

    def reconstruct(self, X, S):
        """Deformed vertex positions for reduced state (X, S)."""
        v = self.N_W[: 3 * self.n] @ X + self.U_W[: 3 * self.n] @ S
        return v.reshape(self.n, 3)

    def memory_bytes(self):
        dense = (
            self.N_W.nbytes
            + self.U_W.nbytes
            + self.L_tilde.nbytes
            + self.M_tilde.nbytes
            + self.M_N.nbytes
            + self.M_U.nbytes
        )
        return dense

    def mesh(self):
        if self.mesh_vertices is None:
            raise ValidationError("model carries no mesh")
        return Mesh(self.mesh_vertices.copy(), self.mesh_elements.copy(), source=self.source)


def reduce_model(energy, basis, mesh, *, proxy_meta=None, cluster_labels=None):
    """Contract the energy onto a precomputed basis.

    The reduced Hessian is the exact contraction N_W^T L N_W.  The rotation
    coupling keeps its analytically-vanishing correction (U_W^T L N_W lies in
    the selector's row space, which U_W annihilates) so roundoff in the basis
    solve does not leak into reported energies.  The Phase-2 fit matrices use
    only the vertex rows of the full-space bases so the rotation fit sees the
    actual deformed edges.
    """
    lay = energy.layout
    parent = energy.parent if energy.parent is not None else energy
    if lay is not None:
        N_u = np.asarray(lay.T @ basis.N_W)
        U_u = np.asarray(lay.T @ basis.U_W)
    else:
        N_u = basis.N_W
        U_u = basis.U_W
    LN = energy.L @ basis.N_W
    L_t = basis.N_W.T @ LN
    L_t = 0.5 * (L_t + L_t.T)
    M_t = energy.M @ basis.N_W - basis.U_W.T @ LN
    nv = 3 * energy.n
    M_vert = parent.M[:, :nv]
    M_N = M_vert @ N_u[:nv]
    M_U = M_vert @ U_u[:nv]
    s = len(lay.patches) if lay is not None else 0
    m = (basis.N_W.shape[1] - 9 * s) // 3
    meta = proxy_meta or {}
    labels = (
        cluster_labels
        if cluster_labels is not None
        else np.zeros(energy.r, dtype=np.int64)
    )
    return PrecomputedModel(
        n=energy.n,
        r=energy.r,
        d=energy.d,
        m=m,
        s=s,
        kind=energy.kind,
        N_W=N_u,
        U_W=U_u,
        L_tilde=np.asarray(L_t),
        M_tilde=np.asarray(M_t),
        M_N=np.asarray(M_N),
        M_U=np.asarray(M_U),
        x_rest=np.asarray(basis.W @ energy.rest_state(mesh.vertices)),
        c_vec=energy.cluster_stiffness,
        edge_gram=energy.edge_gram,
        params=energy.params,
        cluster_labels=np.asarray(labels, dtype=np.int64),
        proxy_mode=meta.get("mode", "sample"),
        proxy_indices=np.asarray(meta.get("indices", []), dtype=np.int64),
        proxy_labels=np.asarray(meta.get("labels", []), dtype=np.int64),
        patches=tuple(lay.patches) if lay is not None else (),
        mesh_vertices=mesh.vertices.copy(),
        mesh_elements=mesh.elements.copy(),
        source=mesh.source,
    )


def control_selector(energy, mesh, proxy, patches=()):
    """Sparse selector mapping the energy unknown to the control vector X.

    X = [point samples (3 per proxy); patch displacements (3 per patch);
    patch matrices (9 per patch)].
    """
    lay = energy.layout
    s = len(patches)
    if lay is None and s:
        raise ValidationError("patches given but energy is unpatched")
    nu = energy.size
    rows, cols, dat = [], [], []
    ax = np.arange(3)
    if proxy.mode == "sample":
        if lay is None:
            vcols = 3 * proxy.indices
        else:
            pos = np.searchsorted(lay.free_vertices, proxy.indices)
            if not np.array_equal(lay.free_vertices[pos], proxy.indices):
                raise ValidationError("sampled proxies must be free vertices")
            vcols = 3 * pos
        m_v = len(proxy.indices)
        rows.append((3 * np.arange(m_v)[:, None] + ax).ravel())
        cols.append((vcols[:, None] + ax).ravel())
        dat.append(np.ones(3 * m_v))
    else:
        Wh = proxy.W_hat  # (m_v, n) averaging rows over vertices
        if lay is not None:
            Wh = Wh[:, lay.free_vertices]
            scale = np.asarray(Wh.sum(axis=1)).ravel()
            if np.any(scale <= 0):
                raise ValidationError("a proxy group lies entirely inside patches")
            Wh = sp.diags(1.0 / scale) @ Wh
        m_v = Wh.shape[0]
        Wc = Wh.tocoo()
        rows.append((3 * Wc.row[:, None] + ax).ravel())
        cols.append((3 * Wc.col[:, None] + ax).ravel())
        dat.append(np.repeat(Wc.data, 3))
    base = 3 * m_v
    if s:
        rows.append(base + np.arange(3 * s))
        cols.append(lay.d_offset + np.arange(3 * s))
        dat.append(np.ones(3 * s))
        rows.append(base + 3 * s + np.arange(9 * s))
        cols.append(lay.t_offset + np.arange(9 * s))
        dat.append(np.ones(9 * s))
    nx = base + 12 * s
    return sp.coo_matrix(
        (np.concatenate(dat), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx, nu),
    ).tocsr()


def _patch_clusters(mesh, patches, d, eigvecs, seed):
    """Cluster labels with one dedicated cluster per patch appended last."""
    s = len(patches)
    if mesh.is_surface:
        r = mesh.n_vertices
        member = np.full(r, -1, dtype=np.int64)
        for pi, p in enumerate(patches):
            member[p.vertices] = pi
    else:
        r = mesh.n_elements
        member = np.full(r, -1, dtype=np.int64)
        inpatch = np.full(mesh.n_vertices, -1, dtype=np.int64)
        for pi, p in enumerate(patches):
            inpatch[p.vertices] = pi
        corner = inpatch[mesh.elements]
        full = (corner >= 0).all(axis=1) & (corner == corner[:, :1]).all(axis=1)
        member[full] = corner[full, 0]
    free = np.flatnonzero(member < 0)
    d_free = d - s
    if d_free < 0 or (len(free) > 0 and d_free < 1):
        raise ValidationError(
            f"d={d} leaves no clusters for the {len(free)} unpatched frames"
        )
    labels = np.empty(r, dtype=np.int64)
    labels[member >= 0] = d_free + member[member >= 0]
    if len(free) > 0:
        sub = rotation_clusters(mesh, eigvecs, d_free, seed=seed, frame_subset=free)
        labels[free] = sub.labels
    return ClusterAssignment(labels=labels, d=d, centroids=np.zeros((d, 1)))


def build_model(
    mesh,
    m,
    d,
    params=None,
    *,
    mode="sample",
    patches=(),
    seed=42,
    eig_count=None,
):
    """Full precompute pipeline: operators, clusters, proxies, bases.

    Parameters
    ----------
    mesh : Mesh
    m : int
        Linear control count, patch displacements included (so m - s point
        proxies are sampled among unpatched vertices).
    d : int
        Rotation cluster count, one dedicated cluster per patch included.
    params : EnergyParams, optional
    mode : {'sample', 'group'}
        Point proxies as vertex samples or as vertex-group averages.
    patches : sequence of AffinePatchSpec
    seed : int
        Drives proxy selection and clustering; fixed seed gives identical
        models byte for byte.
    eig_count : int, optional
        Spectral embedding size (defaults to a small count above d).

    Returns
    -------
    PrecomputedModel
    """
    params = params if params is not None else EnergyParams()
    patches = tuple(patches)
    s = len(patches)
    m_v = m - s
    if m_v < 0:
        raise ValidationError(f"m={m} is smaller than the patch count {s}")
    taken = np.zeros(mesh.n_vertices, dtype=bool)
    for p in patches:
        if p.vertices.min() < 0 or p.vertices.max() >= mesh.n_vertices:
            raise ValidationError("patch vertex id out of range")
        if taken[p.vertices].any():
            raise ValidationError("patches overlap")
        taken[p.vertices] = True
    n_free = int((~taken).sum())
    if m_v == 0 and n_free > 0:
        raise ValidationError("need at least one point proxy for unpatched vertices")
    if m_v > n_free:
        raise ValidationError(f"m={m} asks for {m_v} point proxies, only {n_free} free vertices")

    count = eig_count if eig_count is not None else max(d, 8) + 1
    count = min(count, mesh.n_vertices - 1)
    _, eigvecs = lb_eigenbasis(mesh, count)

    clusters = _patch_clusters(mesh, patches, d, eigvecs, seed) if s else rotation_clusters(
        mesh, eigvecs, d, seed=seed
    )
    weights = cotangent_weights(mesh)
    energy = assemble_energy(mesh, weights, clusters, params)
    if s:
        energy = apply_affine_patches(energy, mesh, patches)

    free_ids = np.flatnonzero(~taken) if s else None
    if m_v:
        proxy = linear_proxy_selector(
            mesh, m_v, eigvecs, mode=mode, seed=seed, vertex_subset=free_ids
        )
        W = control_selector(energy, mesh, proxy, patches)
    else:
        proxy = None
        W = control_selector_patches_only(energy, patches)
    basis = precompute_subspace(energy, W)
    meta = {"mode": mode}
    if proxy is not None:
        if mode == "sample":
            meta["indices"] = proxy.indices
        else:
            meta["labels"] = proxy.labels
    return reduce_model(
        energy, basis, mesh, proxy_meta=meta, cluster_labels=clusters.labels
    )


def control_selector_patches_only(energy, patches):
    lay = energy.layout
    s = len(patches)
    nu = energy.size
    rows = np.arange(12 * s)
    cols = np.concatenate(
        [lay.d_offset + np.arange(3 * s), lay.t_offset + np.arange(9 * s)]
    )
    return sp.coo_matrix(
        (np.ones(12 * s), (rows, cols)), shape=(12 * s, nu)
    ).tocsr()
