"""Energy assembly and precompute tests.

The assembled split form (L, M, N, grams) is checked against a direct
per-edge summation of the deformation energy written independently below:
edge misfit, increment magnitude, normal pinning, and pair smoothness are
summed with explicit Python loops over explicitly built increment matrices.
"""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from vsub.deform import (
    AffinePatchSpec,
    DeformEnergy,
    EnergyParams,
    apply_affine_patches,
    assemble_energy,
    build_model,
    control_selector,
    identity_rotations,
    increment_matrix_map,
    precompute_subspace,
    reduce_model,
)
from vsub.errors import NumericError, ValidationError
from vsub.mesh import (
    cotangent_weights,
    generate_primitive,
    lb_eigenbasis,
    linear_proxy_selector,
    rotation_clusters,
    tet_face_neighbors,
    unique_edges,
    vertex_normals,
)


def cross_mat(w):
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def q_matrix(p):
    return p[0] * np.eye(3) + cross_mat(p[1:])


def direct_energy(mesh, weights, clusters, params, Vp, P, S_mats):
    """Independent per-term summation of the deformation energy."""
    V = mesh.vertices
    total = 0.0
    for idx in range(weights.n_entries):
        k = weights.frame[idx]
        i, j, w = weights.i[idx], weights.j[idx], weights.weight[idx]
        e = V[i] - V[j]
        ep = Vp[i] - Vp[j]
        rot = S_mats[clusters.labels[k]] + q_matrix(P[k])
        total += 0.5 * w * np.sum((ep - rot @ e) ** 2)
    for k in range(weights.r):
        total += params.alpha * weights.measures[k] * np.sum(q_matrix(P[k]) ** 2)
    if params.beta > 0 and mesh.is_surface:
        normals = vertex_normals(mesh)
        for k in range(weights.r):
            total += (
                params.beta
                * weights.measures[k]
                * np.sum((q_matrix(P[k]) @ normals[k]) ** 2)
            )
    if params.gamma > 0:
        pairs = unique_edges(mesh) if mesh.is_surface else tet_face_neighbors(
            mesh.elements
        )
        for k, j in pairs:
            a = 0.5 * (weights.measures[k] + weights.measures[j])
            dk = S_mats[clusters.labels[k]] + q_matrix(P[k])
            dj = S_mats[clusters.labels[j]] + q_matrix(P[j])
            total += params.gamma * a * np.sum((dk - dj) ** 2)
    return total


def random_state(mesh, r, d, rng, spread=0.3):
    Vp = mesh.vertices + spread * rng.standard_normal(mesh.vertices.shape)
    P = spread * rng.standard_normal((r, 4))
    S_mats = Rotation.random(d, rng).as_matrix() + 0.05 * rng.standard_normal((d, 3, 3))
    return Vp, P, S_mats


def eval_args(Vp, P, S_mats):
    return np.concatenate([Vp.ravel(), P.ravel()]), S_mats.ravel()


def surface_setup(params, d=3, seed=0):
    mesh = generate_primitive("plane", nx=3, ny=3)
    weights = cotangent_weights(mesh)
    _, eig = lb_eigenbasis(mesh, 6)
    clusters = rotation_clusters(mesh, eig, d)
    energy = assemble_energy(mesh, weights, clusters, params)
    return mesh, weights, clusters, energy


def solid_setup(params, d=2):
    mesh = generate_primitive("solid_cylinder", radial=6, axial=2)
    weights = cotangent_weights(mesh)
    _, eig = lb_eigenbasis(mesh, 6)
    clusters = rotation_clusters(mesh, eig, d)
    energy = assemble_energy(mesh, weights, clusters, params)
    return mesh, weights, clusters, energy


class TestEnergyOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_direct_summation_surface(self, seed):
        params = EnergyParams(alpha=0.17, beta=0.23, gamma=0.11)
        mesh, weights, clusters, energy = surface_setup(params)
        rng = np.random.default_rng(seed)
        Vp, P, S = random_state(mesh, weights.r, clusters.d, rng)
        want = direct_energy(mesh, weights, clusters, params, Vp, P, S)
        got = energy.eval(*eval_args(Vp, P, S))
        assert got == pytest.approx(want, rel=1e-9)

    def test_direct_summation_solid(self, recwarn):
        params = EnergyParams(alpha=0.3, beta=0.4, gamma=0.07)
        mesh, weights, clusters, energy = solid_setup(params)
        assert any("beta" in str(w.message) for w in recwarn.list)
        assert energy.params.beta == 0.0
        rng = np.random.default_rng(7)
        Vp, P, S = random_state(mesh, weights.r, clusters.d, rng)
        want = direct_energy(mesh, weights, clusters, energy.params, Vp, P, S)
        got = energy.eval(*eval_args(Vp, P, S))
        assert got == pytest.approx(want, rel=1e-9)

    def test_rest_energy_and_gradient_zero(self):
        params = EnergyParams(alpha=0.1, beta=0.1, gamma=0.05)
        mesh, weights, clusters, energy = surface_setup(params)
        u0 = energy.rest_state(mesh.vertices)
        S0 = identity_rotations(clusters.d)
        scale = energy.cluster_stiffness.sum()
        assert abs(energy.eval(u0, S0)) < 1e-10 * scale
        grad = energy.L @ u0 - energy.M.T @ S0
        assert np.abs(grad).max() < 1e-10 * scale

    def test_rotated_rest_is_zero_energy(self):
        params = EnergyParams(alpha=0.2, beta=0.1, gamma=0.09)
        mesh, weights, clusters, energy = surface_setup(params, d=2)
        R = Rotation.from_rotvec([0.3, -0.2, 0.8]).as_matrix()
        Vp = mesh.vertices @ R.T
        P = np.zeros((weights.r, 4))
        S = np.tile(R, (clusters.d, 1, 1))
        scale = energy.cluster_stiffness.sum()
        assert abs(energy.eval(*eval_args(Vp, P, S))) < 1e-9 * scale

    def test_translation_invariance(self):
        params = EnergyParams(alpha=0.1, beta=0.2, gamma=0.03)
        mesh, weights, clusters, energy = surface_setup(params)
        rng = np.random.default_rng(3)
        Vp, P, S = random_state(mesh, weights.r, clusters.d, rng)
        e1 = energy.eval(*eval_args(Vp, P, S))
        e2 = energy.eval(*eval_args(Vp + np.array([5.0, -2.0, 11.0]), P, S))
        scale = 1.0 + abs(e1)
        assert abs(e1 - e2) < 1e-9 * scale

    def test_hessian_psd(self):
        params = EnergyParams(alpha=0.1, beta=0.1, gamma=0.02)
        _, _, _, energy = surface_setup(params)
        evals = np.linalg.eigvalsh(energy.L.toarray())
        assert evals.min() > -1e-10 * max(1.0, evals.max())

    def test_identity_rotation_constant(self):
        params = EnergyParams(alpha=0.1, beta=0.0, gamma=0.0)
        mesh, weights, clusters, energy = surface_setup(params)
        c = energy.cluster_stiffness
        direct = np.zeros(clusters.d)
        V = mesh.vertices
        for idx in range(weights.n_entries):
            e = V[weights.i[idx]] - V[weights.j[idx]]
            direct[clusters.labels[weights.frame[idx]]] += weights.weight[idx] * e @ e
        np.testing.assert_allclose(c, direct, rtol=1e-12)
        got = energy.rotation_constant(identity_rotations(clusters.d))
        assert got == pytest.approx(0.5 * direct.sum(), rel=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValidationError):
            EnergyParams(alpha=0.0)
        with pytest.raises(ValidationError):
            EnergyParams(alpha=0.1, beta=-1.0)
        with pytest.raises(ValidationError):
            EnergyParams(alpha=0.1, gamma=float("nan"))


class TestPatches:
    def _patched(self, params=None, mode="rigid"):
        params = params or EnergyParams(alpha=0.15, beta=0.1, gamma=0.04)
        mesh, weights, clusters, energy = surface_setup(params)
        patch = AffinePatchSpec(vertices=np.array([0, 1, 4, 5]), mode=mode)
        pe = apply_affine_patches(energy, mesh, [patch])
        return mesh, clusters, energy, pe

    def test_substitution_consistency(self):
        mesh, clusters, energy, pe = self._patched()
        rng = np.random.default_rng(11)
        z = rng.standard_normal(pe.size)
        S = rng.standard_normal(9 * clusters.d)
        u = pe.layout.T @ z
        assert pe.eval(z, S) == pytest.approx(energy.eval(u, S), rel=1e-12, abs=1e-12)

    def test_rest_state_roundtrip(self):
        mesh, clusters, energy, pe = self._patched()
        z0 = pe.rest_state(mesh.vertices)
        u0 = energy.rest_state(mesh.vertices)
        np.testing.assert_allclose(pe.layout.T @ z0, u0, atol=1e-14)
        S0 = identity_rotations(clusters.d)
        assert abs(pe.eval(z0, S0)) < 1e-10 * energy.cluster_stiffness.sum()

    def test_validation(self):
        params = EnergyParams(alpha=0.1)
        mesh, _, _, energy = surface_setup(params)
        with pytest.raises(ValidationError):
            AffinePatchSpec(vertices=np.array([], dtype=int))
        with pytest.raises(ValidationError):
            AffinePatchSpec(vertices=np.array([0]), mode="bouncy")
        with pytest.raises(ValidationError):
            apply_affine_patches(
                energy,
                mesh,
                [AffinePatchSpec(np.array([0, 1])), AffinePatchSpec(np.array([1, 2]))],
            )
        with pytest.raises(ValidationError):
            apply_affine_patches(energy, mesh, [AffinePatchSpec(np.array([999]))])
        patched = apply_affine_patches(energy, mesh, [AffinePatchSpec(np.array([0]))])
        with pytest.raises(ValidationError):
            apply_affine_patches(patched, mesh, [AffinePatchSpec(np.array([2]))])


def dense_saddle_columns(L, W, rhs_top, rhs_bot):
    nu, nx = L.shape[0], W.shape[0]
    K = np.zeros((nu + nx, nu + nx))
    K[:nu, :nu] = L
    K[:nu, nu:] = W.T
    K[nu:, :nu] = W
    ncols = rhs_top.shape[1]
    rhs = np.vstack([rhs_top, rhs_bot])
    return np.linalg.solve(K, rhs)[:nu]


class TestPrecompute:
    def _setup(self, m=4):
        params = EnergyParams(alpha=0.12, beta=0.08, gamma=0.0)
        mesh, weights, clusters, energy = surface_setup(params)
        _, eig = lb_eigenbasis(mesh, 6)
        proxy = linear_proxy_selector(mesh, m, eig, mode="sample")
        W = control_selector(energy, mesh, proxy)
        return mesh, clusters, energy, proxy, W

    def test_basis_vs_dense_saddle(self):
        mesh, clusters, energy, proxy, W = self._setup()
        basis = precompute_subspace(energy, W)
        nu, nx = energy.size, W.shape[0]
        Ld = energy.L.toarray()
        Wd = W.toarray()
        want_N = dense_saddle_columns(
            Ld, Wd, np.zeros((nu, nx)), np.eye(nx)
        )
        want_U = dense_saddle_columns(
            Ld, Wd, energy.M.toarray().T, np.zeros((nx, 9 * energy.d))
        )
        np.testing.assert_allclose(basis.N_W, want_N, atol=1e-8)
        np.testing.assert_allclose(basis.U_W, want_U, atol=1e-8)

    def test_constraint_reproduction(self):
        _, _, energy, _, W = self._setup()
        basis = precompute_subspace(energy, W)
        nx = W.shape[0]
        assert np.abs(W @ basis.N_W - np.eye(nx)).max() < 1e-8
        assert np.abs(W @ basis.U_W).max() < 1e-8
        assert basis.residual < 1e-8

    def test_no_controls_rejected(self):
        _, _, energy, _, _ = self._setup()
        empty = sp.csr_matrix((0, energy.size))
        with pytest.raises(ValidationError):
            precompute_subspace(energy, empty)

    def test_unpinned_rigid_modes_rejected(self):
        # a coordinate-difference row never sees translations, so the saddle
        # stays singular along them
        _, _, energy, _, _ = self._setup()
        w = sp.csr_matrix(
            (np.array([1.0, -1.0]), (np.array([0, 0]), np.array([0, 3]))),
            shape=(1, energy.size),
        )
        with pytest.raises(NumericError):
            precompute_subspace(energy, w)

    def test_selector_shape_mismatch(self):
        _, _, energy, _, _ = self._setup()
        bad = sp.csr_matrix((2, energy.size + 1))
        with pytest.raises(ValidationError):
            precompute_subspace(energy, bad)


class TestReduceModel:
    def _model(self):
        params = EnergyParams(alpha=0.12, beta=0.08, gamma=0.05)
        mesh = generate_primitive("plane", nx=3, ny=3)
        model = build_model(mesh, m=4, d=3, params=params)
        energy = assemble_energy(
            mesh,
            cotangent_weights(mesh),
            rotation_clusters(mesh, lb_eigenbasis(mesh, max(3, 8) + 1)[1], 3),
            params,
        )
        return mesh, model, energy

    def test_reduced_energy_identity(self):
        mesh, model, energy = self._model()
        rng = np.random.default_rng(5)
        X = rng.standard_normal(model.nx)
        S = rng.standard_normal(9 * model.d)
        u = model.N_W @ X + model.U_W @ S
        u_s = model.U_W @ S
        want = energy.eval(u, S) - energy.eval(u_s, S)
        got = 0.5 * X @ model.L_tilde @ X - S @ model.M_tilde @ X
        assert got == pytest.approx(want, rel=1e-8, abs=1e-9)

    def test_fit_matrices_match_vertex_coupling(self):
        mesh, model, energy = self._model()
        rng = np.random.default_rng(6)
        X = rng.standard_normal(model.nx)
        S = rng.standard_normal(9 * model.d)
        vp = model.reconstruct(X, S).ravel()
        want = energy.M[:, : 3 * model.n] @ vp
        got = model.M_N @ X + model.M_U @ S
        np.testing.assert_allclose(got, want, atol=1e-8 * (1 + np.abs(want).max()))

    def test_mtilde_is_rotation_coupling_contraction(self):
        mesh, model, energy = self._model()
        direct = energy.M @ model.N_W
        np.testing.assert_allclose(
            model.M_tilde, direct, atol=1e-8 * (1 + np.abs(direct).max())
        )

    def test_ltilde_symmetric_psd(self):
        _, model, _ = self._model()
        np.testing.assert_allclose(model.L_tilde, model.L_tilde.T, atol=1e-12)
        evals = np.linalg.eigvalsh(model.L_tilde)
        assert evals.min() > -1e-10 * max(1.0, evals.max())

    def test_rest_fixed_point(self):
        mesh, model, _ = self._model()
        got = model.reconstruct(model.x_rest, identity_rotations(model.d))
        scale = np.abs(mesh.vertices).max()
        np.testing.assert_allclose(got, mesh.vertices, atol=1e-8 * scale)


class TestBuildModel:
    def test_shapes_and_metadata(self):
        mesh = generate_primitive("plane", nx=3, ny=3)
        model = build_model(mesh, m=5, d=3)
        assert (model.n, model.m, model.d, model.s) == (16, 5, 3, 0)
        assert model.kind == "surface"
        assert model.N_W.shape == (3 * 16 + 4 * 16, 15)
        assert model.U_W.shape == (3 * 16 + 4 * 16, 27)
        assert model.L_tilde.shape == (15, 15)
        assert model.M_tilde.shape == (27, 15)
        assert model.proxy_indices.shape == (5,)
        assert np.unique(model.cluster_labels).size == 3
        assert model.memory_bytes() > 0
        assert model.mesh().n_vertices == 16

    def test_group_mode(self):
        mesh = generate_primitive("plane", nx=3, ny=3)
        model = build_model(mesh, m=4, d=2, mode="group")
        assert model.proxy_mode == "group"
        assert model.proxy_labels.shape == (16,)
        got = model.reconstruct(model.x_rest, identity_rotations(model.d))
        np.testing.assert_allclose(got, mesh.vertices, atol=1e-8)

    def test_patch_pipeline(self):
        mesh = generate_primitive("plane", nx=4, ny=4)
        patch_verts = np.array([0, 1, 2, 5, 6, 7])
        model = build_model(
            mesh,
            m=6,
            d=4,
            patches=[AffinePatchSpec(vertices=patch_verts, mode="rigid")],
        )
        assert model.s == 1 and model.m == 6
        assert model.nx == 3 * 6 + 9
        assert not np.intersect1d(model.proxy_indices, patch_verts).size
        # patch vertices respond exactly affinely to the patch controls
        R = Rotation.from_rotvec([0.1, 0.7, -0.2]).as_matrix()
        dv = np.array([0.5, -1.0, 2.0])
        X = model.x_rest.copy()
        X[3 * 5 : 3 * 5 + 3] = dv
        X[3 * 6 :] = R.ravel()
        V = model.reconstruct(X, identity_rotations(model.d))
        want = mesh.vertices[patch_verts] @ R.T + dv
        np.testing.assert_allclose(V[patch_verts], want, atol=1e-8)
        # the patch owns the final cluster
        pf = model.cluster_labels[patch_verts]
        assert (pf == model.d - 1).all()

    def test_full_cover_patch(self):
        mesh = generate_primitive("plane", nx=2, ny=2)
        spec = AffinePatchSpec(vertices=np.arange(mesh.n_vertices), mode="affine")
        model = build_model(mesh, m=1, d=1, patches=[spec])
        assert (model.m, model.s, model.nx) == (1, 1, 12)
        A = np.array([[1.1, 0.2, 0.0], [0.0, 0.9, -0.3], [0.1, 0.0, 1.0]])
        dv = np.array([1.0, 2.0, 3.0])
        X = np.concatenate([dv, A.ravel()])
        V = model.reconstruct(X, identity_rotations(1))
        np.testing.assert_allclose(V, mesh.vertices @ A.T + dv, atol=1e-8)

    def test_solid_model(self):
        mesh = generate_primitive("solid_cylinder", radial=6, axial=2)
        model = build_model(mesh, m=4, d=2, params=EnergyParams(alpha=0.1, beta=0.0))
        assert model.kind == "solid"
        assert model.r == mesh.n_elements
        got = model.reconstruct(model.x_rest, identity_rotations(model.d))
        np.testing.assert_allclose(got, mesh.vertices, atol=1e-8)

    def test_validation(self):
        mesh = generate_primitive("plane", nx=3, ny=3)
        spec = AffinePatchSpec(vertices=np.array([0, 1]))
        with pytest.raises(ValidationError):
            build_model(mesh, m=0, d=2, patches=[spec])
        with pytest.raises(ValidationError):
            build_model(mesh, m=1, d=2, patches=[spec])  # no point proxies left
        with pytest.raises(ValidationError):
            build_model(mesh, m=3, d=1, patches=[spec])  # no free cluster left
        with pytest.raises(ValidationError):
            build_model(mesh, m=99, d=2)

    def test_determinism(self):
        mesh = generate_primitive("plane", nx=3, ny=3)
        a = build_model(mesh, m=5, d=3, seed=7)
        b = build_model(mesh, m=5, d=3, seed=7)
        assert np.array_equal(a.proxy_indices, b.proxy_indices)
        assert np.array_equal(a.cluster_labels, b.cluster_labels)
        assert np.array_equal(a.N_W, b.N_W)
        assert np.array_equal(a.U_W, b.U_W)


class TestIncrementMap:
    def test_matches_matrix_action(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            e = rng.standard_normal(3)
            p = rng.standard_normal(4)
            np.testing.assert_allclose(
                increment_matrix_map(e) @ p, q_matrix(p) @ e, atol=1e-12
            )

    def test_batched(self):
        rng = np.random.default_rng(3)
        ev = rng.standard_normal((5, 3))
        B = increment_matrix_map(ev)
        assert B.shape == (5, 3, 4)
        for k in range(5):
            np.testing.assert_allclose(B[k], increment_matrix_map(ev[k]))
