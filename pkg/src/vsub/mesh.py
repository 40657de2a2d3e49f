"""Triangle and tetrahedral meshes and their discrete operators.

Everything the deformation energy needs from geometry lives here: per-frame
cotangent edge sets (spokes and rims around each vertex on surfaces, all six
edges of each tetrahedron on solids), lumped element measures, the classic
cotangent stiffness and mass pair, Laplace-Beltrami eigenbases, rotation
clusters over the eigen-embedding, and linear proxy selectors (farthest
point samples or vertex groups). File I/O covers OBJ, OFF, and TetGen
node/ele pairs; parametric primitives (plane, cylinder, bar, solid
cylinder) supply reproducible test geometry.

Clustering and sampling are deliberately hand-rolled: runs must be
bit-reproducible for a fixed seed, with documented tie-breaking, which
rules out library k-means implementations whose iteration order may vary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericError, ParseError, ValidationError

DEGENERACY_TOL = 1e-12
KMEANS_MAX_ITERS = 100
DEFAULT_SEED = 42

_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_TET_OPPOSITE = ((2, 3), (1, 3), (1, 2), (0, 3), (0, 2), (0, 1))


@dataclass
class Mesh:
    """Vertices (n, 3) plus elements: (m, 3) triangles or (m, 4) tets.

    Validation happens on construction: indices in range, no degenerate
    elements, surface edges shared by at most two triangles. Tetrahedra
    are reoriented to positive signed volume.
    """

    vertices: np.ndarray
    elements: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.elements.ndim != 2 or self.elements.shape[1] not in (3, 4):
            raise ValidationError(
                f"elements must be (m, 3) or (m, 4), got {self.elements.shape}"
            )
        n = len(self.vertices)
        if self.elements.size and (
            self.elements.min() < 0 or self.elements.max() >= n
        ):
            raise ValidationError(
                f"element indices must lie in [0, {n}); "
                f"found [{self.elements.min()}, {self.elements.max()}]"
            )
        if self.is_solid:
            vols = tet_volumes(self, signed=True)
            flip = vols < 0
            if flip.any():
                self.elements = self.elements.copy()
                self.elements[flip, 2], self.elements[flip, 3] = (
                    self.elements[flip, 3],
                    self.elements[flip, 2],
                )
        self._check_degenerate()
        if self.is_surface:
            self._check_manifold()

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def is_surface(self):
        return self.elements.shape[1] == 3

    @property
    def is_solid(self):
        return self.elements.shape[1] == 4

    @property
    def kind(self):
        return "surface" if self.is_surface else "solid"

    def _check_degenerate(self):
        if not len(self.elements):
            raise ValidationError("mesh has no elements")
        pts = self.vertices[self.elements]
        if self.is_surface:
            measure = triangle_areas(self)
            lmax = _longest_edge(pts)
            bad = measure <= DEGENERACY_TOL * lmax**2
        else:
            measure = tet_volumes(self)
            lmax = _longest_edge(pts)
            bad = measure <= DEGENERACY_TOL * lmax**3
        if bad.any():
            raise ValidationError(
                f"{int(bad.sum())} degenerate element(s), first at index "
                f"{int(np.argmax(bad))}"
            )

    def _check_manifold(self):
        edges = np.sort(
            self.elements[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1
        )
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if (counts > 2).any():
            raise ValidationError(
                f"non-manifold surface: an edge is shared by {int(counts.max())} triangles"
            )


def _longest_edge(pts):
    # pts: (m, corners, 3) element corner positions
    c = pts.shape[1]
    lengths = [
        np.linalg.norm(pts[:, a] - pts[:, b], axis=1)
        for a in range(c)
        for b in range(a + 1, c)
    ]
    return np.max(lengths, axis=0)


def unique_edges(mesh):
    """Sorted unique undirected vertex pairs appearing in any element."""
    if mesh.is_surface:
        raw = mesh.elements[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    else:
        raw = np.concatenate([mesh.elements[:, e] for e in _TET_EDGES])
    return np.unique(np.sort(raw, axis=1), axis=0)


def tet_face_neighbors(elements):
    """Pairs (k, j) of tetrahedra sharing a triangular face."""
    elements = np.asarray(elements)
    faces = {}
    pairs = []
    for t, tet in enumerate(elements):
        for skip in range(4):
            face = tuple(sorted(np.delete(tet, skip)))
            other = faces.pop(face, None)
            if other is None:
                faces[face] = t
            else:
                pairs.append((other, t))
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def triangle_areas(mesh):
    pts = mesh.vertices[mesh.elements]
    cross = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def tet_volumes(mesh, signed=False):
    pts = mesh.vertices[mesh.elements]
    det = np.einsum(
        "ij,ij->i",
        np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]),
        pts[:, 3] - pts[:, 0],
    )
    vols = det / 6.0
    return vols if signed else np.abs(vols)


def element_measures(mesh):
    """Per-frame lumped measures: barycentric vertex areas on surfaces,
    tetrahedron volumes on solids."""
    if mesh.is_surface:
        areas = triangle_areas(mesh)
        out = np.zeros(mesh.n_vertices)
        np.add.at(out, mesh.elements.ravel(), np.repeat(areas / 3.0, 3))
        return out
    return tet_volumes(mesh)


def vertex_normals(mesh):
    """Area-weighted vertex normals of a surface mesh, unit length."""
    if not mesh.is_surface:
        raise ValidationError("vertex normals are defined for surface meshes only")
    pts = mesh.vertices[mesh.elements]
    face_n = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
    out = np.zeros_like(mesh.vertices)
    np.add.at(out, mesh.elements.ravel(), np.repeat(face_n, 3, axis=0))
    norms = np.linalg.norm(out, axis=1)
    norms[norms == 0.0] = 1.0
    return out / norms[:, None]


# ---------------------------------------------------------------------------
# Cotangent weights over per-frame edge sets


@dataclass
class FrameEdgeSets:
    """Flat edge lists grouped by rotation frame.

    Surfaces carry one frame per vertex, covering the spokes and rims of
    its incident triangles; solids carry one frame per tetrahedron with
    all six edges. Entries: frame (E,), i/j vertex indices (E,), weight
    (E,), plus per-frame lumped measures (r,).
    """

    frame: np.ndarray
    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    measures: np.ndarray
    kind: str

    @property
    def r(self):
        return len(self.measures)

    @property
    def n_entries(self):
        return len(self.frame)


def _triangle_cotangents(mesh):
    """cot of the angle at each triangle corner, (m, 3)."""
    pts = mesh.vertices[mesh.elements]
    cots = np.empty((len(pts), 3))
    for c in range(3):
        u = pts[:, (c + 1) % 3] - pts[:, c]
        v = pts[:, (c + 2) % 3] - pts[:, c]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cots[:, c] = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
    return cots


def _tet_edge_weights(mesh):
    """Weight l * cot(theta) / 6 for each of the six edges of every tet,
    where theta is the dihedral angle at the opposite edge, (m, 6)."""
    pts = mesh.vertices[mesh.elements]
    w = np.empty((len(pts), 6))
    for e, ((i, j), (k, l)) in enumerate(zip(_TET_EDGES, _TET_OPPOSITE)):
        d = pts[:, l] - pts[:, k]
        dlen = np.linalg.norm(d, axis=1)
        dhat = d / np.maximum(dlen, 1e-300)[:, None]
        u = pts[:, i] - pts[:, k]
        v = pts[:, j] - pts[:, k]
        u = u - np.einsum("ij,ij->i", u, dhat)[:, None] * dhat
        v = v - np.einsum("ij,ij->i", v, dhat)[:, None] * dhat
        sin = np.linalg.norm(np.cross(u, v), axis=1)
        cos = np.einsum("ij,ij->i", u, v)
        w[:, e] = dlen * cos / np.maximum(sin, 1e-300) / 6.0
    return w


def cotangent_weights(mesh):
    """Per-frame cotangent edge sets.

    Surfaces: frame k collects all three edges of every triangle incident
    to vertex k, each weighted by half the cotangent of its opposite
    angle. Solids: frame k is tetrahedron k with its six edges weighted by
    opposite-dihedral cotangents.
    """
    if mesh.is_surface:
        tris = mesh.elements
        cots = 0.5 * _triangle_cotangents(mesh)
        # edge opposite corner c connects the other two corners
        ei = tris[:, [1, 2, 0]]
        ej = tris[:, [2, 0, 1]]
        # every triangle contributes its three edges to each of its
        # three vertex frames
        frame = np.repeat(tris.ravel(), 3)
        i = np.concatenate([ei, ei, ei], axis=1).ravel()
        j = np.concatenate([ej, ej, ej], axis=1).ravel()
        w = np.concatenate([cots, cots, cots], axis=1).ravel()
        return FrameEdgeSets(
            frame=frame, i=i, j=j, weight=w,
            measures=element_measures(mesh), kind="surface",
        )
    weights = _tet_edge_weights(mesh)
    m = len(mesh.elements)
    frame = np.repeat(np.arange(m, dtype=np.int64), 6)
    i = np.concatenate([mesh.elements[:, a][:, None] for a, _ in _TET_EDGES], axis=1).ravel()
    j = np.concatenate([mesh.elements[:, b][:, None] for _, b in _TET_EDGES], axis=1).ravel()
    return FrameEdgeSets(
        frame=frame, i=i, j=j, weight=weights.ravel(),
        measures=element_measures(mesh), kind="solid",
    )


def stiffness_and_mass(mesh):
    """Classic cotangent stiffness K (zero row sums, PSD on reasonable
    meshes) and the lumped mass diagonal M."""
    n = mesh.n_vertices
    if mesh.is_surface:
        cots = 0.5 * _triangle_cotangents(mesh)
        rows = mesh.elements[:, [1, 2, 0]].ravel()
        cols = mesh.elements[:, [2, 0, 1]].ravel()
        w = cots.ravel()
    else:
        weights = _tet_edge_weights(mesh)
        rows = np.concatenate([mesh.elements[:, a][:, None] for a, _ in _TET_EDGES], axis=1).ravel()
        cols = np.concatenate([mesh.elements[:, b][:, None] for _, b in _TET_EDGES], axis=1).ravel()
        w = weights.ravel()
    K = sp.coo_matrix(
        (
            np.concatenate([w, w, -w, -w]),
            (
                np.concatenate([rows, cols, rows, cols]),
                np.concatenate([rows, cols, cols, rows]),
            ),
        ),
        shape=(n, n),
    ).tocsr()
    if mesh.is_surface:
        lumped = element_measures(mesh)
    else:
        vols = tet_volumes(mesh)
        lumped = np.zeros(n)
        np.add.at(lumped, mesh.elements.ravel(), np.repeat(vols / 4.0, 4))
    M = sp.diags(lumped).tocsr()
    return K, M


def _check_connected(mesh):
    n = mesh.n_vertices
    edges = unique_edges(mesh)
    adj = sp.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    )
    n_comp, _ = sp.csgraph.connected_components(adj, directed=False)
    if n_comp != 1:
        raise ValidationError(
            f"mesh has {n_comp} connected components; the eigenbasis needs one"
        )


def lb_eigenbasis(mesh, count):
    """First `count` Laplace-Beltrami eigenpairs, ascending, with
    mass-orthonormal eigenvectors (V' M V = I).

    The leading pair is the constant function at eigenvalue zero. Dense
    solve below 1500 vertices, shift-inverted Lanczos above.
    """
    _check_connected(mesh)
    K, M = stiffness_and_mass(mesh)
    n = mesh.n_vertices
    if count < 1 or count > n:
        raise ValidationError(f"count must lie in [1, {n}], got {count}")
    if n <= 1500:
        from scipy.linalg import eigh

        evals, evecs = eigh(K.toarray(), M.toarray())
        evals, evecs = evals[:count], evecs[:, :count]
    else:
        scale = K.diagonal().mean() / M.diagonal().mean()
        try:
            evals, evecs = spla.eigsh(
                K, k=count, M=M, sigma=-1e-2 * scale, which="LM"
            )
        except spla.ArpackNoConvergence as exc:
            raise NumericError(f"eigenbasis did not converge: {exc}") from exc
        order = np.argsort(evals)
        evals, evecs = evals[order], evecs[:, order]
    # deterministic sign and exact mass normalization
    mdiag = M.diagonal()
    for c in range(evecs.shape[1]):
        v = evecs[:, c]
        nrm = np.sqrt(v @ (mdiag * v))
        v /= nrm
        pivot = np.argmax(np.abs(v))
        if v[pivot] < 0:
            v *= -1.0
    gram = evecs.T @ (mdiag[:, None] * evecs)
    if np.max(np.abs(gram - np.eye(count))) > 1e-8:
        raise NumericError("eigenvectors failed mass orthonormalization")
    return evals, evecs


def frame_embedding(mesh, eigvecs):
    """Rows of the eigen-embedding per rotation frame: vertex rows on
    surfaces, corner averages per tetrahedron on solids."""
    eigvecs = np.asarray(eigvecs, dtype=float)
    if mesh.is_surface:
        return eigvecs
    return eigvecs[mesh.elements].mean(axis=1)


@dataclass
class ClusterAssignment:
    """Rotation cluster labels per frame; every label in [0, d) occurs."""

    labels: np.ndarray
    d: int
    centroids: np.ndarray = field(repr=False, default=None)


def _kmeans(points, k, weights, seed):
    """Weighted k-means with k-means++ seeding. Deterministic for a fixed
    seed: ties in assignment break toward the lowest cluster index, empty
    clusters are reseeded at the point farthest from its centroid."""
    rng = np.random.default_rng(seed)
    n = len(points)
    if k > n:
        raise ValidationError(f"cannot form {k} clusters from {n} points")
    weights = np.asarray(weights, dtype=float)
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        p = weights * d2
        total = p.sum()
        if total <= 0:
            idx = int(np.argmax(d2))
        else:
            idx = int(rng.choice(n, p=p / total))
        centroids[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[c]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITERS):
        dists = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_labels = np.argmin(dists, axis=1)
        for c in range(k):
            sel = new_labels == c
            if not sel.any():
                worst = int(np.argmax(dists[np.arange(n), new_labels]))
                centroids[c] = points[worst]
                new_labels[worst] = c
                sel = new_labels == c
            wsel = weights[sel]
            wsum = wsel.sum()
            if wsum > 0:
                centroids[c] = (points[sel] * wsel[:, None]).sum(axis=0) / wsum
            else:
                centroids[c] = points[sel].mean(axis=0)
        if (new_labels == labels).all():
            labels = new_labels
            break
        labels = new_labels
    return labels, centroids


def rotation_clusters(mesh, eigvecs, d, seed=DEFAULT_SEED, frame_subset=None):
    """Group rotation frames into d clusters by weighted k-means over the
    eigen-embedding. Deterministic for a fixed seed; every cluster is
    non-empty. `frame_subset` restricts clustering to those frames; labels
    are then returned for the subset only, in its order."""
    points = frame_embedding(mesh, eigvecs)
    weights = element_measures(mesh)
    if frame_subset is not None:
        frame_subset = np.asarray(frame_subset, dtype=np.int64)
        points = points[frame_subset]
        weights = weights[frame_subset]
    labels, centroids = _kmeans(points, d, weights, seed)
    counts = np.bincount(labels, minlength=d)
    if (counts == 0).any():
        raise NumericError("clustering produced an empty cluster")
    return ClusterAssignment(labels=labels, d=d, centroids=centroids)


@dataclass
class ProxySelector:
    """Sparse selector of linear proxies over vertices.

    W_hat is m x n; `sample` rows are unit indicators at chosen vertices,
    `group` rows average disjoint vertex groups (rows sum to one).
    """

    W_hat: sp.csr_matrix
    mode: str
    indices: np.ndarray = None
    labels: np.ndarray = None

    @property
    def m(self):
        return self.W_hat.shape[0]

    def expand(self):
        """Per-coordinate selector over stacked xyz coordinates, 3m x 3n."""
        return sp.kron(self.W_hat, sp.eye(3), format="csr")


def farthest_point_sample(points, count):
    """Greedy farthest-point ordering; starts from the point farthest
    from the centroid. Deterministic, ties break toward lower index."""
    n = len(points)
    if count > n:
        raise ValidationError(f"cannot sample {count} of {n} points")
    center = points.mean(axis=0)
    first = int(np.argmax(np.sum((points - center) ** 2, axis=1)))
    chosen = [first]
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return np.array(chosen, dtype=np.int64)


def linear_proxy_selector(
    mesh, count, eigvecs, mode="sample", seed=DEFAULT_SEED, vertex_subset=None
):
    """Choose linear proxies over the eigen-embedding of the vertices.

    mode="sample": farthest-point sampling, rows are unit indicators.
    mode="group": k-means vertex groups, rows average each group.
    `vertex_subset` restricts the choice to those vertices (W_hat columns
    stay n-wide; rows touch only subset vertices).
    """
    n = mesh.n_vertices
    points = np.asarray(eigvecs, dtype=float)
    if vertex_subset is not None:
        vertex_subset = np.asarray(vertex_subset, dtype=np.int64)
        points = points[vertex_subset]
    pool = len(points)
    if count < 1 or count > pool:
        raise ValidationError(f"proxy count must lie in [1, {pool}], got {count}")
    if mode == "sample":
        idx = farthest_point_sample(points, count)
        if vertex_subset is not None:
            idx = vertex_subset[idx]
        W = sp.csr_matrix(
            (np.ones(count), (np.arange(count), idx)), shape=(count, n)
        )
        return ProxySelector(W_hat=W, mode=mode, indices=idx)
    if mode == "group":
        if mesh.is_surface:
            weights = element_measures(mesh)
            if vertex_subset is not None:
                weights = weights[vertex_subset]
        else:
            weights = np.ones(pool)
        labels, _ = _kmeans(points, count, weights, seed)
        sizes = np.bincount(labels, minlength=count).astype(float)
        if (sizes == 0).any():
            raise NumericError("grouping produced an empty group")
        cols = np.arange(n) if vertex_subset is None else vertex_subset
        W = sp.csr_matrix(
            (1.0 / sizes[labels], (labels, cols)), shape=(count, n)
        )
        full_labels = labels
        if vertex_subset is not None:
            full_labels = np.full(n, -1, dtype=np.int64)
            full_labels[vertex_subset] = labels
        return ProxySelector(W_hat=W, mode=mode, labels=full_labels)
    raise ValidationError(f"unknown proxy mode {mode!r}; use 'sample' or 'group'")


# ---------------------------------------------------------------------------
# Primitives


def generate_primitive(kind, **params):
    """Parametric test geometry: 'plane', 'cylinder', 'bar' (surfaces) or
    'solid_cylinder' (tets). See the individual builders for parameters."""
    builders = {
        "plane": _plane,
        "cylinder": _cylinder,
        "bar": _bar,
        "solid_cylinder": _solid_cylinder,
    }
    if kind not in builders:
        raise ValidationError(
            f"unknown primitive {kind!r}; choose from {sorted(builders)}"
        )
    return builders[kind](**params)


def _plane(nx=2, ny=2, width=1.0, depth=1.0):
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, depth, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return Mesh(vertices=verts, elements=np.array(tris), source=f"plane({nx}x{ny})")


def _cylinder(radial=50, axial=99, radius=1.0, height=4.0):
    angles = 2.0 * np.pi * np.arange(radial) / radial
    zs = np.linspace(-height / 2.0, height / 2.0, axial + 1)
    ring = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    verts = np.column_stack(
        [
            np.tile(ring, (axial + 1, 1)),
            np.repeat(zs, radial)[:, None],
        ]
    )

    def vid(layer, j):
        return layer * radial + (j % radial)

    tris = []
    for layer in range(axial):
        for j in range(radial):
            a, b = vid(layer, j), vid(layer, j + 1)
            c, d = vid(layer + 1, j + 1), vid(layer + 1, j)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return Mesh(
        vertices=verts, elements=np.array(tris), source=f"cylinder({radial}x{axial})"
    )


def _bar(nx=2, ny=2, nz=8, width=1.0, depth=1.0, height=4.0):
    """Closed box surface on an integer lattice, welded at edges."""
    steps = {"x": nx, "y": ny, "z": nz}
    sizes = {"x": width, "y": depth, "z": height}
    index_of = {}
    verts = []

    def vid(ix, iy, iz):
        key = (ix, iy, iz)
        if key not in index_of:
            index_of[key] = len(verts)
            verts.append(
                (
                    ix * sizes["x"] / steps["x"],
                    iy * sizes["y"] / steps["y"],
                    iz * sizes["z"] / steps["z"],
                )
            )
        return index_of[key]

    tris = []

    def face(axis, level, flip):
        axes = [a for a in "xyz" if a != axis]
        na, nb = steps[axes[0]], steps[axes[1]]
        for ia in range(na):
            for ib in range(nb):
                quad = []
                for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    coord = {axis: level, axes[0]: ia + da, axes[1]: ib + db}
                    quad.append(vid(coord["x"], coord["y"], coord["z"]))
                a, b, c, d = quad
                if flip:
                    tris.extend([(a, c, b), (a, d, c)])
                else:
                    tris.extend([(a, b, c), (a, c, d)])

    for axis in "xyz":
        face(axis, 0, flip=True)
        face(axis, steps[axis], flip=False)
    return Mesh(
        vertices=np.array(verts, dtype=float),
        elements=np.array(tris),
        source=f"bar({nx}x{ny}x{nz})",
    )


def _solid_cylinder(radial=32, axial=4, radius=1.0, height=2.0):
    """Tetrahedral cylinder: layers of wedge prisms around a center line,
    each prism split into three tets with matching diagonals."""
    angles = 2.0 * np.pi * np.arange(radial) / radial
    zs = np.linspace(-height / 2.0, height / 2.0, axial + 1)
    per_layer = radial + 1
    verts = []
    for z in zs:
        verts.append((0.0, 0.0, z))
        for t in angles:
            verts.append((radius * np.cos(t), radius * np.sin(t), z))
    verts = np.array(verts)

    def center(layer):
        return layer * per_layer

    def ring(layer, j):
        return layer * per_layer + 1 + (j % radial)

    tets = []
    for layer in range(axial):
        for j in range(radial):
            b0, b1, b2 = center(layer), ring(layer, j), ring(layer, j + 1)
            t0, t1, t2 = center(layer + 1), ring(layer + 1, j), ring(layer + 1, j + 1)
            tets.extend([(b0, b1, b2, t1), (b0, t1, b2, t2), (b0, t1, t2, t0)])
    return Mesh(
        vertices=verts,
        elements=np.array(tets),
        source=f"solid_cylinder({radial}x{axial})",
    )


# ---------------------------------------------------------------------------
# File I/O


def load_mesh(path, fmt=None):
    """Load OBJ, OFF, or a TetGen node/ele pair; the format is inferred
    from the extension unless given. TetGen indices may start at 0 or 1;
    the base is detected from the smallest index used."""
    if fmt is None:
        ext = os.path.splitext(path)[1].lower()
        fmt = {".obj": "obj", ".off": "off", ".node": "node_ele", ".ele": "node_ele"}.get(ext)
        if fmt is None:
            raise ValidationError(f"cannot infer mesh format from {path!r}")
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "off":
        return _load_off(path)
    if fmt == "node_ele":
        return _load_node_ele(path)
    raise ValidationError(f"unknown mesh format {fmt!r}")


def _load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError("vertex line needs 3 coordinates", path, ln)
                try:
                    verts.append(tuple(float(x) for x in parts[1:4]))
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}", path, ln) from exc
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    try:
                        v = int(head)
                    except ValueError as exc:
                        raise ParseError(f"bad face index {tok!r}", path, ln) from exc
                    if v < 0:
                        raise ParseError("negative face indices are not supported", path, ln)
                    idx.append(v - 1)
                if len(idx) < 3:
                    raise ParseError("face needs at least 3 vertices", path, ln)
                for t in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[t], idx[t + 1]))
    if not verts:
        raise ParseError("no vertices found", path)
    try:
        return Mesh(vertices=np.array(verts), elements=np.array(faces), source=str(path))
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc


def _off_tokens(path):
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            body = line.split("#", 1)[0]
            for tok in body.split():
                yield ln, tok


def _load_off(path):
    toks = _off_tokens(path)
    try:
        ln, magic = next(toks)
    except StopIteration:
        raise ParseError("empty file", path) from None
    if magic.upper() != "OFF":
        raise ParseError(f"expected OFF header, got {magic!r}", path, ln)

    def take(count, what):
        out = []
        for _ in range(count):
            try:
                out.append(next(toks))
            except StopIteration:
                raise ParseError(f"unexpected end of file reading {what}", path) from None
        return out

    (ln_n, n_s), (_, m_s), (_, _) = take(3, "counts")
    try:
        n, m = int(n_s), int(m_s)
    except ValueError as exc:
        raise ParseError(f"bad counts: {exc}", path, ln_n) from exc
    verts = []
    for _ in range(n):
        triple = take(3, "vertex")
        try:
            verts.append(tuple(float(t) for _, t in triple))
        except ValueError as exc:
            raise ParseError(f"bad vertex coordinate: {exc}", path, triple[0][0]) from exc
    faces = []
    for _ in range(m):
        ln_k, k_s = take(1, "face size")[0]
        try:
            k = int(k_s)
        except ValueError as exc:
            raise ParseError(f"bad face size {k_s!r}", path, ln_k) from exc
        if k < 3:
            raise ParseError(f"face with {k} vertices", path, ln_k)
        idx = []
        for ln_i, tok in take(k, "face"):
            try:
                idx.append(int(tok))
            except ValueError as exc:
                raise ParseError(f"bad face index {tok!r}", path, ln_i) from exc
        for t in range(1, k - 1):
            faces.append((idx[0], idx[t], idx[t + 1]))
    try:
        return Mesh(vertices=np.array(verts), elements=np.array(faces), source=str(path))
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc


def _numbered_rows(path, expect_fields, what):
    """TetGen-style rows: 'index f1 f2 ...', comments and blanks skipped.
    Returns (indices, fields) without base correction."""
    indices, rows = [], []
    with open(path) as fh:
        lines = fh.readlines()
    header = None
    for ln, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if header is None:
            header = parts
            continue
        if len(parts) < expect_fields + 1:
            raise ParseError(
                f"{what} row needs {expect_fields} fields after the index", path, ln
            )
        try:
            indices.append(int(parts[0]))
            rows.append(parts[1 : expect_fields + 1])
        except ValueError as exc:
            raise ParseError(f"bad {what} row: {exc}", path, ln) from exc
    if header is None:
        raise ParseError(f"missing {what} header", path)
    return header, indices, rows


def _load_node_ele(path):
    base, ext = os.path.splitext(path)
    if ext.lower() not in (".node", ".ele"):
        base = path
    node_path, ele_path = base + ".node", base + ".ele"
    for p in (node_path, ele_path):
        if not os.path.exists(p):
            raise ParseError("missing companion file", p)
    _, node_ids, node_rows = _numbered_rows(node_path, 3, "node")
    try:
        verts = np.array([[float(x) for x in row] for row in node_rows])
    except ValueError as exc:
        raise ParseError(f"bad node coordinates: {exc}", node_path) from exc
    _, _, ele_rows = _numbered_rows(ele_path, 4, "ele")
    try:
        tets = np.array([[int(x) for x in row] for row in ele_rows], dtype=np.int64)
    except ValueError as exc:
        raise ParseError(f"bad element indices: {exc}", ele_path) from exc
    offset = min(node_ids) if node_ids else 0
    if offset not in (0, 1):
        raise ParseError(f"node indices start at {offset}; expected 0 or 1", node_path)
    tets = tets - offset
    try:
        return Mesh(vertices=verts, elements=tets, source=str(node_path))
    except ValidationError as exc:
        raise ParseError(str(exc), node_path) from exc


def write_obj(mesh, path):
    if not mesh.is_surface:
        raise ValidationError("OBJ export requires a surface mesh")
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.elements:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_node_ele(mesh, base_path):
    if not mesh.is_solid:
        raise ValidationError("node/ele export requires a tetrahedral mesh")
    with open(base_path + ".node", "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, v in enumerate(mesh.vertices, 1):
            fh.write(f"{i} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    with open(base_path + ".ele", "w") as fh:
        fh.write(f"{mesh.n_elements} 4 0\n")
        for i, t in enumerate(mesh.elements, 1):
            fh.write(f"{i} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}\n")
