"""Binary container for precomputed deformation models.

Layout (little-endian throughout):

    bytes 0..4    magic b"VSUB"
    u32           format version (currently 1)
    u32 x 6       n, r, d, m, s, kind (0 = surface, 1 = solid)
    f64 blocks    N_W, U_W, L_tilde, M_tilde, M_N, M_U, row-major,
                  shapes implied by the header
    u64           metadata length in bytes
    bytes         JSON metadata (params, proxies, clusters, rest state,
                  patches, mesh), keys sorted, compact separators

The session service reuses the same framing for its wire blob, but that
blob carries only what a display client needs to rebuild vertices: the
3n vertex rows of N_W and U_W, in that order, and no metadata trailer
(`vertex_blob` below).  Round-trips are bit-exact: JSON floats are
written with shortest-repr encoding, which is lossless for finite
doubles, and every array is materialized contiguously before write.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .deform import AffinePatchSpec, EnergyParams, PrecomputedModel
from .errors import ParseError, ValidationError

MAGIC = b"VSUB"
VERSION = 1
_KINDS = ("surface", "solid")

# Fixed matrix order; shapes are functions of the header dims only.
_MATRIX_FIELDS = ("N_W", "U_W", "L_tilde", "M_tilde", "M_N", "M_U")


def _matrix_shapes(n, r, d, m, s):
    nu = 3 * n + 4 * r
    nx = 3 * m + 9 * s
    return (
        (nu, nx),
        (nu, 9 * d),
        (nx, nx),
        (9 * d, nx),
        (9 * d, nx),
        (9 * d, 9 * d),
    )


def _metadata(model):
    meta = {
        "c_vec": model.c_vec.tolist(),
        "cluster_labels": model.cluster_labels.tolist(),
        "edge_gram": model.edge_gram.tolist(),
        "mesh_elements": model.mesh_elements.tolist()
        if model.mesh_elements is not None
        else None,
        "mesh_vertices": model.mesh_vertices.tolist()
        if model.mesh_vertices is not None
        else None,
        "params": {
            "alpha": model.params.alpha,
            "beta": model.params.beta,
            "gamma": model.params.gamma,
        },
        "patches": [
            {"mode": p.mode, "vertices": p.vertices.tolist()}
            for p in model.patches
        ],
        "proxy_indices": model.proxy_indices.tolist(),
        "proxy_labels": model.proxy_labels.tolist(),
        "proxy_mode": model.proxy_mode,
        "source": model.source,
        "x_rest": model.x_rest.tolist(),
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def _write(model, f):
    f.write(MAGIC)
    kind = _KINDS.index(model.kind)
    f.write(
        struct.pack(
            "<7I", VERSION, model.n, model.r, model.d, model.m, model.s, kind
        )
    )
    shapes = _matrix_shapes(model.n, model.r, model.d, model.m, model.s)
    for name, shape in zip(_MATRIX_FIELDS, shapes):
        a = getattr(model, name)
        if a.shape != shape:
            raise ValidationError(
                f"{name} has shape {a.shape}, header implies {shape}"
            )
        f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    blob = _metadata(model)
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def write_model(model, path):
    """Serialize a precomputed model to `path`.

    Parameters
    ----------
    model : PrecomputedModel
    path : str

    The output is deterministic: the same model writes the same bytes.
    """
    with open(path, "wb") as f:
        _write(model, f)


def model_blob(model):
    """Full container bytes in memory."""
    buf = io.BytesIO()
    _write(model, buf)
    return buf.getvalue()


def vertex_blob(model):
    """Wire blob for display clients: header plus the vertex rows of the
    bases.  The client computes V' = N_W[:3n] X + U_W[:3n] S, so rows past
    3n (frame increments) and the reduced operators never cross the wire.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    kind = _KINDS.index(model.kind)
    buf.write(
        struct.pack(
            "<7I", VERSION, model.n, model.r, model.d, model.m, model.s, kind
        )
    )
    nv = 3 * model.n
    for name in ("N_W", "U_W"):
        a = getattr(model, name)[:nv]
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def _take(buf, count, path, what):
    out = buf.read(count)
    if len(out) != count:
        raise ParseError(f"truncated container while reading {what}", path=path)
    return out


def _read(buf, path):
    if _take(buf, 4, path, "magic") != MAGIC:
        raise ParseError("not a VSUB container (bad magic)", path=path)
    version, n, r, d, m, s, kind = struct.unpack(
        "<7I", _take(buf, 28, path, "header")
    )
    if version != VERSION:
        raise ParseError(
            f"unsupported container version {version} (expected {VERSION})",
            path=path,
        )
    if kind >= len(_KINDS):
        raise ParseError(f"unknown mesh kind code {kind}", path=path)
    mats = {}
    for name, shape in zip(
        _MATRIX_FIELDS, _matrix_shapes(n, r, d, m, s)
    ):
        count = shape[0] * shape[1]
        raw = _take(buf, 8 * count, path, name)
        mats[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    (meta_len,) = struct.unpack("<Q", _take(buf, 8, path, "metadata length"))
    try:
        meta = json.loads(_take(buf, meta_len, path, "metadata"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid container metadata: {exc}", path=path) from exc
    try:
        params = EnergyParams(**meta["params"])
        patches = tuple(
            AffinePatchSpec(
                vertices=np.asarray(p["vertices"], dtype=np.int64),
                mode=p["mode"],
            )
            for p in meta["patches"]
        )
        model = PrecomputedModel(
            n=n,
            r=r,
            d=d,
            m=m,
            s=s,
            kind=_KINDS[kind],
            x_rest=np.asarray(meta["x_rest"], dtype=np.float64),
            c_vec=np.asarray(meta["c_vec"], dtype=np.float64),
            edge_gram=np.asarray(meta["edge_gram"], dtype=np.float64),
            params=params,
            cluster_labels=np.asarray(meta["cluster_labels"], dtype=np.int64),
            proxy_mode=meta["proxy_mode"],
            proxy_indices=np.asarray(meta["proxy_indices"], dtype=np.int64),
            proxy_labels=np.asarray(meta["proxy_labels"], dtype=np.int64),
            patches=patches,
            mesh_vertices=np.asarray(meta["mesh_vertices"], dtype=np.float64)
            if meta["mesh_vertices"] is not None
            else None,
            mesh_elements=np.asarray(meta["mesh_elements"], dtype=np.int64)
            if meta["mesh_elements"] is not None
            else None,
            source=meta["source"],
            **mats,
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"incomplete container metadata: {exc}", path=path) from exc
    if model.edge_gram.shape != (d, 3, 3):
        raise ParseError("edge gram block has the wrong shape", path=path)
    if model.x_rest.shape != (3 * m + 9 * s,):
        raise ParseError("rest state has the wrong length", path=path)
    return model


def read_model(path):
    """Load a model written by `write_model`.

    Raises ParseError for anything that is not a well-formed container.
    """
    with open(path, "rb") as f:
        return _read(f, path)


def read_model_blob(data):
    """Parse container bytes produced by `model_blob`."""
    return _read(io.BytesIO(data), None)
