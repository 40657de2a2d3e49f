"""WebSocket session service: drive a deformation session from a browser.

Protocol (JSON text frames unless noted):

    client -> server
      {"type": "hello", "version": 1}
      {"type": "load_model", "name": "plane", "m"?, "d"?}       bundled
      {"type": "load_model", "upload": <byte count>}            container
          ... followed by binary frames totalling that many bytes
      {"type": "set_params", ...RuntimeOptions fields}
      {"type": "set_iters", "iterations": k}
      {"type": "toggle_conformal", "enabled": bool, "psi_cap"?}
      {"type": "set_handles", "vertices": [...], "patches": [...]}
      {"type": "drag", "targets": [[x,y,z]...], "patches"?}
      {"type": "sync"}

    server -> client
      {"type": "hello_ack", "session", "version"}
      {"type": "model_meta", n, r, d, m, s, kind, elements, blob_bytes,
       blob_chunks, proxy_indices}
      binary frames: the vertex blob, chunked at 1 MiB
      {"type": "ack", "of": <client type>}
      {"type": "frame_state", frame, X, S, r0, psi, energy, residual,
       drags, timings}
      {"type": "sync_ack", "frames": k, "coalesced": j}
      {"type": "error", "code", "message"}

Drags are coalesced latest-wins: while a frame is being computed, newer
drag messages replace the queued one, and the eventual frame_state reply
reports how many it answered in its "drags" field, so every client
message is still accounted for.  Control messages are never dropped and
apply in arrival order.  frame_state scales with the reduced state, not
the mesh; `/ws?full=1` additionally embeds reconstructed world vertices
in every frame_state for debugging and parity tests.
"""

from __future__ import annotations

import asyncio
import collections
import functools
import itertools
import json
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .container import read_model_blob, vertex_blob
from .deform import build_model
from .errors import NumericError, ParseError, ValidationError
from .mesh import generate_primitive
from .runtime import PatchGrab, Session

PROTOCOL_VERSION = 1
BLOB_CHUNK = 1 << 20

# Bundled primitives a client can load by name; proxy counts are defaults
# the load_model message may override.
BUNDLED = {
    "plane": {"primitive": "plane", "args": {"nx": 20, "ny": 20}, "m": 12, "d": 6},
    "cylinder": {
        "primitive": "cylinder",
        "args": {"radial": 50, "axial": 99},
        "m": 33,
        "d": 12,
    },
    "bar": {"primitive": "bar", "args": {"nx": 4, "ny": 4, "nz": 16}, "m": 16, "d": 8},
    "solid_cylinder": {
        "primitive": "solid_cylinder",
        "args": {"radial": 12, "axial": 6},
        "m": 16,
        "d": 8,
    },
}

_session_ids = itertools.count(1)


@functools.lru_cache(maxsize=8)
def _build_bundled(name, m=None, d=None):
    # Models are immutable after reduction, so sessions share cache entries.
    entry = BUNDLED[name]
    mesh = generate_primitive(entry["primitive"], **entry["args"])
    return build_model(
        mesh, m=m if m is not None else entry["m"],
        d=d if d is not None else entry["d"],
    )


class _Connection:
    """One WebSocket session: a receive loop feeding a strictly ordered
    processor, with consecutive drags coalesced latest-wins."""

    def __init__(self, ws, full):
        self.ws = ws
        self.full = full
        self.pending = collections.deque()
        self.wakeup = asyncio.Event()
        self.session = None
        self.frame = 0
        self.frames_solved = 0
        self.coalesced = 0
        self.upload = None  # (expected bytes, buffer) while receiving

    async def send(self, **payload):
        await self.ws.send_text(json.dumps(payload))

    async def error(self, code, message):
        await self.send(type="error", code=code, message=message)

    async def run(self):
        await self.ws.accept()
        if not await self._handshake():
            return
        receiver = asyncio.create_task(self._receive())
        try:
            await self._process()
        finally:
            receiver.cancel()

    async def _handshake(self):
        try:
            raw = await self.ws.receive_text()
            msg = json.loads(raw)
        except (WebSocketDisconnect, json.JSONDecodeError):
            await self.ws.close()
            return False
        if msg.get("type") != "hello":
            await self.error(400, "expected a hello message first")
            await self.ws.close()
            return False
        if msg.get("version") != PROTOCOL_VERSION:
            await self.error(
                426,
                f"protocol version {msg.get('version')} unsupported "
                f"(server speaks {PROTOCOL_VERSION})",
            )
            await self.ws.close()
            return False
        await self.send(
            type="hello_ack",
            session=f"s{next(_session_ids)}",
            version=PROTOCOL_VERSION,
        )
        return True

    def _push(self, item):
        self.pending.append(item)
        self.wakeup.set()

    async def _receive(self):
        try:
            while True:
                frame = await self.ws.receive()
                if frame["type"] == "websocket.disconnect":
                    self._push(("close", None))
                    return
                if frame.get("bytes") is not None:
                    self._push(("bytes", frame["bytes"]))
                else:
                    self._push(("text", frame.get("text", "")))
        except (WebSocketDisconnect, RuntimeError):
            self._push(("close", None))

    async def _process(self):
        while True:
            while not self.pending:
                self.wakeup.clear()
                await self.wakeup.wait()
            kind, data = self.pending.popleft()
            if kind == "close":
                return
            if kind == "bytes":
                await self._upload_bytes(data)
                continue
            try:
                msg = json.loads(data)
                if not isinstance(msg, dict) or "type" not in msg:
                    raise json.JSONDecodeError("not an object", data, 0)
            except json.JSONDecodeError:
                await self.error(400, "malformed JSON message")
                continue
            if msg["type"] == "drag":
                msg = self._coalesce_drags(msg)
            try:
                await self._handle(msg)
            except ValidationError as exc:
                await self.error(422, str(exc))
            except NumericError as exc:
                await self.error(500, str(exc))
            except ParseError as exc:
                await self.error(400, str(exc))

    def _coalesce_drags(self, msg):
        # Only consecutive drags collapse; any control message in between
        # keeps strict ordering.
        while self.pending:
            kind, data = self.pending[0]
            if kind != "text":
                break
            try:
                nxt = json.loads(data)
            except json.JSONDecodeError:
                break
            if not isinstance(nxt, dict) or nxt.get("type") != "drag":
                break
            self.pending.popleft()
            self.coalesced += 1
            nxt["_drags"] = msg.get("_drags", 1) + 1
            msg = nxt
        return msg

    async def _handle(self, msg):
        mtype = msg["type"]
        if mtype == "load_model":
            await self._load_model(msg)
        elif mtype == "drag":
            await self._drag(msg)
        elif mtype == "sync":
            await self.send(
                type="sync_ack", frames=self.frames_solved, coalesced=self.coalesced
            )
        elif mtype == "set_handles":
            self._require_session()
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
                for g in msg.get("patches", ())
            )
            self.session.set_handles(msg.get("vertices", ()), grabs)
            await self.send(type="ack", of="set_handles")
        elif mtype == "set_params":
            self._require_session()
            updates = {k: v for k, v in msg.items() if k not in ("type", "_drags")}
            self.session.set_options(**updates)
            await self.send(type="ack", of="set_params")
        elif mtype == "set_iters":
            self._require_session()
            self.session.set_options(iterations=int(msg["iterations"]))
            await self.send(type="ack", of="set_iters")
        elif mtype == "toggle_conformal":
            self._require_session()
            updates = {"conformal": bool(msg.get("enabled", True))}
            if msg.get("psi_cap") is not None:
                updates["psi_cap"] = float(msg["psi_cap"])
            self.session.set_options(**updates)
            await self.send(type="ack", of="toggle_conformal")
        elif mtype == "hello":
            await self.error(400, "already greeted")
        else:
            await self.error(400, f"unknown message type {mtype!r}")

    def _require_session(self):
        if self.session is None:
            raise ValidationError("no model loaded yet")

    async def _load_model(self, msg):
        if "upload" in msg:
            size = int(msg["upload"])
            if size <= 0:
                raise ValidationError("upload size must be positive")
            self.upload = (size, bytearray())
            await self.send(type="ack", of="load_model")
            return
        name = msg.get("name")
        if name not in BUNDLED:
            raise ValidationError(
                f"unknown model {name!r}; GET /models lists the bundled ones"
            )
        model = await asyncio.to_thread(
            _build_bundled, name, msg.get("m"), msg.get("d")
        )
        await self._install_model(model)

    async def _upload_bytes(self, data):
        if self.upload is None:
            await self.error(400, "unexpected binary frame (no upload pending)")
            return
        size, buf = self.upload
        buf.extend(data)
        if len(buf) < size:
            return
        self.upload = None
        if len(buf) > size:
            await self.error(400, "upload exceeded its declared size")
            return
        try:
            model = read_model_blob(bytes(buf))
        except ParseError as exc:
            await self.error(400, str(exc))
            return
        await self._install_model(model)

    async def _install_model(self, model):
        self.session = Session(model)
        self.frame = 0
        blob = vertex_blob(model)
        chunks = [blob[i : i + BLOB_CHUNK] for i in range(0, len(blob), BLOB_CHUNK)]
        await self.send(
            type="model_meta",
            n=model.n,
            r=model.r,
            d=model.d,
            m=model.m,
            s=model.s,
            kind=model.kind,
            elements=model.mesh_elements.tolist()
            if model.mesh_elements is not None
            else None,
            proxy_indices=model.proxy_indices.tolist(),
            blob_bytes=len(blob),
            blob_chunks=len(chunks),
        )
        for chunk in chunks:
            await self.ws.send_bytes(chunk)

    async def _drag(self, msg):
        self._require_session()
        targets = (
            np.asarray(msg["targets"], dtype=np.float64)
            if msg.get("targets") is not None
            else None
        )
        poses = None
        if msg.get("patches"):
            poses = {}
            for key, pose in msg["patches"].items():
                mat = (
                    np.asarray(pose["matrix"], float)
                    if pose.get("matrix") is not None
                    else None
                )
                poses[int(key)] = (
                    np.asarray(pose.get("displacement", (0, 0, 0)), float),
                    mat,
                )
        self.session.set_targets(targets, poses)
        t0 = time.perf_counter()
        result = await asyncio.to_thread(self.session.step)
        dt = time.perf_counter() - t0
        self.frame += 1
        self.frames_solved += 1
        state = {
            "type": "frame_state",
            "frame": self.frame,
            "X": result.X.tolist(),
            "S": result.S.tolist(),
            "r0": result.r0.tolist(),
            "psi": self.session.psi.tolist(),
            "energy": result.energy,
            "residual": result.residual,
            "drags": msg.get("_drags", 1),
            "timings": {"step_ms": dt * 1e3},
        }
        if self.full:
            state["vertices"] = self.session.reconstruct().tolist()
        await self.ws.send_text(json.dumps(state))


def create_app(ui_dir=None):
    """FastAPI application hosting /models and /ws; `ui_dir`, if given, is
    a directory of static web client assets mounted at /."""
    app = FastAPI(title="vsub session service")

    @app.get("/models")
    def list_models():
        out = []
        for name, entry in BUNDLED.items():
            mesh = generate_primitive(entry["primitive"], **entry["args"])
            out.append(
                {
                    "name": name,
                    "verts": int(mesh.vertices.shape[0]),
                    "kind": "surface" if mesh.is_surface else "solid",
                    "m": entry["m"],
                    "d": entry["d"],
                }
            )
        return {"models": out, "protocol": PROTOCOL_VERSION}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        full = ws.query_params.get("full") == "1"
        conn = _Connection(ws, full)
        try:
            await conn.run()
        except WebSocketDisconnect:
            pass

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        # mounted last so /models and /ws keep precedence
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
