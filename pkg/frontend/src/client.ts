// Session client: speaks the service protocol over any WebSocket-shaped
// socket (browser WebSocket or the `ws` package in node).  Control
// requests resolve in order (the server answers strictly FIFO); drags are
// fire-and-forget with arrival accounting, since the server coalesces
// them latest-wins and one frame_state may answer several.

import type {
  ClientMsg,
  FrameState,
  HelloAck,
  ModelMeta,
  PatchGrab,
  PatchPose,
  ServerMsg,
  SetParamsMsg,
  SyncAck,
  Vec3,
} from "./protocol.js";
import { PROTOCOL_VERSION } from "./protocol.js";
import type { VertexBasis } from "./blob.js";
import { collectChunks, parseVertexBlob } from "./blob.js";

// the shared surface of a browser WebSocket and the `ws` package's client;
// handler params stay `any` so both libs' event types are assignable
export type SocketLike = {
  binaryType: string;
  readyState: number;
  send(data: string | ArrayBufferLike | Uint8Array): void;
  close(): void;
  onopen: ((ev?: any) => void) | null;
  onmessage: ((ev: any) => void) | null;
  onclose: ((ev?: any) => void) | null;
  onerror: ((ev?: any) => void) | null;
};

const SOCKET_OPEN = 1;

export class ServiceError extends Error {
  constructor(
    public code: number,
    message: string,
  ) {
    super(message);
  }
}

export type LoadedModel = { meta: ModelMeta; basis: VertexBasis };

export type DragStats = {
  sent: number;
  answered: number;
  dropped: number;
  framesReceived: number;
  lastLatencyMs: number;
  maxLatencyMs: number;
};

export type SessionEvents = {
  onModel?: (model: LoadedModel) => void;
  onFrame?: (state: FrameState) => void;
  onError?: (err: ServiceError) => void;
  onClose?: () => void;
};

type Waiter = {
  types: string[];
  resolve: (msg: ServerMsg) => void;
  reject: (err: Error) => void;
};

export class SessionClient {
  readonly ready: Promise<HelloAck>;
  model: LoadedModel | null = null;

  private waiters: Waiter[] = [];
  private blobChunks: ArrayBuffer[] | null = null;
  private blobReceived = 0;
  private pendingMeta: ModelMeta | null = null;
  private modelResolve: ((m: LoadedModel) => void) | null = null;
  private modelReject: ((e: Error) => void) | null = null;
  private dragSendTimes: number[] = [];
  private frameWaiters: {
    resolve: (s: FrameState) => void;
    reject: (e: Error) => void;
  }[] = [];
  private stats_: DragStats = {
    sent: 0,
    answered: 0,
    dropped: 0,
    framesReceived: 0,
    lastLatencyMs: 0,
    maxLatencyMs: 0,
  };
  private closed = false;

  constructor(
    private socket: SocketLike,
    private events: SessionEvents = {},
  ) {
    socket.binaryType = "arraybuffer";
    this.ready = new Promise<HelloAck>((resolve, reject) => {
      this.waiters.push({
        types: ["hello_ack"],
        resolve: (m) => resolve(m as HelloAck),
        reject,
      });
    });
    const greet = () =>
      this.sendRaw({ type: "hello", version: PROTOCOL_VERSION });
    if (socket.readyState === SOCKET_OPEN) greet();
    else socket.onopen = greet;
    socket.onmessage = (ev) => this.dispatch(ev.data);
    socket.onclose = () => this.handleClose();
    socket.onerror = () => this.handleClose();
  }

  // -- outbound ----------------------------------------------------------

  private sendRaw(msg: ClientMsg): void {
    this.socket.send(JSON.stringify(msg));
  }

  private request<T extends ServerMsg>(
    msg: ClientMsg,
    replyTypes: string[],
  ): Promise<T> {
    return new Promise<T>((resolve, reject) => {
      this.waiters.push({
        types: replyTypes,
        resolve: (m) => resolve(m as T),
        reject,
      });
      this.sendRaw(msg);
    });
  }

  loadModel(name: string, m?: number, d?: number): Promise<LoadedModel> {
    const loaded = new Promise<LoadedModel>((resolve, reject) => {
      this.modelResolve = resolve;
      this.modelReject = reject;
    });
    this.request({ type: "load_model", name, m, d }, ["model_meta"]).catch(
      (err) => this.failModelLoad(err),
    );
    return loaded;
  }

  uploadModel(container: ArrayBuffer): Promise<LoadedModel> {
    const loaded = new Promise<LoadedModel>((resolve, reject) => {
      this.modelResolve = resolve;
      this.modelReject = reject;
    });
    this.request({ type: "load_model", upload: container.byteLength }, ["ack"])
      .then(() => {
        const MiB = 1 << 20;
        for (let off = 0; off < container.byteLength; off += MiB) {
          this.socket.send(container.slice(off, off + MiB));
        }
        // model_meta (or an error) follows once the bytes land
        return this.request({ type: "sync" }, ["sync_ack"]);
      })
      .catch((err) => this.failModelLoad(err));
    return loaded;
  }

  setHandles(vertices: number[], patches?: PatchGrab[]): Promise<void> {
    return this.request({ type: "set_handles", vertices, patches }, [
      "ack",
    ]).then(() => undefined);
  }

  setParams(params: Omit<SetParamsMsg, "type">): Promise<void> {
    return this.request({ type: "set_params", ...params }, ["ack"]).then(
      () => undefined,
    );
  }

  setIterations(iterations: number): Promise<void> {
    return this.request({ type: "set_iters", iterations }, ["ack"]).then(
      () => undefined,
    );
  }

  toggleConformal(enabled: boolean, psiCap?: number): Promise<void> {
    return this.request(
      { type: "toggle_conformal", enabled, psi_cap: psiCap },
      ["ack"],
    ).then(() => undefined);
  }

  // Fire-and-forget: returns false (and counts a drop) while disconnected.
  // The server answers with frame_state messages, possibly one per several
  // drags; see stats() for the accounting.
  drag(targets: Vec3[], patches?: Record<string, PatchPose>): boolean {
    if (this.closed || this.socket.readyState !== SOCKET_OPEN) {
      this.stats_.dropped += 1;
      return false;
    }
    this.dragSendTimes.push(now());
    this.stats_.sent += 1;
    this.sendRaw({ type: "drag", targets, patches });
    return true;
  }

  sync(): Promise<SyncAck> {
    return this.request<SyncAck>({ type: "sync" }, ["sync_ack"]);
  }

  // Resolves with the next frame_state to arrive (however many drags it
  // answers).  An empty drag on a fresh session yields the rest state.
  nextFrame(): Promise<FrameState> {
    return new Promise((resolve, reject) =>
      this.frameWaiters.push({ resolve, reject }),
    );
  }

  stats(): DragStats {
    return { ...this.stats_ };
  }

  close(): void {
    this.closed = true;
    this.socket.close();
  }

  // -- inbound -----------------------------------------------------------

  private dispatch(data: unknown): void {
    if (typeof data !== "string") {
      this.onBinary(data as ArrayBuffer);
      return;
    }
    const msg = JSON.parse(data) as ServerMsg;
    switch (msg.type) {
      case "frame_state":
        this.onFrameState(msg);
        return;
      case "model_meta":
        this.beginBlob(msg);
        this.settleWaiter(msg);
        return;
      case "error": {
        const err = new ServiceError(msg.code, msg.message);
        if (this.waiters.length > 0) this.waiters.shift()!.reject(err);
        else if (this.modelReject !== null) this.failModelLoad(err);
        this.events.onError?.(err);
        return;
      }
      default:
        this.settleWaiter(msg);
    }
  }

  private settleWaiter(msg: ServerMsg): void {
    const head = this.waiters[0];
    if (head !== undefined && head.types.includes(msg.type)) {
      this.waiters.shift();
      head.resolve(msg);
    }
  }

  private beginBlob(meta: ModelMeta): void {
    this.pendingMeta = meta;
    this.blobChunks = [];
    this.blobReceived = 0;
    if (meta.blob_bytes === 0) this.finishBlob();
  }

  private onBinary(data: ArrayBuffer): void {
    if (this.blobChunks === null || this.pendingMeta === null) return;
    this.blobChunks.push(data);
    this.blobReceived += data.byteLength;
    if (this.blobReceived >= this.pendingMeta.blob_bytes) this.finishBlob();
  }

  private finishBlob(): void {
    const meta = this.pendingMeta!;
    try {
      const buffer = collectChunks(this.blobChunks!, meta.blob_bytes);
      const basis = parseVertexBlob(buffer);
      this.model = { meta, basis };
      this.pendingMeta = null;
      this.blobChunks = null;
      const resolve = this.modelResolve;
      this.modelResolve = null;
      this.modelReject = null;
      resolve?.(this.model);
      this.events.onModel?.(this.model);
    } catch (err) {
      this.failModelLoad(err as Error);
    }
  }

  private failModelLoad(err: Error): void {
    this.pendingMeta = null;
    this.blobChunks = null;
    const reject = this.modelReject;
    this.modelResolve = null;
    this.modelReject = null;
    if (reject !== null) reject(err);
  }

  private onFrameState(state: FrameState): void {
    this.stats_.framesReceived += 1;
    this.stats_.answered += state.drags;
    // drags are answered in send order, so the newest drag this frame
    // covers is the (answered-1)-th one we sent
    const idx = Math.min(this.stats_.answered, this.dragSendTimes.length) - 1;
    if (idx >= 0) {
      const latency = now() - this.dragSendTimes[idx];
      this.stats_.lastLatencyMs = latency;
      if (latency > this.stats_.maxLatencyMs) this.stats_.maxLatencyMs = latency;
    }
    for (const w of this.frameWaiters.splice(0)) w.resolve(state);
    this.events.onFrame?.(state);
  }

  private handleClose(): void {
    if (this.closed) return;
    this.closed = true;
    const err = new Error("connection closed");
    for (const w of this.waiters.splice(0)) w.reject(err);
    for (const w of this.frameWaiters.splice(0)) w.reject(err);
    if (this.modelReject !== null) this.failModelLoad(err);
    this.events.onClose?.();
  }
}

function now(): number {
  return typeof performance !== "undefined" ? performance.now() : Date.now();
}
