// Message types for the session service WebSocket protocol (JSON text
// frames for control, binary frames only for the subspace blob and
// container uploads).  Field names match the server exactly.

export const PROTOCOL_VERSION = 1;

export type Vec3 = [number, number, number];

export type PatchGrab = {
  index: number;
  displacement?: Vec3;
  matrix?: number[][];
};

export type PatchPose = {
  displacement?: Vec3;
  matrix?: number[][] | null;
};

// client -> server
export type HelloMsg = { type: "hello"; version: number };
export type LoadModelMsg = {
  type: "load_model";
  name?: string;
  m?: number;
  d?: number;
  upload?: number; // byte count; binary frames follow
};
export type SetParamsMsg = {
  type: "set_params";
  iterations?: number;
  soft?: boolean;
  soft_weight?: number | null;
  conformal?: boolean;
  psi_cap?: number;
  adapt_rotation?: boolean;
};
export type SetItersMsg = { type: "set_iters"; iterations: number };
export type ToggleConformalMsg = {
  type: "toggle_conformal";
  enabled: boolean;
  psi_cap?: number;
};
export type SetHandlesMsg = {
  type: "set_handles";
  vertices?: number[];
  patches?: PatchGrab[];
};
export type DragMsg = {
  type: "drag";
  targets?: Vec3[];
  patches?: Record<string, PatchPose>;
};
export type SyncMsg = { type: "sync" };

export type ClientMsg =
  | HelloMsg
  | LoadModelMsg
  | SetParamsMsg
  | SetItersMsg
  | ToggleConformalMsg
  | SetHandlesMsg
  | DragMsg
  | SyncMsg;

// server -> client
export type HelloAck = { type: "hello_ack"; session: number; version: number };
export type ModelMeta = {
  type: "model_meta";
  n: number;
  r: number;
  d: number;
  m: number;
  s: number;
  kind: "surface" | "solid";
  elements: number[][] | null;
  blob_bytes: number;
  blob_chunks: number;
  proxy_indices: number[];
};
export type Ack = { type: "ack"; of: string };
export type FrameState = {
  type: "frame_state";
  frame: number;
  X: number[];
  S: number[];
  r0: number[][]; // 3x3, applied to reconstructed rows
  psi: number[];
  energy: number;
  residual: number;
  drags: number; // client drag messages this frame collectively answers
  timings: { step_ms: number };
  vertices?: number[][]; // only on /ws?full=1 debug connections
};
export type SyncAck = { type: "sync_ack"; frames: number; coalesced: number };
export type ErrorMsg = { type: "error"; code: number; message: string };

export type ServerMsg =
  | HelloAck
  | ModelMeta
  | Ack
  | FrameState
  | SyncAck
  | ErrorMsg;

export function wsUrl(httpBase: string, full = false): string {
  const u = new URL(httpBase);
  u.protocol = u.protocol === "https:" ? "wss:" : "ws:";
  u.pathname = u.pathname.replace(/\/$/, "") + "/ws";
  if (full) u.search = "?full=1";
  return u.toString();
}
