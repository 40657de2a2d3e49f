// Reconstruction worker: keeps the mat-vec off the UI thread for large
// meshes.  Messages in: {basis} once, then {X, S, r0, frame}; messages
// out: {frame, positions} with the buffer transferred, latest frame wins
// on the receiving side.

import type { VertexBasis } from "./blob.js";
import type { Mat3 } from "./reconstruct.js";
import { reconstructPositions } from "./reconstruct.js";

type InitMsg = { basis: VertexBasis };
type FrameMsg = { X: number[]; S: number[]; r0: Mat3; frame: number };

let basis: VertexBasis | null = null;

const scope = globalThis as unknown as {
  onmessage: ((ev: { data: InitMsg | FrameMsg }) => void) | null;
  postMessage(msg: unknown, transfer?: Transferable[]): void;
};

scope.onmessage = (ev) => {
  const data = ev.data;
  if ("basis" in data) {
    basis = data.basis;
    return;
  }
  if (basis === null) return;
  const positions = reconstructPositions(basis, data.X, data.S, data.r0);
  scope.postMessage({ frame: data.frame, positions }, [positions.buffer]);
};
