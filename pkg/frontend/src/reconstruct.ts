// Client-side reconstruction: world positions from reduced coordinates.
// Per frame this is two dense mat-vecs over the vertex rows plus the
// rigid frame, float32 storage with float64 accumulation.

import type { VertexBasis } from "./blob.js";
import { BlobFormatError } from "./blob.js";

export type Mat3 = number[][]; // 3x3 row-major, as sent in frame_state.r0

// out[3v..3v+2] = r0 @ (N_vert X + U_vert S)[3v..3v+2], xyz interleaved,
// ready to hand to a position buffer attribute.
export function reconstructPositions(
  basis: VertexBasis,
  X: ArrayLike<number>,
  S: ArrayLike<number>,
  r0: Mat3,
  out?: Float32Array,
): Float32Array {
  const { nVert, uVert, xDim, sDim } = basis;
  const rows = 3 * basis.n;
  if (X.length !== xDim || S.length !== sDim) {
    throw new BlobFormatError(
      `state dims (${X.length}, ${S.length}) do not match basis (${xDim}, ${sDim})`,
    );
  }
  if (out === undefined) out = new Float32Array(rows);
  else if (out.length !== rows) {
    throw new BlobFormatError(`output length ${out.length}, expected ${rows}`);
  }
  const [[a, b, c], [e, f, g], [h, i, j]] = r0;
  for (let v = 0; v < basis.n; v++) {
    let x = 0;
    let y = 0;
    let z = 0;
    let base = 3 * v * xDim;
    for (let k = 0; k < xDim; k++) {
      const xk = X[k] as number;
      x += nVert[base + k] * xk;
      y += nVert[base + xDim + k] * xk;
      z += nVert[base + 2 * xDim + k] * xk;
    }
    base = 3 * v * sDim;
    for (let k = 0; k < sDim; k++) {
      const sk = S[k] as number;
      x += uVert[base + k] * sk;
      y += uVert[base + sDim + k] * sk;
      z += uVert[base + 2 * sDim + k] * sk;
    }
    out[3 * v] = a * x + b * y + c * z;
    out[3 * v + 1] = e * x + f * y + g * z;
    out[3 * v + 2] = h * x + i * y + j * z;
  }
  return out;
}

export const IDENTITY3: Mat3 = [
  [1, 0, 0],
  [0, 1, 0],
  [0, 0, 1],
];
