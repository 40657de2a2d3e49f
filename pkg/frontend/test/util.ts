// Builders for synthetic wire blobs used across the unit tests.

export type BlobDims = {
  n: number;
  r: number;
  d: number;
  m: number;
  s: number;
  kind?: 0 | 1;
  version?: number;
  magic?: string;
};

export function makeBlob(
  dims: BlobDims,
  nVals?: number[],
  uVals?: number[],
): ArrayBuffer {
  const { n, r, d, m, s } = dims;
  const xDim = 3 * m + 9 * s;
  const sDim = 9 * d;
  const rows = 3 * n;
  const magic = dims.magic ?? "VSUB";
  const buf = new ArrayBuffer(32 + 8 * rows * (xDim + sDim));
  const view = new DataView(buf);
  for (let i = 0; i < 4; i++) view.setUint8(i, magic.charCodeAt(i));
  const words = [dims.version ?? 1, n, r, d, m, s, dims.kind ?? 0];
  words.forEach((w, i) => view.setUint32(4 + 4 * i, w, true));
  const nArr = new Float64Array(buf, 32, rows * xDim);
  const uArr = new Float64Array(buf, 32 + 8 * rows * xDim, rows * sDim);
  for (let i = 0; i < nArr.length; i++) {
    nArr[i] = nVals !== undefined ? nVals[i] : Math.sin(1 + i * 0.7);
  }
  for (let i = 0; i < uArr.length; i++) {
    uArr[i] = uVals !== undefined ? uVals[i] : Math.cos(2 + i * 0.3);
  }
  return buf;
}

export function splitChunks(buf: ArrayBuffer, size: number): ArrayBuffer[] {
  const out: ArrayBuffer[] = [];
  for (let off = 0; off < buf.byteLength; off += size) {
    out.push(buf.slice(off, Math.min(off + size, buf.byteLength)));
  }
  return out;
}
