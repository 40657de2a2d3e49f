// Parser for the subspace wire blob: "VSUB" magic, seven little-endian
// uint32 header words (version, n, r, d, m, s, kind), then two row-major
// float64 matrices holding only the vertex rows of the bases:
//   N_vert  (3n x (3m + 9s))
//   U_vert  (3n x 9d)
// The client reconstructs V' = N_vert X + U_vert S; nothing past the
// vertex rows ever crosses the wire.

export const BLOB_MAGIC = 0x42555356; // "VSUB" read as LE uint32
export const BLOB_VERSION = 1;
const HEADER_BYTES = 4 + 7 * 4;

export class BlobFormatError extends Error {}

export type VertexBasis = {
  n: number;
  r: number;
  d: number;
  m: number;
  s: number;
  kind: "surface" | "solid";
  xDim: number; // 3m + 9s, columns of nVert
  sDim: number; // 9d, columns of uVert
  nVert: Float32Array; // 3n x xDim, row-major
  uVert: Float32Array; // 3n x sDim, row-major
};

export function parseVertexBlob(data: ArrayBuffer): VertexBasis {
  if (data.byteLength < HEADER_BYTES) {
    throw new BlobFormatError(
      `blob truncated: ${data.byteLength} bytes is shorter than the header`,
    );
  }
  const view = new DataView(data);
  if (view.getUint32(0, true) !== BLOB_MAGIC) {
    throw new BlobFormatError("bad magic: not a subspace blob");
  }
  const words = new Array<number>(7);
  for (let i = 0; i < 7; i++) words[i] = view.getUint32(4 + 4 * i, true);
  const [version, n, r, d, m, s, kindIdx] = words;
  if (version !== BLOB_VERSION) {
    throw new BlobFormatError(`unsupported blob version ${version}`);
  }
  if (kindIdx !== 0 && kindIdx !== 1) {
    throw new BlobFormatError(`unknown mesh kind index ${kindIdx}`);
  }
  const xDim = 3 * m + 9 * s;
  const sDim = 9 * d;
  const rows = 3 * n;
  const expect = HEADER_BYTES + 8 * rows * (xDim + sDim);
  if (data.byteLength !== expect) {
    throw new BlobFormatError(
      `blob is ${data.byteLength} bytes, expected ${expect} for n=${n} m=${m} d=${d} s=${s}`,
    );
  }
  // float32 is plenty for display; halves the resident size.
  const nDoubles = new Float64Array(data, HEADER_BYTES, rows * xDim);
  const uDoubles = new Float64Array(
    data,
    HEADER_BYTES + 8 * rows * xDim,
    rows * sDim,
  );
  return {
    n,
    r,
    d,
    m,
    s,
    kind: kindIdx === 0 ? "surface" : "solid",
    xDim,
    sDim,
    nVert: Float32Array.from(nDoubles),
    uVert: Float32Array.from(uDoubles),
  };
}

// Reassembles the 1 MiB binary chunks the server streams after model_meta.
export function collectChunks(
  chunks: ArrayBuffer[],
  totalBytes: number,
): ArrayBuffer {
  const out = new Uint8Array(totalBytes);
  let off = 0;
  for (const c of chunks) {
    if (off + c.byteLength > totalBytes) {
      throw new BlobFormatError("blob chunks overrun the announced size");
    }
    out.set(new Uint8Array(c), off);
    off += c.byteLength;
  }
  if (off !== totalBytes) {
    throw new BlobFormatError(
      `blob chunks total ${off} bytes, announced ${totalBytes}`,
    );
  }
  return out.buffer;
}
