// Element-list helpers: turn model_meta.elements into something a
// renderer can index, independent of any rendering library.

export class GeometryError extends Error {}

// Triangles for display.  Surface meshes pass through; for tet meshes the
// boundary is the set of faces owned by exactly one tet.  Tets arrive
// positively oriented, so the kept faces wind with outward normals.
export function surfaceTriangles(
  elements: number[][],
  kind: "surface" | "solid",
): Uint32Array {
  if (kind === "surface") {
    const out = new Uint32Array(3 * elements.length);
    for (let i = 0; i < elements.length; i++) {
      const e = elements[i];
      if (e.length !== 3) {
        throw new GeometryError(`surface element ${i} has ${e.length} vertices`);
      }
      out.set(e, 3 * i);
    }
    return out;
  }
  const seen = new Map<string, number[] | null>(); // null once shared
  for (let i = 0; i < elements.length; i++) {
    const t = elements[i];
    if (t.length !== 4) {
      throw new GeometryError(`tet element ${i} has ${t.length} vertices`);
    }
    const [a, b, c, d] = t;
    for (const face of [
      [a, c, b],
      [a, b, d],
      [a, d, c],
      [b, c, d],
    ]) {
      const key = [...face].sort((p, q) => p - q).join(",");
      seen.set(key, seen.has(key) ? null : face);
    }
  }
  const faces: number[] = [];
  for (const face of seen.values()) {
    if (face !== null) faces.push(face[0], face[1], face[2]);
  }
  return Uint32Array.from(faces);
}

// Half the bounding-box diagonal of an interleaved xyz buffer; the "scale"
// that tolerances and camera framing are relative to.
export function boundingRadius(positions: ArrayLike<number>): number {
  const lo = [Infinity, Infinity, Infinity];
  const hi = [-Infinity, -Infinity, -Infinity];
  for (let i = 0; i < positions.length; i += 3) {
    for (let a = 0; a < 3; a++) {
      const p = positions[i + a] as number;
      if (p < lo[a]) lo[a] = p;
      if (p > hi[a]) hi[a] = p;
    }
  }
  const dx = hi[0] - lo[0];
  const dy = hi[1] - lo[1];
  const dz = hi[2] - lo[2];
  return Math.sqrt(dx * dx + dy * dy + dz * dz) / 2;
}
