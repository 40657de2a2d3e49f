import { describe, expect, it } from "vitest";

import {
  GeometryError,
  boundingRadius,
  surfaceTriangles,
} from "../src/geometry.js";

describe("surfaceTriangles", () => {
  it("passes surface triangles through in order", () => {
    const idx = surfaceTriangles(
      [
        [0, 1, 2],
        [2, 1, 3],
      ],
      "surface",
    );
    expect([...idx]).toEqual([0, 1, 2, 2, 1, 3]);
  });

  it("rejects mixed arities", () => {
    expect(() => surfaceTriangles([[0, 1, 2, 3]], "surface")).toThrow(
      GeometryError,
    );
    expect(() => surfaceTriangles([[0, 1, 2]], "solid")).toThrow(GeometryError);
  });

  it("keeps all four faces of a single tet, wound outward", () => {
    const verts = [
      [0, 0, 0],
      [1, 0, 0],
      [0, 1, 0],
      [0, 0, 1],
    ];
    const idx = surfaceTriangles([[0, 1, 2, 3]], "solid");
    expect(idx.length).toBe(12);
    const centroid = [0.25, 0.25, 0.25];
    for (let f = 0; f < 4; f++) {
      const [a, b, c] = [idx[3 * f], idx[3 * f + 1], idx[3 * f + 2]];
      const [pa, pb, pc] = [verts[a], verts[b], verts[c]];
      const u = pb.map((x, i) => x - pa[i]);
      const v = pc.map((x, i) => x - pa[i]);
      const normal = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
      ];
      const mid = pa.map((x, i) => (x + pb[i] + pc[i]) / 3);
      const outward = normal.reduce(
        (acc, nx, i) => acc + nx * (mid[i] - centroid[i]),
        0,
      );
      expect(outward).toBeGreaterThan(0);
    }
  });

  it("culls the face shared by two glued tets", () => {
    const idx = surfaceTriangles(
      [
        [0, 1, 2, 3],
        [4, 1, 3, 2], // shares face {1,2,3} with the first tet
      ],
      "solid",
    );
    expect(idx.length).toBe(3 * 6);
    for (let f = 0; f < idx.length; f += 3) {
      const key = [idx[f], idx[f + 1], idx[f + 2]].sort().join(",");
      expect(key).not.toBe("1,2,3");
    }
  });
});

describe("boundingRadius", () => {
  it("is half the bbox diagonal", () => {
    const cube = new Float32Array([
      0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1,
    ]);
    expect(boundingRadius(cube)).toBeCloseTo(Math.sqrt(3) / 2, 6);
  });
});
