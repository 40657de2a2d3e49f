import { describe, expect, it } from "vitest";

import type { CameraFrame } from "../src/handles.js";
import { HandleSet, dragTarget } from "../src/handles.js";
import type { Vec3 } from "../src/protocol.js";

const FRAME: CameraFrame = {
  right: [1, 0, 0],
  up: [0, 1, 0],
  worldPerPixel: 0.01,
};

describe("dragTarget", () => {
  it("is the identity for a zero delta", () => {
    const start: Vec3 = [0.4, -0.2, 1.1];
    expect(dragTarget(start, 0, 0, FRAME)).toEqual(start);
  });

  it("moves in the camera plane, screen y downward", () => {
    const t = dragTarget([0, 0, 0], 10, 20, FRAME);
    expect(t[0]).toBeCloseTo(0.1, 12);
    expect(t[1]).toBeCloseTo(-0.2, 12);
    expect(t[2]).toBe(0);
  });

  it("respects a tilted camera basis", () => {
    const frame: CameraFrame = {
      right: [0, 0, 1],
      up: [0, 1, 0],
      worldPerPixel: 2,
    };
    expect(dragTarget([1, 1, 1], 3, -1, frame)).toEqual([1, 3, 7]);
  });
});

describe("HandleSet", () => {
  it("picks are idempotent and ordered", () => {
    const hs = new HandleSet();
    expect(hs.pick(7, [0, 0, 0])).toBe(true);
    expect(hs.pick(3, [1, 0, 0])).toBe(true);
    expect(hs.pick(7, [9, 9, 9])).toBe(false); // re-pick keeps the original
    expect(hs.vertexIds()).toEqual([7, 3]);
    expect(hs.get(7)!.target).toEqual([0, 0, 0]);
  });

  it("drags update only the grabbed handle, cumulatively from the grab", () => {
    const hs = new HandleSet();
    hs.pick(0, [0, 0, 0]);
    hs.pick(1, [5, 5, 5]);
    expect(hs.beginDrag(1)).toBe(true);
    hs.dragBy(100, 0, FRAME);
    const targets = hs.dragBy(200, 0, FRAME); // cumulative, not compounding
    expect(targets).toEqual([
      [0, 0, 0],
      [7, 5, 5],
    ]);
  });

  it("release persists the dragged target", () => {
    const hs = new HandleSet();
    hs.pick(4, [1, 2, 3]);
    hs.beginDrag(4);
    hs.dragBy(0, -50, FRAME);
    hs.endDrag();
    expect(hs.isDragging()).toBe(false);
    expect(hs.targets()).toEqual([[1, 2.5, 3]]);
    // a fresh grab starts from the persisted target
    hs.beginDrag(4);
    expect(hs.dragBy(0, 0, FRAME)).toEqual([[1, 2.5, 3]]);
  });

  it("ignores drags with no active grab or unknown handle", () => {
    const hs = new HandleSet();
    hs.pick(2, [0, 0, 0]);
    expect(hs.dragBy(5, 5, FRAME)).toBeNull();
    expect(hs.beginDrag(99)).toBe(false);
  });

  it("removing the grabbed handle cancels the drag", () => {
    const hs = new HandleSet();
    hs.pick(1, [0, 0, 0]);
    hs.beginDrag(1);
    expect(hs.remove(1)).toBe(true);
    expect(hs.isDragging()).toBe(false);
    expect(hs.size).toBe(0);
    expect(hs.dragBy(1, 1, FRAME)).toBeNull();
  });
});
