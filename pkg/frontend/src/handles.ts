// Handle state machine: picked vertices, their current targets, and the
// screen-delta to world-target mapping for drags.  Pure data; the viewer
// supplies the camera frame and the client sends the resulting targets.

import type { Vec3 } from "./protocol.js";

// Camera-plane basis at the handle's depth: world units per screen pixel
// along the view right/up directions.  Screen y grows downward.
export type CameraFrame = {
  right: Vec3;
  up: Vec3;
  worldPerPixel: number;
};

export type Handle = {
  vertexId: number;
  rest: Vec3;
  target: Vec3;
};

export function dragTarget(
  start: Vec3,
  dxPx: number,
  dyPx: number,
  frame: CameraFrame,
): Vec3 {
  const s = frame.worldPerPixel;
  return [
    start[0] + s * (dxPx * frame.right[0] - dyPx * frame.up[0]),
    start[1] + s * (dxPx * frame.right[1] - dyPx * frame.up[1]),
    start[2] + s * (dxPx * frame.right[2] - dyPx * frame.up[2]),
  ];
}

export class HandleSet {
  private handles = new Map<number, Handle>();
  private order: number[] = []; // insertion order; index = server row
  private dragging: number | null = null;
  private dragStart: Vec3 | null = null;

  // Re-picking an existing handle is a no-op (keeps its dragged target).
  pick(vertexId: number, position: Vec3): boolean {
    if (this.handles.has(vertexId)) return false;
    this.handles.set(vertexId, {
      vertexId,
      rest: [...position] as Vec3,
      target: [...position] as Vec3,
    });
    this.order.push(vertexId);
    return true;
  }

  remove(vertexId: number): boolean {
    if (!this.handles.delete(vertexId)) return false;
    this.order = this.order.filter((v) => v !== vertexId);
    if (this.dragging === vertexId) {
      this.dragging = null;
      this.dragStart = null;
    }
    return true;
  }

  clear(): void {
    this.handles.clear();
    this.order = [];
    this.dragging = null;
    this.dragStart = null;
  }

  get size(): number {
    return this.order.length;
  }

  vertexIds(): number[] {
    return [...this.order];
  }

  targets(): Vec3[] {
    return this.order.map((v) => [...this.handles.get(v)!.target] as Vec3);
  }

  get(vertexId: number): Handle | undefined {
    return this.handles.get(vertexId);
  }

  beginDrag(vertexId: number): boolean {
    const h = this.handles.get(vertexId);
    if (h === undefined) return false;
    this.dragging = vertexId;
    this.dragStart = [...h.target] as Vec3;
    return true;
  }

  // Deltas are cumulative from beginDrag, so jittery move events cannot
  // accumulate drift; zero delta returns the start target unchanged.
  dragBy(dxPx: number, dyPx: number, frame: CameraFrame): Vec3[] | null {
    if (this.dragging === null || this.dragStart === null) return null;
    const h = this.handles.get(this.dragging)!;
    h.target = dragTarget(this.dragStart, dxPx, dyPx, frame);
    return this.targets();
  }

  // Release: the dragged target persists as the handle's resting demand.
  endDrag(): void {
    this.dragging = null;
    this.dragStart = null;
  }

  isDragging(): boolean {
    return this.dragging !== null;
  }
}
