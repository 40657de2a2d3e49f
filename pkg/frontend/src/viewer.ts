// three.js viewport: renders the reconstructed mesh from the latest
// frame_state, lets the user shift-click vertices into handles and drag
// them in the camera plane.  Rendering never waits on the network; it
// always draws the last received state.

import * as THREE from "three";
import { OrbitControls } from "three/addons/controls/OrbitControls.js";

import type { Vec3 } from "./protocol.js";
import type { CameraFrame } from "./handles.js";
import { HandleSet } from "./handles.js";
import { boundingRadius, surfaceTriangles } from "./geometry.js";

export type ViewerEvents = {
  // a drag produced new targets; send them (rate limited by the caller)
  onTargets?: (targets: Vec3[]) => void;
  // the picked handle set changed; re-send set_handles
  onHandlesChanged?: (vertexIds: number[]) => void;
};

export type Viewer = {
  handles: HandleSet;
  setMesh: (
    elements: number[][],
    kind: "surface" | "solid",
    positions: Float32Array,
  ) => void;
  updatePositions: (positions: Float32Array) => void;
  resize: () => void;
  dispose: () => void;
};

const HANDLE_COLOR = 0xff8833;
const PICK_RADIUS_PX = 14;

export function createViewer(
  container: HTMLElement,
  events: ViewerEvents = {},
): Viewer {
  const renderer = new THREE.WebGLRenderer({ antialias: true });
  renderer.setPixelRatio(Math.min(window.devicePixelRatio, 2));
  renderer.setSize(container.clientWidth, container.clientHeight);
  renderer.setClearColor(0x10141c);
  container.appendChild(renderer.domElement);

  const scene = new THREE.Scene();
  const camera = new THREE.PerspectiveCamera(
    45,
    container.clientWidth / Math.max(1, container.clientHeight),
    0.01,
    1000,
  );
  camera.position.set(3, 2, 6);

  scene.add(new THREE.HemisphereLight(0xffffff, 0x30364a, 1.1));
  const key = new THREE.DirectionalLight(0xffffff, 1.4);
  key.position.set(4, 6, 5);
  scene.add(key);

  const controls = new OrbitControls(camera, renderer.domElement);
  controls.enableDamping = true;

  const handles = new HandleSet();
  const material = new THREE.MeshStandardMaterial({
    color: 0x6699cc,
    flatShading: true,
    side: THREE.DoubleSide,
  });
  let mesh: THREE.Mesh | null = null;
  let markers: THREE.InstancedMesh | null = null;
  const markerGeom = new THREE.SphereGeometry(1, 12, 8);
  const markerMat = new THREE.MeshBasicMaterial({ color: HANDLE_COLOR });
  let markerRadius = 0.02;
  const raycaster = new THREE.Raycaster();

  function setMesh(
    elements: number[][],
    kind: "surface" | "solid",
    positions: Float32Array,
  ): void {
    if (mesh !== null) {
      scene.remove(mesh);
      mesh.geometry.dispose();
    }
    const geom = new THREE.BufferGeometry();
    geom.setAttribute("position", new THREE.BufferAttribute(positions, 3));
    geom.setIndex(new THREE.BufferAttribute(surfaceTriangles(elements, kind), 1));
    geom.computeVertexNormals();
    mesh = new THREE.Mesh(geom, material);
    scene.add(mesh);
    handles.clear();
    refreshMarkers();

    const radius = Math.max(boundingRadius(positions), 1e-3);
    markerRadius = radius / 40;
    controls.target.set(0, 0, 0);
    camera.position.setLength(radius * 3);
    camera.near = radius / 100;
    camera.far = radius * 100;
    camera.updateProjectionMatrix();
  }

  function updatePositions(positions: Float32Array): void {
    if (mesh === null) return;
    const attr = mesh.geometry.getAttribute("position") as THREE.BufferAttribute;
    (attr.array as Float32Array).set(positions);
    attr.needsUpdate = true;
    mesh.geometry.computeVertexNormals();
  }

  function refreshMarkers(): void {
    if (markers !== null) {
      scene.remove(markers);
      markers.dispose();
    }
    markers = null;
    if (handles.size === 0) return;
    markers = new THREE.InstancedMesh(markerGeom, markerMat, handles.size);
    const m = new THREE.Matrix4();
    handles.targets().forEach((t, i) => {
      m.makeScale(markerRadius, markerRadius, markerRadius);
      m.setPosition(t[0], t[1], t[2]);
      markers!.setMatrixAt(i, m);
    });
    markers.instanceMatrix.needsUpdate = true;
    scene.add(markers);
  }

  // -- picking and dragging ----------------------------------------------

  function pointerNdc(ev: PointerEvent): THREE.Vector2 {
    const rect = renderer.domElement.getBoundingClientRect();
    return new THREE.Vector2(
      ((ev.clientX - rect.left) / rect.width) * 2 - 1,
      -((ev.clientY - rect.top) / rect.height) * 2 + 1,
    );
  }

  function pickVertex(ev: PointerEvent): { id: number; pos: Vec3 } | null {
    if (mesh === null) return null;
    raycaster.setFromCamera(pointerNdc(ev), camera);
    const hit = raycaster.intersectObject(mesh)[0];
    if (hit === undefined || hit.face === undefined || hit.face === null) {
      return null;
    }
    const attr = mesh.geometry.getAttribute("position");
    let best = hit.face.a;
    let bestD = Infinity;
    for (const vid of [hit.face.a, hit.face.b, hit.face.c]) {
      const d = hit.point.distanceToSquared(
        new THREE.Vector3().fromBufferAttribute(attr, vid),
      );
      if (d < bestD) {
        bestD = d;
        best = vid;
      }
    }
    const p = new THREE.Vector3().fromBufferAttribute(attr, best);
    return { id: best, pos: [p.x, p.y, p.z] };
  }

  function handleNear(ev: PointerEvent): number | null {
    const rect = renderer.domElement.getBoundingClientRect();
    let best: number | null = null;
    let bestD = PICK_RADIUS_PX * PICK_RADIUS_PX;
    for (const h of handles.vertexIds()) {
      const t = handles.get(h)!.target;
      const p = new THREE.Vector3(t[0], t[1], t[2]).project(camera);
      const sx = ((p.x + 1) / 2) * rect.width + rect.left;
      const sy = ((1 - p.y) / 2) * rect.height + rect.top;
      const d = (sx - ev.clientX) ** 2 + (sy - ev.clientY) ** 2;
      if (d < bestD) {
        bestD = d;
        best = h;
      }
    }
    return best;
  }

  function cameraFrame(at: Vec3): CameraFrame {
    const right = new THREE.Vector3();
    const up = new THREE.Vector3();
    const fwd = new THREE.Vector3();
    camera.matrixWorld.extractBasis(right, up, fwd);
    const dist = camera.position.distanceTo(new THREE.Vector3(...at));
    const height = renderer.domElement.getBoundingClientRect().height;
    const worldPerPixel =
      (2 * dist * Math.tan(((camera.fov / 2) * Math.PI) / 180)) /
      Math.max(1, height);
    return {
      right: [right.x, right.y, right.z],
      up: [up.x, up.y, up.z],
      worldPerPixel,
    };
  }

  let downAt: { x: number; y: number; frame: CameraFrame } | null = null;

  renderer.domElement.addEventListener("pointerdown", (ev) => {
    if (ev.shiftKey) {
      const hit = pickVertex(ev);
      if (hit !== null && handles.pick(hit.id, hit.pos)) {
        refreshMarkers();
        events.onHandlesChanged?.(handles.vertexIds());
      }
      return;
    }
    if (ev.ctrlKey) {
      const near = handleNear(ev);
      if (near !== null && handles.remove(near)) {
        refreshMarkers();
        events.onHandlesChanged?.(handles.vertexIds());
      }
      return;
    }
    const near = handleNear(ev);
    if (near !== null && handles.beginDrag(near)) {
      controls.enabled = false;
      downAt = {
        x: ev.clientX,
        y: ev.clientY,
        frame: cameraFrame(handles.get(near)!.target),
      };
      renderer.domElement.setPointerCapture(ev.pointerId);
    }
  });

  renderer.domElement.addEventListener("pointermove", (ev) => {
    if (downAt === null || !handles.isDragging()) return;
    const targets = handles.dragBy(
      ev.clientX - downAt.x,
      ev.clientY - downAt.y,
      downAt.frame,
    );
    if (targets !== null) {
      refreshMarkers();
      events.onTargets?.(targets);
    }
  });

  renderer.domElement.addEventListener("pointerup", () => {
    if (handles.isDragging()) {
      handles.endDrag();
      downAt = null;
      controls.enabled = true;
    }
  });

  function resize(): void {
    const w = container.clientWidth;
    const h = Math.max(1, container.clientHeight);
    camera.aspect = w / h;
    camera.updateProjectionMatrix();
    renderer.setSize(w, h);
  }
  window.addEventListener("resize", resize);

  let alive = true;
  function loop(): void {
    if (!alive) return;
    controls.update();
    renderer.render(scene, camera);
    requestAnimationFrame(loop);
  }
  requestAnimationFrame(loop);

  return {
    handles,
    setMesh,
    updatePositions,
    resize,
    dispose: () => {
      alive = false;
      renderer.dispose();
      container.removeChild(renderer.domElement);
    },
  };
}
