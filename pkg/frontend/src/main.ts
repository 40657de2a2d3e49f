// Browser entry: model list, session wiring, parameter panel, status bar.
// Live controls (iterations, soft weight, conformal scale cap) apply to
// the running session; the rebuild group (model, m, d) reloads the model
// and is styled differently because it discards the session.

import type { FrameState } from "./protocol.js";
import { wsUrl } from "./protocol.js";
import { SessionClient, ServiceError } from "./client.js";
import type { LoadedModel } from "./client.js";
import { reconstructPositions } from "./reconstruct.js";
import { createViewer } from "./viewer.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

const banner = $("banner");
function showError(message: string): void {
  banner.textContent = message;
  banner.style.display = "block";
  window.setTimeout(() => (banner.style.display = "none"), 6000);
}

const status = $("status");
let model: LoadedModel | null = null;
let positions: Float32Array | null = null;

const viewer = createViewer($("viewport"), {
  onHandlesChanged: (ids) => {
    client.setHandles(ids).catch((e) => showError(String(e.message ?? e)));
  },
  onTargets: (targets) => {
    client.drag(targets);
  },
});

function applyFrame(state: FrameState): void {
  if (model === null) return;
  try {
    positions = reconstructPositions(
      model.basis,
      state.X,
      state.S,
      state.r0,
      positions ?? undefined,
    );
  } catch (err) {
    showError(String((err as Error).message));
    return;
  }
  viewer.updatePositions(positions);
  const s = client.stats();
  status.textContent =
    `frame ${state.frame} | step ${state.timings.step_ms.toFixed(2)} ms | ` +
    `E ${state.energy.toFixed(4)} | residual ${state.residual.toExponential(1)} | ` +
    `drags ${s.sent} sent / ${s.answered} answered`;
}

const socket = new WebSocket(wsUrl(window.location.href));
const client = new SessionClient(socket, {
  onFrame: applyFrame,
  onError: (err: ServiceError) => showError(`server: ${err.message}`),
  onClose: () => showError("connection closed; reload the page"),
});

async function loadModel(name: string, m?: number, d?: number): Promise<void> {
  status.textContent = `building ${name}...`;
  model = await client.loadModel(name, m, d);
  const meta = model.meta;
  positions = null;
  $("meshinfo").textContent =
    `${meta.n} vertices, ${meta.kind}, m=${meta.m}, d=${meta.d}`;
  // an empty drag solves nothing and returns the rest-state coordinates
  const restPromise = client.nextFrame();
  client.drag([]);
  const rest = await restPromise;
  if (meta.elements !== null) {
    positions = reconstructPositions(model.basis, rest.X, rest.S, rest.r0);
    viewer.setMesh(meta.elements, meta.kind, positions);
  }
  status.textContent = `${name} ready; shift-click to place handles, drag them to deform`;
}

async function boot(): Promise<void> {
  await client.ready;
  const res = await fetch("/models");
  const listing = (await res.json()) as {
    models: { name: string; verts: number; m: number; d: number }[];
  };
  const select = $<HTMLSelectElement>("model");
  for (const m of listing.models) {
    const opt = document.createElement("option");
    opt.value = m.name;
    opt.textContent = `${m.name} (${m.verts} verts)`;
    select.appendChild(opt);
  }
  select.onchange = () => rebuild();
  $("rebuild").onclick = () => rebuild();

  function rebuild(): void {
    const m = parseInt($<HTMLInputElement>("ctl-m").value, 10) || undefined;
    const d = parseInt($<HTMLInputElement>("ctl-d").value, 10) || undefined;
    loadModel(select.value, m, d).catch((e) =>
      showError(String(e.message ?? e)),
    );
  }

  $<HTMLInputElement>("ctl-iters").onchange = (ev) => {
    const k = parseInt((ev.target as HTMLInputElement).value, 10);
    client.setIterations(k).catch((e) => showError(String(e.message ?? e)));
  };
  $<HTMLInputElement>("ctl-conformal").onchange = (ev) => {
    const on = (ev.target as HTMLInputElement).checked;
    const cap = parseFloat($<HTMLInputElement>("ctl-psicap").value) || 2.0;
    client.toggleConformal(on, cap).catch((e) => showError(String(e.message ?? e)));
  };
  $<HTMLInputElement>("ctl-soft").onchange = (ev) => {
    const w = parseFloat((ev.target as HTMLInputElement).value);
    const soft = Number.isFinite(w) && w > 0;
    client
      .setParams(soft ? { soft: true, soft_weight: w } : { soft: false })
      .catch((e) => showError(String(e.message ?? e)));
  };

  await loadModel(listing.models[0].name);
}

boot().catch((e) => showError(String(e.message ?? e)));
