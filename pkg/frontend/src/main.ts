/** Application bootstrap: DOM controls wired to the state machine and the
 * three.js viewer. */

import { SnapkitClient, type Domain } from "./api.js";
import { PointCloudViewer } from "./viewer.js";
import { ViewerState } from "./state.js";

const apiBase = (window as { SNAPKIT_API?: string }).SNAPKIT_API
  ?? "http://127.0.0.1:8080";

const client = new SnapkitClient(apiBase);
const state = new ViewerState(client);

const canvas = document.getElementById("viewport") as HTMLCanvasElement;
const domainSelect = document.getElementById("domain") as HTMLSelectElement;
const fileInput = document.getElementById("scene-file") as HTMLInputElement;
const objectInput = document.getElementById("object-id") as HTMLInputElement;
const newObjectBtn = document.getElementById("new-object") as HTMLButtonElement;
const undoBtn = document.getElementById("undo") as HTMLButtonElement;
const autoBtn = document.getElementById("auto") as HTMLButtonElement;
const queryInput = document.getElementById("query") as HTMLInputElement;
const queryBtn = document.getElementById("run-query") as HTMLButtonElement;
const statusLine = document.getElementById("status") as HTMLElement;

let positions = new Float32Array(0);

const viewer = new PointCloudViewer(canvas, state, (index) => {
  const point: [number, number, number] = [
    positions[3 * index], positions[3 * index + 1], positions[3 * index + 2],
  ];
  state.activeObjectId = Number(objectInput.value);
  state.addClick(point)
    .then((resp) => {
      status(`object ${resp.object_id}: ${resp.n_clicks} clicks, `
        + `${resp.point_count} points, score ${resp.score.toFixed(2)}`);
      viewer.refreshOverlay();
    })
    .catch((err) => status(`click failed: ${err}`));
});

function status(text: string): void {
  statusLine.textContent = text;
}

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  try {
    const payload = JSON.parse(await file.text()) as {
      positions: number[][];
      instance_ids?: number[];
      class_ids?: number[];
      class_names?: string[];
      scene_id?: string;
    };
    const domain = domainSelect.value as Domain;
    await state.openSession(domain, payload);
    positions = new Float32Array(payload.positions.flat());
    viewer.setCloud(positions);
    status(`loaded ${state.nPoints} points (${domain}); click a point to segment`);
  } catch (err) {
    status(`failed to load scene: ${err}`);
  }
});

newObjectBtn.addEventListener("click", () => {
  const used = [...state.objects.keys()];
  const next = used.length ? Math.max(...used) + 1 : 0;
  objectInput.value = String(next);
  status(`active object -> ${next}`);
});

undoBtn.addEventListener("click", () => {
  state.undo()
    .then((resp) => {
      status(resp.undone
        ? `undo: object ${resp.object_id}${resp.object_removed ? " removed" : ""}`
        : "nothing to undo");
      viewer.refreshOverlay();
    })
    .catch((err) => status(`undo failed: ${err}`));
});

autoBtn.addEventListener("click", () => {
  status("auto-segmenting...");
  state.autoSegment()
    .then((n) => {
      status(`auto segmentation: ${n} masks`);
      viewer.refreshOverlay();
    })
    .catch((err) => status(`auto failed: ${err}`));
});

function runQuery(): void {
  const query = queryInput.value.trim();
  if (!query) return;
  state.textQuery(query, -1.0)
    .then((matches) => {
      status(matches.length
        ? `"${query}": ${matches.length} matches, best similarity `
          + `${matches[0].similarity.toFixed(3)}`
        : `"${query}": no matches (run auto first)`);
      viewer.refreshOverlay();
    })
    .catch((err) => status(`query failed: ${err}`));
}

queryBtn.addEventListener("click", runQuery);
queryInput.addEventListener("keydown", (ev) => {
  if (ev.key === "Enter") runQuery();
});
queryInput.addEventListener("input", () => {
  queryBtn.disabled = queryInput.value.trim().length === 0;
});
queryBtn.disabled = true;

client.health()
  .then(() => status(`connected to ${apiBase}; load a scene JSON to begin`))
  .catch(() => status(`cannot reach ${apiBase} - is 'snapkit serve' running?`));
