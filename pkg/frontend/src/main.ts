/** Entry point: wire the viewport and panels to a scene from the server. */

import { ApiClient } from "./api.js";
import { DEFAULT_CAMERA, decodeHash } from "./state.js";
import { EditPanel, QueryPanel } from "./panels.js";
import { Viewport } from "./viewport.js";

async function boot(): Promise<void> {
  const api = new ApiClient("");
  const statusEl = document.getElementById("status")!;
  const status = (msg: string) => {
    statusEl.textContent = msg;
  };
  const canvas = document.getElementById("viewport") as HTMLCanvasElement;
  const camera = decodeHash(window.location.hash) ?? { ...DEFAULT_CAMERA };
  const viewport = new Viewport(canvas, api, status, camera);

  let sceneId: string | null = null;
  const query = new QueryPanel(api, viewport, () => sceneId, status);
  const edit = new EditPanel(api, viewport, () => sceneId,
    () => query.selectionId, status);
  document.getElementById("panels")!.append(query.root, edit.root);

  try {
    const scenes = await api.scenes();
    if (scenes.scenes.length === 0) {
      status("no scenes loaded; start the server with --ckpt");
      return;
    }
    sceneId = scenes.scenes[0].scene_id;
    await query.setLabels(await api.labels(sceneId));
    viewport.attachScene(sceneId);
    status(`scene ${sceneId} ready`);
  } catch (err) {
    status(`failed to reach server: ${String(err)}`);
  }
}

void boot();
