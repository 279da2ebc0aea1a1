/**
 * Live-server contract suite against the trained synthetic checkpoint:
 *   - text query overlays match the ground-truth mask (IoU >= 0.9)
 *   - point queries resolve to the ground-truth label under the pixel
 *   - delete edits change pixels only inside the dilated object silhouette
 *
 * Run with FEATFIELD_CONTRACT=1 so globalSetup builds/loads the fixture and
 * starts the server.
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { PNG } from "pngjs";
import { beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";

const enabled = Boolean(process.env.FEATFIELD_CONTRACT);
const d = describe.skipIf(!enabled);

interface ContractInfo {
  base: string;
  checkpoint: string;
  dataset: string;
}

interface Manifest {
  cameras: Array<{
    rotation: number[]; translation: number[]; fx: number; fy: number;
    cx: number; cy: number; width: number; height: number;
    near: number; far: number;
  }>;
  split: { train: number[]; holdout: number[] };
  gt: { labels: string[]; masks: string[] };
}

function decodePng(buf: Buffer): PNG {
  return PNG.sync.read(buf);
}

function pngFromBase64(b64: string): PNG {
  return decodePng(Buffer.from(b64, "base64"));
}

function maskOf(png: PNG, labelIndex: number): boolean[] {
  // gt masks are grayscale label indices
  const out: boolean[] = new Array(png.width * png.height);
  for (let i = 0; i < out.length; i++) {
    out[i] = png.data[i * 4] === labelIndex;
  }
  return out;
}

function dilate(mask: boolean[], w: number, h: number, r: number): boolean[] {
  const out = mask.slice();
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      if (!mask[y * w + x]) continue;
      for (let dy = -r; dy <= r; dy++) {
        for (let dx = -r; dx <= r; dx++) {
          const ny = y + dy;
          const nx = x + dx;
          if (ny >= 0 && ny < h && nx >= 0 && nx < w) out[ny * w + nx] = true;
        }
      }
    }
  }
  return out;
}

function iou(a: boolean[], b: boolean[]): number {
  let inter = 0;
  let union = 0;
  for (let i = 0; i < a.length; i++) {
    if (a[i] && b[i]) inter++;
    if (a[i] || b[i]) union++;
  }
  return union === 0 ? 1 : inter / union;
}

d("UI contract against a live service", () => {
  let api: ApiClient;
  let info: ContractInfo;
  let manifest: Manifest;
  let sceneId: string;
  let view: number;
  let cam: Manifest["cameras"][number];
  let pose: Record<string, unknown>;

  beforeAll(async () => {
    info = JSON.parse(
      readFileSync(process.env.FEATFIELD_CONTRACT_INFO!, "utf-8"),
    ) as ContractInfo;
    api = new ApiClient(info.base);
    manifest = JSON.parse(
      readFileSync(join(info.dataset, "scene.json"), "utf-8"),
    ) as Manifest;
    const scenes = await api.scenes();
    sceneId = scenes.scenes[0].scene_id;
    view = manifest.split.holdout[0];
    cam = manifest.cameras[view];
    pose = {
      rotation: cam.rotation, translation: cam.translation,
      fx: cam.fx, fy: cam.fy, cx: cam.cx, cy: cam.cy,
      near: cam.near, far: cam.far,
    };
  });

  function gtMask(label: string): { mask: boolean[]; w: number; h: number } {
    const png = decodePng(
      readFileSync(join(info.dataset, manifest.gt.masks[view])),
    );
    const idx = manifest.gt.labels.indexOf(label);
    return { mask: maskOf(png, idx), w: png.width, h: png.height };
  }

  it("health and labels", async () => {
    const health = await api.health();
    expect(health.status).toBe("ok");
    const labels = await api.labels(sceneId);
    expect(labels).toContain("red_ball");
  });

  it("text query overlay matches the ground-truth mask (IoU >= 0.9)",
    async () => {
      const resp = await api.query(sceneId, "text", {
        label: "red_ball", pose, width: cam.width, height: cam.height,
        n_coarse: 48, n_fine: 64,
      });
      expect(resp.selection_id).toBeTruthy();
      const overlay = pngFromBase64(resp.overlay_png_base64!);
      const pred: boolean[] = new Array(overlay.width * overlay.height);
      for (let i = 0; i < pred.length; i++) {
        pred[i] = overlay.data[i * 4 + 3] > 127; // alpha encodes probability
      }
      const gt = gtMask("red_ball");
      expect(iou(pred, gt.mask)).toBeGreaterThanOrEqual(0.9);
    });

  it("point query selects the ground-truth label at that pixel", async () => {
    const gt = gtMask("green_crate");
    // centroid-ish interior pixel of the crate silhouette
    let sy = 0;
    let sx = 0;
    let n = 0;
    for (let y = 0; y < gt.h; y++) {
      for (let x = 0; x < gt.w; x++) {
        if (gt.mask[y * gt.w + x]) {
          sy += y; sx += x; n += 1;
        }
      }
    }
    let row = Math.round(sy / n);
    let col = Math.round(sx / n);
    if (!gt.mask[row * gt.w + col]) {
      outer: for (let y = 0; y < gt.h; y++) {
        for (let x = 0; x < gt.w; x++) {
          if (gt.mask[y * gt.w + x]) { row = y; col = x; break outer; }
        }
      }
    }
    const resp = await api.query(sceneId, "point", {
      pose, width: cam.width, height: cam.height, pixel: [row, col],
      n_coarse: 48, n_fine: 64,
    });
    expect(resp.nearest_label).toBe("green_crate");
  });

  it("delete edit changes pixels only inside the dilated silhouette",
    async () => {
      const renderOpts = {
        width: cam.width, height: cam.height, seed: 7,
        channels: ["rgb"],
      };
      const before = await api.renderFull(sceneId, pose as never, renderOpts);
      const sel = await api.query(sceneId, "text", {
        label: "blue_ball", mode: "threshold", tau: 0.8,
      });
      const edit = await api.createEdit(sceneId, sel.selection_id!, "delete", {});
      const after = await api.renderEditFull(edit.edit_id, pose as never,
                                             renderOpts);
      const a = pngFromBase64(before.png_base64);
      const b = pngFromBase64(after.png_base64);
      const changed: boolean[] = new Array(a.width * a.height);
      for (let i = 0; i < changed.length; i++) {
        const d0 = Math.abs(a.data[i * 4] - b.data[i * 4]);
        const d1 = Math.abs(a.data[i * 4 + 1] - b.data[i * 4 + 1]);
        const d2 = Math.abs(a.data[i * 4 + 2] - b.data[i * 4 + 2]);
        changed[i] = Math.max(d0, d1, d2) > 8; // above quantization jitter
      }
      const gt = gtMask("blue_ball");
      const allowed = dilate(gt.mask, gt.w, gt.h, 2);
      const outside = changed.filter((c, i) => c && !allowed[i]).length;
      const inside = changed.filter((c, i) => c && allowed[i]).length;
      expect(inside).toBeGreaterThan(10);    // the ball really disappeared
      expect(outside).toBe(0);               // nothing else moved
    });
});
