/**
 * Query and edit panels. The query panel resolves text / patch / point /
 * cluster selections through the server; the edit panel applies operators to
 * the active selection and keeps the undo stack.
 */

import { ApiClient } from "./api.js";
import { EditStack } from "./state.js";
import type { EditOp, QueryResponse, Transform } from "./types.js";
import { Viewport } from "./viewport.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

export class QueryPanel {
  root: HTMLElement;
  selectionId: string | null = null;
  private tau = 0.85;
  private labelSelect: HTMLSelectElement;
  private tauSlider: HTMLInputElement;
  private clusterRow: HTMLElement;
  private info: HTMLElement;

  constructor(
    private readonly api: ApiClient,
    private readonly viewport: Viewport,
    private readonly sceneId: () => string | null,
    private readonly status: (msg: string) => void,
  ) {
    this.root = el("div", { class: "panel" });
    this.root.appendChild(el("h3", {}, "Query"));

    const labelRow = el("div", { class: "row" });
    this.labelSelect = el("select");
    const textBtn = el("button", {}, "Select by label");
    textBtn.onclick = () => void this.textQuery();
    labelRow.append(this.labelSelect, textBtn);
    this.root.appendChild(labelRow);

    const modeRow = el("div", { class: "row" });
    for (const mode of ["orbit", "point", "patch"] as const) {
      const btn = el("button", { "data-mode": mode }, mode);
      btn.onclick = () => {
        viewport.selectMode = mode;
        this.status(`mode: ${mode}`);
      };
      modeRow.appendChild(btn);
    }
    this.root.appendChild(modeRow);

    const tauRow = el("div", { class: "row" });
    tauRow.appendChild(el("span", {}, "threshold"));
    this.tauSlider = el("input", {
      type: "range", min: "0.5", max: "0.99", step: "0.01", value: "0.85",
    });
    this.tauSlider.oninput = () => {
      this.tau = Number(this.tauSlider.value);
      void this.textQuery(); // re-query with the new threshold
    };
    tauRow.appendChild(this.tauSlider);
    this.root.appendChild(tauRow);

    const clusterControls = el("div", { class: "row" });
    const kSlider = el("input", {
      type: "range", min: "2", max: "8", step: "1", value: "4",
    });
    const clusterBtn = el("button", {}, "k-means clusters");
    clusterBtn.onclick = () => void this.clusterQuery(Number(kSlider.value));
    clusterControls.append(el("span", {}, "k"), kSlider, clusterBtn);
    this.root.appendChild(clusterControls);

    this.clusterRow = el("div", { class: "row swatches" });
    this.root.appendChild(this.clusterRow);

    this.info = el("div", { class: "info" });
    this.root.appendChild(this.info);

    viewport.onPixelClick = (row, col) => void this.pointQuery(row, col);
    viewport.onRectDrag = (rect) => void this.patchQuery(rect);
  }

  async setLabels(labels: string[]): Promise<void> {
    this.labelSelect.replaceChildren(
      ...labels.map((l) => el("option", { value: l }, l)),
    );
  }

  private payloadBase() {
    return {
      pose: this.viewport.pose(),
      width: this.viewport.renderSize,
      height: this.viewport.renderSize,
      tau: this.tau,
    };
  }

  private accept(resp: QueryResponse, what: string): void {
    this.selectionId = resp.selection_id;
    this.viewport.setOverlay(resp.overlay_png_base64 ?? null);
    const extra = resp.nearest_label ? ` (nearest: ${resp.nearest_label})` : "";
    this.info.textContent = `selection ${resp.selection_id ?? "-"}${extra}`;
    this.status(`${what} query done`);
  }

  async textQuery(): Promise<void> {
    const sid = this.sceneId();
    const label = this.labelSelect.value;
    if (!sid || !label) return;
    try {
      this.accept(await this.api.query(sid, "text", {
        ...this.payloadBase(), label,
      }), "text");
    } catch (err) {
      this.status(String(err));
    }
  }

  async pointQuery(row: number, col: number): Promise<void> {
    const sid = this.sceneId();
    if (!sid) return;
    try {
      this.accept(await this.api.query(sid, "point", {
        ...this.payloadBase(), pixel: [row, col],
      }), "point");
    } catch (err) {
      this.status(String(err));
    }
  }

  async patchQuery(rect: [number, number, number, number]): Promise<void> {
    const sid = this.sceneId();
    if (!sid) return;
    try {
      this.accept(await this.api.query(sid, "patch", {
        ...this.payloadBase(), rect,
      }), "patch");
    } catch (err) {
      this.status(String(err));
    }
  }

  async clusterQuery(k: number): Promise<void> {
    const sid = this.sceneId();
    if (!sid) return;
    try {
      const resp = await this.api.query(sid, "cluster", {
        ...this.payloadBase(), k,
      });
      this.clusterRow.replaceChildren(
        ...(resp.clusters ?? []).map((c) => {
          const btn = el("button", { class: "swatch" },
                         `${c.cluster_id} (${c.size}px)`);
          btn.onclick = () => void this.pickCluster(k, c.cluster_id);
          return btn;
        }),
      );
      this.status("pick a cluster");
    } catch (err) {
      this.status(String(err));
    }
  }

  private async pickCluster(k: number, pick: number): Promise<void> {
    const sid = this.sceneId();
    if (!sid) return;
    try {
      this.accept(await this.api.query(sid, "cluster", {
        ...this.payloadBase(), k, pick,
      }), "cluster");
    } catch (err) {
      this.status(String(err));
    }
  }
}

const COLOR_MAPS: Record<string, { kind: string; color?: number[]; amount?: number }> = {
  "RGB -> BGR": { kind: "bgr" },
  Invert: { kind: "invert" },
  "Blend white": { kind: "blend", color: [1, 1, 1], amount: 0.5 },
};

export class EditPanel {
  root: HTMLElement;
  readonly stack = new EditStack();
  private stackList: HTMLElement;
  private tx: HTMLInputElement;
  private ty: HTMLInputElement;
  private tz: HTMLInputElement;
  private rotY: HTMLInputElement;
  private scale: HTMLInputElement;

  constructor(
    private readonly api: ApiClient,
    private readonly viewport: Viewport,
    private readonly sceneId: () => string | null,
    private readonly selectionId: () => string | null,
    private readonly status: (msg: string) => void,
  ) {
    this.root = el("div", { class: "panel" });
    this.root.appendChild(el("h3", {}, "Edit"));

    const recolorRow = el("div", { class: "row" });
    const mapSelect = el("select");
    mapSelect.replaceChildren(
      ...Object.keys(COLOR_MAPS).map((name) => el("option", { value: name }, name)),
    );
    const recolorBtn = el("button", {}, "Recolor");
    recolorBtn.onclick = () =>
      void this.apply("recolor", { color_map: COLOR_MAPS[mapSelect.value] });
    recolorRow.append(mapSelect, recolorBtn);
    this.root.appendChild(recolorRow);

    const opsRow = el("div", { class: "row" });
    const deleteBtn = el("button", {}, "Delete");
    deleteBtn.onclick = () => void this.apply("delete", {});
    const extractBtn = el("button", {}, "Extract");
    extractBtn.onclick = () => void this.apply("extract", {});
    opsRow.append(deleteBtn, extractBtn);
    this.root.appendChild(opsRow);

    const gizmo = el("div", { class: "row gizmo" });
    this.tx = el("input", { type: "number", step: "0.1", value: "0" });
    this.ty = el("input", { type: "number", step: "0.1", value: "0" });
    this.tz = el("input", { type: "number", step: "0.1", value: "0" });
    this.rotY = el("input", { type: "number", step: "5", value: "0" });
    this.scale = el("input", { type: "number", step: "0.1", value: "1" });
    const moveBtn = el("button", {}, "Transform");
    moveBtn.onclick = () => void this.apply("transform", {
      transform: this.transform(),
    });
    gizmo.append(
      el("span", {}, "t"), this.tx, this.ty, this.tz,
      el("span", {}, "rotY°"), this.rotY,
      el("span", {}, "s"), this.scale, moveBtn,
    );
    this.root.appendChild(gizmo);

    const stackRow = el("div", { class: "row" });
    const undoBtn = el("button", {}, "Undo");
    undoBtn.onclick = () => this.undo();
    const baseBtn = el("button", {}, "Show original");
    baseBtn.onclick = () => {
      this.viewport.showEdit(null);
      this.status("showing original scene");
    };
    stackRow.append(undoBtn, baseBtn);
    this.root.appendChild(stackRow);

    this.stackList = el("ul", { class: "stack" });
    this.root.appendChild(this.stackList);
  }

  transform(): Transform {
    const half = (Number(this.rotY.value) * Math.PI) / 360;
    return {
      quaternion: [Math.cos(half), 0, Math.sin(half), 0],
      translation: [Number(this.tx.value), Number(this.ty.value),
                    Number(this.tz.value)],
      scale: Number(this.scale.value) || 1,
    };
  }

  private renderStack(): void {
    this.stackList.replaceChildren(
      ...this.stack.list().map((e) =>
        el("li", {}, `${e.op} — ${e.label} [${e.editId}]`)),
    );
  }

  async apply(op: EditOp, params: Record<string, unknown>): Promise<void> {
    const sid = this.sceneId();
    const selection = this.selectionId();
    if (!sid || !selection) {
      this.status("make a selection first");
      return;
    }
    const base = this.stack.top();
    try {
      const resp = await this.api.createEdit(sid, selection, op, {
        ...params,
        ...(base ? { base_edit_id: base.editId } : {}),
      });
      this.stack.push({ editId: resp.edit_id, op, label: selection });
      this.renderStack();
      this.viewport.showEdit(resp.edit_id);
      this.status(`${op} applied`);
    } catch (err) {
      this.status(String(err));
    }
  }

  undo(): void {
    this.stack.undo();
    this.renderStack();
    const top = this.stack.top();
    this.viewport.showEdit(top ? top.editId : null);
    this.status(top ? `showing ${top.op}` : "showing original scene");
  }
}
