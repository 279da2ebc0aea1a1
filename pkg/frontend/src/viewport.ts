/**
 * The render viewport: orbit/pan/zoom by mouse, debounced preview requests
 * with latest-wins semantics, and a full-quality render once the camera
 * settles.
 */

import { ApiClient } from "./api.js";
import {
  OrbitCamera,
  RenderScheduler,
  cameraPose,
  clampCamera,
  encodeHash,
} from "./state.js";

export type PixelHandler = (row: number, col: number) => void;
export type RectHandler = (rect: [number, number, number, number]) => void;

export class Viewport {
  camera: OrbitCamera;
  private scheduler: RenderScheduler;
  private sceneId: string | null = null;
  private editId: string | null = null;
  private overlay: HTMLImageElement | null = null;
  private dragStart: { x: number; y: number; cam: OrbitCamera } | null = null;
  private rectStart: { row: number; col: number } | null = null;
  onPixelClick: PixelHandler | null = null;
  onRectDrag: RectHandler | null = null;
  selectMode: "orbit" | "point" | "patch" = "orbit";
  size = 256;
  renderSize = 64;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly api: ApiClient,
    private readonly status: (msg: string) => void,
    initial: OrbitCamera,
  ) {
    this.camera = initial;
    this.scheduler = new RenderScheduler(
      (gen) => void this.preview(gen),
      () => void this.fullRender(),
    );
    canvas.width = this.size;
    canvas.height = this.size;
    this.bindMouse();
  }

  attachScene(sceneId: string): void {
    this.sceneId = sceneId;
    this.editId = null;
    this.refresh();
  }

  showEdit(editId: string | null): void {
    this.editId = editId;
    this.refresh();
  }

  setOverlay(pngBase64: string | null): void {
    if (!pngBase64) {
      this.overlay = null;
      this.refresh();
      return;
    }
    const img = new Image();
    img.onload = () => {
      this.overlay = img;
      this.refresh();
    };
    img.src = `data:image/png;base64,${pngBase64}`;
  }

  refresh(): void {
    window.location.hash = encodeHash(this.camera);
    this.scheduler.poke();
  }

  pose() {
    return cameraPose(this.camera);
  }

  private renderOpts() {
    return { width: this.renderSize, height: this.renderSize };
  }

  private async preview(generation: number): Promise<void> {
    if (!this.sceneId) return;
    try {
      const result = this.editId
        ? await this.api.renderEditPreview(this.editId, this.pose(), this.renderOpts())
        : await this.api.renderPreview(this.sceneId, this.pose(), this.renderOpts());
      if (this.scheduler.isCurrent(generation)) {
        this.draw(result.png_base64, "preview");
      }
    } catch (err) {
      this.status(`preview failed: ${String(err)}`);
    }
  }

  private async fullRender(): Promise<void> {
    if (!this.sceneId) return;
    const generation = 0; // full renders always replace the settled view
    void generation;
    this.status("rendering full quality…");
    try {
      const result = this.editId
        ? await this.api.renderEditFull(this.editId, this.pose(), this.renderOpts())
        : await this.api.renderFull(this.sceneId, this.pose(), this.renderOpts());
      this.draw(result.png_base64, "full");
      this.status("ready");
    } catch (err) {
      this.status(`render failed: ${String(err)}`);
    }
  }

  private draw(pngBase64: string, quality: string): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const img = new Image();
    img.onload = () => {
      ctx.imageSmoothingEnabled = quality === "preview";
      ctx.clearRect(0, 0, this.size, this.size);
      ctx.drawImage(img, 0, 0, this.size, this.size);
      if (this.overlay) {
        ctx.drawImage(this.overlay, 0, 0, this.size, this.size);
      }
    };
    img.src = `data:image/png;base64,${pngBase64}`;
  }

  private pixelOf(ev: MouseEvent): { row: number; col: number } {
    const rect = this.canvas.getBoundingClientRect();
    const scale = this.renderSize / rect.width;
    return {
      row: Math.max(0, Math.min(this.renderSize - 1,
        Math.floor((ev.clientY - rect.top) * scale))),
      col: Math.max(0, Math.min(this.renderSize - 1,
        Math.floor((ev.clientX - rect.left) * scale))),
    };
  }

  private bindMouse(): void {
    this.canvas.addEventListener("mousedown", (ev) => {
      if (this.selectMode === "patch") {
        this.rectStart = this.pixelOf(ev);
        return;
      }
      this.dragStart = { x: ev.clientX, y: ev.clientY, cam: { ...this.camera } };
    });
    window.addEventListener("mousemove", (ev) => {
      if (!this.dragStart || this.selectMode !== "orbit") return;
      const dx = ev.clientX - this.dragStart.x;
      const dy = ev.clientY - this.dragStart.y;
      this.camera = clampCamera({
        ...this.dragStart.cam,
        azimuthDeg: this.dragStart.cam.azimuthDeg + dx * 0.5,
        elevationDeg: this.dragStart.cam.elevationDeg + dy * 0.5,
      });
      this.refresh();
    });
    window.addEventListener("mouseup", (ev) => {
      if (this.rectStart && this.selectMode === "patch") {
        const end = this.pixelOf(ev as MouseEvent);
        const rect: [number, number, number, number] = [
          Math.min(this.rectStart.row, end.row),
          Math.min(this.rectStart.col, end.col),
          Math.max(this.rectStart.row, end.row) + 1,
          Math.max(this.rectStart.col, end.col) + 1,
        ];
        this.rectStart = null;
        this.onRectDrag?.(rect);
        return;
      }
      if (this.dragStart && this.selectMode === "point") {
        const { row, col } = this.pixelOf(ev as MouseEvent);
        this.onPixelClick?.(row, col);
      }
      this.dragStart = null;
    });
    this.canvas.addEventListener("click", (ev) => {
      if (this.selectMode === "point") {
        const { row, col } = this.pixelOf(ev);
        this.onPixelClick?.(row, col);
      }
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.camera = clampCamera({
        ...this.camera,
        radius: this.camera.radius * (ev.deltaY > 0 ? 1.1 : 0.9),
      });
      this.refresh();
    });
  }
}
