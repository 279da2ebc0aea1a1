/**
 * Client-side view state: the orbit camera, the edit stack, and URL-hash
 * serialization. No scene math lives here beyond turning orbit angles into
 * the pose the server consumes.
 */

import type { Pose } from "./types.js";

export interface OrbitCamera {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: [number, number, number];
  fovDeg: number;
}

export const DEFAULT_CAMERA: OrbitCamera = {
  azimuthDeg: 30,
  elevationDeg: 28,
  radius: 4.0,
  target: [0, 0, 0],
  fovDeg: 48,
};

export function clampCamera(cam: OrbitCamera): OrbitCamera {
  return {
    ...cam,
    elevationDeg: Math.max(-89, Math.min(89, cam.elevationDeg)),
    radius: Math.max(0.25, cam.radius),
    azimuthDeg: ((cam.azimuthDeg % 360) + 360) % 360,
  };
}

export function cameraPose(cam: OrbitCamera): Pose {
  const az = (cam.azimuthDeg * Math.PI) / 180;
  const el = (cam.elevationDeg * Math.PI) / 180;
  const [tx, ty, tz] = cam.target;
  return {
    position: [
      tx + cam.radius * Math.cos(el) * Math.cos(az),
      ty + cam.radius * Math.sin(el),
      tz + cam.radius * Math.cos(el) * Math.sin(az),
    ],
    target: cam.target,
    up: [0, 1, 0],
    fov_deg: cam.fovDeg,
  };
}

const HASH_KEYS = ["az", "el", "r", "tx", "ty", "tz", "fov"] as const;

export function encodeHash(cam: OrbitCamera): string {
  const vals = [cam.azimuthDeg, cam.elevationDeg, cam.radius,
                cam.target[0], cam.target[1], cam.target[2], cam.fovDeg];
  return HASH_KEYS.map((k, i) => `${k}=${vals[i].toFixed(3)}`).join("&");
}

export function decodeHash(hash: string): OrbitCamera | null {
  const clean = hash.startsWith("#") ? hash.slice(1) : hash;
  if (!clean) return null;
  const parts = new Map(
    clean.split("&").map((kv) => kv.split("=") as [string, string]),
  );
  if (!HASH_KEYS.every((k) => parts.has(k))) return null;
  const num = (k: string) => Number(parts.get(k));
  if (HASH_KEYS.some((k) => !Number.isFinite(num(k)))) return null;
  return clampCamera({
    azimuthDeg: num("az"),
    elevationDeg: num("el"),
    radius: num("r"),
    target: [num("tx"), num("ty"), num("tz")],
    fovDeg: num("fov"),
  });
}

export interface EditEntry {
  editId: string;
  op: string;
  label: string;
}

/** Named, undoable stack of applied edits; the newest entry is rendered. */
export class EditStack {
  private entries: EditEntry[] = [];

  push(entry: EditEntry): void {
    this.entries.push(entry);
  }

  undo(): EditEntry | undefined {
    return this.entries.pop();
  }

  top(): EditEntry | undefined {
    return this.entries[this.entries.length - 1];
  }

  list(): readonly EditEntry[] {
    return this.entries;
  }

  get size(): number {
    return this.entries.length;
  }
}

/**
 * Latest-wins scheduling for preview renders plus a settle timer that fires
 * the full-quality render. Timer plumbing is injectable so tests can drive
 * it synchronously.
 */
export class RenderScheduler {
  private generation = 0;
  private settleHandle: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly onPreview: (generation: number) => void,
    private readonly onSettle: () => void,
    private readonly settleMs = 500,
    private readonly timers: {
      set: typeof setTimeout;
      clear: typeof clearTimeout;
    } = { set: setTimeout, clear: clearTimeout },
  ) {}

  /** Call on every camera change. */
  poke(): number {
    this.generation += 1;
    const gen = this.generation;
    this.onPreview(gen);
    if (this.settleHandle !== null) this.timers.clear(this.settleHandle);
    this.settleHandle = this.timers.set(() => {
      this.settleHandle = null;
      this.onSettle();
    }, this.settleMs);
    return gen;
  }

  /** A preview response is stale if a newer poke happened since. */
  isCurrent(generation: number): boolean {
    return generation === this.generation;
  }
}
