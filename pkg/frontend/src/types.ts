/**
 * Wire schemas for the featfield HTTP API.
 *
 * Every response the UI consumes is validated here, so a drift between the
 * server and this file fails the contract tests instead of corrupting state
 * silently. The UI renders only numbers that came out of these schemas.
 */

import { z } from "zod";

export const Pose = z.object({
  position: z.tuple([z.number(), z.number(), z.number()]),
  target: z.tuple([z.number(), z.number(), z.number()]),
  up: z.tuple([z.number(), z.number(), z.number()]).optional(),
  fov_deg: z.number().optional(),
});
export type Pose = z.infer<typeof Pose>;

export const SceneInfo = z.object({
  scene_id: z.string(),
  labels: z.array(z.string()),
  near: z.number(),
  far: z.number(),
  feature_dim: z.number(),
});
export type SceneInfo = z.infer<typeof SceneInfo>;

export const SceneList = z.object({
  scenes: z.array(z.object({ scene_id: z.string(), path: z.string() })),
});

export const LabelsResponse = z.object({ labels: z.array(z.string()) });

export const RenderResult = z.object({
  png_base64: z.string(),
  width: z.number(),
  height: z.number(),
  quality: z.string(),
  fmap_base64: z.string().optional(),
});
export type RenderResult = z.infer<typeof RenderResult>;

export const JobHandle = z.object({ job_id: z.string() });

export const JobStatus = z.object({
  status: z.enum(["running", "done", "error"]),
  result: RenderResult.nullable().optional(),
  error: z.string().nullable().optional(),
});

export const ClusterInfo = z.object({
  cluster_id: z.number(),
  size: z.number(),
});

export const QueryResponse = z.object({
  type: z.string(),
  selection_id: z.string().nullable(),
  tau: z.number().optional(),
  label: z.string().optional(),
  nearest_label: z.string().nullable().optional(),
  overlay_png_base64: z.string().optional(),
  clusters: z.array(ClusterInfo).optional(),
  assignment_png_base64: z.string().optional(),
});
export type QueryResponse = z.infer<typeof QueryResponse>;

export const EditResponse = z.object({
  edit_id: z.string(),
  op: z.string(),
});
export type EditResponse = z.infer<typeof EditResponse>;

export const HealthResponse = z.object({
  status: z.string(),
  version: z.string(),
});

export interface Transform {
  quaternion: [number, number, number, number];
  translation: [number, number, number];
  scale: number;
}

export type EditOp = "recolor" | "delete" | "extract" | "transform" | "warp";
