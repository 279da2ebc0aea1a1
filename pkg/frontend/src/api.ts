/**
 * Typed client for the featfield service. Every response is parsed through
 * the zod schemas in types.ts before the rest of the UI may touch it.
 */

import {
  EditOp,
  EditResponse,
  HealthResponse,
  JobHandle,
  JobStatus,
  LabelsResponse,
  Pose,
  QueryResponse,
  RenderResult,
  SceneInfo,
  SceneList,
  Transform,
} from "./types.js";

export interface RenderOptions {
  width: number;
  height: number;
  channels?: string[];
  seed?: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function asJson(resp: Response): Promise<unknown> {
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    const detail = (body as { error?: string }).error ?? resp.statusText;
    throw new ApiError(resp.status, detail);
  }
  return body;
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetcher: typeof fetch = fetch,
  ) {}

  private async get(path: string): Promise<unknown> {
    return asJson(await this.fetcher(this.base + path));
  }

  private async post(path: string, body: unknown): Promise<unknown> {
    return asJson(
      await this.fetcher(this.base + path, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
    );
  }

  async health() {
    return HealthResponse.parse(await this.get("/healthz"));
  }

  async loadScene(checkpoint: string, requestId?: string) {
    return SceneInfo.parse(
      await this.post("/scenes", { checkpoint, request_id: requestId }),
    );
  }

  async scenes() {
    return SceneList.parse(await this.get("/scenes"));
  }

  async labels(sceneId: string) {
    return LabelsResponse.parse(await this.get(`/scenes/${sceneId}/labels`))
      .labels;
  }

  async renderPreview(sceneId: string, pose: Pose, opts: RenderOptions) {
    return RenderResult.parse(
      await this.post(`/scenes/${sceneId}/render`, {
        pose,
        quality: "preview",
        ...opts,
      }),
    );
  }

  async renderFull(
    sceneId: string,
    pose: Pose,
    opts: RenderOptions,
    pollMs = 150,
  ): Promise<RenderResult> {
    const handle = JobHandle.parse(
      await this.post(`/scenes/${sceneId}/render`, {
        pose,
        quality: "full",
        ...opts,
      }),
    );
    return this.awaitJob(handle.job_id, pollMs);
  }

  async awaitJob(jobId: string, pollMs = 150): Promise<RenderResult> {
    for (;;) {
      const status = JobStatus.parse(await this.get(`/jobs/${jobId}`));
      if (status.status === "done" && status.result) {
        return RenderResult.parse(status.result);
      }
      if (status.status === "error") {
        throw new ApiError(500, status.error ?? "render job failed");
      }
      await new Promise((resolve) => setTimeout(resolve, pollMs));
    }
  }

  async query(
    sceneId: string,
    type: "text" | "patch" | "point" | "cluster",
    payload: Record<string, unknown>,
    requestId?: string,
  ) {
    return QueryResponse.parse(
      await this.post(`/scenes/${sceneId}/query`, {
        type,
        payload,
        request_id: requestId,
      }),
    );
  }

  async createEdit(
    sceneId: string,
    selectionId: string,
    op: EditOp,
    params: {
      color_map?: { kind: string; color?: number[]; amount?: number };
      transform?: Transform;
      compositor?: string;
      base_edit_id?: string;
      target_scene_id?: string;
    },
    requestId?: string,
  ) {
    return EditResponse.parse(
      await this.post(`/scenes/${sceneId}/edits`, {
        selection_id: selectionId,
        op,
        params,
        request_id: requestId,
      }),
    );
  }

  async renderEditPreview(editId: string, pose: Pose, opts: RenderOptions) {
    return RenderResult.parse(
      await this.post(`/edits/${editId}/render`, {
        pose,
        quality: "preview",
        ...opts,
      }),
    );
  }

  async renderEditFull(editId: string, pose: Pose, opts: RenderOptions) {
    const handle = JobHandle.parse(
      await this.post(`/edits/${editId}/render`, {
        pose,
        quality: "full",
        ...opts,
      }),
    );
    return this.awaitJob(handle.job_id);
  }
}
