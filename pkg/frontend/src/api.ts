/** Thin typed client for the segmentation service HTTP API. */

import type {
  ApiErrorBody,
  JobRecord,
  ModelEntry,
  PromptJson,
  ScreeningItem,
  SegmentResponse,
} from "./types";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function toError(resp: Response): Promise<ApiError> {
  let body: Partial<ApiErrorBody> = {};
  try {
    body = (await resp.json()) as ApiErrorBody;
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ApiError(resp.status, body.code ?? "unknown", body.message ?? resp.statusText);
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async json<T>(resp: Response): Promise<T> {
    if (!resp.ok) {
      throw await toError(resp);
    }
    return (await resp.json()) as T;
  }

  async health(): Promise<{ status: string; version: string }> {
    return this.json(await this.fetchFn(`${this.baseUrl}/api/health`));
  }

  async models(): Promise<ModelEntry[]> {
    const body = await this.json<{ models: ModelEntry[] }>(
      await this.fetchFn(`${this.baseUrl}/api/models`),
    );
    return body.models;
  }

  async segment(
    image: Blob,
    model: string,
    prompt: PromptJson | null,
    signal?: AbortSignal,
  ): Promise<SegmentResponse> {
    const form = new FormData();
    form.append("image", image, "image.png");
    form.append("model", model);
    if (prompt) {
      form.append("prompt", JSON.stringify(prompt));
    }
    const resp = await this.fetchFn(`${this.baseUrl}/api/segment`, {
      method: "POST",
      body: form,
      signal,
    });
    return this.json(resp);
  }

  async createJob(files: { name: string; blob: Blob }[], model: string): Promise<string> {
    const form = new FormData();
    for (const f of files) {
      form.append("images", f.blob, f.name);
    }
    form.append("model", model);
    const body = await this.json<{ job_id: string }>(
      await this.fetchFn(`${this.baseUrl}/api/jobs`, { method: "POST", body: form }),
    );
    return body.job_id;
  }

  async getJob(jobId: string): Promise<JobRecord> {
    return this.json(await this.fetchFn(`${this.baseUrl}/api/jobs/${jobId}`));
  }

  masksUrl(jobId: string): string {
    return `${this.baseUrl}/api/jobs/${jobId}/masks`;
  }

  async screeningPending(): Promise<ScreeningItem[]> {
    const body = await this.json<{ items: ScreeningItem[] }>(
      await this.fetchFn(`${this.baseUrl}/api/screening/pending`),
    );
    return body.items;
  }

  async screeningDecide(
    itemId: string,
    verdict: "accepted" | "rejected",
    reviewer: string,
  ): Promise<ScreeningItem> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/screening/${itemId}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ verdict, reviewer }),
    });
    return this.json(resp);
  }
}
