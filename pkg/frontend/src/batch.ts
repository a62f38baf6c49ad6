/** Batch upload with 1 s progress polling against the jobs API. */

import type { ApiClient } from "./api";
import type { JobRecord } from "./types";

export interface BatchView {
  jobId: string | null;
  status: "idle" | "uploading" | JobRecord["status"];
  progress: number; // server-reported n_done / n_images
  nDone: number;
  nImages: number;
  error: string | null;
  masksUrl: string | null;
  warnings: string[];
}

export interface NamedFile {
  name: string;
  size: number;
  blob: Blob;
}

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class BatchUploader {
  readonly pollIntervalMs: number;
  private listeners: ((view: BatchView) => void)[] = [];
  view: BatchView = {
    jobId: null,
    status: "idle",
    progress: 0,
    nDone: 0,
    nImages: 0,
    error: null,
    masksUrl: null,
    warnings: [],
  };

  constructor(
    private api: ApiClient,
    private model: string,
    private maxUploadBytes = 8 * 1024 * 1024,
    pollIntervalMs = 1000,
  ) {
    this.pollIntervalMs = pollIntervalMs;
  }

  onChange(listener: (view: BatchView) => void): void {
    this.listeners.push(listener);
  }

  private emit(changes: Partial<BatchView>): void {
    this.view = { ...this.view, ...changes };
    for (const l of this.listeners) {
      l(this.view);
    }
  }

  /** Size check before any bytes leave the browser. */
  sizeWarnings(files: NamedFile[]): string[] {
    return files
      .filter((f) => f.size > this.maxUploadBytes)
      .map((f) => `${f.name} is ${f.size} bytes, over the ${this.maxUploadBytes} byte limit`);
  }

  async start(files: NamedFile[]): Promise<BatchView> {
    if (files.length === 0) {
      this.emit({ status: "failed", error: "no files selected" });
      return this.view;
    }
    const warnings = this.sizeWarnings(files);
    const sendable = files.filter((f) => f.size <= this.maxUploadBytes);
    if (sendable.length === 0) {
      this.emit({ status: "failed", warnings, error: "every file exceeds the size limit" });
      return this.view;
    }
    this.emit({ status: "uploading", warnings, nImages: sendable.length, progress: 0 });
    let jobId: string;
    try {
      jobId = await this.api.createJob(
        sendable.map((f) => ({ name: f.name, blob: f.blob })),
        this.model,
      );
    } catch (err) {
      this.emit({ status: "failed", error: err instanceof Error ? err.message : String(err) });
      return this.view;
    }
    this.emit({ jobId, status: "queued" });
    return this.poll(jobId);
  }

  private async poll(jobId: string): Promise<BatchView> {
    for (;;) {
      let rec: JobRecord;
      try {
        rec = await this.api.getJob(jobId);
      } catch (err) {
        this.emit({ status: "failed", error: err instanceof Error ? err.message : String(err) });
        return this.view;
      }
      this.emit({
        status: rec.status,
        progress: rec.n_images ? rec.n_done / rec.n_images : 0,
        nDone: rec.n_done,
        nImages: rec.n_images,
      });
      if (rec.status === "done") {
        this.emit({ masksUrl: this.api.masksUrl(jobId) });
        return this.view;
      }
      if (rec.status === "failed") {
        this.emit({ error: rec.error ?? "job failed" });
        return this.view;
      }
      await sleep(this.pollIntervalMs);
    }
  }
}
