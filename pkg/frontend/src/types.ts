/** Shared types mirroring the service's wire formats. */

export type PointLabel = "fg" | "bg";

export interface PromptPoint {
  x: number;
  y: number;
  label: PointLabel;
}

/** Inclusive-exclusive pixel box, x is the column and y the row. */
export interface Box {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

/** The prompt wire format: at least one of box/points must be present. */
export interface PromptJson {
  box?: [number, number, number, number];
  points?: PromptPoint[];
}

export interface SegmentResponse {
  mask: string; // base64 PNG
  prob_png: string; // base64 PNG
  timing_ms: number;
  prompt_ignored: boolean;
}

export interface JobRecord {
  id: string;
  status: "queued" | "running" | "done" | "failed";
  n_images: number;
  n_done: number;
  progress: number;
  model_name: string;
  error: string | null;
  created_at: string;
  updated_at: string;
}

export interface ModelEntry {
  name: string;
  family: string;
  total_params: number;
  trainable_params: number;
  created_at: string;
}

export interface ScreeningItem {
  id: string;
  image_path: string;
  source: string;
  status: "pending" | "accepted" | "rejected";
  reviewer: string | null;
  decided_at: string | null;
}

export interface ApiErrorBody {
  code: string;
  message: string;
}
