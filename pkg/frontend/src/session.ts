/** Interactive segmentation session state: prompt editing with an undo
 * stack, and the request sequencer that sends exactly one API call per edit
 * and drops stale responses. */

import { buildPromptJson, validatePromptJson } from "./prompts";
import type { Box, PointLabel, PromptJson, PromptPoint, SegmentResponse } from "./types";

export interface PromptSnapshot {
  points: PromptPoint[];
  box: Box | null;
}

export class CanvasSession {
  points: PromptPoint[] = [];
  box: Box | null = null;
  overlayOpacity = 0.5;
  maskPng: string | null = null; // base64 PNG of the current overlay
  private undoStack: PromptSnapshot[] = [];

  constructor(
    public readonly width: number,
    public readonly height: number,
  ) {}

  private snapshot(): PromptSnapshot {
    return {
      points: this.points.map((p) => ({ ...p })),
      box: this.box ? { ...this.box } : null,
    };
  }

  private push(): void {
    this.undoStack.push(this.snapshot());
  }

  addPoint(x: number, y: number, label: PointLabel): void {
    if (!(Number.isInteger(x) && Number.isInteger(y))) {
      throw new RangeError("point coordinates must be integers");
    }
    if (x < 0 || y < 0 || x >= this.width || y >= this.height) {
      throw new RangeError(`point (${x},${y}) outside ${this.width}x${this.height}`);
    }
    this.push();
    this.points.push({ x, y, label });
  }

  setBox(box: Box): void {
    const clipped: Box = {
      x0: Math.max(0, Math.min(box.x0, box.x1)),
      y0: Math.max(0, Math.min(box.y0, box.y1)),
      x1: Math.min(this.width, Math.max(box.x0, box.x1)),
      y1: Math.min(this.height, Math.max(box.y0, box.y1)),
    };
    if (clipped.x0 >= clipped.x1 || clipped.y0 >= clipped.y1) {
      throw new RangeError("box is degenerate after clipping");
    }
    this.push();
    this.box = clipped;
  }

  clearBox(): void {
    if (this.box) {
      this.push();
      this.box = null;
    }
  }

  removeLastPoint(): void {
    if (this.points.length > 0) {
      this.push();
      this.points.pop();
    }
  }

  /** Restore the exact prompt set that preceded the last edit. */
  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) {
      return false;
    }
    this.points = prev.points;
    this.box = prev.box;
    return true;
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  hasPrompt(): boolean {
    return this.points.length > 0 || this.box !== null;
  }

  promptJson(): PromptJson | null {
    return buildPromptJson(this.points, this.box);
  }
}

export type SegmentSender = (
  prompt: PromptJson,
  signal?: AbortSignal,
) => Promise<SegmentResponse>;

export interface SegmenterCallbacks {
  onResult: (result: SegmentResponse, requestId: number) => void;
  /** Non-blocking error surface; session state is untouched. */
  onError: (error: unknown) => void;
}

function isAbortError(err: unknown): boolean {
  return err instanceof Error && err.name === "AbortError";
}

/** One request per prompt edit; a response only lands if no newer edit has
 * been submitted since (the prior in-flight request is also aborted, so at
 * most one request is outstanding). */
export class InteractiveSegmenter {
  requestsSent = 0;
  private seq = 0;
  private controller: AbortController | null = null;

  constructor(
    private send: SegmentSender,
    private callbacks: SegmenterCallbacks,
  ) {}

  submit(prompt: PromptJson): number {
    validatePromptJson(prompt);
    const id = ++this.seq;
    this.controller?.abort();
    this.controller = new AbortController();
    this.requestsSent += 1;
    this.send(prompt, this.controller.signal).then(
      (result) => {
        if (id === this.seq) {
          this.callbacks.onResult(result, id);
        } // else: stale response, dropped
      },
      (err) => {
        if (id === this.seq && !isAbortError(err)) {
          this.callbacks.onError(err);
        }
      },
    );
    return id;
  }
}
