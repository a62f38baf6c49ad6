/** Prompt construction and wire-schema validation.
 *
 * Every request the client sends goes through buildPromptJson +
 * validatePromptJson, so a payload that violates the published schema can
 * never leave the app.
 */

import type { Box, PromptJson, PromptPoint } from "./types";

export class PromptSchemaError extends Error {}

export function buildPromptJson(points: PromptPoint[], box: Box | null): PromptJson | null {
  const out: PromptJson = {};
  if (box) {
    out.box = [box.x0, box.y0, box.x1, box.y1];
  }
  if (points.length > 0) {
    out.points = points.map((p) => ({ x: p.x, y: p.y, label: p.label }));
  }
  if (!out.box && !out.points) {
    return null; // no prompt elements -> no request
  }
  validatePromptJson(out);
  return out;
}

/** Throws PromptSchemaError unless obj matches the service's prompt schema:
 * {"box": [x0,y0,x1,y1]?, "points": [{"x","y","label":"fg"|"bg"}]?} with at
 * least one key, integer coordinates, and a non-degenerate box. */
export function validatePromptJson(obj: unknown): asserts obj is PromptJson {
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new PromptSchemaError("prompt must be an object");
  }
  const rec = obj as Record<string, unknown>;
  const keys = Object.keys(rec);
  if (!keys.every((k) => k === "box" || k === "points")) {
    throw new PromptSchemaError(`unknown prompt keys: ${keys.join(",")}`);
  }
  if (!("box" in rec) && !("points" in rec)) {
    throw new PromptSchemaError("prompt needs a box and/or points");
  }
  if ("box" in rec) {
    const box = rec.box;
    if (!Array.isArray(box) || box.length !== 4 || !box.every((v) => Number.isInteger(v))) {
      throw new PromptSchemaError("box must be four integers [x0,y0,x1,y1]");
    }
    const [x0, y0, x1, y1] = box as number[];
    if (!(x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1)) {
      throw new PromptSchemaError("box must satisfy 0 <= x0 < x1 and 0 <= y0 < y1");
    }
  }
  if ("points" in rec) {
    const points = rec.points;
    if (!Array.isArray(points) || points.length === 0) {
      throw new PromptSchemaError("points must be a nonempty list");
    }
    for (const p of points) {
      if (typeof p !== "object" || p === null) {
        throw new PromptSchemaError("point entries must be objects");
      }
      const q = p as Record<string, unknown>;
      if (!Number.isInteger(q.x) || !Number.isInteger(q.y)) {
        throw new PromptSchemaError("point coordinates must be integers");
      }
      if ((q.x as number) < 0 || (q.y as number) < 0) {
        throw new PromptSchemaError("point coordinates must be nonnegative");
      }
      if (q.label !== "fg" && q.label !== "bg") {
        throw new PromptSchemaError(`point label must be "fg" or "bg"`);
      }
    }
  }
}
