/** DOM wiring for the three screens: interactive segmentation, batch
 * upload, and screening review. All decision logic lives in the imported
 * modules; this file only binds it to elements. */

import { ApiClient } from "./api";
import { BatchUploader, type NamedFile } from "./batch";
import { renderOverlay, thresholdGray } from "./overlay";
import { ScreeningReview } from "./screening";
import { CanvasSession, InteractiveSegmenter } from "./session";
import type { PointLabel } from "./types";

const api = new ApiClient("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function toast(message: string): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = message;
  box.classList.add("visible");
  setTimeout(() => box.classList.remove("visible"), 4000);
}

// ---------------------------------------------------------------------------
// tabs
// ---------------------------------------------------------------------------

for (const name of ["interactive", "batch", "screening"]) {
  el<HTMLButtonElement>(`tab-${name}`).addEventListener("click", () => {
    for (const other of ["interactive", "batch", "screening"]) {
      el(`panel-${other}`).hidden = other !== name;
      el(`tab-${other}`).classList.toggle("active", other === name);
    }
  });
}

// ---------------------------------------------------------------------------
// model selection
// ---------------------------------------------------------------------------

async function loadModels(): Promise<void> {
  try {
    const models = await api.models();
    for (const select of [el<HTMLSelectElement>("model"), el<HTMLSelectElement>("batch-model")]) {
      select.innerHTML = "";
      for (const m of models) {
        const opt = document.createElement("option");
        opt.value = m.name;
        opt.textContent = `${m.name} (${m.family}, ${m.total_params.toLocaleString()} params)`;
        select.appendChild(opt);
      }
    }
  } catch (err) {
    toast(`cannot load models: ${err instanceof Error ? err.message : err}`);
  }
}

// ---------------------------------------------------------------------------
// interactive segmentation
// ---------------------------------------------------------------------------

let session: CanvasSession | null = null;
let baseImage: ImageData | null = null;
let imageBlob: Blob | null = null;
let lastMask: Uint8Array | null = null;

const canvas = el<HTMLCanvasElement>("canvas");
const ctx = canvas.getContext("2d")!;

const segmenter = new InteractiveSegmenter(
  (prompt, signal) => api.segment(imageBlob!, el<HTMLSelectElement>("model").value, prompt, signal),
  {
    onResult: async (result) => {
      lastMask = await decodeMaskPng(result.mask);
      redraw();
      el("timing").textContent = `${result.timing_ms.toFixed(1)} ms` +
        (result.prompt_ignored ? " (model ignored the prompt)" : "");
    },
    onError: (err) => toast(`segment failed: ${err instanceof Error ? err.message : err}`),
  },
);

async function decodeMaskPng(b64: string): Promise<Uint8Array> {
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error("bad mask PNG"));
    img.src = `data:image/png;base64,${b64}`;
  });
  const off = document.createElement("canvas");
  off.width = img.width;
  off.height = img.height;
  const octx = off.getContext("2d")!;
  octx.drawImage(img, 0, 0);
  const data = octx.getImageData(0, 0, img.width, img.height).data;
  const gray = new Uint8Array(img.width * img.height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = data[i * 4];
  }
  return thresholdGray(gray);
}

function redraw(): void {
  if (!session || !baseImage) {
    return;
  }
  let pixels = baseImage.data;
  if (lastMask && lastMask.length * 4 === pixels.length) {
    pixels = renderOverlay(pixels, lastMask, session.overlayOpacity);
  }
  const frame = new Uint8ClampedArray(pixels.length); // fresh ArrayBuffer for ImageData
  frame.set(pixels);
  ctx.putImageData(new ImageData(frame, session.width, session.height), 0, 0);
  // prompt markers
  for (const p of session.points) {
    ctx.beginPath();
    ctx.arc(p.x, p.y, 3, 0, 2 * Math.PI);
    ctx.fillStyle = p.label === "fg" ? "#2ecc71" : "#e74c3c";
    ctx.fill();
  }
  if (session.box) {
    ctx.strokeStyle = "#f1c40f";
    ctx.lineWidth = 2;
    ctx.strokeRect(session.box.x0, session.box.y0,
                   session.box.x1 - session.box.x0, session.box.y1 - session.box.y0);
  }
}

function submitCurrentPrompt(): void {
  if (!session || !imageBlob) {
    return;
  }
  const prompt = session.promptJson();
  if (prompt) {
    segmenter.submit(prompt);
  }
}

el<HTMLInputElement>("image-file").addEventListener("change", async (e) => {
  const file = (e.target as HTMLInputElement).files?.[0];
  if (!file) {
    return;
  }
  imageBlob = file;
  const bitmap = await createImageBitmap(file);
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  ctx.drawImage(bitmap, 0, 0);
  baseImage = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  session = new CanvasSession(bitmap.width, bitmap.height);
  lastMask = null;
  redraw();
});

let dragStart: { x: number; y: number } | null = null;

function canvasXY(ev: MouseEvent): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  return {
    x: Math.floor(((ev.clientX - rect.left) / rect.width) * canvas.width),
    y: Math.floor(((ev.clientY - rect.top) / rect.height) * canvas.height),
  };
}

canvas.addEventListener("mousedown", (ev) => {
  dragStart = canvasXY(ev);
});

canvas.addEventListener("mouseup", (ev) => {
  if (!session || !dragStart) {
    return;
  }
  const end = canvasXY(ev);
  const dx = Math.abs(end.x - dragStart.x);
  const dy = Math.abs(end.y - dragStart.y);
  try {
    if (dx >= 4 && dy >= 4) {
      session.setBox({ x0: dragStart.x, y0: dragStart.y, x1: end.x, y1: end.y });
    } else {
      const label: PointLabel = ev.shiftKey ? "bg" : "fg"; // shift-click = background
      session.addPoint(end.x, end.y, label);
    }
    redraw();
    submitCurrentPrompt();
  } catch (err) {
    toast(String(err));
  }
  dragStart = null;
});

el<HTMLButtonElement>("undo").addEventListener("click", () => {
  if (session?.undo()) {
    redraw();
    submitCurrentPrompt();
  }
});

document.addEventListener("keydown", (ev) => {
  if ((ev.ctrlKey || ev.metaKey) && ev.key === "z" && session?.undo()) {
    redraw();
    submitCurrentPrompt();
  }
});

el<HTMLInputElement>("opacity").addEventListener("input", (e) => {
  if (session) {
    session.overlayOpacity = Number((e.target as HTMLInputElement).value) / 100;
    redraw();
  }
});

// ---------------------------------------------------------------------------
// batch upload
// ---------------------------------------------------------------------------

el<HTMLButtonElement>("upload").addEventListener("click", async () => {
  const input = el<HTMLInputElement>("batch-files");
  const files: NamedFile[] = Array.from(input.files ?? []).map((f) => ({
    name: f.name,
    size: f.size,
    blob: f,
  }));
  const uploader = new BatchUploader(api, el<HTMLSelectElement>("batch-model").value);
  uploader.onChange((view) => {
    el("batch-status").textContent = view.status;
    el<HTMLProgressElement>("batch-progress").value = view.progress;
    el("batch-count").textContent = `${view.nDone}/${view.nImages}`;
    for (const w of view.warnings) {
      toast(w);
    }
    const banner = el("batch-error");
    banner.hidden = !view.error;
    banner.textContent = view.error ?? "";
    const link = el<HTMLAnchorElement>("masks-link");
    link.hidden = !view.masksUrl;
    if (view.masksUrl) {
      link.href = view.masksUrl;
    }
  });
  await uploader.start(files);
});

// ---------------------------------------------------------------------------
// screening review
// ---------------------------------------------------------------------------

const review = new ScreeningReview(api, "web-reviewer");

function renderScreening(): void {
  const grid = el("screening-grid");
  grid.innerHTML = "";
  el("screening-empty").hidden = !review.isEmpty;
  review.items.forEach((item, idx) => {
    const card = document.createElement("div");
    card.className = "card" + (idx === review.focusedIndex ? " focused" : "");
    const img = document.createElement("img");
    img.src = `/api/screening/${item.id}/image`;
    img.alt = `${item.source} candidate ${item.id}`;
    const label = document.createElement("div");
    label.textContent = `${item.id} (${item.source})`;
    const accept = document.createElement("button");
    accept.textContent = "accept";
    accept.onclick = () => review.decide(item.id, "accepted").then(renderScreening);
    const reject = document.createElement("button");
    reject.textContent = "reject";
    reject.onclick = () => review.decide(item.id, "rejected").then(renderScreening);
    card.onclick = () => {
      review.focusedIndex = idx;
      renderScreening();
    };
    card.append(img, label, accept, reject);
    grid.appendChild(card);
  });
}

el<HTMLButtonElement>("screening-refresh").addEventListener("click", async () => {
  await review.load();
  renderScreening();
});

document.addEventListener("keydown", async (ev) => {
  if (!el("panel-screening").hidden && (ev.key === "a" || ev.key === "r")) {
    if (await review.key(ev.key)) {
      renderScreening();
    }
  }
});

// ---------------------------------------------------------------------------

void loadModels();
