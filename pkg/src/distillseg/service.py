"""Batch/interactive segmentation service: model registry, on-disk job store,
and the HTTP API.

Jobs live one-directory-per-job (record.json + inputs/ + outputs/) with
atomic record writes, so a crash mid-job can never leave a corrupt record;
on restart, running jobs become failed and queued jobs are re-enqueued.
"""

from __future__ import annotations

import base64
import io
import json
import queue as queue_mod
import threading
import time
import uuid
import zipfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from starlette.datastructures import UploadFile
from PIL import Image, UnidentifiedImageError

from . import __version__
from .augment import ScreeningQueue
from .checkpoint import load_model
from .distill import infer
from .errors import ConfigurationError, StateTransitionError
from .imaging import RasterImage
from .nets import count_params
from .prompts import prompt_from_json

DEFAULT_MAX_UPLOAD = 8 * 1024 * 1024


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def decode_upload(data: bytes) -> RasterImage:
    """Decode uploaded PNG/JPEG bytes into a RasterImage."""
    with Image.open(io.BytesIO(data)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return RasterImage(arr)


def _png_bytes(array_u8: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array_u8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# model registry
# ---------------------------------------------------------------------------

@dataclass
class ModelRegistryEntry:
    name: str
    path: str
    family: str
    total_params: int
    trainable_params: int
    created_at: str


class ModelRegistry:
    """Loads checkpoints from a directory; model instances are cached and
    inference is serialized per model (feature caches are not re-entrant)."""

    def __init__(self, models_dir):
        self.models_dir = Path(models_dir)
        if not self.models_dir.is_dir():
            raise ConfigurationError(f"models directory {self.models_dir} does not exist")
        self._models: dict[str, object] = {}
        self._locks: dict[str, threading.Lock] = {}
        self.entries: dict[str, ModelRegistryEntry] = {}
        for path in sorted(self.models_dir.glob("*.ckpt")):
            name = path.stem
            model = load_model(path)
            pc = count_params(model)
            self._models[name] = model
            self._locks[name] = threading.Lock()
            self.entries[name] = ModelRegistryEntry(
                name=name,
                path=str(path),
                family=model.family,
                total_params=pc.total,
                trainable_params=pc.trainable,
                created_at=datetime.fromtimestamp(
                    path.stat().st_mtime, tz=timezone.utc
                ).isoformat(timespec="seconds"),
            )
        if not self.entries:
            raise ConfigurationError(
                f"models directory {self.models_dir} contains no .ckpt checkpoints"
            )

    def __contains__(self, name: str) -> bool:
        return name in self._models

    def names(self) -> list[str]:
        return sorted(self._models)

    def predict(self, name: str, image: RasterImage, prompt=None, threshold: float = 0.5):
        model = self._models[name]
        with self._locks[name]:
            return infer(model, image, prompt=prompt, threshold=threshold)


# ---------------------------------------------------------------------------
# job store
# ---------------------------------------------------------------------------

JOB_STATUSES = ("queued", "running", "done", "failed")


@dataclass
class JobRecord:
    id: str
    status: str
    n_images: int
    n_done: int
    created_at: str
    updated_at: str
    model_name: str
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["progress"] = self.n_done / self.n_images if self.n_images else 0.0
        return d


class JobStore:
    """Directory-per-job persistence with atomic record writes."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.recovered: list[str] = []
        for record_path in self.root.glob("*/record.json"):
            rec = self._read(record_path)
            if rec is None:
                continue
            if rec.status == "running":
                rec.status = "failed"
                rec.error = "interrupted by service restart"
                rec.updated_at = _now()
                self._write(rec)
                self.recovered.append(rec.id)

    def _dir(self, job_id: str) -> Path:
        return self.root / job_id

    def _read(self, record_path: Path) -> JobRecord | None:
        try:
            return JobRecord(**json.loads(record_path.read_text()))
        except (json.JSONDecodeError, TypeError):
            return None

    def _write(self, rec: JobRecord) -> None:
        path = self._dir(rec.id) / "record.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(rec), sort_keys=True, indent=1))
        tmp.replace(path)

    def create(self, model_name: str, images: list[tuple[str, bytes]]) -> JobRecord:
        job_id = uuid.uuid4().hex[:12]
        job_dir = self._dir(job_id)
        (job_dir / "inputs").mkdir(parents=True)
        (job_dir / "outputs").mkdir()
        for filename, data in images:
            (job_dir / "inputs" / filename).write_bytes(data)
        now = _now()
        rec = JobRecord(id=job_id, status="queued", n_images=len(images), n_done=0,
                        created_at=now, updated_at=now, model_name=model_name)
        self._write(rec)
        return rec

    def get(self, job_id: str) -> JobRecord | None:
        path = self._dir(job_id) / "record.json"
        if not path.exists():
            return None
        return self._read(path)

    def queued_ids(self) -> list[str]:
        out = []
        for record_path in sorted(self.root.glob("*/record.json")):
            rec = self._read(record_path)
            if rec is not None and rec.status == "queued":
                out.append(rec.id)
        return out

    def update(self, job_id: str, **changes) -> JobRecord:
        with self._lock:
            rec = self.get(job_id)
            if rec is None:
                raise KeyError(job_id)
            if rec.status in ("done", "failed"):
                raise StateTransitionError(f"job {job_id} is terminal ({rec.status})")
            for key, value in changes.items():
                setattr(rec, key, value)
            if rec.n_done > rec.n_images:
                raise ValueError("n_done exceeded n_images")
            rec.updated_at = _now()
            self._write(rec)
            return rec

    def inputs(self, job_id: str) -> list[Path]:
        return sorted((self._dir(job_id) / "inputs").iterdir())

    def output_dir(self, job_id: str) -> Path:
        return self._dir(job_id) / "outputs"

    def masks_zip(self, job_id: str) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for path in sorted(self.output_dir(job_id).iterdir()):
                zf.writestr(path.name, path.read_bytes())
        return buf.getvalue()


class JobWorker:
    """Single background thread executing jobs sequentially."""

    def __init__(self, store: JobStore, registry: ModelRegistry):
        self.store = store
        self.registry = registry
        self._queue: queue_mod.Queue[str] = queue_mod.Queue()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        for job_id in store.queued_ids():
            self._queue.put(job_id)

    def submit(self, job_id: str) -> None:
        self._queue.put(job_id)

    def _loop(self) -> None:
        while True:
            job_id = self._queue.get()
            try:
                self._run(job_id)
            except Exception as exc:  # job must never kill the worker
                try:
                    self.store.update(job_id, status="failed", error=str(exc))
                except Exception:
                    pass

    def _run(self, job_id: str) -> None:
        rec = self.store.get(job_id)
        if rec is None or rec.status != "queued":
            return
        self.store.update(job_id, status="running")
        out_dir = self.store.output_dir(job_id)
        done = 0
        for path in self.store.inputs(job_id):
            image = decode_upload(path.read_bytes())
            result = self.registry.predict(rec.model_name, image)
            mask_png = _png_bytes((result.mask.data * 255).astype(np.uint8), "L")
            (out_dir / f"{path.stem}.png").write_bytes(mask_png)
            done += 1
            self.store.update(job_id, n_done=done)
        self.store.update(job_id, status="done")


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    models_dir: str
    jobs_dir: str
    queue_dir: str
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD
    token: str | None = None
    worker_count: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        return cls(**data)


def create_app(cfg: ServiceConfig):
    """Build the FastAPI app; raises ConfigurationError when the models
    directory is missing or empty."""
    registry = ModelRegistry(cfg.models_dir)
    store = JobStore(cfg.jobs_dir)
    workers = [JobWorker(store, registry) for _ in range(max(1, cfg.worker_count))]
    screening = ScreeningQueue(cfg.queue_dir)

    app = FastAPI(title="distillseg", version=__version__)
    app.state.registry = registry
    app.state.store = store
    app.state.screening = screening

    def err(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"code": code, "message": message})

    @app.middleware("http")
    async def auth_middleware(request: Request, call_next):
        if cfg.token and request.url.path.startswith("/api/") \
                and request.url.path != "/api/health":
            if request.headers.get("x-auth-token") != cfg.token:
                return err(401, "unauthorized", "missing or invalid X-Auth-Token header")
        return await call_next(request)

    @app.get("/api/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/api/models")
    def models():
        return {"models": [asdict(registry.entries[n]) for n in registry.names()]}

    @app.post("/api/jobs")
    async def create_job(request: Request):
        form = await request.form()
        model_name = form.get("model")
        if not model_name or model_name not in registry:
            return err(404, "model_not_found", f"unknown model {model_name!r}")
        uploads = [v for v in form.getlist("images") if isinstance(v, UploadFile)]
        if not uploads:
            return err(400, "no_images", "at least one image file is required")
        images = []
        for i, up in enumerate(uploads):
            data = await up.read()
            if len(data) > cfg.max_upload_bytes:
                return err(413, "payload_too_large",
                           f"{up.filename} exceeds {cfg.max_upload_bytes} bytes")
            try:
                decode_upload(data)
            except (UnidentifiedImageError, OSError, ValueError):
                return err(422, "undecodable_image", f"cannot decode {up.filename}")
            name = Path(up.filename or f"image_{i}.png").name
            images.append((f"{i:04d}_{name}", data))
        rec = store.create(model_name, images)
        workers[0].submit(rec.id)
        return {"job_id": rec.id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        rec = store.get(job_id)
        if rec is None:
            return err(404, "job_not_found", f"no job {job_id!r}")
        return rec.to_dict()

    @app.get("/api/jobs/{job_id}/masks")
    def get_masks(job_id: str):
        rec = store.get(job_id)
        if rec is None:
            return err(404, "job_not_found", f"no job {job_id!r}")
        if rec.status != "done":
            return err(409, "job_not_done", f"job is {rec.status}; masks need status done")
        return Response(content=store.masks_zip(job_id), media_type="application/zip")

    @app.post("/api/segment")
    async def segment(request: Request):
        form = await request.form()
        model_name = form.get("model")
        if not model_name or model_name not in registry:
            return err(404, "model_not_found", f"unknown model {model_name!r}")
        upload = form.get("image")
        if upload is None or not isinstance(upload, UploadFile):
            return err(400, "no_image", "an 'image' file field is required")
        data = await upload.read()
        if len(data) > cfg.max_upload_bytes:
            return err(413, "payload_too_large",
                       f"image exceeds {cfg.max_upload_bytes} bytes")
        try:
            image = decode_upload(data)
        except (UnidentifiedImageError, OSError, ValueError):
            return err(422, "undecodable_image", "cannot decode the uploaded image")
        prompt = None
        raw_prompt = form.get("prompt")
        if raw_prompt:
            try:
                prompt = prompt_from_json(json.loads(raw_prompt),
                                          width=image.width, height=image.height)
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                return err(400, "bad_prompt", f"malformed prompt JSON: {exc}")
        t0 = time.perf_counter()
        result = registry.predict(model_name, image, prompt=prompt)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        mask_png = _png_bytes((result.mask.data * 255).astype(np.uint8), "L")
        prob_png = _png_bytes(
            np.clip(np.rint(result.prob.data * 255.0), 0, 255).astype(np.uint8), "L"
        )
        return {
            "mask": base64.b64encode(mask_png).decode(),
            "prob_png": base64.b64encode(prob_png).decode(),
            "timing_ms": elapsed_ms,
            "prompt_ignored": result.prompt_ignored,
        }

    @app.get("/api/screening/pending")
    def screening_pending():
        return {"items": [it.to_dict() for it in screening.pending()]}

    @app.get("/api/screening/{item_id}/image")
    def screening_image(item_id: str):
        try:
            item = screening.get(item_id)
        except KeyError:
            return err(404, "item_not_found", f"no screening item {item_id!r}")
        data = (screening.root / item.image_path).read_bytes()
        return Response(content=data, media_type="image/png")

    @app.post("/api/screening/{item_id}/decision")
    async def screening_decision(item_id: str, request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return err(400, "bad_request", "decision body must be JSON")
        verdict = body.get("verdict")
        reviewer = body.get("reviewer", "")
        if verdict not in ("accepted", "rejected") or not reviewer:
            return err(400, "bad_request", "need verdict in {accepted,rejected} and reviewer")
        try:
            item = screening.decide(item_id, verdict, reviewer)
        except KeyError:
            return err(404, "item_not_found", f"no screening item {item_id!r}")
        except StateTransitionError as exc:
            return err(409, "already_decided", str(exc))
        return item.to_dict()

    return app
