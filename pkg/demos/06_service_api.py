"""Walk the HTTP API in-process: model registry, a 3-image batch job with
progress polling, interactive segmentation with a prompt, and screening
review. The same app serves over the network via `distillseg serve`."""

import io
import json
import tempfile
import time
import zipfile
from pathlib import Path

import numpy as np
import torch
from fastapi.testclient import TestClient
from PIL import Image

from distillseg import checkpoint, imaging, nets
from distillseg.service import ServiceConfig, create_app

torch.set_num_threads(2)

root = Path(tempfile.mkdtemp(prefix="service-"))
(root / "models").mkdir()
checkpoint.save_model(root / "models" / "small.ckpt", nets.build_student(seed=0))

cfg = ServiceConfig(models_dir=str(root / "models"), jobs_dir=str(root / "jobs"),
                    queue_dir=str(root / "queue"))
client = TestClient(create_app(cfg))

print("health:", client.get("/api/health").json())
print("models:", [m["name"] for m in client.get("/api/models").json()["models"]])


def png_bytes(image):
    buf = io.BytesIO()
    Image.fromarray((image.data * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


samples = imaging.synth_fixture(seed=5, n=3, size=32)
files = [("images", (f"{s.id}.png", png_bytes(s.image), "image/png")) for s in samples]
job_id = client.post("/api/jobs", data={"model": "small"}, files=files).json()["job_id"]
print("job:", job_id)
while True:
    rec = client.get(f"/api/jobs/{job_id}").json()
    print(f"  status={rec['status']} progress={rec['progress']:.2f}")
    if rec["status"] in ("done", "failed"):
        break
    time.sleep(0.1)

masks = client.get(f"/api/jobs/{job_id}/masks")
names = zipfile.ZipFile(io.BytesIO(masks.content)).namelist()
print("mask zip entries:", names)

prompt = {"box": [4, 4, 28, 28], "points": [{"x": 16, "y": 16, "label": "fg"}]}
r = client.post("/api/segment",
                data={"model": "small", "prompt": json.dumps(prompt)},
                files={"image": ("one.png", png_bytes(samples[0].image), "image/png")})
body = r.json()
print(f"interactive segment: {r.status_code}, {body['timing_ms']:.1f} ms, "
      f"prompt_ignored={body['prompt_ignored']} (the student is prompt-free)")
