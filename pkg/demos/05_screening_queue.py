"""Human screening workflow: enqueue candidates (with an SSIM pre-gate),
review decisions, and export the accepted set."""

import tempfile
from pathlib import Path

import numpy as np

from distillseg import augment, imaging

root = Path(tempfile.mkdtemp(prefix="screening-"))
references = [s.image for s in imaging.synth_fixture(seed=1, n=4, size=32)]
queue = augment.ScreeningQueue(root / "queue", ssim_floor=0.05, references=references)

# two plausible candidates and one pure-noise candidate
rng = np.random.default_rng(0)
good1 = references[0]
good2 = references[1]
noise = imaging.RasterImage(rng.uniform(size=(32, 32, 3)).astype(np.float32))

items = queue.enqueue([(good1, "ddpm"), (good2, "composite"), (noise, "ddpm")])
for it in items:
    print(f"enqueued {it.id}: source={it.source} status={it.status}"
          + (f" (by {it.reviewer})" if it.reviewer else ""))

pending = queue.pending()
print(f"{len(pending)} pending after the pre-gate")

queue.decide(pending[0].id, "accepted", reviewer="demo-reviewer")
queue.decide(pending[1].id, "rejected", reviewer="demo-reviewer")

manifest = queue.export_accepted(root / "accepted")
print("export manifest:")
print(manifest.read_text())
