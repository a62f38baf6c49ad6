"""Box, point, and hybrid prompt generation, plus the JSON wire format the
HTTP API and web client speak."""

import json

from distillseg import imaging, prompts

sample = imaging.synth_fixture(seed=3, n=1, size=48)[0]

box = prompts.box_from_mask(sample.mask, pad=2)
print("box prompt from mask:", (box.x0, box.y0, box.x1, box.y1))

pts = prompts.sample_points(sample.mask, n_fg=4, n_bg=4, seed=7)
print("sampled points:")
for x, y, label in pts.points:
    print(f"  ({x:2d},{y:2d}) {label}   mask={sample.mask.data[y, x]}")

hybrid = prompts.make_hybrid(box, pts)
wire = prompts.prompt_to_json(hybrid)
print("wire format:", json.dumps(wire)[:100], "...")
back = prompts.prompt_from_json(wire, width=48, height=48)
print("round-trips:", back == hybrid)

# detector interface with the ground-truth fallback
detector = prompts.MaskOracleDetector(pad=1).bind(sample.mask)
detected = prompts.detect_box(sample.image, detector)
print("detector box:", (detected.x0, detected.y0, detected.x1, detected.y1))
