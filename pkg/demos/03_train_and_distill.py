"""Miniature end-to-end run of the training pipeline: fine-tune three small
teachers, distill them into the compact student, evaluate everything.

Runs in roughly a minute on CPU; the full-size version of this flow lives in
tests/test_acceptance.py (criterion 4).
"""

import torch

from distillseg import distill, imaging, metrics, nets
from distillseg.prompts import box_from_mask

torch.set_num_threads(2)

samples = imaging.synth_fixture(seed=1, n=60, size=32)
split = imaging.split_dataset(samples, (0.8, 0.1, 0.1), seed=1)
data = imaging.SplitData(samples={s.id: s for s in samples}, split=split)
print(f"dataset: {len(data.train)} train / {len(data.val)} val / {len(data.test)} test")

micro_vit = nets.ViTConfig(dim=32, depth=2, patch=4, heads=2, base_grid=8)
cfg = distill.DistillConfig(lr=1e-3, batch_size=16, max_epochs=8, patience=20, seed=0)

teachers = []
for arch, arch_cfg in (("prompt_vit", micro_vit), ("unet_like", None), ("deeplab_like", None)):
    model = nets.build_teacher(arch, arch_cfg, seed=0)
    model = distill.train_teacher(model, data, cfg)
    pf = (lambda s: box_from_mask(s.mask, pad=1)) if model.accepts_prompts else None
    miou = metrics.evaluate(model, data.val, prompt_fn=pf).aggregate["miou"]
    print(f"{arch:13s} val mIoU {miou:.4f}  "
          f"({nets.count_params(model).total:,} params)")
    teachers.append(model)

student = nets.build_student(nets.StudentConfig(dims=(16, 32), depths=(1, 1), heads=(2, 2)),
                             seed=0)
scfg = distill.DistillConfig(lr=2e-3, batch_size=16, max_epochs=20, patience=20, seed=0)
result = distill.distill_student(teachers, student, data, scfg)
miou = metrics.evaluate(result.model, data.test).aggregate["miou"]
pc = nets.count_params(result.model)
print(f"student       test mIoU {miou:.4f}  ({pc.total:,} params, "
      f"{nets.reduction_ratio(nets.count_params(teachers[0]), pc):.1%} reduction "
      f"vs the prompt teacher)")

# thresholded inference per the deployment path
res = distill.infer(result.model, data.test[0].image, threshold=0.5)
print(f"infer: mask px {res.mask.count()}, gt px {data.test[0].mask.count()}")
