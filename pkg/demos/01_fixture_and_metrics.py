"""Generate a synthetic tongue-like dataset, perturb the ground truth, and
walk the metric suite: confusion counts, MPA, mIoU, Dice, Hausdorff, SSIM."""

import numpy as np

from distillseg import imaging, metrics

samples = imaging.synth_fixture(seed=0, n=4, size=48)
print(f"generated {len(samples)} samples, e.g. {samples[0].id}: "
      f"{samples[0].image.data.shape}, mask px {samples[0].mask.count()}")

# a fake "prediction": the true mask with a few pixels flipped
rng = np.random.default_rng(0)
sample = samples[0]
pred = sample.mask.data.copy()
flips = rng.integers(0, 48, size=(12, 2))
for r, c in flips:
    pred[r, c] ^= 1
pred_mask = imaging.BinaryMask(pred)

c = metrics.confusion(pred_mask, sample.mask)
print(f"confusion (fg): tp={c.tp[1]} fp={c.fp[1]} fn={c.fn[1]} tn={c.tn[1]}")
print(f"MPA  = {metrics.mpa(c):.4f}")
print(f"mIoU = {metrics.miou(c):.4f}")
print(f"Dice = {metrics.dice(c):.4f}")

hd = metrics.hausdorff(metrics.boundary(pred_mask), metrics.boundary(sample.mask))
print(f"Hausdorff = {hd:.3f} px")

other = samples[1].image
print(f"SSIM(self)  = {metrics.ssim(sample.image, sample.image):.4f}")
print(f"SSIM(other) = {metrics.ssim(sample.image, other):.4f}")

# aggregate report over the little dataset with an oracle predictor
table = {s.image.data.tobytes(): s.mask for s in samples}
report = metrics.evaluate(
    lambda img: imaging.ProbMap(table[img.data.tobytes()].data.astype(np.float32)),
    samples,
)
print("oracle-model aggregate:", {k: v for k, v in report.aggregate.items()
                                  if k in ("mpa", "miou", "dice", "hd")})
