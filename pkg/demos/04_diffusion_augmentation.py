"""Diffusion-based augmentation: schedules, forward noising, denoiser
training, sampling (plain and image-to-image), the ASCII prompt optimizer,
and the background-composite generator."""

import numpy as np
import torch

from distillseg import augment, imaging, metrics

torch.set_num_threads(2)

sched = augment.make_schedule("cosine", 50)
print(f"cosine schedule: beta_1={sched.beta(1):.2e} beta_T={sched.beta(50):.4f} "
      f"alpha_bar_T={sched.alpha_bar(50):.2e}")

samples = imaging.synth_fixture(seed=4, n=80, size=16)
images = [s.image for s in samples]

x0 = images[0]
eps = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
for t in (1, 10, 25, 50):
    x_t = augment.forward_diffuse(x0, t, eps, sched)
    print(f"  t={t:3d}: signal std {float(x_t.std()):.3f}")

den = augment.ToyDenoiser(seed=0)
den, history = augment.train_denoiser(
    den, images, sched, augment.DenoiserTrainConfig(epochs=10, batch_size=16, lr=2e-3, seed=0))
print(f"denoiser loss {history[0]:.3f} -> {history[-1]:.3f} over {len(history)} epochs")

generated = augment.sample(den, sched, (3, 16, 16), seed=11)
print(f"sampled image in [{generated.data.min():.2f}, {generated.data.max():.2f}], "
      f"SSIM to a real sample {metrics.ssim(generated, images[0]):.3f}")

img2img = augment.sample(den, sched, (3, 16, 16), seed=11, init=images[0], strength=0.4)
print(f"img2img variant SSIM to its source {metrics.ssim(img2img, images[0]):.3f}")

pool = augment.default_prompt_pool()
base = pool.prompts[0].text
for seed in range(3):
    print("optimized prompt:", repr(augment.optimize_prompt(base, seed)))

bg = imaging.RasterImage(
    np.clip(np.random.default_rng(0).uniform(0.2, 0.9, size=(16, 16, 3)), 0, 1).astype(np.float32))
comp = augment.composite_background(samples[0].image, samples[0].mask, bg)
print(f"composite: foreground kept, background swapped "
      f"(mean |delta| inside mask = "
      f"{float(np.abs((comp.data - samples[0].image.data)[samples[0].mask.data == 1]).mean()):.4f})")
