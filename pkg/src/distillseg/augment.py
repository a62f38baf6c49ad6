"""Diffusion-based augmentation and the human screening workflow.

Internally the diffusion chain lives in [-1, 1]; the public image domain is
[0, 1]. Schedules are float64 numpy arrays with the cumulative-product
convention alpha_bar[0] = 1, so alpha_bar[t] corresponds to t noising steps.
"""

from __future__ import annotations

import json
import math
import uuid
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence
from urllib import error as urlerror
from urllib import request as urlrequest

import numpy as np
import torch
from torch import nn

from .errors import (
    ConfigurationError,
    EmptyPromptError,
    ExternalServiceError,
    InsufficientDataError,
    ShapeError,
    StateTransitionError,
)
from .imaging import BinaryMask, RasterImage, save_image
from . import metrics as metrics_mod

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_S = 0.008
BETA_MAX = 0.999
ASCII_MIN_LEN = 3
ASCII_MAX_LEN = 12
PRINTABLE = "".join(chr(c) for c in range(0x20, 0x7F))


# ---------------------------------------------------------------------------
# noise schedules and the forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    steps: int
    betas: np.ndarray        # length T, beta_t = betas[t-1]
    alphas: np.ndarray       # 1 - betas
    alpha_bars: np.ndarray   # length T+1, alpha_bars[0] = 1

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


def make_schedule(kind: str, steps: int, beta: float | None = None) -> NoiseSchedule:
    """Build a linear or cosine beta schedule ('constant' is a test hook).

    Linear interpolates beta from 1e-4 to 0.02; cosine derives betas from
    alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) with
    s = 0.008, clipping each beta to at most 0.999.
    """
    if steps < 2:
        raise ConfigurationError(f"schedule needs at least 2 steps, got {steps}")
    if kind == "linear":
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, steps, dtype=np.float64)
    elif kind == "cosine":
        t = np.arange(steps + 1, dtype=np.float64)
        f = np.cos(((t / steps + COSINE_S) / (1.0 + COSINE_S)) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, BETA_MAX)
    elif kind == "constant":
        if beta is None:
            raise ConfigurationError("constant schedule needs an explicit beta")
        betas = np.full(steps, float(beta), dtype=np.float64)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    if betas.min() <= 0.0 or betas.max() >= 1.0:
        raise ConfigurationError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(kind=kind, steps=steps, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def to_signal(image: RasterImage | np.ndarray | torch.Tensor) -> torch.Tensor:
    """Image in [0,1] -> diffusion-domain tensor (C, H, W) in [-1, 1]."""
    if isinstance(image, RasterImage):
        arr = torch.from_numpy(np.ascontiguousarray(image.data.transpose(2, 0, 1)))
    elif isinstance(image, torch.Tensor):
        return image
    else:
        arr = torch.as_tensor(np.asarray(image, dtype=np.float32))
    return arr * 2.0 - 1.0


def from_signal(x: torch.Tensor) -> RasterImage:
    """Diffusion-domain tensor -> clipped [0,1] RasterImage."""
    arr = ((x.detach().clamp(-1.0, 1.0) + 1.0) / 2.0).numpy()
    return RasterImage(np.ascontiguousarray(arr.transpose(1, 2, 0)))


def _check_t(t: int, sched: NoiseSchedule, minimum: int = 0) -> None:
    if not (minimum <= t <= sched.steps):
        raise ValueError(f"t = {t} out of range [{minimum}, {sched.steps}]")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    x0 may be a RasterImage (rescaled to [-1,1] internally) or an already
    rescaled tensor; t = 0 returns the rescaled x0 unchanged.
    """
    _check_t(t, sched)
    x = to_signal(x0)
    e = eps if isinstance(eps, torch.Tensor) else torch.as_tensor(np.asarray(eps, dtype=np.float32))
    if e.shape != x.shape:
        raise ShapeError(f"noise shape {tuple(e.shape)} vs signal {tuple(x.shape)}")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * x + math.sqrt(1.0 - a) * e


# ---------------------------------------------------------------------------
# denoiser and its objective
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep embedding, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ToyDenoiser(nn.Module):
    """Small convolutional epsilon-predictor with sinusoidal time embeddings
    injected as per-channel biases into every hidden stage."""

    def __init__(self, channels: int = 3, hidden: int = 32, time_dim: int = 32, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.time_dim = time_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(),
                                          nn.Linear(hidden, hidden))
            self.inp = nn.Conv2d(channels, hidden, 3, padding=1)
            self.mid1 = nn.Conv2d(hidden, hidden, 3, padding=1)
            self.mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
            self.norm1 = nn.GroupNorm(1, hidden)
            self.norm2 = nn.GroupNorm(1, hidden)
            self.out = nn.Conv2d(hidden, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.time_dim).to(x.dtype)
        emb = self.time_mlp(emb)[:, :, None, None]
        h = self.act(self.inp(x)) + emb
        h = self.act(self.norm1(self.mid1(h))) + emb
        h = self.act(self.norm2(self.mid2(h)))
        return self.out(h)

    def predict(self, x_t: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        """Epsilon estimate for a single (C, H, W) state or a batch."""
        single = x_t.ndim == 3
        xb = x_t[None] if single else x_t
        tb = torch.as_tensor([t] * xb.shape[0]) if isinstance(t, int) else t
        out = self(xb, tb)
        return out[0] if single else out


def diffusion_loss(den, x0, t: int, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Denoising-error objective: mean squared error between the drawn noise
    and the denoiser's prediction at step t."""
    x_t = forward_diffuse(x0, t, eps, sched)
    e = eps if isinstance(eps, torch.Tensor) else torch.as_tensor(np.asarray(eps, dtype=np.float32))
    pred = den.predict(x_t, t)
    if pred.shape != e.shape:
        raise ShapeError(f"denoiser output {tuple(pred.shape)} vs noise {tuple(e.shape)}")
    return ((e - pred) ** 2).mean()


@dataclass
class DenoiserTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def train_denoiser(den: ToyDenoiser, data: Sequence[RasterImage], sched: NoiseSchedule,
                   cfg: DenoiserTrainConfig | None = None) -> tuple[ToyDenoiser, list[float]]:
    """Train the epsilon-predictor on images of one size; returns the model
    and the per-epoch loss trace. Deterministic given cfg.seed."""
    cfg = cfg or DenoiserTrainConfig()
    if not data:
        raise InsufficientDataError("no images to train the denoiser on")
    xs = torch.stack([to_signal(img) for img in data])
    if xs.shape[1] != den.channels:
        raise ShapeError(f"denoiser expects {den.channels} channels, data has {xs.shape[1]}")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(den.parameters(), lr=cfg.lr)
    history = []
    n = xs.shape[0]
    abars = torch.from_numpy(sched.alpha_bars.astype(np.float32))
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x0 = xs[idx]
            t = torch.randint(1, sched.steps + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            a = abars[t][:, None, None, None]
            x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
            loss = ((eps - den(x_t, t)) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        history.append(total / batches)
    den.eval()
    return den, history


def denoise_step(x_t: torch.Tensor, t: int, den, sched: NoiseSchedule,
                 rng: torch.Generator) -> torch.Tensor:
    """One reverse step: posterior mean from the epsilon estimate plus
    sqrt(beta_t) Gaussian noise (none at t = 1)."""
    _check_t(t, sched, minimum=1)
    with torch.no_grad():
        eps_hat = den.predict(x_t, t)
    beta = sched.beta(t)
    mu = (x_t - (beta / math.sqrt(1.0 - sched.alpha_bar(t))) * eps_hat) / math.sqrt(sched.alpha(t))
    if t == 1:
        return mu
    z = torch.randn(x_t.shape, generator=rng)
    return mu + math.sqrt(beta) * z


def sample(den, sched: NoiseSchedule, shape: tuple[int, int, int], seed: int = 0,
           init: RasterImage | None = None, strength: float | None = None) -> RasterImage:
    """Run the full reverse chain from seeded Gaussian noise.

    With `init` and `strength` the chain instead starts from the real image
    noised to t = round(strength * T) (the image-to-image variant).
    """
    rng = torch.Generator().manual_seed(seed)
    if init is not None:
        if strength is None:
            strength = 0.5
        t_start = max(1, min(sched.steps, round(strength * sched.steps)))
        eps = torch.randn(shape, generator=rng)
        x = forward_diffuse(init, t_start, eps, sched)
    else:
        t_start = sched.steps
        x = torch.randn(shape, generator=rng)
    for t in range(t_start, 0, -1):
        x = denoise_step(x, t, den, sched, rng)
    return from_signal(x)


# ---------------------------------------------------------------------------
# prompt pool and the ASCII prompt optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptEntry:
    text: str
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromptPool:
    prompts: tuple[PromptEntry, ...]

    def __post_init__(self):
        if not self.prompts:
            raise EmptyPromptError("prompt pool must not be empty")


def default_prompt_pool() -> PromptPool:
    texts = [
        ("clinical photograph of a human tongue, extended, neutral lighting", ("photo", "neutral")),
        ("close-up of a pink tongue with thin white coating, medical imaging style", ("coating",)),
        ("human tongue with slightly red tip, front view, soft studio light", ("red-tip",)),
        ("tongue with visible teeth marks along the edges, clinical setting", ("teeth-marks",)),
        ("pale swollen tongue, diffuse indoor lighting, held out for examination", ("pale",)),
        ("tongue with central crack lines and thick coating, macro photograph", ("cracks", "coating")),
        ("reddish tongue surface with dotted papillae, neutral background", ("papillae",)),
        ("tongue photographed with a smartphone, natural light, varied background", ("mobile",)),
    ]
    return PromptPool(prompts=tuple(PromptEntry(t, tags) for t, tags in texts))


def optimize_prompt_with_span(prompt: str, rng: np.random.Generator | int) -> tuple[str, int, int]:
    """Insert a random printable-ASCII run; returns (result, start, length)."""
    if not prompt:
        raise EmptyPromptError("cannot optimize an empty prompt")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    length = int(rng.integers(ASCII_MIN_LEN, ASCII_MAX_LEN + 1))
    pos = int(rng.integers(0, len(prompt) + 1))
    run = "".join(PRINTABLE[i] for i in rng.integers(0, len(PRINTABLE), size=length))
    return prompt[:pos] + run + prompt[pos:], pos, length


def optimize_prompt(prompt: str, rng: np.random.Generator | int) -> str:
    """Uniqueness-boosting prompt rewrite: a 3-12 character printable-ASCII
    run inserted at a random position. Deleting the span restores the input."""
    out, _, _ = optimize_prompt_with_span(prompt, rng)
    return out


# ---------------------------------------------------------------------------
# background compositing
# ---------------------------------------------------------------------------

FEATHER_PX = 2.0


def composite_background(image: RasterImage, mask: BinaryMask,
                         background: RasterImage) -> RasterImage:
    """Blend image foreground over a new background along the mask, with a
    linear feather extending FEATHER_PX pixels to each side of the boundary."""
    from scipy import ndimage as ndi

    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError("image and mask grids differ")
    if image.data.shape != background.data.shape:
        raise ShapeError("image and background shapes differ")
    m = mask.data.astype(bool)
    if m.all():
        return RasterImage(image.data.copy())
    if not m.any():
        return RasterImage(background.data.copy())
    dist_in = ndi.distance_transform_edt(m)
    dist_out = ndi.distance_transform_edt(~m)
    signed = dist_in - dist_out
    alpha = np.clip(0.5 + signed / (2.0 * FEATHER_PX), 0.0, 1.0).astype(np.float32)
    out = alpha[:, :, None] * image.data + (1.0 - alpha[:, :, None]) * background.data
    return RasterImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# external generator client
# ---------------------------------------------------------------------------

class HttpGeneratorClient:
    """Minimal JSON-POST client: {"prompt": ...} in, raw image bytes out."""

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout

    def generate(self, prompt: str) -> bytes:
        body = json.dumps({"prompt": prompt}).encode()
        req = urlrequest.Request(self.endpoint, data=body,
                                 headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urlrequest.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urlerror.HTTPError as exc:
            retry = exc.headers.get("Retry-After") if exc.headers else None
            raise ExternalServiceError(
                f"generator returned HTTP {exc.code}",
                retry_after=float(retry) if retry else 30.0,
            ) from exc
        except (urlerror.URLError, OSError) as exc:
            raise ExternalServiceError(f"generator unreachable: {exc}", retry_after=60.0) from exc


# ---------------------------------------------------------------------------
# screening queue
# ---------------------------------------------------------------------------

VERDICTS = ("accepted", "rejected")


@dataclass
class ScreeningItem:
    id: str
    image_path: str
    source: str  # ddpm | composite | external
    status: str = "pending"
    reviewer: str | None = None
    decided_at: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class ScreeningQueue:
    """Directory-backed review queue: one JSON record per candidate image.

    Items only move pending -> accepted or pending -> rejected; decided
    items are immutable. An optional SSIM pre-gate can auto-reject
    candidates that resemble no reference image.
    """

    def __init__(self, root, ssim_floor: float | None = None,
                 references: Sequence[RasterImage] = ()):
        self.root = Path(root)
        (self.root / "items").mkdir(parents=True, exist_ok=True)
        (self.root / "images").mkdir(parents=True, exist_ok=True)
        self.ssim_floor = ssim_floor
        self.references = list(references)

    def _item_path(self, item_id: str) -> Path:
        return self.root / "items" / f"{item_id}.json"

    def _write(self, item: ScreeningItem) -> None:
        tmp = self._item_path(item.id).with_suffix(".tmp")
        tmp.write_text(json.dumps(item.to_dict(), sort_keys=True, indent=1))
        tmp.replace(self._item_path(item.id))

    def _load(self, item_id: str) -> ScreeningItem:
        path = self._item_path(item_id)
        if not path.exists():
            raise KeyError(f"no screening item {item_id!r}")
        return ScreeningItem(**json.loads(path.read_text()))

    def _pregate(self, image: RasterImage) -> bool:
        """True when the candidate fails the SSIM floor against every reference."""
        if self.ssim_floor is None or not self.references:
            return False
        best = max(metrics_mod.ssim(image, ref) for ref in self.references)
        return best < self.ssim_floor

    def add(self, image: RasterImage, source: str, item_id: str | None = None) -> ScreeningItem:
        item_id = item_id or uuid.uuid4().hex[:12]
        if self._item_path(item_id).exists():
            raise StateTransitionError(f"screening item {item_id!r} already exists")
        rel = f"images/{item_id}.png"
        save_image(image, self.root / rel)
        item = ScreeningItem(id=item_id, image_path=rel, source=source)
        if self._pregate(image):
            item.status = "rejected"
            item.reviewer = "auto-pregate"
            item.decided_at = _now_iso()
        self._write(item)
        return item

    def enqueue(self, images: Sequence[tuple[RasterImage, str]]) -> list[ScreeningItem]:
        return [self.add(img, source) for img, source in images]

    def get(self, item_id: str) -> ScreeningItem:
        return self._load(item_id)

    def items(self) -> list[ScreeningItem]:
        return sorted(
            (ScreeningItem(**json.loads(p.read_text()))
             for p in (self.root / "items").glob("*.json")),
            key=lambda it: it.id,
        )

    def pending(self) -> list[ScreeningItem]:
        return [it for it in self.items() if it.status == "pending"]

    def decide(self, item_id: str, verdict: str, reviewer: str) -> ScreeningItem:
        if verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}, got {verdict!r}")
        item = self._load(item_id)
        if item.status != "pending":
            raise StateTransitionError(
                f"item {item_id!r} already decided ({item.status}); decisions are final"
            )
        item.status = verdict
        item.reviewer = reviewer
        item.decided_at = _now_iso()
        self._write(item)
        return item

    def export_accepted(self, out_dir) -> Path:
        """Copy accepted images into out_dir and write manifest.csv; the
        export is idempotent (stable content for unchanged queue state)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = ["id,source,path,reviewer,decided_at"]
        for item in self.items():
            if item.status != "accepted":
                continue
            dest = out_dir / f"{item.id}.png"
            dest.write_bytes((self.root / item.image_path).read_bytes())
            rows.append(f"{item.id},{item.source},{dest.name},{item.reviewer},{item.decided_at}")
        manifest = out_dir / "manifest.csv"
        manifest.write_text("\n".join(rows) + "\n")
        return manifest


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def external_generate(client, prompt: str, queue: ScreeningQueue) -> ScreeningItem:
    """Request one candidate from an external generator and park it in the
    screening queue (source=external, pending). Failures propagate and leave
    the queue untouched."""
    import io

    data = client.generate(prompt)
    try:
        from PIL import Image

        with Image.open(io.BytesIO(data)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ExternalServiceError(f"generator returned undecodable image data: {exc}") from exc
    return queue.add(RasterImage(arr), source="external")
