"""Teacher/student segmentation networks, LoRA adaptation, parameter accounting.

Three teacher families and one student share the SegModel contract:
forward(x, prompts) -> single-channel logits at input resolution, plus named
intermediate feature maps from the last forward pass. All normalization is
GroupNorm/LayerNorm so eval-mode forwards are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError
from .imaging import ProbMap, RasterImage
from .prompts import BoxPrompt, HybridPrompt, PointPrompt, Prompt

LORA_INIT_STD = 0.02


# ---------------------------------------------------------------------------
# tensor plumbing
# ---------------------------------------------------------------------------

def image_to_tensor(image: RasterImage, in_channels: int = 3) -> torch.Tensor:
    """RasterImage -> (1, C, H, W) float tensor, adapting the channel count."""
    arr = image.data
    if arr.shape[2] == 1 and in_channels == 3:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 3 and in_channels == 1:
        arr = arr.mean(axis=2, keepdims=True)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def samples_to_tensors(samples, in_channels: int = 3) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack labeled samples into (N, C, H, W) images and (N, H, W) masks."""
    xs = torch.cat([image_to_tensor(s.image, in_channels) for s in samples], dim=0)
    ys = torch.stack([torch.from_numpy(s.mask.data.astype(np.float32)) for s in samples])
    return xs, ys


class SegModel(nn.Module):
    """Base contract: logits out, feature maps cached, prompt-aware flag."""

    family: str = "base"
    accepts_prompts: bool = False
    feature_stage: str = ""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self._features: dict[str, torch.Tensor] = {}
        self.lora_spec: dict | None = None

    def features(self) -> dict[str, torch.Tensor]:
        """Named intermediate feature maps from the most recent forward."""
        return dict(self._features)

    def config_dict(self) -> dict:
        out = {"arch": asdict(self.config)}
        if self.lora_spec is not None:
            out["lora"] = dict(self.lora_spec)
        return out

    def predict_prob(self, image: RasterImage, prompt: Prompt | None = None) -> ProbMap:
        self.eval()
        with torch.no_grad():
            x = image_to_tensor(image, self.config.in_channels)
            prompts = [prompt] if self.accepts_prompts else None
            logits = self(x, prompts) if self.accepts_prompts else self(x)
            prob = torch.sigmoid(logits)[0, 0]
        return ProbMap(prob.numpy())

    def _check_grid(self, x: torch.Tensor, multiple: int) -> None:
        if x.shape[-2] % multiple or x.shape[-1] % multiple:
            raise ShapeError(
                f"{self.family} needs input dims divisible by {multiple}, "
                f"got {tuple(x.shape[-2:])}"
            )


# ---------------------------------------------------------------------------
# shared blocks
# ---------------------------------------------------------------------------

class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, dilation=1, stride=1):
        pad = dilation
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=pad, dilation=dilation),
            nn.GroupNorm(1, c_out),
            nn.SiLU(),
        )


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/proj linears (LoRA targets)."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q_in, kv_in=None, key_padding_mask=None):
        kv_in = q_in if kv_in is None else kv_in
        b, n, _ = q_in.shape
        m = kv_in.shape[1]

        def split(t, length):
            return t.view(b, length, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q(q_in), n)
        k = split(self.k(kv_in), m)
        v = split(self.v(kv_in), m)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim, hidden):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def _interp_pos(pos: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Resize a (1, D, gh0, gw0) learned positional grid to the actual grid."""
    if pos.shape[-2:] == grid:
        return pos
    return F.interpolate(pos, size=grid, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# prompt-conditioned ViT teacher
# ---------------------------------------------------------------------------

@dataclass
class ViTConfig:
    dim: int = 96
    depth: int = 3
    patch: int = 4
    heads: int = 4
    in_channels: int = 3
    base_grid: int = 16


# prompt token type ids
_PT_FG, _PT_BG, _PT_TL, _PT_BR, _PT_NONE = range(5)


class ViTEncoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.patch = cfg.patch
        self.embed = nn.Conv2d(cfg.in_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        self.pos = nn.Parameter(torch.zeros(1, cfg.dim, cfg.base_grid, cfg.base_grid))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x):
        feat = self.embed(x)
        feat = feat + _interp_pos(self.pos, feat.shape[-2:])
        b, d, gh, gw = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        return tokens, (gh, gw)


class PromptEncoder(nn.Module):
    """Boxes/points -> sparse embedding tokens with learned positional coords."""

    def __init__(self, dim):
        super().__init__()
        self.coord = nn.Linear(2, dim)
        self.kind = nn.Embedding(5, dim)

    def _tokens_for(self, prompt: Prompt | None, width: int, height: int) -> torch.Tensor:
        dev = self.coord.weight.device
        dtype = self.coord.weight.dtype

        def embed(x, y, kind):
            xy = torch.tensor([x / width, y / height], device=dev, dtype=dtype)
            return self.coord(xy) + self.kind.weight[kind]

        if prompt is None:
            return self.kind.weight[_PT_NONE][None]
        rows = []
        box = prompt.box if isinstance(prompt, HybridPrompt) else prompt
        if isinstance(box, BoxPrompt):
            rows.append(embed(box.x0, box.y0, _PT_TL))
            rows.append(embed(box.x1, box.y1, _PT_BR))
        pts = prompt.points if isinstance(prompt, HybridPrompt) else prompt
        if isinstance(pts, PointPrompt):
            for x, y, label in pts.points:
                rows.append(embed(x, y, _PT_FG if label == "fg" else _PT_BG))
        return torch.stack(rows)

    def forward(self, prompts, width, height):
        per_sample = [self._tokens_for(p, width, height) for p in prompts]
        k_max = max(t.shape[0] for t in per_sample)
        dim = per_sample[0].shape[1]
        out = per_sample[0].new_zeros(len(per_sample), k_max, dim)
        pad = torch.ones(len(per_sample), k_max, dtype=torch.bool,
                         device=out.device)
        for i, t in enumerate(per_sample):
            out[i, : t.shape[0]] = t
            pad[i, : t.shape[0]] = False
        return out, pad


class TwoWayBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.t2i = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * 2)
        self.ln3 = nn.LayerNorm(dim)
        self.i2t = Attention(dim, heads)
        self.ln4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, token_pad):
        tokens = self.ln1(tokens + self.self_attn(tokens, key_padding_mask=token_pad))
        tokens = self.ln2(tokens + self.t2i(tokens, image))
        tokens = self.ln3(tokens + self.mlp(tokens))
        image = self.ln4(image + self.i2t(image, tokens, key_padding_mask=token_pad))
        return tokens, image


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        d = cfg.dim
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(d, cfg.heads) for _ in range(2))
        stages = int(math.log2(cfg.patch))
        ups, ch = [], d
        for _ in range(stages):
            ups += [nn.ConvTranspose2d(ch, ch // 2, 2, stride=2), nn.GroupNorm(1, ch // 2), nn.SiLU()]
            ch //= 2
        self.upscale = nn.Sequential(*ups)
        self.head = Mlp(d, d)
        self.out_proj = nn.Linear(d, ch)

    def forward(self, image_tokens, prompt_tokens, prompt_pad, grid):
        b = image_tokens.shape[0]
        tokens = torch.cat([self.mask_token.expand(b, -1, -1), prompt_tokens], dim=1)
        pad = torch.cat(
            [torch.zeros(b, 1, dtype=torch.bool, device=tokens.device), prompt_pad], dim=1
        )
        image = image_tokens
        for blk in self.blocks:
            tokens, image = blk(tokens, image, pad)
        gh, gw = grid
        fmap = image.transpose(1, 2).reshape(b, -1, gh, gw)
        up = self.upscale(fmap)
        w = self.out_proj(self.head(tokens[:, 0]))
        return torch.einsum("bchw,bc->bhw", up, w)[:, None]


class PromptViT(SegModel):
    """Patch-embedding transformer with prompt encoder and mask decoder."""

    family = "prompt_vit"
    accepts_prompts = True
    feature_stage = "encoder"

    def __init__(self, cfg: ViTConfig):
        super().__init__(cfg)
        self.encoder = ViTEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.dim)
        self.decoder = MaskDecoder(cfg)

    def default_lora_targets(self) -> list[str]:
        names = []
        for i in range(self.config.depth):
            names += [f"encoder.blocks.{i}.attn.q", f"encoder.blocks.{i}.attn.v"]
        return names

    def forward(self, x, prompts: Sequence[Prompt | None] | None = None):
        self._check_grid(x, self.config.patch)
        b, _, h, w = x.shape
        if prompts is None:
            prompts = [None] * b
        if len(prompts) != b:
            raise ShapeError(f"{len(prompts)} prompts for batch of {b}")
        image_tokens, grid = self.encoder(x)
        self._features = {
            "encoder": image_tokens.transpose(1, 2).reshape(b, -1, *grid)
        }
        prompt_tokens, pad = self.prompt_encoder(prompts, w, h)
        return self.decoder(image_tokens, prompt_tokens, pad, grid)


# ---------------------------------------------------------------------------
# UNet-like teacher
# ---------------------------------------------------------------------------

@dataclass
class UNetConfig:
    width: int = 16
    in_channels: int = 3


class UNetEncoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        w = cfg.width
        self.block1 = nn.Sequential(ConvBlock(cfg.in_channels, w), ConvBlock(w, w))
        self.block2 = nn.Sequential(ConvBlock(w, 2 * w), ConvBlock(2 * w, 2 * w))
        self.bottleneck = nn.Sequential(ConvBlock(2 * w, 4 * w), ConvBlock(4 * w, 4 * w))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        s1 = self.block1(x)
        s2 = self.block2(self.pool(s1))
        return s1, s2, self.bottleneck(self.pool(s2))


class UNetDecoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        w = cfg.width
        self.up1 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec1 = nn.Sequential(ConvBlock(4 * w, 2 * w), ConvBlock(2 * w, 2 * w))
        self.up2 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec2 = nn.Sequential(ConvBlock(2 * w, w), ConvBlock(w, w))
        self.head = nn.Conv2d(w, 1, 1)

    def forward(self, s1, s2, bott):
        x = self.dec1(torch.cat([self.up1(bott), s2], dim=1))
        x = self.dec2(torch.cat([self.up2(x), s1], dim=1))
        return self.head(x)


class UNetLike(SegModel):
    """Symmetric encoder-decoder with skip connections."""

    family = "unet_like"
    feature_stage = "bottleneck"

    def __init__(self, cfg: UNetConfig):
        super().__init__(cfg)
        self.encoder = UNetEncoder(cfg)
        self.decoder = UNetDecoder(cfg)

    def forward(self, x, prompts=None):
        self._check_grid(x, 4)
        s1, s2, bott = self.encoder(x)
        self._features = {"bottleneck": bott}
        return self.decoder(s1, s2, bott)


# ---------------------------------------------------------------------------
# DeepLab-like teacher
# ---------------------------------------------------------------------------

@dataclass
class DeepLabConfig:
    width: int = 24
    in_channels: int = 3


class DilatedEncoder(nn.Module):
    def __init__(self, cfg: DeepLabConfig):
        super().__init__()
        w = cfg.width
        self.stem = nn.Sequential(
            ConvBlock(cfg.in_channels, w, stride=2), ConvBlock(w, 2 * w, stride=2)
        )
        self.body = nn.Sequential(
            ConvBlock(2 * w, 2 * w, dilation=2), ConvBlock(2 * w, 2 * w, dilation=4)
        )

    def forward(self, x):
        return self.body(self.stem(x))


class ContextDecoder(nn.Module):
    """Multi-rate context pooling followed by a 1x1 head and 4x upsampling."""

    def __init__(self, cfg: DeepLabConfig):
        super().__init__()
        c = 2 * cfg.width
        self.rate1 = nn.Conv2d(c, c, 1)
        self.rate2 = nn.Conv2d(c, c, 3, padding=2, dilation=2)
        self.rate3 = nn.Conv2d(c, c, 3, padding=4, dilation=4)
        self.global_proj = nn.Conv2d(c, c, 1)
        self.fuse = nn.Sequential(nn.Conv2d(4 * c, c, 1), nn.GroupNorm(1, c), nn.SiLU())
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, feat, out_size):
        pooled = self.global_proj(feat.mean(dim=(2, 3), keepdim=True))
        pooled = pooled.expand(-1, -1, feat.shape[2], feat.shape[3])
        ctx = self.fuse(torch.cat(
            [self.rate1(feat), self.rate2(feat), self.rate3(feat), pooled], dim=1
        ))
        logits = self.head(ctx)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False), ctx


class DeepLabLike(SegModel):
    """Dilated-convolution encoder with multi-rate context pooling."""

    family = "deeplab_like"
    feature_stage = "context"

    def __init__(self, cfg: DeepLabConfig):
        super().__init__(cfg)
        self.encoder = DilatedEncoder(cfg)
        self.decoder = ContextDecoder(cfg)

    def forward(self, x, prompts=None):
        self._check_grid(x, 4)
        feat = self.encoder(x)
        logits, ctx = self.decoder(feat, x.shape[-2:])
        self._features = {"context": ctx}
        return logits


# ---------------------------------------------------------------------------
# compact hierarchical transformer student
# ---------------------------------------------------------------------------

@dataclass
class StudentConfig:
    dims: tuple[int, int] = (20, 40)
    depths: tuple[int, int] = (2, 1)
    heads: tuple[int, int] = (2, 2)
    patch: int = 4
    in_channels: int = 3
    base_grid: int = 16


class StudentBackbone(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        d1, d2 = cfg.dims
        self.embed = nn.Conv2d(cfg.in_channels, d1, cfg.patch, stride=cfg.patch)
        self.pos1 = nn.Parameter(torch.zeros(1, d1, cfg.base_grid, cfg.base_grid))
        self.pos2 = nn.Parameter(torch.zeros(1, d2, cfg.base_grid // 2, cfg.base_grid // 2))
        nn.init.trunc_normal_(self.pos1, std=0.02)
        nn.init.trunc_normal_(self.pos2, std=0.02)
        self.stage1 = nn.ModuleList(
            TransformerBlock(d1, cfg.heads[0]) for _ in range(cfg.depths[0])
        )
        self.down = nn.Conv2d(d1, d2, 3, stride=2, padding=1)
        self.stage2 = nn.ModuleList(
            TransformerBlock(d2, cfg.heads[1]) for _ in range(cfg.depths[1])
        )
        self.norm = nn.LayerNorm(d2)

    @staticmethod
    def _run(blocks, fmap):
        b, d, gh, gw = fmap.shape
        tokens = fmap.flatten(2).transpose(1, 2)
        for blk in blocks:
            tokens = blk(tokens)
        return tokens.transpose(1, 2).reshape(b, d, gh, gw)

    def forward(self, x):
        f1 = self.embed(x)
        f1 = self._run(self.stage1, f1 + _interp_pos(self.pos1, f1.shape[-2:]))
        f2 = self.down(f1)
        f2 = self._run(self.stage2, f2 + _interp_pos(self.pos2, f2.shape[-2:]))
        b, d, gh, gw = f2.shape
        f2 = self.norm(f2.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(b, d, gh, gw)
        return f1, f2


class TinyStudent(SegModel):
    """Two-stage transformer backbone; 1x1-conv decoder + bilinear upsampling."""

    family = "student"
    feature_stage = "stage2"

    def __init__(self, cfg: StudentConfig):
        super().__init__(cfg)
        self.encoder = StudentBackbone(cfg)
        self.decoder = nn.Conv2d(cfg.dims[1], 1, 1)

    def forward(self, x, prompts=None):
        self._check_grid(x, 2 * self.config.patch)
        f1, f2 = self.encoder(x)
        self._features = {"stage1": f1, "stage2": f2}
        logits = self.decoder(f2)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

class LoraLinear(nn.Module):
    """base(x) + (alpha/r) * B(A(x)) with the base weights frozen."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features).normal_(0.0, LORA_INIT_STD))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        delta = F.linear(F.linear(x, self.lora_a), self.lora_b)
        return self.base(x) + (self.alpha / self.rank) * delta


def _resolve(model: nn.Module, dotted: str) -> tuple[nn.Module, str]:
    parts = dotted.split(".")
    parent = model
    for p in parts[:-1]:
        parent = getattr(parent, p) if not p.isdigit() else parent[int(p)]
    return parent, parts[-1]


def inject_lora(model: SegModel, rank: int = 4, alpha: float = 4.0,
                targets: Sequence[str] | None = None, seed: int = 0) -> SegModel:
    """Replace target encoder linears with LoRA wrappers and set the
    fine-tuning partition: frozen encoder base, trainable adapters plus any
    prompt encoder / decoder heads.

    B starts at zero, so the adapted model's outputs equal the base model's
    until training moves the adapters.
    """
    if targets is None:
        if not hasattr(model, "default_lora_targets"):
            raise ConfigurationError(f"{model.family} has no default LoRA targets")
        targets = model.default_lora_targets()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for name in targets:
            try:
                parent, attr = _resolve(model, name)
                layer = getattr(parent, attr)
            except (AttributeError, IndexError, KeyError) as exc:
                raise ConfigurationError(f"LoRA target {name!r} not found") from exc
            if not isinstance(layer, nn.Linear):
                raise ConfigurationError(f"LoRA target {name!r} is not a Linear layer")
            setattr(parent, attr, LoraLinear(layer, rank, alpha))
    # freeze the whole encoder except adapters; heads stay trainable
    for pname, p in model.named_parameters():
        if pname.startswith("encoder."):
            p.requires_grad_("lora_" in pname)
        else:
            p.requires_grad_(True)
    model.lora_spec = {"rank": rank, "alpha": alpha, "targets": list(targets), "seed": seed}
    return model


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int
    breakdown: dict[str, int] = field(default_factory=dict)


def count_params(model: nn.Module) -> ParamCount:
    """Exact element counts, broken down by top-level component; LoRA factors
    are reported under 'adapters' regardless of where they are attached."""
    total = trainable = 0
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        n = p.numel()
        total += n
        if p.requires_grad:
            trainable += n
        comp = "adapters" if "lora_" in name else name.split(".", 1)[0]
        breakdown[comp] = breakdown.get(comp, 0) + n
    return ParamCount(total=total, trainable=trainable, breakdown=breakdown)


def reduction_ratio(teacher, student) -> float:
    """1 - student_total / teacher_total; accepts ParamCount or raw counts."""
    t = float(getattr(teacher, "total", teacher))
    s = float(getattr(student, "total", student))
    if t <= 0:
        raise ZeroDivisionError("teacher parameter count must be positive")
    return 1.0 - s / t


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

TEACHER_ARCHS = ("prompt_vit", "unet_like", "deeplab_like")

_FAMILIES = {
    "prompt_vit": (PromptViT, ViTConfig),
    "unet_like": (UNetLike, UNetConfig),
    "deeplab_like": (DeepLabLike, DeepLabConfig),
    "student": (TinyStudent, StudentConfig),
}


def _build(cls, cfg, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(cfg)


def build_teacher(arch: str, cfg=None, seed: int = 0) -> SegModel:
    """Construct a teacher of the given family with seed-determined init."""
    if arch not in TEACHER_ARCHS:
        raise ConfigurationError(f"unknown teacher arch {arch!r}; choose from {TEACHER_ARCHS}")
    cls, cfg_cls = _FAMILIES[arch]
    return _build(cls, cfg if cfg is not None else cfg_cls(), seed)


_SMALLEST_TEACHER_CACHE: list[int] = []


def _smallest_default_teacher() -> int:
    if not _SMALLEST_TEACHER_CACHE:
        counts = [count_params(build_teacher(a)).total for a in TEACHER_ARCHS]
        _SMALLEST_TEACHER_CACHE.append(min(counts))
    return _SMALLEST_TEACHER_CACHE[0]


def build_student(cfg: StudentConfig | None = None, seed: int = 0,
                  param_ceiling: int | None = None) -> SegModel:
    """Construct the compact student; rejects configs at or above the smallest
    teacher's parameter count (or an explicit ceiling)."""
    model = _build(TinyStudent, cfg if cfg is not None else StudentConfig(), seed)
    ceiling = param_ceiling if param_ceiling is not None else _smallest_default_teacher()
    n = count_params(model).total
    if n >= ceiling:
        raise ConfigurationError(
            f"student has {n} parameters, not below the teacher floor {ceiling}"
        )
    return model


def build_from_config(family: str, config: dict, seed: int = 0) -> SegModel:
    """Rebuild a model from a checkpoint config dict (arch + optional lora)."""
    if family not in _FAMILIES:
        raise ConfigurationError(f"unknown model family {family!r}")
    cls, cfg_cls = _FAMILIES[family]
    arch = dict(config["arch"])
    for key, val in arch.items():
        if isinstance(val, list):
            arch[key] = tuple(val)
    model = _build(cls, cfg_cls(**arch), seed)
    lora = config.get("lora")
    if lora:
        inject_lora(model, rank=lora["rank"], alpha=lora["alpha"],
                    targets=lora["targets"], seed=lora.get("seed", 0))
    return model
