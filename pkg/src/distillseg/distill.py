"""Hybrid multi-teacher distillation: losses, confidence fusion, training
loops with early stopping, and thresholded inference.

Loss functions accept torch tensors (gradients flow) or numpy arrays /
ProbMap / BinaryMask values (converted). Teacher weights enter every
weighted sum linearly and are normalized once at config construction, not
inside the loss functions.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InsufficientDataError, NumericalError, ShapeError
from .imaging import BinaryMask, ProbMap, RasterImage, SplitData
from .nets import SegModel, samples_to_tensors
from . import prompts as prompts_mod

PROB_EPS = 1e-7


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, (ProbMap, BinaryMask)):
        x = x.data
    arr = np.asarray(x)
    if arr.dtype.kind in "biu":
        arr = arr.astype(np.float32)
    return torch.as_tensor(arr)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"grid shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DistillConfig:
    """All scalars of the distillation objective and the training loop."""

    distill_temperature: float = 2.0
    teacher_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    lambda_kl: float = 1.0
    lambda_mse: float = 1.0
    lambda_bce: float = 1.0
    lambda_inter: float = 0.0
    fusion_mode: str = "fixed_weights"  # or "confidence"
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    hinton_scaling: bool = False  # opt-in T^2 factor on the KL term
    supervised_dice: bool = False  # add Dice to the hard supervision term
    prompt_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # box/points/hybrid
    n_fg_points: int = 4
    n_bg_points: int = 4
    inter_teacher: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.distill_temperature <= 0:
            raise ConfigurationError("distill_temperature must be > 0")
        w = tuple(float(v) for v in self.teacher_weights)
        if any(v < 0 for v in w) or sum(w) <= 0:
            raise ConfigurationError(f"teacher_weights must be nonnegative with positive sum, got {w}")
        self.teacher_weights = tuple(v / sum(w) for v in w)
        for name in ("lambda_kl", "lambda_mse", "lambda_bce", "lambda_inter"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.fusion_mode not in ("fixed_weights", "confidence"):
            raise ConfigurationError(f"unknown fusion_mode {self.fusion_mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        coerced = dict(data)
        for key in ("teacher_weights", "prompt_mix"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["teacher_weights"] = list(self.teacher_weights)
        out["prompt_mix"] = list(self.prompt_mix)
        return out


@dataclass
class LossBreakdown:
    kl: float
    mse: float
    bce: float
    dice_term: float
    inter: float
    total: float


@dataclass
class FusedSupervision:
    """Per-pixel confidence-weighted fusion of teacher logits."""

    fused_logits: torch.Tensor
    weights: torch.Tensor  # (n_teachers, *grid), sums to 1 per pixel


@dataclass
class TrainState:
    epoch: int
    best_val_loss: float
    epochs_since_improve: int
    checkpoint_path: str | None = None
    best_epoch: int = 0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def seg_bce(prob, target) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = _as_tensor(prob)
    y = _as_tensor(target).to(p.dtype)
    _check_same_shape(p, y)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def dice_loss(prob, target, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss 1 - (2*sum(p*y)+s) / (sum(p)+sum(y)+s)."""
    p = _as_tensor(prob)
    y = _as_tensor(target).to(p.dtype)
    _check_same_shape(p, y)
    inter = (p * y).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + y.sum() + smooth)


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(Bern(p) || Bern(q)) with both arguments clamped."""
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    q = q.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return p * (p / q).log() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).log()


def _check_weights(n_values: int, weights: Sequence[float]) -> None:
    if len(weights) != n_values:
        raise ConfigurationError(f"{n_values} teacher grids but {len(weights)} weights")


def weighted_kl(teacher_logits: Sequence, student_logits, weights: Sequence[float],
                temperature: float, hinton_scaling: bool = False) -> torch.Tensor:
    """sum_i w_i * mean KL(sigma(t_i/T) || sigma(s/T)); linear in the weights."""
    teacher_logits = list(teacher_logits)
    _check_weights(len(teacher_logits), weights)
    s = _as_tensor(student_logits)
    q = torch.sigmoid(s / temperature)
    total = s.new_zeros(())
    for w, t in zip(weights, teacher_logits):
        t = _as_tensor(t)
        _check_same_shape(t, s)
        p = torch.sigmoid(t / temperature)
        total = total + w * bernoulli_kl(p, q).mean()
    if hinton_scaling:
        total = total * temperature**2
    return total


def kl_distill(teacher_logits: Sequence, student_logits, cfg: DistillConfig) -> torch.Tensor:
    """Temperature-softened logits distillation loss over all teachers."""
    teacher_logits = list(teacher_logits)
    return weighted_kl(teacher_logits, student_logits,
                       cfg.teacher_weights[: len(teacher_logits)],
                       cfg.distill_temperature, cfg.hinton_scaling)


def weighted_mse(teacher_probs: Sequence, student_prob, weights: Sequence[float]) -> torch.Tensor:
    """sum_i w_i * mean (P_i - P_s)^2; linear in the weights."""
    teacher_probs = list(teacher_probs)
    _check_weights(len(teacher_probs), weights)
    ps = _as_tensor(student_prob)
    total = ps.new_zeros(())
    for w, pt in zip(weights, teacher_probs):
        pt = _as_tensor(pt)
        _check_same_shape(pt, ps)
        total = total + w * ((pt - ps) ** 2).mean()
    return total


def mask_mse(teacher_probs: Sequence, student_prob, cfg: DistillConfig) -> torch.Tensor:
    """Mask-level MSE distillation loss over all teachers."""
    teacher_probs = list(teacher_probs)
    return weighted_mse(teacher_probs, student_prob,
                        cfg.teacher_weights[: len(teacher_probs)])


def inter_feature_loss(teacher_feats, student_feats, projection: nn.Module) -> torch.Tensor:
    """MSE between teacher features and the projected, spatially-resized
    student features. `projection` maps student channels to teacher channels
    (a 1x1 conv or equivalent) and is trained jointly."""
    t = _as_tensor(teacher_feats)
    s = _as_tensor(student_feats)
    if t.ndim != 4 or s.ndim != 4:
        raise ShapeError("feature maps must be (B, C, H, W)")
    if s.shape[-2:] != t.shape[-2:]:
        s = F.interpolate(s, size=t.shape[-2:], mode="bilinear", align_corners=False)
    s = projection(s)
    _check_same_shape(s, t)
    return ((t - s) ** 2).mean()


def confidence_fuse(teacher_logits: Sequence) -> FusedSupervision:
    """Fuse teacher logits with per-pixel certainty weights.

    Weight of teacher i at a pixel is proportional to 1 - H(sigma(t_i))/ln 2
    (H the binary entropy in nats); pixels where every teacher is maximally
    uncertain fall back to uniform weights.
    """
    logits = [_as_tensor(t) for t in teacher_logits]
    if not logits:
        raise ConfigurationError("confidence_fuse needs at least one teacher")
    for t in logits[1:]:
        _check_same_shape(t, logits[0])
    out_dtype = logits[0].dtype
    stack = torch.stack(logits).double()
    # stable binary entropy of sigmoid(t): sigma(t)*softplus(-t) + sigma(-t)*softplus(t)
    entropy = (torch.sigmoid(stack) * F.softplus(-stack)
               + torch.sigmoid(-stack) * F.softplus(stack))
    raw = (1.0 - entropy / math.log(2.0)).clamp(min=0.0)
    norm = raw.sum(dim=0, keepdim=True)
    uniform = torch.full_like(raw, 1.0 / stack.shape[0])
    weights = torch.where(norm > 0.0, raw / norm.clamp(min=1e-300), uniform)
    fused = (weights * stack).sum(dim=0)
    # weights stay float64: near-saturated teachers would tie after a cast
    return FusedSupervision(fused_logits=fused.to(out_dtype), weights=weights)


def total_loss(parts: dict, cfg: DistillConfig) -> LossBreakdown:
    """Combine loss components into the configured weighted total.

    total = lambda_kl*kl + lambda_mse*mse + lambda_bce*(bce + dice_term)
            + lambda_inter*inter
    where dice_term is nonzero only when the Dice variant of the hard
    supervision term is enabled.
    """
    values = {}
    for name in ("kl", "mse", "bce", "dice_term", "inter"):
        v = parts.get(name, 0.0)
        t = _as_tensor(v)
        if not torch.isfinite(t).all():
            raise NumericalError(f"loss component {name!r} is not finite")
        values[name] = t
    total = (
        cfg.lambda_kl * values["kl"]
        + cfg.lambda_mse * values["mse"]
        + cfg.lambda_bce * (values["bce"] + values["dice_term"])
        + cfg.lambda_inter * values["inter"]
    )
    return LossBreakdown(
        kl=_scalar(values["kl"]), mse=_scalar(values["mse"]), bce=_scalar(values["bce"]),
        dice_term=_scalar(values["dice_term"]), inter=_scalar(values["inter"]),
        total=total,
    )


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Halt after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.since = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.patience


def simulate_early_stopping(val_losses: Sequence[float], patience: int) -> tuple[int, int]:
    """Run the early-stopping rule over a scripted loss sequence.

    Returns (best_epoch, last_epoch_run), 1-indexed; the sequence may end
    before the rule fires.
    """
    stopper = EarlyStopper(patience)
    last = 0
    for epoch, v in enumerate(val_losses, start=1):
        last = epoch
        if stopper.update(epoch, v):
            break
    return stopper.best_epoch, last


# ---------------------------------------------------------------------------
# training engine
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    kl: float = 0.0
    mse: float = 0.0
    bce: float = 0.0
    inter: float = 0.0
    lr: float = 0.0


@dataclass
class FitResult:
    model: SegModel
    history: list[EpochLog]
    state: TrainState


def _write_log(path, history: list[EpochLog]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(asdict(rec), sort_keys=True) for rec in history]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def _make_prompts(masks: Sequence[BinaryMask], kind: str, seed: int,
                  n_fg: int, n_bg: int) -> list:
    out = []
    for j, m in enumerate(masks):
        box = prompts_mod.box_from_mask(m, pad=1)
        if kind == "box":
            out.append(box)
            continue
        pts = prompts_mod.sample_points(m, n_fg, n_bg, seed=(seed * 100003 + j) & 0x7FFFFFFF)
        out.append(pts if kind == "points" else prompts_mod.make_hybrid(box, pts))
    return out


def _choose_prompt_kind(rng: np.random.Generator, mix: Sequence[float]) -> str:
    kinds = ("box", "points", "hybrid")
    probs = np.asarray(mix, dtype=np.float64)
    probs = probs / probs.sum()
    return kinds[rng.choice(3, p=probs)]


def _fit(model: SegModel, data: SplitData, cfg: DistillConfig,
         batch_loss: Callable, val_loss: Callable,
         log_path=None, extra_params: Sequence[nn.Parameter] = ()) -> FitResult:
    """Shared AdamW loop with per-epoch seeded shuffling and early stopping."""
    train = data.train
    if not train or not data.val:
        raise InsufficientDataError("training requires nonempty train and val splits")
    params = [p for p in model.parameters() if p.requires_grad]
    params += [p for p in extra_params if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    history: list[EpochLog] = []
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = _epoch_permutation(cfg.seed, epoch, n)
        epoch_rng = np.random.default_rng((cfg.seed, epoch, 1))
        running: dict[str, float] = {"total": 0.0, "kl": 0.0, "mse": 0.0, "bce": 0.0, "inter": 0.0}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = [train[i] for i in idx]
            breakdown = batch_loss(model, batch, epoch_rng)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            running["total"] += _scalar(breakdown.total)
            running["kl"] += breakdown.kl
            running["mse"] += breakdown.mse
            running["bce"] += breakdown.bce
            running["inter"] += breakdown.inter
            n_batches += 1
        model.eval()
        with torch.no_grad():
            v = float(val_loss(model, data.val))
        history.append(EpochLog(
            epoch=epoch,
            train_loss=running["total"] / n_batches,
            val_loss=v,
            kl=running["kl"] / n_batches,
            mse=running["mse"] / n_batches,
            bce=running["bce"] / n_batches,
            inter=running["inter"] / n_batches,
            lr=cfg.lr,
        ))
        stop = stopper.update(epoch, v)
        if v == stopper.best and epoch == stopper.best_epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        _write_log(log_path, history)
    state = TrainState(
        epoch=history[-1].epoch if history else 0,
        best_val_loss=stopper.best,
        epochs_since_improve=stopper.since,
        best_epoch=stopper.best_epoch,
    )
    return FitResult(model=model, history=history, state=state)


def _supervised_breakdown(probs: torch.Tensor, ys: torch.Tensor,
                          cfg: DistillConfig, with_dice: bool) -> LossBreakdown:
    bce = seg_bce(probs, ys)
    dice_term = dice_loss(probs, ys) if with_dice else bce.new_zeros(())
    total = cfg.lambda_bce * (bce + dice_term)
    return LossBreakdown(kl=0.0, mse=0.0, bce=_scalar(bce),
                         dice_term=_scalar(dice_term), inter=0.0, total=total)


def train_teacher(model: SegModel, data: SplitData, cfg: DistillConfig,
                  log_path=None) -> SegModel:
    """Fine-tune a teacher with BCE + Dice on the train split.

    Prompt-aware teachers receive per-batch prompts whose kind is drawn from
    cfg.prompt_mix; validation always uses box prompts so the early-stopping
    signal is deterministic.
    """
    in_ch = model.config.in_channels

    def batch_loss(m, batch, epoch_rng):
        xs, ys = samples_to_tensors(batch, in_ch)
        if m.accepts_prompts:
            kind = _choose_prompt_kind(epoch_rng, cfg.prompt_mix)
            seed = int(epoch_rng.integers(0, 2**31 - 1))
            plist = _make_prompts([s.mask for s in batch], kind, seed,
                                  cfg.n_fg_points, cfg.n_bg_points)
            logits = m(xs, plist)
        else:
            logits = m(xs)
        probs = torch.sigmoid(logits[:, 0])
        return _supervised_breakdown(probs, ys, cfg, with_dice=True)

    def val_loss(m, samples):
        xs, ys = samples_to_tensors(samples, in_ch)
        if m.accepts_prompts:
            plist = _make_prompts([s.mask for s in samples], "box", 0, 0, 0)
            logits = m(xs, plist)
        else:
            logits = m(xs)
        probs = torch.sigmoid(logits[:, 0])
        return float(seg_bce(probs, ys) + dice_loss(probs, ys))

    return _fit(model, data, cfg, batch_loss, val_loss, log_path=log_path).model


def train_student_supervised(student: SegModel, data: SplitData, cfg: DistillConfig,
                             log_path=None) -> FitResult:
    """Plain supervised run of the student (BCE, optionally + Dice).

    This is the reference trace that distillation with lambda_kl =
    lambda_mse = 0 must reproduce exactly.
    """
    in_ch = student.config.in_channels

    def batch_loss(m, batch, epoch_rng):
        xs, ys = samples_to_tensors(batch, in_ch)
        probs = torch.sigmoid(m(xs)[:, 0])
        return _supervised_breakdown(probs, ys, cfg, with_dice=cfg.supervised_dice)

    def val_loss(m, samples):
        xs, ys = samples_to_tensors(samples, in_ch)
        probs = torch.sigmoid(m(xs)[:, 0])
        return float(seg_bce(probs, ys))

    return _fit(student, data, cfg, batch_loss, val_loss, log_path=log_path)


class _FeatureProjection(nn.Module):
    """1x1 conv mapping student feature channels onto teacher channels."""

    def __init__(self, c_student: int, c_teacher: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Conv2d(c_student, c_teacher, 1)

    def forward(self, x):
        return self.proj(x)


def distill_student(teachers: Sequence[SegModel], student: SegModel, data: SplitData,
                    cfg: DistillConfig, log_path=None) -> FitResult:
    """Train the student against frozen teachers with the hybrid objective.

    Per batch: teacher logits/probs, student logits/probs, then the KL, MSE,
    hard-supervision, and optional intermediate-feature terms combined by
    total_loss. fusion_mode="confidence" replaces the fixed-weight teacher
    sums with a single per-pixel fused supervision signal.
    """
    if not teachers:
        raise ConfigurationError("distillation needs at least one teacher")
    if len(cfg.teacher_weights) < len(teachers):
        raise ConfigurationError(
            f"{len(teachers)} teachers but only {len(cfg.teacher_weights)} weights"
        )
    for t in teachers:
        t.eval()
        for p in t.parameters():
            p.requires_grad_(False)
    in_ch = student.config.in_channels
    weights = cfg.teacher_weights[: len(teachers)]

    projection: nn.Module | None = None
    if cfg.lambda_inter > 0:
        ref = teachers[cfg.inter_teacher]
        with torch.no_grad():
            probe = torch.zeros(1, in_ch, 32, 32)
            ref(probe, [None] * 1) if ref.accepts_prompts else ref(probe)
            student(probe)
            c_t = ref.features()[ref.feature_stage].shape[1]
            c_s = student.features()[student.feature_stage].shape[1]
        projection = _FeatureProjection(c_s, c_t, seed=cfg.seed)

    def teacher_outputs(batch, xs):
        outs = []
        for t in teachers:
            if t.accepts_prompts:
                plist = _make_prompts([s.mask for s in batch], "box", 0, 0, 0)
                outs.append(t(xs, plist))
            else:
                outs.append(t(xs))
        return outs

    def breakdown_for(m, batch, xs, ys):
        with torch.no_grad():
            t_logits = teacher_outputs(batch, xs)
            if cfg.lambda_inter > 0:
                ref = teachers[cfg.inter_teacher]
                t_feat = ref.features()[ref.feature_stage]
        s_logits = m(xs)
        s_prob_grid = torch.sigmoid(s_logits)
        parts: dict[str, torch.Tensor] = {}
        if cfg.fusion_mode == "confidence":
            fused = confidence_fuse([t.detach() for t in t_logits])
            parts["kl"] = weighted_kl([fused.fused_logits], s_logits, (1.0,),
                                      cfg.distill_temperature, cfg.hinton_scaling)
            parts["mse"] = weighted_mse([torch.sigmoid(fused.fused_logits)],
                                        s_prob_grid, (1.0,))
        else:
            parts["kl"] = weighted_kl(t_logits, s_logits, weights,
                                      cfg.distill_temperature, cfg.hinton_scaling)
            parts["mse"] = weighted_mse([torch.sigmoid(t) for t in t_logits],
                                        s_prob_grid, weights)
        parts["bce"] = seg_bce(s_prob_grid[:, 0], ys)
        parts["dice_term"] = (dice_loss(s_prob_grid[:, 0], ys)
                              if cfg.supervised_dice else s_logits.new_zeros(()))
        if cfg.lambda_inter > 0:
            s_feat = m.features()[m.feature_stage]
            parts["inter"] = inter_feature_loss(t_feat, s_feat, projection)
        return total_loss(parts, cfg)

    def batch_loss(m, batch, epoch_rng):
        xs, ys = samples_to_tensors(batch, in_ch)
        return breakdown_for(m, batch, xs, ys)

    def val_loss(m, samples):
        xs, ys = samples_to_tensors(samples, in_ch)
        return float(breakdown_for(m, samples, xs, ys).total)

    extra = list(projection.parameters()) if projection is not None else ()
    return _fit(student, data, cfg, batch_loss, val_loss,
                log_path=log_path, extra_params=extra)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferResult:
    mask: BinaryMask
    prob: ProbMap
    prompt_ignored: bool = False

    def __iter__(self):
        return iter((self.mask, self.prob))


def infer(model: SegModel, image: RasterImage, prompt=None,
          threshold: float = 0.5) -> InferResult:
    """Run eval-mode inference; mask is strict prob > threshold.

    A prompt passed to a prompt-free model is ignored and flagged in the
    result.
    """
    prompt_ignored = prompt is not None and not model.accepts_prompts
    used = prompt if model.accepts_prompts else None
    prob = model.predict_prob(image, used)
    return InferResult(mask=prob.threshold(threshold), prob=prob,
                       prompt_ignored=prompt_ignored)
