"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines go to the real stderr so they stay visible under pytest capture. The
distillation end-to-end criterion trains three teachers and the student at
desk scale; everything else is oracle- or property-based and fast.
"""

import io
import json
import math
import socket
import sys
import time
import zipfile

import numpy as np
import pytest
import torch

from distillseg import augment, checkpoint, cli, distill, imaging, metrics, nets
from distillseg.imaging import BinaryMask, RasterImage
from distillseg.prompts import box_from_mask

torch.set_num_threads(2)


def _report(criterion: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[acceptance] {status} {criterion}{suffix}", file=sys.__stderr__, flush=True)
    assert ok, f"{criterion}{suffix}"


# ---------------------------------------------------------------------------
# oracles (independent of the implementations they check)
# ---------------------------------------------------------------------------

def naive_metrics(pred: np.ndarray, gt: np.ndarray):
    """Per-pixel counting for mpa/miou/dice with empty-class skipping."""
    tp = [0, 0]
    fp = [0, 0]
    fn = [0, 0]
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            for cls in (0, 1):
                p = pred[r, c] == cls
                g = gt[r, c] == cls
                if p and g:
                    tp[cls] += 1
                elif p and not g:
                    fp[cls] += 1
                elif not p and g:
                    fn[cls] += 1
    recalls = [tp[i] / (tp[i] + fn[i]) for i in (0, 1) if tp[i] + fn[i] > 0]
    ious = [tp[i] / (tp[i] + fp[i] + fn[i]) for i in (0, 1) if tp[i] + fn[i] > 0]
    mpa = sum(recalls) / len(recalls)
    miou = sum(ious) / len(ious)
    dice = 2 * tp[1] / (2 * tp[1] + fp[1] + fn[1]) if 2 * tp[1] + fp[1] + fn[1] else None
    return mpa, miou, dice


def brute_hausdorff(a_pts, b_pts) -> float:
    def directed(xs, ys):
        worst = 0.0
        for ax, ay in xs:
            best = math.inf
            for bx, by in ys:
                d = math.sqrt((ax - bx) ** 2 + (ay - by) ** 2)
                if d < best:
                    best = d
            worst = max(worst, best)
        return worst

    return max(directed(a_pts, b_pts), directed(b_pts, a_pts))


def naive_boundary(mask: np.ndarray):
    pts = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= h or cc < 0 or cc >= w or not mask[rr, cc]:
                    pts.append((r, c))
                    break
    return pts


def test_criterion_01_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1001)
    checked = 0
    ok = True
    detail = ""
    for _ in range(200):
        density = rng.uniform(0.15, 0.85)
        pred = (rng.uniform(size=(16, 16)) < density).astype(np.uint8)
        gt = (rng.uniform(size=(16, 16)) < density).astype(np.uint8)
        if not pred.any():
            pred[rng.integers(16), rng.integers(16)] = 1
        if not gt.any():
            gt[rng.integers(16), rng.integers(16)] = 1
        c = metrics.confusion(BinaryMask(pred), BinaryMask(gt))
        mpa_o, miou_o, dice_o = naive_metrics(pred, gt)
        if abs(metrics.mpa(c) - mpa_o) > 1e-12 or abs(metrics.miou(c) - miou_o) > 1e-12:
            ok, detail = False, "mpa/miou mismatch"
            break
        if dice_o is not None and abs(metrics.dice(c) - dice_o) > 1e-12:
            ok, detail = False, "dice mismatch"
            break
        hd = metrics.hausdorff(metrics.boundary(BinaryMask(pred)),
                               metrics.boundary(BinaryMask(gt)))
        hd_o = brute_hausdorff(naive_boundary(pred), naive_boundary(gt))
        if hd != hd_o:
            ok, detail = False, f"hausdorff {hd} != brute {hd_o}"
            break
        checked += 1
    elapsed = time.time() - t0
    ok = ok and checked == 200 and elapsed < 10.0
    _report("criterion 1: metric oracle suite (200 pairs, 1e-12 / exact HD)",
            ok, detail or f"{checked} pairs in {elapsed:.1f}s")


def test_criterion_02_parameter_arithmetic():
    t0 = time.time()
    r = nets.reduction_ratio(639e6, 22e6)
    ok = 0.9655 <= r <= 0.9657 and f"{r:.1%}" == "96.6%"
    vit = nets.build_teacher("prompt_vit", seed=0)
    student = nets.build_student(seed=0)
    pv, ps = nets.count_params(vit), nets.count_params(student)
    toy = nets.reduction_ratio(pv, ps)
    ok = ok and toy >= 0.90
    elapsed = time.time() - t0
    _report("criterion 2: parameter arithmetic (paper ratio + toy >= 90%)",
            ok and elapsed < 1.0,
            f"paper {r:.4f}, toy {toy:.4f} ({ps.total}/{pv.total}), {elapsed:.2f}s")


def test_criterion_03_loss_correctness():
    t0 = time.time()
    gen = torch.Generator().manual_seed(7)
    t_logits = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64)
    y = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).double()
    t_feat = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64)

    losses = {
        "kl": lambda s: distill.weighted_kl([t_logits], s, (1.0,), 2.0),
        "mse": lambda s: distill.weighted_mse([torch.sigmoid(t_logits)],
                                              torch.sigmoid(s), (1.0,)),
        "bce": lambda s: distill.seg_bce(torch.sigmoid(s), y),
        "dice": lambda s: distill.dice_loss(torch.sigmoid(s), y),
        "inter": lambda s: distill.inter_feature_loss(t_feat, s, torch.nn.Identity()),
    }
    agreement = {
        "kl": (t_logits, 0.0),
        "mse": (t_logits, 0.0),
        "bce": (torch.logit(y.clamp(1e-7, 1 - 1e-7)), None),  # near-floor, checked <= 2e-7
        "dice": (torch.logit(y.clamp(1e-7, 1 - 1e-7)), None),
        "inter": (t_feat, 0.0),
    }
    ok = True
    detail = ""
    rng = np.random.default_rng(3)
    for name, fn in losses.items():
        s0 = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64)
        if float(fn(s0)) < 0:
            ok, detail = False, f"{name} negative"
            break
        agree_in, target = agreement[name]
        v = float(fn(agree_in))
        if target == 0.0 and abs(v) > 1e-12:
            ok, detail = False, f"{name} not zero at agreement ({v})"
            break
        if target is None and v > 2e-7:  # clamped-probability floor
            ok, detail = False, f"{name} at agreement {v} above floor"
            break
        s = s0.clone().requires_grad_(True)
        grad = torch.autograd.grad(fn(s), s)[0]
        for _ in range(12):
            i = int(rng.integers(64))
            with torch.no_grad():
                flat = s.view(-1)
                orig = float(flat[i])
                flat[i] = orig + 1e-4
                up = float(fn(s))
                flat[i] = orig - 1e-4
                down = float(fn(s))
                flat[i] = orig
            fd = (up - down) / 2e-4
            an = float(grad.view(-1)[i])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            if rel >= 1e-4:
                ok, detail = False, f"{name} grad rel err {rel:.2e}"
                break
        if not ok:
            break
    elapsed = time.time() - t0
    _report("criterion 3: loss correctness (nonneg, zero-at-agreement, gradients)",
            ok and elapsed < 30.0, detail or f"5 losses checked in {elapsed:.1f}s")


@pytest.fixture(scope="module")
def desk_run():
    """Shared desk-scale training: 3 teachers + distilled student on the
    200-sample 64x64 fixture."""
    t0 = time.time()
    samples = imaging.synth_fixture(seed=42, n=200, size=64)
    split = imaging.split_dataset(samples, (0.8, 0.1, 0.1), seed=42)
    data = imaging.SplitData(samples={s.id: s for s in samples}, split=split)

    conv_cfg = distill.DistillConfig(lr=1e-3, batch_size=16, max_epochs=15,
                                     patience=20, seed=0)
    vit_cfg = distill.DistillConfig(lr=4e-4, batch_size=16, max_epochs=15,
                                    patience=20, seed=0)
    teachers = {}
    val_mious = {}
    for arch, cfg in (("prompt_vit", vit_cfg), ("unet_like", conv_cfg),
                      ("deeplab_like", conv_cfg)):
        model = nets.build_teacher(arch, seed=sum(map(ord, arch)))
        model = distill.train_teacher(model, data, cfg)
        pf = (lambda s: box_from_mask(s.mask, pad=1)) if model.accepts_prompts else None
        val_mious[arch] = metrics.evaluate(model, data.val, prompt_fn=pf).aggregate["miou"]
        teachers[arch] = model

    student_cfg = distill.DistillConfig(lr=2e-3, batch_size=16, max_epochs=45,
                                        patience=20, seed=0, distill_temperature=2.0)
    student = nets.build_student(seed=3)
    result = distill.distill_student(list(teachers.values()), student, data, student_cfg)

    test_mious = {}
    for arch, model in teachers.items():
        pf = (lambda s: box_from_mask(s.mask, pad=1)) if model.accepts_prompts else None
        test_mious[arch] = metrics.evaluate(model, data.test, prompt_fn=pf).aggregate["miou"]
    student_miou = metrics.evaluate(result.model, data.test).aggregate["miou"]
    return {
        "elapsed": time.time() - t0,
        "val_mious": val_mious,
        "test_mious": test_mious,
        "student_miou": student_miou,
        "teachers": teachers,
        "student": result.model,
        "data": data,
    }


def test_criterion_04_distillation_end_to_end(desk_run):
    r = desk_run
    teachers_ok = all(v >= 0.93 for v in r["val_mious"].values())
    best = max(r["test_mious"].values())
    student_ok = r["student_miou"] >= 0.90 and (best - r["student_miou"]) <= 0.05
    ratio = nets.count_params(r["student"]).total / \
        nets.count_params(r["teachers"]["prompt_vit"]).total
    ok = (teachers_ok and student_ok and ratio < 0.10 and r["elapsed"] < 1800)
    detail = (f"teacher val mIoU {' '.join(f'{k}={v:.4f}' for k, v in r['val_mious'].items())}; "
              f"student test mIoU {r['student_miou']:.4f} vs best {best:.4f}; "
              f"params {ratio:.1%}; {r['elapsed']:.0f}s")
    _report("criterion 4: distillation end-to-end at desk scale", ok, detail)


def test_criterion_05_equivalence_reductions():
    samples = imaging.synth_fixture(seed=8, n=20, size=32)
    split = imaging.split_dataset(samples, (0.8, 0.1, 0.1), seed=8)
    data = imaging.SplitData(samples={s.id: s for s in samples}, split=split)
    micro_vit = nets.ViTConfig(dim=16, depth=1, patch=4, heads=2, base_grid=4)
    teachers = [
        nets.build_teacher("prompt_vit", micro_vit, seed=1),
        nets.build_teacher("unet_like", nets.UNetConfig(width=4), seed=2),
        nets.build_teacher("deeplab_like", nets.DeepLabConfig(width=4), seed=3),
    ]
    stu_cfg = nets.StudentConfig(dims=(8, 16), depths=(1, 1), heads=(1, 1))

    def cfg(**kw):
        base = dict(lr=1e-3, batch_size=8, max_epochs=3, patience=10, seed=0)
        base.update(kw)
        return distill.DistillConfig(**base)

    res3 = distill.distill_student(teachers, nets.build_student(stu_cfg, seed=7),
                                   data, cfg(teacher_weights=(1, 0, 0)))
    res1 = distill.distill_student(teachers[:1], nets.build_student(stu_cfg, seed=7),
                                   data, cfg(teacher_weights=(1.0,)))
    trace3 = [(h.train_loss, h.val_loss) for h in res3.history]
    trace1 = [(h.train_loss, h.val_loss) for h in res1.history]
    one_hot_ok = trace3 == trace1

    res_d = distill.distill_student(teachers[:1], nets.build_student(stu_cfg, seed=7),
                                    data, cfg(teacher_weights=(1.0,),
                                              lambda_kl=0.0, lambda_mse=0.0))
    res_s = distill.train_student_supervised(nets.build_student(stu_cfg, seed=7),
                                             data, cfg(teacher_weights=(1.0,)))
    sup_ok = ([h.train_loss for h in res_d.history] == [h.train_loss for h in res_s.history]
              and [h.val_loss for h in res_d.history] == [h.val_loss for h in res_s.history])
    _report("criterion 5: equivalence reductions (one-hot weights; zero distill lambdas)",
            one_hot_ok and sup_ok,
            f"one-hot exact={one_hot_ok}, supervised exact={sup_ok}")


def test_criterion_06_diffusion_suite():
    t0 = time.time()
    mono_ok = True
    for kind in ("linear", "cosine"):
        for steps in (2, 3, 5, 10, 50, 200, 1000):
            sched = augment.make_schedule(kind, steps)
            if not (np.diff(sched.alpha_bars) < 0).all():
                mono_ok = False

    rng = np.random.default_rng(0)
    x0 = RasterImage(rng.uniform(size=(58, 58, 3)).astype(np.float32))
    gen = torch.Generator().manual_seed(0)
    stats_ok = True
    for kind in ("linear", "cosine"):
        sched = augment.make_schedule(kind, 1000)
        eps = torch.randn(3, 58, 58, generator=gen)
        x_t = augment.forward_diffuse(x0, 1000, eps, sched)
        if not (abs(float(x_t.mean())) < 0.05 and 0.9 <= float(x_t.var()) <= 1.1):
            stats_ok = False

    closed_ok = True
    for steps in (2, 10, 50):
        sched = augment.make_schedule("linear", steps)
        base = torch.rand(1, 8, 8, generator=gen) * 2 - 1
        x = base.clone()
        acc = torch.zeros_like(base)
        for t in range(1, steps + 1):
            e = torch.randn(1, 8, 8, generator=gen)
            a = math.sqrt(sched.alpha(t))
            x = a * x + math.sqrt(sched.beta(t)) * e
            acc = a * acc + math.sqrt(sched.beta(t)) * e
            combined = acc / math.sqrt(1.0 - sched.alpha_bar(t))
            if float((augment.forward_diffuse(base, t, combined, sched) - x).abs().max()) >= 1e-6:
                closed_ok = False

    den_t0 = time.time()
    images = [s.image for s in imaging.synth_fixture(seed=3, n=200, size=16)]
    sched = augment.make_schedule("linear", 50)
    _, hist = augment.train_denoiser(
        augment.ToyDenoiser(seed=0), images, sched,
        augment.DenoiserTrainConfig(epochs=8, batch_size=32, lr=2e-3, seed=0))
    den_elapsed = time.time() - den_t0
    halved_ok = hist[-1] <= 0.5 * hist[0] and den_elapsed < 300

    ok = mono_ok and stats_ok and closed_ok and halved_ok
    _report("criterion 6: diffusion suite (monotone, terminal stats, closed-form, halving)",
            ok,
            f"denoiser {hist[0]:.3f}->{hist[-1]:.3f} in {den_elapsed:.0f}s; "
            f"total {time.time()-t0:.0f}s")


def test_criterion_07_early_stopping():
    rng = np.random.default_rng(5)
    ok = True
    detail = ""
    for trial in range(50):
        best_at = int(rng.integers(1, 15))
        seq = list(np.linspace(2.0, 1.0, best_at + 1))[1:]  # strictly improving to 1.0
        seq += list(1.0 + rng.uniform(0.001, 0.5, size=40))  # never improves again
        best, last = distill.simulate_early_stopping(seq, patience=20)
        if best != best_at or last != best_at + 20:
            ok, detail = False, f"trial {trial}: best {best}, last {last}, expect {best_at}+20"
            break
        if seq[best - 1] != min(seq[:last]):
            ok, detail = False, "returned epoch is not the minimum"
            break
    _report("criterion 7: early stopping halts at best+patience(=20) and keeps the best epoch",
            ok, detail or "50 scripted sequences")


def test_criterion_08_lora_contracts():
    micro = nets.ViTConfig(dim=16, depth=2, patch=4, heads=2, base_grid=4)
    m = nets.build_teacher("prompt_vit", micro, seed=0)
    m.eval()
    xs = torch.randn(100, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        before = m(xs, [None] * 100)
    params_before = nets.count_params(m).total
    nets.inject_lora(m, rank=4, alpha=4.0, seed=1)
    m.eval()
    with torch.no_grad():
        after = m(xs, [None] * 100)
    zero_delta = float((before - after).abs().max()) == 0.0

    added = nets.count_params(m).total - params_before
    expected = 4 * (16 + 16) * len(m.lora_spec["targets"])  # r*(d_in+d_out) per layer
    count_ok = added == expected

    frozen = {n: p.detach().clone().numpy().tobytes()
              for n, p in m.named_parameters() if not p.requires_grad}
    opt = torch.optim.AdamW([p for p in m.parameters() if p.requires_grad], lr=1e-2)
    y = torch.rand(4, 1, 16, 16)
    x = torch.randn(4, 3, 16, 16)
    for _ in range(10):
        loss = ((torch.sigmoid(m(x, [None] * 4)) - y) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    frozen_ok = all(p.detach().numpy().tobytes() == frozen[n]
                    for n, p in m.named_parameters() if not p.requires_grad)
    lora_moved = any("lora_" in n and p.abs().sum() > 0
                     for n, p in m.named_parameters())

    _report("criterion 8: LoRA contracts (zero delta, frozen base, r*(d_in+d_out))",
            zero_delta and count_ok and frozen_ok and lora_moved,
            f"added {added} params over {len(m.lora_spec['targets'])} layers")


def test_criterion_09_service_lifecycle(tmp_path):
    from fastapi.testclient import TestClient
    from PIL import Image

    from distillseg.service import JobStore, ServiceConfig, create_app

    t0 = time.time()
    models = tmp_path / "models"
    models.mkdir()
    student = nets.build_student(
        nets.StudentConfig(dims=(8, 16), depths=(1, 1), heads=(1, 1)), seed=0)
    checkpoint.save_model(models / "small.ckpt", student)
    cfg = ServiceConfig(models_dir=str(models), jobs_dir=str(tmp_path / "jobs"),
                        queue_dir=str(tmp_path / "queue"))
    client = TestClient(create_app(cfg))

    samples = imaging.synth_fixture(seed=5, n=3, size=32)
    files = []
    for s in samples:
        buf = io.BytesIO()
        Image.fromarray((s.image.data * 255).astype(np.uint8)).save(buf, format="PNG")
        files.append(("images", (f"{s.id}.png", buf.getvalue(), "image/png")))
    job_id = client.post("/api/jobs", data={"model": "small"}, files=files).json()["job_id"]
    states = []
    for _ in range(500):
        rec = client.get(f"/api/jobs/{job_id}").json()
        states.append((rec["status"], rec["n_done"]))
        if rec["status"] in ("done", "failed"):
            break
        time.sleep(0.02)
    lifecycle_ok = states[-1] == ("done", 3)
    progress = [n for _, n in states]
    monotone_ok = all(a <= b for a, b in zip(progress, progress[1:]))
    z = client.get(f"/api/jobs/{job_id}/masks")
    zf = zipfile.ZipFile(io.BytesIO(z.content))
    masks_ok = len(zf.namelist()) == 3
    for name in zf.namelist():
        arr = np.asarray(Image.open(io.BytesIO(zf.read(name))))
        masks_ok = masks_ok and set(np.unique(arr)) <= {0, 255}

    # restart mid-job: a running record must recover to failed, never corrupt
    store = JobStore(tmp_path / "jobs2")
    rec = store.create("small", [("a.png", b"x")])
    store.update(rec.id, status="running", n_done=0)
    store2 = JobStore(tmp_path / "jobs2")
    recovered = store2.get(rec.id)
    restart_ok = recovered is not None and recovered.status == "failed"

    # offline segment under a no-network harness
    in_dir = tmp_path / "in"
    in_dir.mkdir()
    for s in samples:
        imaging.save_image(s.image, in_dir / f"{s.id}.png")
    orig_connect = socket.socket.connect
    orig_create = socket.create_connection

    def blocked(*a, **k):
        raise AssertionError("network attempted during offline segment")

    socket.socket.connect = blocked
    socket.create_connection = blocked
    try:
        rc = cli.main(["segment", "--model", str(models / "small.ckpt"),
                       "--in", str(in_dir), "--out", str(tmp_path / "out")])
    finally:
        socket.socket.connect = orig_connect
        socket.create_connection = orig_create
    offline_ok = rc == 0 and len(list((tmp_path / "out").glob("*.png"))) == 3

    elapsed = time.time() - t0
    ok = lifecycle_ok and monotone_ok and masks_ok and restart_ok and offline_ok and elapsed < 120
    _report("criterion 9: service lifecycle, restart recovery, offline segment",
            ok, f"states {sorted(set(states))}; {elapsed:.0f}s")


def test_criterion_10_t_test_oracle():
    rng = np.random.default_rng(123)
    ok = True
    detail = []
    for df in (2, 5, 10):
        n = df + 1
        xs = rng.normal(size=n)
        ys = rng.normal(size=n)
        t, p = metrics.paired_t_test(xs, ys)
        z = rng.normal(size=1_000_000)
        v = rng.chisquare(df, size=1_000_000)
        p_mc = float(np.mean(np.abs(z / np.sqrt(v / df)) > abs(t)))
        detail.append(f"df={df}: p={p:.5f} mc={p_mc:.5f}")
        if abs(p - p_mc) > 2e-3:
            ok = False
    _report("criterion 10: paired t-test matches Monte-Carlo t-CDF within 2e-3",
            ok, "; ".join(detail))
