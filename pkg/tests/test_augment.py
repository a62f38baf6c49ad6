import math

import numpy as np
import pytest
import torch

from distillseg import augment, imaging, metrics
from distillseg.errors import (
    ConfigurationError,
    EmptyPromptError,
    ExternalServiceError,
    ShapeError,
    StateTransitionError,
)
from distillseg.imaging import BinaryMask, RasterImage


class TestSchedules:
    def test_linear_two_steps(self):
        sched = augment.make_schedule("linear", 2)
        assert sched.betas == pytest.approx([1e-4, 0.02])

    def test_constant_hook_alpha_bar(self):
        sched = augment.make_schedule("constant", 5, beta=0.1)
        assert sched.alpha_bar(2) == pytest.approx(0.81)
        assert sched.alpha_bar(0) == 1.0

    def test_monotone_alpha_bar_all_counts(self):
        for kind in ("linear", "cosine"):
            for steps in range(2, 1001):
                sched = augment.make_schedule(kind, steps)
                assert (np.diff(sched.alpha_bars) < 0).all(), (kind, steps)
                assert sched.betas.min() > 0 and sched.betas.max() < 1

    def test_too_few_steps(self):
        with pytest.raises(ConfigurationError):
            augment.make_schedule("linear", 1)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            augment.make_schedule("quadratic", 10)


class TestForwardDiffusion:
    def test_t0_identity(self):
        img = imaging.synth_fixture(seed=0, n=1, size=16)[0].image
        sched = augment.make_schedule("linear", 10)
        x = augment.forward_diffuse(img, 0, torch.zeros(3, 16, 16), sched)
        assert torch.allclose(x, augment.to_signal(img))

    def test_constant_beta_scaling(self):
        sched = augment.make_schedule("constant", 5, beta=0.1)
        img = imaging.synth_fixture(seed=1, n=1, size=16)[0].image
        x = augment.forward_diffuse(img, 2, torch.zeros(3, 16, 16), sched)
        assert torch.allclose(x, 0.9 * augment.to_signal(img), atol=1e-6)

    def test_out_of_range(self):
        sched = augment.make_schedule("linear", 10)
        with pytest.raises(ValueError):
            augment.forward_diffuse(torch.zeros(1, 4, 4), 11, torch.zeros(1, 4, 4), sched)

    def test_terminal_statistics(self):
        # x_T should approach N(0, 1) when the image is fully noised
        rng = np.random.default_rng(0)
        x0 = RasterImage(rng.uniform(size=(58, 58, 3)).astype(np.float32))  # 10,092 elements
        gen = torch.Generator().manual_seed(0)
        for kind in ("linear", "cosine"):
            sched = augment.make_schedule(kind, 1000)
            eps = torch.randn(3, 58, 58, generator=gen)
            x_t = augment.forward_diffuse(x0, 1000, eps, sched)
            assert abs(float(x_t.mean())) < 0.05
            assert 0.9 <= float(x_t.var()) <= 1.1

    def test_closed_form_matches_iterated(self):
        # iterate single steps, tracking the combined noise, then compare
        gen = torch.Generator().manual_seed(1)
        for steps in (2, 10, 50):
            sched = augment.make_schedule("linear", steps)
            x0 = torch.rand(1, 8, 8, generator=gen) * 2 - 1
            x = x0.clone()
            acc = torch.zeros_like(x0)
            for t in range(1, steps + 1):
                e = torch.randn(1, 8, 8, generator=gen)
                a = math.sqrt(sched.alpha(t))
                x = a * x + math.sqrt(sched.beta(t)) * e
                acc = a * acc + math.sqrt(sched.beta(t)) * e
                combined = acc / math.sqrt(1.0 - sched.alpha_bar(t))
                closed = augment.forward_diffuse(x0, t, combined, sched)
                assert float((closed - x).abs().max()) < 1e-6, (steps, t)


class TestDiffusionLoss:
    def test_oracle_denoiser_zero(self):
        sched = augment.make_schedule("linear", 10)

        class Oracle:
            def __init__(self, eps):
                self.eps = eps

            def predict(self, x_t, t):
                return self.eps

        eps = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
        x0 = torch.rand(3, 8, 8)
        assert float(augment.diffusion_loss(Oracle(eps), x0, 3, eps, sched)) == 0.0

    def test_zero_denoiser_unit_loss(self):
        sched = augment.make_schedule("linear", 10)

        class Zero:
            def predict(self, x_t, t):
                return torch.zeros_like(x_t)

        gen = torch.Generator().manual_seed(42)
        eps = torch.randn(4, 50, 50, generator=gen)
        loss = float(augment.diffusion_loss(Zero(), torch.rand(4, 50, 50), 5, eps, sched))
        assert loss == pytest.approx(1.0, abs=0.05)

    def test_micro_denoiser_gradient_check(self):
        sched = augment.make_schedule("linear", 8)
        den = augment.ToyDenoiser(channels=1, hidden=4, time_dim=8, seed=0).double()
        gen = torch.Generator().manual_seed(3)
        x0 = torch.rand(1, 6, 6, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, 6, 6, generator=gen, dtype=torch.float64)

        def loss_fn():
            return augment.diffusion_loss(den, x0, 4, eps, sched)

        params = list(den.parameters())
        grads = torch.autograd.grad(loss_fn(), params)
        rng = np.random.default_rng(0)
        flat = [(pi, i) for pi, p in enumerate(params) for i in range(p.numel())]
        for k in rng.choice(len(flat), size=40, replace=False):
            pi, i = flat[k]
            p = params[pi]
            orig = float(p.detach().view(-1)[i])
            with torch.no_grad():
                p.view(-1)[i] = orig + 1e-4
                up = float(loss_fn())
                p.view(-1)[i] = orig - 1e-4
                down = float(loss_fn())
                p.view(-1)[i] = orig
            fd = (up - down) / 2e-4
            an = float(grads[pi].view(-1)[i])
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-4


class TestDenoiserTraining:
    def test_loss_halves_and_deterministic(self):
        images = [s.image for s in imaging.synth_fixture(seed=3, n=60, size=16)]
        sched = augment.make_schedule("linear", 50)
        cfg = augment.DenoiserTrainConfig(epochs=8, batch_size=16, lr=2e-3, seed=0)
        den1, hist1 = augment.train_denoiser(augment.ToyDenoiser(seed=0), images, sched, cfg)
        assert hist1[-1] <= 0.5 * hist1[0]
        den2, hist2 = augment.train_denoiser(augment.ToyDenoiser(seed=0), images, sched, cfg)
        assert hist1 == hist2
        for a, b in zip(den1.state_dict().values(), den2.state_dict().values()):
            assert torch.equal(a, b)

    def test_moving_average_nonincreasing(self):
        images = [s.image for s in imaging.synth_fixture(seed=5, n=40, size=16)]
        sched = augment.make_schedule("linear", 50)
        cfg = augment.DenoiserTrainConfig(epochs=20, batch_size=20, lr=1e-3, seed=1)
        _, hist = augment.train_denoiser(augment.ToyDenoiser(seed=1), images, sched, cfg)
        first = np.mean(hist[:10])
        last = np.mean(hist[-10:])
        assert last <= first


class TestReverseProcess:
    def test_final_step_deterministic(self):
        sched = augment.make_schedule("linear", 10)
        den = augment.ToyDenoiser(seed=0)
        x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
        a = augment.denoise_step(x, 1, den, sched, torch.Generator().manual_seed(1))
        b = augment.denoise_step(x, 1, den, sched, torch.Generator().manual_seed(2))
        assert torch.equal(a, b)  # no noise is added at t=1

    def test_t0_rejected(self):
        sched = augment.make_schedule("linear", 10)
        with pytest.raises(ValueError):
            augment.denoise_step(torch.zeros(1, 4, 4), 0, augment.ToyDenoiser(seed=0),
                                 sched, torch.Generator())

    def test_posterior_mean_algebra(self):
        # with a perfect epsilon oracle, the step mean must match the formula
        sched = augment.make_schedule("constant", 6, beta=0.05)
        gen = torch.Generator().manual_seed(4)
        x0 = torch.rand(1, 5, 5, generator=gen) * 2 - 1
        eps = torch.randn(1, 5, 5, generator=gen)
        t = 4
        x_t = augment.forward_diffuse(x0, t, eps, sched)

        class Oracle:
            def predict(self, x, tt):
                return eps

        out = augment.denoise_step(x_t, 1, Oracle(), sched, torch.Generator())
        beta, alpha, abar = sched.beta(1), sched.alpha(1), sched.alpha_bar(1)
        expected = (x_t - beta / math.sqrt(1 - abar) * eps) / math.sqrt(alpha)
        assert float((out - expected).abs().max()) < 1e-9

    def test_sample_deterministic_and_in_range(self):
        sched = augment.make_schedule("linear", 10)
        den = augment.ToyDenoiser(seed=0)
        a = augment.sample(den, sched, (3, 16, 16), seed=7)
        b = augment.sample(den, sched, (3, 16, 16), seed=7)
        assert (a.data == b.data).all()
        assert a.data.min() >= 0.0 and a.data.max() <= 1.0

    def test_trained_sample_beats_noise_ssim(self):
        # single-image dataset: samples should resemble it more than noise does
        target = imaging.synth_fixture(seed=9, n=1, size=16)[0].image
        sched = augment.make_schedule("linear", 30)
        cfg = augment.DenoiserTrainConfig(epochs=60, batch_size=1, lr=3e-3, seed=0)
        den, _ = augment.train_denoiser(augment.ToyDenoiser(seed=0), [target], sched, cfg)
        generated = augment.sample(den, sched, (3, 16, 16), seed=123)
        rng = np.random.default_rng(0)
        noise_img = RasterImage(rng.uniform(size=(16, 16, 3)).astype(np.float32))
        assert metrics.ssim(generated, target) > metrics.ssim(noise_img, target)

    def test_img2img_start(self):
        sched = augment.make_schedule("linear", 20)
        den = augment.ToyDenoiser(seed=0)
        init = imaging.synth_fixture(seed=2, n=1, size=16)[0].image
        out = augment.sample(den, sched, (3, 16, 16), seed=5, init=init, strength=0.3)
        assert out.data.shape == (16, 16, 3)


class TestPromptOptimizer:
    def test_seed_fixed_length_bounds(self):
        out, pos, length = augment.optimize_prompt_with_span("a tongue photo", 0)
        assert len(out) == len("a tongue photo") + length
        assert 3 <= length <= 12
        assert out != "a tongue photo"

    def test_recoverable(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            base = "prompt-" + "".join(chr(97 + int(rng.integers(0, 26)))
                                       for _ in range(int(rng.integers(1, 30))))
            out, pos, length = augment.optimize_prompt_with_span(base, rng)
            assert out[:pos] + out[pos + length:] == base

    def test_uniqueness(self):
        outs = {augment.optimize_prompt("same base prompt", seed) for seed in range(10_000)}
        assert len(outs) >= 9990

    def test_inserted_chars_printable(self):
        out, pos, length = augment.optimize_prompt_with_span("xy", 3)
        assert all(0x20 <= ord(ch) <= 0x7E for ch in out[pos:pos + length])

    def test_empty_prompt(self):
        with pytest.raises(EmptyPromptError):
            augment.optimize_prompt("", 0)

    def test_pool_nonempty(self):
        pool = augment.default_prompt_pool()
        assert len(pool.prompts) >= 1
        for entry in pool.prompts:
            assert entry.text.encode("utf-8").decode("utf-8") == entry.text


class TestComposite:
    def test_full_mask_keeps_image(self):
        s = imaging.synth_fixture(seed=0, n=1, size=16)[0]
        bg = RasterImage(np.zeros((16, 16, 3), dtype=np.float32))
        out = augment.composite_background(
            s.image, BinaryMask(np.ones((16, 16), dtype=np.uint8)), bg)
        assert (out.data == s.image.data).all()

    def test_empty_mask_keeps_background(self):
        s = imaging.synth_fixture(seed=0, n=1, size=16)[0]
        bg = RasterImage(np.full((16, 16, 3), 0.25, dtype=np.float32))
        out = augment.composite_background(
            s.image, BinaryMask(np.zeros((16, 16), dtype=np.uint8)), bg)
        assert (out.data == bg.data).all()

    def test_blend_away_from_feather(self):
        m = np.zeros((16, 16), dtype=np.uint8)
        m[:, :8] = 1
        img = RasterImage(np.zeros((16, 16, 3), dtype=np.float32))
        bg = RasterImage(np.ones((16, 16, 3), dtype=np.float32))
        out = augment.composite_background(img, BinaryMask(m), bg)
        assert (out.data[:, :5] == 0.0).all()   # deep inside the mask
        assert (out.data[:, 11:] == 1.0).all()  # far outside

    def test_shape_mismatch(self):
        img = RasterImage(np.zeros((8, 8, 3), dtype=np.float32))
        bg = RasterImage(np.zeros((9, 9, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            augment.composite_background(img, BinaryMask(np.ones((8, 8), dtype=np.uint8)), bg)


class _StubClient:
    def __init__(self, payload=None, fail=None):
        self.payload = payload
        self.fail = fail

    def generate(self, prompt):
        if self.fail:
            raise self.fail
        return self.payload


def _png_bytes(size=8):
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.full((size, size, 3), 120, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


class TestExternalGenerate:
    def test_stub_creates_pending_item(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        item = augment.external_generate(_StubClient(_png_bytes()), "p", queue)
        assert item.status == "pending"
        assert item.source == "external"
        assert len(queue.pending()) == 1

    def test_client_error_creates_nothing(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        boom = ExternalServiceError("down", retry_after=5)
        with pytest.raises(ExternalServiceError) as err:
            augment.external_generate(_StubClient(fail=boom), "p", queue)
        assert err.value.retry_after == 5
        assert queue.pending() == []

    def test_three_prompts_distinct_ids(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        items = [augment.external_generate(_StubClient(_png_bytes()), f"p{i}", queue)
                 for i in range(3)]
        assert len({it.id for it in items}) == 3

    def test_undecodable_payload(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        with pytest.raises(ExternalServiceError):
            augment.external_generate(_StubClient(b"not an image"), "p", queue)
        assert queue.pending() == []


class TestScreeningQueue:
    def _img(self, seed=0):
        rng = np.random.default_rng(seed)
        return RasterImage(rng.uniform(size=(16, 16, 3)).astype(np.float32))

    def test_enqueue_decide_export(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path / "q")
        items = queue.enqueue([(self._img(i), "ddpm") for i in range(3)])
        queue.decide(items[0].id, "accepted", "alice")
        queue.decide(items[1].id, "accepted", "alice")
        queue.decide(items[2].id, "rejected", "bob")
        manifest = queue.export_accepted(tmp_path / "out")
        rows = manifest.read_text().strip().splitlines()
        assert rows[0] == "id,source,path,reviewer,decided_at"
        assert len(rows) == 3  # header + 2 accepted
        assert not (tmp_path / "out" / f"{items[2].id}.png").exists()

    def test_double_decision_rejected(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        item = queue.add(self._img(), "ddpm")
        queue.decide(item.id, "accepted", "alice")
        with pytest.raises(StateTransitionError):
            queue.decide(item.id, "rejected", "bob")

    def test_no_reentry_to_pending(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        item = queue.add(self._img(), "composite")
        queue.decide(item.id, "rejected", "alice")
        assert queue.get(item.id).status == "rejected"
        assert item.id not in {it.id for it in queue.pending()}

    def test_export_idempotent(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path / "q")
        items = queue.enqueue([(self._img(7), "ddpm")])
        queue.decide(items[0].id, "accepted", "r")
        m1 = queue.export_accepted(tmp_path / "out").read_text()
        m2 = queue.export_accepted(tmp_path / "out").read_text()
        assert m1 == m2

    def test_unknown_item(self, tmp_path):
        queue = augment.ScreeningQueue(tmp_path)
        with pytest.raises(KeyError):
            queue.decide("nope", "accepted", "x")

    def test_pregate_auto_rejects_noise(self, tmp_path):
        refs = [s.image for s in imaging.synth_fixture(seed=1, n=3, size=32)]
        queue = augment.ScreeningQueue(tmp_path, ssim_floor=0.05, references=refs)
        rng = np.random.default_rng(99)
        noise = RasterImage(rng.uniform(size=(32, 32, 3)).astype(np.float32))
        item = queue.add(noise, "ddpm")
        assert item.status == "rejected"
        assert item.reviewer == "auto-pregate"
        # a real fixture image passes the gate
        ok = queue.add(refs[0], "ddpm")
        assert ok.status == "pending"
