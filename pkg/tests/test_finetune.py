import math
from itertools import islice

import numpy as np
import pytest
import torch
from torch import nn

from hazegen.backbone import BackboneConfig, PoolCodec, ToyDenoiser
from hazegen.dataset import Batch, PromptTag, TrainingSample, balanced_batches
from hazegen.errors import ConfigError, DataError, IncompatibleCheckpointError
from hazegen.finetune import (
    LoRALinear,
    NoiseSchedule,
    TrainConfig,
    attach_lora,
    base_state,
    compute_losses,
    draw_noise,
    forward_diffuse,
    load_checkpoint,
    lora_parameters,
    lora_sites,
    make_optimizer,
    masked_diffusion_loss,
    probe_losses,
    sample_losses,
    save_checkpoint,
    train_step,
)


def adapted(seed=0, dtype=torch.float32):
    return attach_lora(ToyDenoiser(BackboneConfig(init_seed=seed)).to(dtype))


def randomize_b(model, seed=0, scale=0.1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for site in lora_sites(model).values():
            site.lora_B.copy_(torch.randn(site.lora_B.shape, generator=gen, dtype=torch.float64) * scale)


class TestSchedule:
    def test_recomputed_coefficients(self):
        s = NoiseSchedule()
        ab = 1.0
        for i in range(500):
            ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
        assert abs(s.alpha_bars[500] - ab) < 1e-12
        assert abs(math.sqrt(s.alpha_bars[500]) - math.sqrt(ab)) < 1e-12

    def test_invariants(self):
        s = NoiseSchedule()
        assert len(s.betas) == 1000 and s.alpha_bars[0] == 1.0
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.alpha_bars) < 0)

    def test_forward_diffuse_limits(self):
        y0, eps = torch.rand(1, 3, 4, 4, dtype=torch.float64), torch.randn(1, 3, 4, 4, dtype=torch.float64)
        s = NoiseSchedule()
        y_t = forward_diffuse(y0, 500, eps, s)
        ab = s.alpha_bars[500]
        torch.testing.assert_close(y_t, math.sqrt(ab) * y0 + math.sqrt(1 - ab) * eps, rtol=0, atol=1e-15)
        from hazegen.finetune import diffuse_with

        assert torch.equal(diffuse_with(y0, eps, 1.0), y0)
        assert torch.equal(diffuse_with(y0, eps, 0.0), eps)

    @pytest.mark.parametrize("t", [0, 1001])
    def test_out_of_range(self, t):
        with pytest.raises(ConfigError):
            forward_diffuse(torch.zeros(1, 3, 2, 2), t, torch.zeros(1, 3, 2, 2), NoiseSchedule())

    def test_bad_schedule(self):
        with pytest.raises(ConfigError):
            NoiseSchedule(beta_start=0.1, beta_end=0.01)


class TestMaskedLoss:
    def test_zero_mask(self):
        e = torch.randn(2, 3, 4, 4)
        assert masked_diffusion_loss(e + 3, e, torch.zeros(2, 4, 4)).item() == 0.0

    def test_perfect_prediction(self):
        e = torch.randn(2, 3, 4, 4)
        assert masked_diffusion_loss(e, e, torch.rand(2, 4, 4)).item() == 0.0

    def test_closed_form(self):
        e = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        assert masked_diffusion_loss(e + 1, e, torch.full((2, 4, 4), 0.5)).item() == 0.25

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            masked_diffusion_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
        with pytest.raises(ValueError):
            masked_diffusion_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4))


class TestLoRA:
    def test_parameter_count(self):
        site = LoRALinear(nn.Linear(64, 64), 8, 8.0)
        assert sum(p.numel() for p in site.parameters() if p.requires_grad) == 2 * 8 * 64

    def test_every_site(self):
        model = adapted()
        sites = lora_sites(model)
        assert sorted(sites) == sorted(model.lora_targets())
        for site in sites.values():
            assert site.lora_A.numel() + site.lora_B.numel() == site.rank * (site.in_features + site.out_features)
        trainable = [p for p in model.parameters() if p.requires_grad]
        assert len(trainable) == 2 * len(sites)
        assert sum(p.numel() for p in trainable) == 9 * 8 * 64

    def test_init_statistics(self):
        site = LoRALinear(nn.Linear(256, 256).double(), 8, 8.0, torch.Generator().manual_seed(0))
        assert not site.lora_B.any()
        assert site.lora_A.var().item() == pytest.approx(1 / 8, rel=0.05)

    def test_zero_init_is_bit_exact(self):
        base = ToyDenoiser()
        y, x = torch.randn(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
        ctx = torch.randn(8, 32)
        with torch.no_grad():
            before = base(y, torch.tensor([3, 700]), ctx, x)
            after = attach_lora(base)(y, torch.tensor([3, 700]), ctx, x)
        assert torch.equal(before, after)

    def test_effective_weight(self):
        layer = nn.Linear(6, 5).double()
        site = LoRALinear(layer, 2, 4.0, torch.Generator().manual_seed(1))
        with torch.no_grad():
            site.lora_B.normal_()
        x = torch.randn(3, 6, dtype=torch.float64)
        w = layer.weight + 2.0 * site.lora_B @ site.lora_A
        torch.testing.assert_close(site(x), x @ w.T + layer.bias, rtol=1e-12, atol=1e-12)

    def test_rank_too_large(self):
        with pytest.raises(ConfigError):
            LoRALinear(nn.Linear(32, 3), 8, 8.0)
        with pytest.raises(ConfigError):
            attach_lora(ToyDenoiser(), rank=33)

    def test_double_attach(self):
        with pytest.raises(ConfigError):
            attach_lora(adapted())

    def test_lora_gradients_match_finite_differences(self):
        model = adapted(dtype=torch.float64)
        randomize_b(model)
        rng = np.random.default_rng(3)
        s = TrainingSample(rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16)), PromptTag.ID, 0)
        sched = NoiseSchedule()
        t, eps = draw_noise([s], sched, torch.Generator().manual_seed(5), torch.float64)

        def loss():
            return sample_losses(model, [s], sched, t, eps).sum()

        loss().backward()
        h = 1e-4
        sites = lora_sites(model)
        for name in ("self_attn.to_q", "cross_attn.to_out", "head_proj"):
            for p in (sites[name].lora_A, sites[name].lora_B):
                for _ in range(3):
                    idx = tuple(int(rng.integers(0, n)) for n in p.shape)
                    with torch.no_grad():
                        old = p[idx].item()
                        p[idx] = old + h
                        up = loss().item()
                        p[idx] = old - h
                        down = loss().item()
                        p[idx] = old
                    fd = (up - down) / (2 * h)
                    an = p.grad[idx].item()
                    assert abs(an - fd) <= 1e-3 * max(abs(fd), abs(an), 1e-8), (name, idx, an, fd)


class EpsOracle(nn.Module):
    """Recovers the true noise when the condition equals the clean target."""

    def __init__(self, schedule):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.ab = torch.from_numpy(schedule.alpha_bars)

    def forward(self, y_t, t, prompt, x):
        ab = self.ab[t].reshape(-1, 1, 1, 1)
        return (y_t - ab.sqrt() * x) / (1 - ab).sqrt() + 0 * self.dummy


def test_zero_total_loss_with_oracle(rng):
    imgs = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
    zero = np.zeros((8, 8))
    batch = Batch(
        [TrainingSample(imgs[0], imgs[1], zero, PromptTag.ID, 0)],
        [TrainingSample(imgs[0], imgs[0], zero, PromptTag.DE, 0)],
        [TrainingSample(imgs[1], imgs[1], np.ones((8, 8)), PromptTag.BS, 0)],
    )
    sched = NoiseSchedule()
    terms = compute_losses(EpsOracle(sched), batch, sched, torch.Generator().manual_seed(0))
    assert terms[0].item() == 0.0 and terms[1].item() == 0.0
    assert terms[3].item() < 1e-20


class TestTraining:
    def test_unbalanced_batch(self, desk_datasets):
        d_id, d_de, d_bs = desk_datasets
        bad = Batch(d_id[:2], d_de[:1], d_bs[:2])
        with pytest.raises(DataError):
            compute_losses(adapted(), bad, NoiseSchedule(), torch.Generator())
        mismatched = Batch(d_id[:1], d_de[1:2], d_bs[:1])
        with pytest.raises(DataError):
            compute_losses(adapted(), mismatched, NoiseSchedule(), torch.Generator())
        mislabeled = Batch(d_id[:1], d_id[:1], d_bs[:1])
        with pytest.raises(DataError):
            compute_losses(adapted(), mislabeled, NoiseSchedule(), torch.Generator())

    def test_step_updates_only_lora(self, desk_datasets):
        model = adapted()
        snapshot = base_state(model)
        a_before = [p.detach().clone() for p in lora_parameters(model)]
        opt = make_optimizer(model)
        gen = torch.Generator().manual_seed(0)
        batches = balanced_batches(*desk_datasets, 6, np.random.default_rng(0))
        for _ in range(3):
            out = train_step(model, list(islice(batches, 2)), NoiseSchedule(), opt, gen)
            assert abs(out.all - (out.id + out.de + out.bs)) < 1e-9
        for k, v in base_state(model).items():
            assert torch.equal(v, snapshot[k]), k
        assert any(not torch.equal(a, p) for a, p in zip(a_before, lora_parameters(model)))

    def test_optimizer_requires_lora(self):
        with pytest.raises(ConfigError):
            make_optimizer(ToyDenoiser())

    def test_probe_is_deterministic(self, desk_datasets):
        model = adapted()
        a = probe_losses(model, *desk_datasets, NoiseSchedule(), repeats=1)
        b = probe_losses(model, *desk_datasets, NoiseSchedule(), repeats=1)
        assert a == b
        assert a.all == pytest.approx(a.id + a.de + a.bs, abs=1e-12)

    def test_pool_codec_losses(self, desk_datasets):
        d_id, d_de, d_bs = desk_datasets
        batch = Batch(d_id[:1], d_de[:1], d_bs[:1])
        terms = compute_losses(adapted(), batch, NoiseSchedule(), torch.Generator().manual_seed(0), codec=PoolCodec())
        assert all(math.isfinite(v.item()) for v in terms)

    def test_train_config_validation(self):
        assert TrainConfig.from_dict({"steps": 5}).steps == 5
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"nope": 1})
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=10)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = adapted(seed=2)
        randomize_b(model, seed=4)
        save_checkpoint(model, tmp_path / "ck", NoiseSchedule(T=500))
        loaded, sched, meta = load_checkpoint(tmp_path / "ck")
        assert sched == NoiseSchedule(T=500)
        assert meta["prompts"]["HIGH"] == PromptTag.HIGH.prompt
        for (n, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(p, q), n
        y, x = torch.randn(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        ctx = torch.randn(8, 32)
        with torch.no_grad():
            assert torch.equal(model(y, torch.tensor([9]), ctx, x), loaded(y, torch.tensor([9]), ctx, x))

    def test_layout(self, tmp_path):
        model = adapted()
        save_checkpoint(model, tmp_path / "ck")
        files = sorted(p.name for p in (tmp_path / "ck").iterdir())
        assert files == sorted([f"{n}.f32" for n in model.lora_targets()] + ["adapter.toml"])
        raw = (tmp_path / "ck" / "head_proj.f32").read_bytes()
        assert raw[:8] == (8).to_bytes(4, "little") + (64).to_bytes(4, "little")

    def test_hash_mismatch(self, tmp_path):
        save_checkpoint(adapted(), tmp_path / "ck")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(tmp_path / "ck", ToyDenoiser(BackboneConfig(init_seed=7)))

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)
