"""LoRA-only masked diffusion fine-tuning.

The denoiser is trained with the epsilon-prediction objective on three kinds
of pairs at once. For a sample with target ``y``, condition ``x``, mask ``m``
and prompt ``p``::

    y_t  = sqrt(abar_t) * y + sqrt(1 - abar_t) * eps
    loss = mean((m * (eps - denoiser(y_t, t, p, x))) ** 2)

The ID and DE thirds of a batch use their confidence masks, the BS third an
all-ones mask; the total is ``L_id + L_de + L_bs`` (each a mean over its
third). Only the low-rank factors receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from hazegen import kvconfig
from hazegen.backbone import BackboneConfig, IdentityCodec, ToyDenoiser, embed_prompt
from hazegen.dataset import PROMPTS, Batch, PromptTag, TrainingSample
from hazegen.errors import ConfigError, DataError, IncompatibleCheckpointError
from hazegen.imageio import read_raw, write_raw

METADATA_FILE = "adapter.toml"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError(f"bad noise schedule {self}")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bars(self) -> np.ndarray:
        """``abar`` indexed by timestep ``0..T``; ``abar[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def to_dict(self) -> dict:
        return asdict(self)


def _check_t(t, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ConfigError(f"timestep out of range [1, {schedule.T}]: {t.tolist()}")
    return t


def diffuse_with(y0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    ab = torch.as_tensor(alpha_bar, dtype=torch.float64).reshape(-1, *([1] * (y0.ndim - 1)))
    return ab.sqrt().to(y0.dtype) * y0 + (1.0 - ab).sqrt().to(y0.dtype) * eps


def forward_diffuse(y0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t = _check_t(t, schedule)
    ab = torch.from_numpy(schedule.alpha_bars)[t]
    return diffuse_with(y0, eps, ab)


def masked_diffusion_loss(eps_pred: torch.Tensor, eps: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean over all elements of ``(mask * (eps - eps_pred)) ** 2``.

    ``mask`` has the prediction's spatial shape and is broadcast over
    channels; ``None`` means all ones.
    """
    if eps_pred.shape != eps.shape:
        raise ValueError(f"prediction {tuple(eps_pred.shape)} vs noise {tuple(eps.shape)}")
    resid = eps - eps_pred
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=resid.dtype)
        if mask.shape != resid.shape[:-3] + resid.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape)} does not fit {tuple(resid.shape)}")
        resid = resid * mask.unsqueeze(-3)
    return resid.pow(2).mean()


class LoRALinear(nn.Module):
    """``base(x) + (alpha / rank) * x A^T B^T`` with the base layer frozen."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        out_f, in_f = base.weight.shape
        if not 1 <= rank <= min(out_f, in_f):
            raise ConfigError(f"LoRA rank {rank} exceeds min({out_f}, {in_f})")
        self.base = base.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        w = base.weight
        a = torch.randn(rank, in_f, generator=generator, dtype=torch.float64) / math.sqrt(rank)
        self.lora_A = nn.Parameter(a.to(w.dtype))
        self.lora_B = nn.Parameter(torch.zeros(out_f, rank, dtype=w.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def attach_lora(denoiser: nn.Module, rank: int = 8, alpha: float = 8.0, seed: int = 0) -> nn.Module:
    """Freeze every base parameter and wrap each eligible linear layer in place."""
    gen = torch.Generator().manual_seed(seed)
    denoiser.requires_grad_(False)
    for name in denoiser.lora_targets():
        parent_name, _, child = name.rpartition(".")
        parent = denoiser.get_submodule(parent_name) if parent_name else denoiser
        layer = getattr(parent, child)
        if isinstance(layer, LoRALinear):
            raise ConfigError(f"{name} already carries a LoRA adapter")
        setattr(parent, child, LoRALinear(layer, rank, alpha, gen))
    return denoiser


def lora_sites(model: nn.Module) -> dict[str, LoRALinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoRALinear)}


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for site in lora_sites(model).values() for p in (site.lora_A, site.lora_B)]


def base_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Snapshot of every non-LoRA tensor, for frozen-base checks."""
    return {k: v.detach().clone() for k, v in model.state_dict().items() if "lora_" not in k}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    grad_accum: int = 4
    lr: float = 2e-4
    steps: int = 200
    resolution: int = 32
    rank: int = 8
    alpha: float = 8.0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        for f in ("batch_size", "grad_accum", "resolution", "rank", "log_every"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.lr <= 0 or self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("lr must be positive; steps and checkpoint_every nonnegative")
        if self.batch_size % 3:
            raise ConfigError(f"batch_size must be divisible by 3, got {self.batch_size}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class LossBreakdown(NamedTuple):
    id: float
    de: float
    bs: float
    all: float


_EMBED_CACHE: dict[tuple[str, int, int], torch.Tensor] = {}


def prompt_tensor(tag: PromptTag, tokens: int = 8, dim: int = 32) -> torch.Tensor:
    key = (tag.prompt, tokens, dim)
    if key not in _EMBED_CACHE:
        _EMBED_CACHE[key] = torch.from_numpy(embed_prompt(tag.prompt, tokens, dim))
    return _EMBED_CACHE[key]


def _stack(samples: Sequence[TrainingSample], field: str, dtype) -> torch.Tensor:
    arr = np.stack([getattr(s, field) for s in samples])
    t = torch.from_numpy(arr).to(dtype)
    return t.permute(0, 3, 1, 2) if t.ndim == 4 else t


def _latent_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return mask
    return F.avg_pool2d(mask[:, None], factor)[:, 0]


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _prompt_dims(model: nn.Module) -> tuple[int, int]:
    cfg = getattr(model, "config", BackboneConfig())
    return cfg.prompt_tokens, cfg.prompt_dim


def draw_noise(samples: Sequence[TrainingSample], schedule: NoiseSchedule, generator, dtype, codec=None):
    """Draw ``(t, eps)`` for a stack of samples from ``generator``."""
    codec = codec or IdentityCodec()
    n = len(samples)
    h, w, c = samples[0].target.shape
    f = codec.factor
    t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    eps = torch.randn((n, c, h // f, w // f), generator=generator, dtype=torch.float64).to(dtype)
    return t, eps


def sample_losses(model, samples: Sequence[TrainingSample], schedule: NoiseSchedule, t, eps, codec=None):
    """Per-sample masked losses, shape ``(n,)``, for fixed noise draws."""
    codec = codec or IdentityCodec()
    dtype = _model_dtype(model)
    y0 = codec.encode(_stack(samples, "target", dtype))
    cond = codec.encode(_stack(samples, "input", dtype))
    mask = _latent_mask(_stack(samples, "mask", dtype), codec.factor)
    tokens, dim = _prompt_dims(model)
    prompt = torch.stack([prompt_tensor(s.prompt, tokens, dim) for s in samples]).to(dtype)
    y_t = forward_diffuse(y0, t, eps, schedule)
    pred = model(y_t, t, prompt, cond)
    resid = (eps - pred) * mask[:, None]
    return resid.pow(2).mean(dim=(1, 2, 3))


def _check_balanced(batch: Batch):
    k = len(batch.id)
    if k == 0 or len(batch.de) != k or len(batch.bs) != k:
        raise DataError(f"unbalanced batch: {len(batch.id)}/{len(batch.de)}/{len(batch.bs)}")
    if sorted(s.source_index for s in batch.id) != sorted(s.source_index for s in batch.de):
        raise DataError("ID and DE thirds must share source images")
    for part, tag in ((batch.id, PromptTag.ID), (batch.de, PromptTag.DE), (batch.bs, PromptTag.BS)):
        if any(s.prompt is not tag for s in part):
            raise DataError(f"batch third expected tag {tag.value}")


def compute_losses(model, batch: Batch, schedule: NoiseSchedule, generator=None, codec=None, draws=None):
    """Return ``(L_id, L_de, L_bs, L_all)`` as tensors for one balanced batch."""
    _check_balanced(batch)
    samples = batch.tagged()
    if draws is None:
        draws = draw_noise(samples, schedule, generator, _model_dtype(model), codec)
    per = sample_losses(model, samples, schedule, *draws, codec=codec)
    k = len(batch.id)
    l_id, l_de, l_bs = per[:k].mean(), per[k : 2 * k].mean(), per[2 * k :].mean()
    return l_id, l_de, l_bs, l_id + l_de + l_bs


def train_step(model, micro_batches: Sequence[Batch], schedule, optimizer, generator, codec=None) -> LossBreakdown:
    """Accumulate gradients over ``micro_batches`` then take one optimizer step.

    The returned breakdown averages each term over the micro-batches.
    """
    if not micro_batches:
        raise DataError("no micro-batches given")
    optimizer.zero_grad(set_to_none=True)
    acc = np.zeros(4)
    n = len(micro_batches)
    for mb in micro_batches:
        terms = compute_losses(model, mb, schedule, generator, codec)
        (terms[3] / n).backward()
        acc += [v.item() for v in terms]
    optimizer.step()
    l_id, l_de, l_bs = (float(v) for v in acc[:3] / n)
    return LossBreakdown(l_id, l_de, l_bs, l_id + l_de + l_bs)


def make_optimizer(model, lr: float = 2e-4):
    params = lora_parameters(model)
    if not params:
        raise ConfigError("model has no LoRA parameters; call attach_lora first")
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


@torch.no_grad()
def probe_losses(model, d_id, d_de, d_bs, schedule: NoiseSchedule, seed: int = 1234, repeats: int = 4, codec=None) -> LossBreakdown:
    """Deterministic loss estimate over whole datasets with seeded noise draws."""
    gen = torch.Generator().manual_seed(seed)
    dtype = _model_dtype(model)
    terms = []
    for part in (d_id, d_de, d_bs):
        vals = []
        for _ in range(repeats):
            t, eps = draw_noise(part, schedule, gen, dtype, codec)
            vals.append(sample_losses(model, part, schedule, t, eps, codec))
        terms.append(torch.cat(vals).mean().item())
    return LossBreakdown(*terms, sum(terms))


def save_checkpoint(model, path, schedule: NoiseSchedule = NoiseSchedule(), extra: dict | None = None) -> None:
    """One raw blob per adapted site (``[A | B^T]``, shape r x (in + out)) plus metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sites = lora_sites(model)
    if not sites:
        raise ConfigError("model carries no LoRA adapters")
    first = next(iter(sites.values()))
    meta = {
        "rank": first.rank,
        "alpha": first.alpha,
        "base_hash": model.config.digest(),
        "sites": list(sites),
        "schedule": schedule.to_dict(),
        "base": model.config.to_dict(),
        "prompts": {tag.value: text for tag, text in PROMPTS.items()},
    }
    if extra:
        meta["extra"] = extra
    for name, site in sites.items():
        blob = torch.cat([site.lora_A.detach(), site.lora_B.detach().T], dim=1)
        write_raw(path / f"{name}.f32", blob.cpu().numpy())
    kvconfig.dump(meta, path / METADATA_FILE)


def read_checkpoint_meta(path) -> dict:
    p = Path(path) / METADATA_FILE
    if not p.is_file():
        raise DataError(f"not a checkpoint directory (no {METADATA_FILE}): {path}")
    return kvconfig.load(p)


def load_checkpoint(path, base: nn.Module | None = None):
    """Rebuild the adapted model; returns ``(model, schedule, metadata)``.

    With ``base`` given, its config hash must match the checkpoint's.
    """
    path = Path(path)
    meta = read_checkpoint_meta(path)
    if base is None:
        base = ToyDenoiser(BackboneConfig(**meta["base"]))
    if base.config.digest() != meta["base_hash"]:
        raise IncompatibleCheckpointError(
            f"checkpoint base hash {meta['base_hash']} != model hash {base.config.digest()}"
        )
    model = attach_lora(base, meta["rank"], meta["alpha"])
    sites = lora_sites(model)
    if sorted(sites) != sorted(meta["sites"]):
        raise IncompatibleCheckpointError("adapted site names differ from the checkpoint")
    with torch.no_grad():
        for name, site in sites.items():
            blob = torch.from_numpy(read_raw(path / f"{name}.f32"))
            r, in_f, out_f = site.rank, site.in_features, site.out_features
            if blob.shape != (r, in_f + out_f):
                raise IncompatibleCheckpointError(f"{name}: blob shape {tuple(blob.shape)}")
            site.lora_A.copy_(blob[:, :in_f])
            site.lora_B.copy_(blob[:, in_f:].T)
    return model, NoiseSchedule(**meta["schedule"]), meta
