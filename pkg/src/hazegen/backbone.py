"""A small conditional noise predictor that stands in for a latent diffusion U-Net.

Layout: the noisy latent and the condition latent are concatenated on the
channel axis, pass through a 3x3 input conv, a residual block, one
self-attention site over an 8x8 pooled token grid, one cross-attention site
over the prompt embedding, a second residual block, and a per-pixel output
head. A sinusoidal timestep embedding is added inside both residual blocks.

Any backbone plugged into the trainer must follow the :class:`Denoiser`
protocol: same call signature, ``lora_targets()`` naming the ``nn.Linear``
submodules that may be adapted, and ``attention_sites()`` naming the
self-attention sites whose ``(Q, K)`` can be captured.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 3
    hidden: int = 32
    prompt_dim: int = 32
    prompt_tokens: int = 8
    attn_grid: int = 8
    init_seed: int = 0
    init_gain: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps({"arch": "toy-denoiser-v1", **asdict(self)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class AttentionCapture(NamedTuple):
    site: str
    q: torch.Tensor  # (B, N, d)
    k: torch.Tensor  # (B, N, d)
    grid: tuple[int, int]


class Denoiser(Protocol):
    def __call__(self, y_t, t, prompt, x, capture: bool = False): ...

    def lora_targets(self) -> list[str]: ...

    def attention_sites(self) -> list[str]: ...


def embed_prompt(text: str, tokens: int = 8, dim: int = 32) -> np.ndarray:
    """Deterministic ``(tokens, dim)`` embedding, one hashed Gaussian row per word."""
    out = np.zeros((tokens, dim), dtype=np.float64)
    for i, word in enumerate(text.split()[:tokens]):
        seed = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")
        out[i] = np.random.default_rng(seed).standard_normal(dim)
    return out


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.time = nn.Linear(ch, ch)

    def forward(self, h, temb):
        z = self.conv1(F.silu(h)) + self.time(temb)[:, :, None, None]
        return h + self.conv2(F.silu(z))


class SelfAttention(nn.Module):
    def __init__(self, ch: int, grid: int):
        super().__init__()
        self.grid = grid
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ch, ch)
        self.to_v = nn.Linear(ch, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, h, sink: list | None = None, name: str = ""):
        b, c, hh, ww = h.shape
        pooled = F.adaptive_avg_pool2d(h, self.grid)
        tok = pooled.flatten(2).transpose(1, 2)  # (B, N, C), row-major
        q, k, v = self.to_q(tok), self.to_k(tok), self.to_v(tok)
        if sink is not None:
            sink.append(AttentionCapture(name, q.detach().clone(), k.detach().clone(), (self.grid, self.grid)))
        out = self.to_out(attention(q, k, v))
        out = out.transpose(1, 2).reshape(b, c, self.grid, self.grid)
        return h + F.interpolate(out, size=(hh, ww), mode="bilinear", align_corners=False)


class CrossAttention(nn.Module):
    def __init__(self, ch: int, ctx_dim: int):
        super().__init__()
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ctx_dim, ch)
        self.to_v = nn.Linear(ctx_dim, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, h, ctx):
        b, c, hh, ww = h.shape
        tok = h.flatten(2).transpose(1, 2)
        out = self.to_out(attention(self.to_q(tok), self.to_k(ctx), self.to_v(ctx)))
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


class ToyDenoiser(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        c, hd = config.channels, config.hidden
        self.conv_in = nn.Conv2d(2 * c, hd, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(hd, hd), nn.SiLU(), nn.Linear(hd, hd))
        self.block1 = ResBlock(hd)
        self.self_attn = SelfAttention(hd, config.attn_grid)
        self.cross_attn = CrossAttention(hd, config.prompt_dim)
        self.block2 = ResBlock(hd)
        self.head_proj = nn.Linear(hd, hd)
        self.head_out = nn.Linear(hd, c)
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.init_seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                std = self.config.init_gain / math.sqrt(fan_in)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)

    def lora_targets(self) -> list[str]:
        attn = [f"{s}.{p}" for s in ("self_attn", "cross_attn") for p in ("to_q", "to_k", "to_v", "to_out")]
        return attn + ["head_proj"]

    def attention_sites(self) -> list[str]:
        return ["self_attn"]

    def forward(self, y_t, t, prompt, x, capture: bool = False):
        if y_t.shape != x.shape:
            raise ValueError(f"latent {tuple(y_t.shape)} and condition {tuple(x.shape)} differ")
        if y_t.ndim != 4 or y_t.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W), got {tuple(y_t.shape)}")
        b = y_t.shape[0]
        t = torch.as_tensor(t, device=y_t.device).reshape(-1).expand(b)
        ctx = torch.as_tensor(prompt, dtype=y_t.dtype, device=y_t.device)
        if ctx.ndim == 2:
            ctx = ctx.expand(b, *ctx.shape)
        if ctx.shape[0] != b or ctx.shape[2] != self.config.prompt_dim:
            raise ValueError(f"prompt embedding shape {tuple(ctx.shape)} does not fit batch {b}")

        temb = self.time_mlp(timestep_embedding(t, self.config.hidden).to(y_t.dtype))
        sink = [] if capture else None
        h = self.conv_in(torch.cat([y_t, x], dim=1))
        h = self.block1(h, temb)
        h = self.self_attn(h, sink, "self_attn")
        h = self.cross_attn(h, ctx)
        h = self.block2(h, temb)
        h = h.permute(0, 2, 3, 1)
        out = self.head_out(F.silu(self.head_proj(h))).permute(0, 3, 1, 2)
        return (out, sink) if capture else out


class IdentityCodec:
    """Latent space equals image space (downsampling factor 1)."""

    factor = 1
    tolerance = 0.0

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        return img

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class PoolCodec:
    """2x average-pool encoder with nearest-neighbour decoder.

    Round trip is exact for 2x2 block-constant images; for other images the
    error is bounded by the largest in-block intensity spread.
    """

    factor = 2
    tolerance = 1.0

    def encode(self, img):
        return F.avg_pool2d(img, 2)

    def decode(self, z):
        return F.interpolate(z, scale_factor=2, mode="nearest")


def toy_codec() -> IdentityCodec:
    return IdentityCodec()


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, C)`` numpy image -> ``(1, C, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).to(dtype).permute(2, 0, 1)[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy()
