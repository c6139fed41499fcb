"""Dual-prompt sampling and the generative-level map.

Two branches denoise the same input from the same initial noise, one under
the low-generative prompt and one under the high-generative prompt. The
branches never exchange information; at every captured self-attention site
the queries and keys of both branches are additionally merged::

    A = softmax([Q_high; Q_low] [K_high; K_low]^T / sqrt(d))

and for each high-branch token the attention mass on the high keys
(``s_gen``) versus the low keys (``s_res``) is recorded. Averaging over sites
and steps, then resizing to image resolution, gives the map.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from hazegen.backbone import IdentityCodec, image_to_tensor, tensor_to_image
from hazegen.dataset import PromptTag
from hazegen.errors import ConfigError, DataError
from hazegen.finetune import NoiseSchedule, _model_dtype, _prompt_dims, prompt_tensor
from hazegen.imageio import resize_bilinear


@dataclass
class CapturedSite:
    step: int
    site: str
    grid: tuple[int, int]
    q_high: np.ndarray
    k_high: np.ndarray
    q_low: np.ndarray
    k_low: np.ndarray


@dataclass
class BranchOutputs:
    out_low: np.ndarray
    out_high: np.ndarray
    captured: list[CapturedSite] = field(default_factory=list)


@dataclass
class GenerativeLevelMap:
    values: np.ndarray  # raw s_gen, per pixel
    restoration: np.ndarray  # companion s_res

    def normalized(self) -> np.ndarray:
        lo, hi = float(self.values.min()), float(self.values.max())
        # interpolation leaves ulp-level ripples on constant maps
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    if not 1 <= num_steps <= T:
        raise ConfigError(f"num_steps must lie in [1, {T}], got {num_steps}")
    return np.round(np.linspace(T, 1, num_steps)).astype(np.int64)


def initial_noise(shape, seed: int, dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def _ddim_update(z, eps, ab_t: float, ab_prev: float):
    # eta = 0: no fresh noise is injected
    x0 = (z - float(np.sqrt(1.0 - ab_t)) * eps) / float(np.sqrt(ab_t))
    return float(np.sqrt(ab_prev)) * x0 + float(np.sqrt(1.0 - ab_prev)) * eps


class _Branch:
    def __init__(self, model, cond, tag: PromptTag, z):
        tokens, dim = _prompt_dims(model)
        self.model = model
        self.cond = cond
        self.prompt = prompt_tensor(tag, tokens, dim).to(cond.dtype)
        self.z = z

    def step(self, t: int, ab_t: float, ab_prev: float, capture: bool):
        tt = torch.tensor([t])
        if capture:
            eps, sink = self.model(self.z, tt, self.prompt, self.cond, capture=True)
        else:
            eps, sink = self.model(self.z, tt, self.prompt, self.cond), []
        self.z = _ddim_update(self.z, eps, ab_t, ab_prev)
        return sink


def _prepare(model, x: np.ndarray, schedule: NoiseSchedule, num_steps: int, seed: int, codec):
    codec = codec or IdentityCodec()
    dtype = _model_dtype(model)
    cond = codec.encode(image_to_tensor(np.asarray(x), dtype))
    z0 = initial_noise(cond.shape, seed, dtype)
    ts = ddim_timesteps(schedule.T, num_steps)
    return codec, cond, z0, ts, schedule.alpha_bars


def _decode(codec, z) -> np.ndarray:
    return np.clip(tensor_to_image(codec.decode(z)).astype(np.float64), 0.0, 1.0)


@torch.no_grad()
def sample(model, x: np.ndarray, schedule: NoiseSchedule, tag: PromptTag, num_steps: int = 50, seed: int = 0, codec=None) -> np.ndarray:
    """Deterministic (eta = 0) sampling of one prompt branch."""
    codec, cond, z0, ts, ab = _prepare(model, x, schedule, num_steps, seed, codec)
    branch = _Branch(model, cond, tag, z0)
    for i, t in enumerate(ts):
        prev = ts[i + 1] if i + 1 < len(ts) else 0
        branch.step(int(t), ab[t], ab[prev], capture=False)
    return _decode(codec, branch.z)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def merged_attention(q_high, q_low, k_high, k_low, isolate: bool = False) -> np.ndarray:
    """``2N x 2N`` attention over the concatenated tokens of both branches.

    Row/column order is high tokens first. With ``isolate`` the cross-branch
    logits are masked out, so each branch attends only to itself.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in (q_high, q_low, k_high, k_low)]
    if mats[0].ndim != 2 or any(m.shape != mats[0].shape for m in mats):
        raise DataError(f"Q/K must all be N x d with equal shapes, got {[m.shape for m in mats]}")
    qh, ql, kh, kl = mats
    n, d = qh.shape
    logits = np.vstack([qh, ql]) @ np.vstack([kh, kl]).T / np.sqrt(d)
    if isolate:
        logits[:n, n:] = -np.inf
        logits[n:, :n] = -np.inf
    return _softmax_rows(logits)


def site_scores(c: CapturedSite) -> tuple[np.ndarray, np.ndarray]:
    a = merged_attention(c.q_high, c.q_low, c.k_high, c.k_low, isolate=False)
    n = c.q_high.shape[0]
    high_rows = a[:n]
    # row sums can overshoot 1 by an ulp
    return np.clip(high_rows[:, :n].sum(axis=1), 0.0, 1.0), np.clip(high_rows[:, n:].sum(axis=1), 0.0, 1.0)


def scores(captured: list[CapturedSite]) -> tuple[np.ndarray, np.ndarray]:
    """Average ``(s_gen, s_res)`` over sites that share one token count."""
    if not captured:
        raise DataError("no captured attention sites")
    n = captured[0].q_high.shape[0]
    if any(c.q_high.shape[0] != n for c in captured):
        raise DataError("captured sites have different token counts; group them first")
    s_gen = np.zeros(n)
    s_res = np.zeros(n)
    for c in captured:
        g, r = site_scores(c)
        s_gen += g
        s_res += r
    return s_gen / len(captured), s_res / len(captured)


def to_map(s_gen: np.ndarray, grid: tuple[int, int], height: int, width: int, s_res: np.ndarray | None = None) -> GenerativeLevelMap:
    s_gen = np.asarray(s_gen, dtype=np.float64)
    gh, gw = grid
    if s_gen.ndim != 1 or s_gen.size != gh * gw:
        raise DataError(f"{s_gen.size} scores do not fill a {gh}x{gw} token grid")
    s_res = 1.0 - s_gen if s_res is None else np.asarray(s_res, dtype=np.float64)
    gen_map = resize_bilinear(s_gen.reshape(gh, gw), height, width)
    res_map = resize_bilinear(s_res.reshape(gh, gw), height, width)
    return GenerativeLevelMap(gen_map, res_map)


def level_map(captured: list[CapturedSite], height: int, width: int) -> GenerativeLevelMap:
    """Per token-grid group: average in token space, resize; then average groups by site count."""
    groups: dict[tuple[int, int], list[CapturedSite]] = defaultdict(list)
    for c in captured:
        groups[c.grid].append(c)
    if not groups:
        raise DataError("no captured attention sites")
    gen = np.zeros((height, width))
    res = np.zeros((height, width))
    for grid in sorted(groups):
        members = groups[grid]
        s_gen, s_res = scores(members)
        m = to_map(s_gen, grid, height, width, s_res)
        gen += m.values * len(members)
        res += m.restoration * len(members)
    total = len(captured)
    return GenerativeLevelMap(gen / total, res / total)


@torch.no_grad()
def dual_infer(
    model,
    x: np.ndarray,
    schedule: NoiseSchedule,
    seed: int = 0,
    num_steps: int = 50,
    capture_steps=None,
    codec=None,
) -> tuple[BranchOutputs, GenerativeLevelMap]:
    """Run the low and high branches in lockstep and build the level map.

    ``capture_steps`` restricts score extraction to a subset of step indices
    (``None`` captures every step).
    """
    codec, cond, z0, ts, ab = _prepare(model, x, schedule, num_steps, seed, codec)
    high = _Branch(model, cond, PromptTag.HIGH, z0.clone())
    low = _Branch(model, cond, PromptTag.LOW, z0.clone())
    wanted = None if capture_steps is None else set(capture_steps)
    captured: list[CapturedSite] = []
    for i, t in enumerate(ts):
        prev = ts[i + 1] if i + 1 < len(ts) else 0
        cap = wanted is None or i in wanted
        sh = high.step(int(t), ab[t], ab[prev], cap)
        sl = low.step(int(t), ab[t], ab[prev], cap)
        for ch, cl in zip(sh, sl):
            captured.append(
                CapturedSite(
                    i,
                    ch.site,
                    ch.grid,
                    ch.q[0].double().numpy(),
                    ch.k[0].double().numpy(),
                    cl.q[0].double().numpy(),
                    cl.k[0].double().numpy(),
                )
            )
    out = BranchOutputs(_decode(codec, low.z), _decode(codec, high.z), captured)
    h, w = np.asarray(x).shape[:2]
    return out, level_map(captured, h, w)
