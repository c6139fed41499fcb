"""Severe degradation model for clear nighttime images.

An augmented image is a per-pixel blend of the clear image ``J`` and a
brightened light map ``L`` plus nonnegative noise::

    I = W_b * J + (1 - W_b) * L + eps

and its severity is ``S = 1 - mean(W_b * J / I)`` over height, width and
channels. ``W_b`` is small (at most 0.1 by default), so the clear signal is
mostly buried under the light map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from hazegen.errors import ConfigError, DataError
from hazegen.imageio import check_image, resize_bilinear

SEVERITY_EPS = 1e-6


@dataclass(frozen=True)
class AugmentConfig:
    map_size: int = 512
    base_weight_range: tuple[float, float] = (0.001, 0.1)
    region_count: int = 8
    region_size: int = 128
    region_value_range: tuple[float, float] = (0.0, 0.04)
    light_region_count_range: tuple[int, int] = (1, 10)
    light_kernel_range: tuple[int, int] = (15, 160)
    light_amplitude_range: tuple[float, float] = (0.2, 1.0)
    noise_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.map_size < 1:
            raise ConfigError("map_size must be positive")
        if self.region_count < 0:
            raise ConfigError("region_count must be nonnegative")
        if not 1 <= self.region_size <= self.map_size:
            raise ConfigError(
                f"region_size {self.region_size} must lie in [1, map_size={self.map_size}]"
            )
        for name in (
            "base_weight_range",
            "region_value_range",
            "light_region_count_range",
            "light_kernel_range",
            "light_amplitude_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")
        if self.light_region_count_range[0] < 0 or self.light_kernel_range[0] < 1:
            raise ConfigError("light region counts must be >= 0 and kernel sizes >= 1")
        if self.noise_weight < 0:
            raise ConfigError("noise_weight must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class AugmentResult(NamedTuple):
    image: np.ndarray
    severity: float
    blend: np.ndarray
    light: np.ndarray
    noise: np.ndarray
    light_index: int


def odd_kernel(size: float) -> int:
    k = max(1, int(round(size)))
    return k if k % 2 else k + 1


def kernel_sigma(ksize: int) -> float:
    # same default sigma as OpenCV's getGaussianKernel
    return 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8


def make_blend_weight_map(cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Constant base weight with ``region_count`` square patches re-drawn.

    Draw order is fixed (base, then per region: row, col, value) so the map
    can be replayed from the same seed.
    """
    n = cfg.map_size
    base = rng.uniform(*cfg.base_weight_range)
    out = np.full((n, n), base, dtype=np.float64)
    span = n - cfg.region_size + 1
    for _ in range(cfg.region_count):
        r = int(rng.integers(0, span))
        c = int(rng.integers(0, span))
        out[r : r + cfg.region_size, c : c + cfg.region_size] = rng.uniform(
            *cfg.region_value_range
        )
    return out


def gaussian_blob(
    shape: tuple[int, int], center: tuple[int, int], ksize: int, amplitude: float
) -> np.ndarray:
    """Isotropic Gaussian of peak ``amplitude`` supported on a ksize x ksize window."""
    h, w = shape
    cy, cx = center
    half = ksize // 2
    r0, r1 = max(cy - half, 0), min(cy + half + 1, h)
    c0, c1 = max(cx - half, 0), min(cx + half + 1, w)
    sigma = kernel_sigma(ksize)
    yy = np.arange(r0, r1)[:, None] - cy
    xx = np.arange(c0, c1)[None, :] - cx
    out = np.zeros(shape, dtype=np.float64)
    out[r0:r1, c0:c1] = amplitude * np.exp(-(yy**2 + xx**2) / (2.0 * sigma**2))
    return out


def make_light_map(
    base: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    size: tuple[int, int] | None = None,
) -> np.ndarray:
    base = check_image(base, "light map").astype(np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    if size is not None and base.shape[:2] != tuple(size):
        base = resize_bilinear(base, *size)
    h, w = base.shape[:2]
    lo, hi = cfg.light_region_count_range
    count = int(rng.integers(lo, hi + 1))
    glow = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        ksize = odd_kernel(rng.integers(cfg.light_kernel_range[0], cfg.light_kernel_range[1] + 1))
        amp = rng.uniform(*cfg.light_amplitude_range)
        glow += gaussian_blob((h, w), (cy, cx), ksize, amp)
    return np.clip(base + glow[..., None], 0.0, 1.0)


def noise_sigma(noise_weight: float) -> float:
    return 0.15 * noise_weight


def noise_ceiling(noise_weight: float) -> float:
    return 0.3 * noise_weight


def sample_noise(shape, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Half-normal noise with scale ``0.15 * W_n``, clamped to ``[0, 0.3 * W_n]``."""
    g = rng.standard_normal(shape)
    return np.clip(np.abs(g) * noise_sigma(cfg.noise_weight), 0.0, noise_ceiling(cfg.noise_weight))


def _check_compose_shapes(J, W_b, L, eps):
    if J.ndim != 3 or J.shape[2] != 3:
        raise DataError(f"clear image must be (H, W, 3), got {J.shape}")
    if W_b.shape != J.shape[:2]:
        raise DataError(f"blend map {W_b.shape} does not match image {J.shape[:2]}")
    if L.shape != J.shape:
        raise DataError(f"light map {L.shape} does not match image {J.shape}")
    if np.shape(eps) != J.shape:
        raise DataError(f"noise {np.shape(eps)} does not match image {J.shape}")


def compose(
    J: np.ndarray, W_b: np.ndarray, L: np.ndarray, eps: np.ndarray, clamp: bool = True
) -> np.ndarray:
    J, W_b, L, eps = (np.asarray(a, dtype=np.float64) for a in (J, W_b, L, eps))
    _check_compose_shapes(J, W_b, L, eps)
    w = W_b[..., None]
    out = w * J + (1.0 - w) * L + eps
    return np.clip(out, 0.0, 1.0) if clamp else out


def severity(J: np.ndarray, W_b: np.ndarray, I: np.ndarray, delta: float = SEVERITY_EPS) -> float:
    J, W_b, I = (np.asarray(a, dtype=np.float64) for a in (J, W_b, I))
    if I.shape != J.shape or W_b.shape != J.shape[:2]:
        raise DataError("severity: J, W_b and I must share spatial size")
    return float(1.0 - np.mean(W_b[..., None] * J / (I + delta)))


def augment_detailed(
    J: np.ndarray,
    light_pool: Sequence[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> AugmentResult:
    if len(light_pool) == 0:
        raise DataError("light map pool is empty")
    J = check_image(J, "clear image").astype(np.float64)
    h, w = J.shape[:2]
    idx = int(rng.integers(0, len(light_pool)))
    blend = make_blend_weight_map(cfg, rng)
    if blend.shape != (h, w):
        blend = resize_bilinear(blend, h, w)
    light = make_light_map(light_pool[idx], cfg, rng, size=(h, w))
    eps = sample_noise(J.shape, cfg, rng)
    image = compose(J, blend, light, eps)
    return AugmentResult(image, severity(J, blend, image), blend, light, eps, idx)


def augment(
    J: np.ndarray,
    light_pool: Sequence[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    res = augment_detailed(J, light_pool, cfg, rng)
    return res.image, res.severity

