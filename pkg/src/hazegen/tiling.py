"""Overlapping sliding-window inference for fixed-window restorers.

Every pixel is covered by one or more windows. The restored image is the
per-pixel mean of all predictions; the spread of the channel-averaged
predictions gives a variance grid that is turned into a confidence map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from hazegen.errors import ConfigError, DataError


class Restorer(Protocol):
    """Maps a ``(window, window, 3)`` image to an image of the same shape."""

    window: int

    def __call__(self, tile: np.ndarray) -> np.ndarray: ...


def _offsets(size: int, window: int, stride: int) -> tuple[int, ...]:
    last = size - window
    offs = list(range(0, last + 1, stride))
    if offs[-1] != last:
        offs.append(last)
    return tuple(offs)


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    window: int = 224
    stride: int = 112
    rows: tuple[int, ...] = ()
    cols: tuple[int, ...] = ()

    @property
    def padded_height(self) -> int:
        return max(self.height, self.window)

    @property
    def padded_width(self) -> int:
        return max(self.width, self.window)

    @property
    def padding(self) -> tuple[int, int]:
        return self.padded_height - self.height, self.padded_width - self.width

    @property
    def tiles(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]


def tile_plan(height: int, width: int, window: int = 224, stride: int = 112) -> TilePlan:
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1 (got {window}, {stride})")
    if stride > window:
        raise ConfigError(f"stride {stride} exceeds window {window}; some pixels would be skipped")
    if height < 1 or width < 1:
        raise ConfigError(f"image size must be positive (got {height}x{width})")
    ph, pw = max(height, window), max(width, window)
    return TilePlan(
        height, width, window, stride, _offsets(ph, window, stride), _offsets(pw, window, stride)
    )


def pad_to_plan(image: np.ndarray, plan: TilePlan) -> np.ndarray:
    dh, dw = plan.padding
    if not (dh or dw):
        return image
    pad = [(0, dh), (0, dw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect")


def run_tiled(
    restorer: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    plan: TilePlan,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mean image, variance grid)`` over all covering windows.

    Aggregation is two-pass and in sorted (row-major) tile order: the first
    pass keeps a running mean, the second sums squared deviations of the
    channel-mean predictions from the per-pixel mean. Identical overlapping
    predictions therefore give a variance of (numerically) exactly zero.
    """
    window = getattr(restorer, "window", plan.window)
    if window != plan.window:
        raise ConfigError(f"restorer window {window} does not match plan window {plan.window}")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (plan.height, plan.width):
        raise DataError(f"image {image.shape[:2]} does not match plan {plan.height}x{plan.width}")
    padded = pad_to_plan(image, plan)
    ph, pw = padded.shape[:2]
    w = plan.window

    mean = np.zeros(padded.shape, dtype=np.float64)
    count = np.zeros((ph, pw), dtype=np.int64)
    order = sorted(plan.tiles)
    means: list[np.ndarray] = []
    for r, c in order:
        tile = padded[r : r + w, c : c + w]
        pred = np.asarray(restorer(tile.copy()), dtype=np.float64)
        if pred.shape != tile.shape:
            raise DataError(f"restorer returned {pred.shape} for a {tile.shape} window")
        count[r : r + w, c : c + w] += 1
        k = count[r : r + w, c : c + w]
        # incremental mean: exact when every prediction agrees
        mean[r : r + w, c : c + w] += (pred - mean[r : r + w, c : c + w]) / (k if pred.ndim == 2 else k[..., None])
        means.append(pred.mean(axis=2) if pred.ndim == 3 else pred)

    chan_mean = mean.mean(axis=2) if mean.ndim == 3 else mean
    sq = np.zeros((ph, pw), dtype=np.float64)
    for (r, c), m in zip(order, means):
        sq[r : r + w, c : c + w] += (m - chan_mean[r : r + w, c : c + w]) ** 2
    var = sq / count
    return mean[: plan.height, : plan.width], var[: plan.height, : plan.width]


def confidence_from_variance(variance: np.ndarray, tau: float = 0.01) -> np.ndarray:
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance < 0):
        raise DataError("variance must be nonnegative")
    return np.exp(-variance / tau)
