"""Pluggable teacher restorers and detail enhancers.

Spec strings select an implementation:

``toy:identity``        returns its input
``toy:constant[=v]``    returns a constant image (default 0.5)
``toy:stretch``         per-window contrast stretch, a crude haze remover
``toy:unsharp``         unsharp masking (enhancer)
``external:<path>``     child process speaking length-prefixed raw frames

External adapters read frames from stdin and answer on stdout. A frame is a
little-endian ``u32`` byte count followed by a raw float grid (see
:mod:`hazegen.imageio`). One request frame yields exactly one reply frame of
the same shape; closing stdin ends the session.
"""

from __future__ import annotations

import struct
import subprocess
import sys
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy.ndimage import gaussian_filter

from hazegen.errors import ConfigError, DataError
from hazegen.imageio import decode_raw, encode_raw

_LEN = struct.Struct("<I")


class IdentityRestorer:
    def __init__(self, window: int = 224):
        self.window = window

    def __call__(self, img):
        return np.array(img, copy=True)


class ConstantRestorer:
    def __init__(self, value: float = 0.5, window: int = 224):
        self.value = value
        self.window = window

    def __call__(self, img):
        return np.full(np.shape(img), self.value, dtype=np.float64)


class StretchRestorer:
    """Stretch each window's 1st..99th percentile range to [0, 1].

    Output depends on window content, so overlapping windows disagree near
    strong structure and the variance grid is informative.
    """

    def __init__(self, window: int = 224, low: float = 1.0, high: float = 99.0):
        self.window = window
        self.low = low
        self.high = high

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        lo, hi = np.percentile(img, [self.low, self.high])
        if hi - lo < 1e-6:
            return img.copy()
        return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


class UnsharpEnhancer:
    """``clamp(y + amount * (y - blur(y)))`` with a Gaussian blur of sigma ``radius``."""

    def __init__(self, amount: float = 0.5, radius: float = 2.0):
        self.amount = amount
        self.radius = radius

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        sigma = (self.radius, self.radius, 0) if img.ndim == 3 else self.radius
        blurred = gaussian_filter(img, sigma=sigma, mode="reflect")
        return np.clip(img + self.amount * (img - blurred), 0.0, 1.0)


def write_frame(stream: BinaryIO, arr: np.ndarray) -> None:
    payload = encode_raw(arr)
    stream.write(_LEN.pack(len(payload)) + payload)
    stream.flush()


def read_frame(stream: BinaryIO) -> np.ndarray | None:
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) != _LEN.size:
        raise DataError("truncated frame length")
    (n,) = _LEN.unpack(head)
    payload = stream.read(n)
    if len(payload) != n:
        raise DataError(f"truncated frame: expected {n} bytes, got {len(payload)}")
    return decode_raw(payload, "frame")


class ExternalAdapter:
    """Run an image-to-image model in a child process.

    ``.py`` targets are started with the current interpreter. Frames carry
    float32, so results are quantised to float32 precision.
    """

    def __init__(self, path, window: int = 224):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"external adapter not found: {path}")
        self.path = path
        self.window = window
        cmd = [sys.executable, str(path)] if path.suffix == ".py" else [str(path)]
        self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def __call__(self, img):
        if self._proc.poll() is not None:
            raise DataError(f"external adapter {self.path} exited with {self._proc.returncode}")
        write_frame(self._proc.stdin, np.asarray(img, dtype=np.float32))
        out = read_frame(self._proc.stdout)
        if out is None:
            raise DataError(f"external adapter {self.path} closed its output")
        return out.astype(np.float64)

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def serve(fn, stdin: BinaryIO | None = None, stdout: BinaryIO | None = None) -> None:
    """Adapter-side loop: answer every request frame with ``fn(frame)``."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while (frame := read_frame(stdin)) is not None:
        write_frame(stdout, np.asarray(fn(frame), dtype=np.float32))


def resolve_restorer(spec: str, window: int = 224):
    kind, _, arg = spec.partition(":")
    if kind == "external" and arg:
        return ExternalAdapter(arg, window=window)
    if kind == "toy":
        name, _, value = arg.partition("=")
        if name == "identity":
            return IdentityRestorer(window)
        if name == "constant":
            return ConstantRestorer(float(value) if value else 0.5, window)
        if name == "stretch":
            return StretchRestorer(window)
    raise ConfigError(f"unresolvable restorer spec {spec!r}")


def resolve_enhancer(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "external" and arg:
        return ExternalAdapter(arg)
    if kind == "toy" and arg == "identity":
        return IdentityRestorer()
    if kind == "toy" and arg == "unsharp":
        return UnsharpEnhancer()
    raise ConfigError(f"unresolvable enhancer spec {spec!r}")
