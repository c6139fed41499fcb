"""Prompt-tagged training pairs and balanced batch sampling.

Three datasets feed fine-tuning:

* ``ID``: real haze image -> teacher's dehazed image, weighted by confidence.
* ``DE``: same inputs and masks, targets passed through a detail enhancer.
* ``BS``: severely augmented clear image -> the clear image, unmasked.

Images inside samples are stored as float32 so that manifests round-trip
bit-exactly through the raw float format.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from hazegen.augment import AugmentConfig, augment_detailed
from hazegen.errors import ConfigError, DataError
from hazegen.imageio import check_image, read_raw, write_raw
from hazegen.tiling import confidence_from_variance, run_tiled, tile_plan


class PromptTag(enum.Enum):
    ID = "ID"
    DE = "DE"
    BS = "BS"
    LOW = "LOW"
    HIGH = "HIGH"

    @property
    def prompt(self) -> str:
        return PROMPTS[self]


PROMPTS = {
    PromptTag.ID: "A dehazed image with slight degradation.",
    PromptTag.DE: "A high-resolution, dehazed image with slight degradation.",
    PromptTag.BS: "An image with no degradation, generation.",
    PromptTag.LOW: "A dehazed image with slight degradation",
    PromptTag.HIGH: "A high-resolution, dehazed image with no degradation, generation",
}


@dataclass
class TrainingSample:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    prompt: PromptTag
    source_index: int
    severity: float | None = None

    def __post_init__(self):
        self.input = np.asarray(check_image(self.input, "input"), dtype=np.float32)
        self.target = np.asarray(check_image(self.target, "target"), dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.input.shape != self.target.shape or self.mask.shape != self.input.shape[:2]:
            raise DataError(
                f"sample shapes disagree: input {self.input.shape}, "
                f"target {self.target.shape}, mask {self.mask.shape}"
            )


@dataclass(frozen=True)
class TileConfig:
    window: int = 224
    stride: int = 112
    tau: float = 0.01


def restore_with_confidence(restorer, image: np.ndarray, cfg: TileConfig = TileConfig()):
    h, w = image.shape[:2]
    mean, var = run_tiled(restorer, image, tile_plan(h, w, cfg.window, cfg.stride))
    return mean, confidence_from_variance(var, cfg.tau)


def build_id_pairs(
    haze_images: Sequence[np.ndarray],
    restorer,
    plan_cfg: TileConfig = TileConfig(),
    workers: int = 1,
) -> list[TrainingSample]:
    if len(haze_images) == 0:
        raise DataError("no haze images given")

    def one(item):
        i, x = item
        y, m = restore_with_confidence(restorer, np.asarray(x, dtype=np.float64), plan_cfg)
        return TrainingSample(x, y, m, PromptTag.ID, i)

    items = list(enumerate(haze_images))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def build_de_pairs(d_id: Sequence[TrainingSample], enhancer: Callable) -> list[TrainingSample]:
    out = []
    for s in d_id:
        y_hq = np.asarray(enhancer(s.target.astype(np.float64)))
        if y_hq.shape != s.target.shape:
            raise DataError(f"enhancer changed size {s.target.shape} -> {y_hq.shape}")
        out.append(TrainingSample(s.input, y_hq, s.mask, PromptTag.DE, s.source_index))
    return out


def build_bs_pairs(
    clear_images: Sequence[np.ndarray],
    light_pool: Sequence[np.ndarray],
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
) -> list[TrainingSample]:
    if len(clear_images) == 0:
        raise DataError("no clear images given")
    if len(light_pool) == 0:
        raise DataError("light map pool is empty")
    out = []
    for i, y in enumerate(clear_images):
        res = augment_detailed(y, light_pool, aug_cfg, rng)
        ones = np.ones(np.shape(y)[:2], dtype=np.float32)
        out.append(TrainingSample(res.image, y, ones, PromptTag.BS, i, res.severity))
    return out


class Batch(NamedTuple):
    id: list[TrainingSample]
    de: list[TrainingSample]
    bs: list[TrainingSample]

    def tagged(self) -> list[TrainingSample]:
        return [*self.id, *self.de, *self.bs]


def _shuffled_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from rng.permutation(n).tolist()


def balanced_batches(
    d_id: Sequence[TrainingSample],
    d_de: Sequence[TrainingSample],
    d_bs: Sequence[TrainingSample],
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """Endless stream of batches with equal ID / DE / BS thirds.

    ID indices walk through reshuffled passes over ``d_id``; the DE third
    takes the DE samples with the same ``source_index`` values. BS indices
    come from an independent reshuffled stream.
    """
    if batch_size <= 0 or batch_size % 3:
        raise ConfigError(f"batch_size must be a positive multiple of 3, got {batch_size}")
    for name, d in (("ID", d_id), ("DE", d_de), ("BS", d_bs)):
        if len(d) == 0:
            raise DataError(f"{name} subset is empty")
    de_by_source = {s.source_index: s for s in d_de}
    missing = {s.source_index for s in d_id} - set(de_by_source)
    if missing:
        raise DataError(f"DE subset lacks source indices {sorted(missing)[:5]}")
    k = batch_size // 3
    id_stream = _shuffled_stream(len(d_id), rng)
    bs_stream = _shuffled_stream(len(d_bs), rng)
    while True:
        ids = [d_id[next(id_stream)] for _ in range(k)]
        bs = [d_bs[next(bs_stream)] for _ in range(k)]
        yield Batch(ids, [de_by_source[s.source_index] for s in ids], bs)


def write_manifest(dataset: Sequence[TrainingSample], path) -> None:
    """Write one JSON record per line; payloads go to ``<stem>_data/``."""
    path = Path(path)
    data_dir = path.parent / f"{path.stem}_data"
    data_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(dataset):
        rec = {}
        for field in ("input", "target", "mask"):
            arr = getattr(s, field)
            if field == "mask" and arr is None:
                rec[field] = None
                continue
            rel = f"{data_dir.name}/{i:05d}_{field}.f32"
            write_raw(path.parent / rel, arr)
            rec[field] = rel
        rec["prompt_tag"] = s.prompt.value
        rec["source_index"] = s.source_index
        rec["severity"] = s.severity
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _load_payload(base: Path, rel, lineno: int) -> np.ndarray:
    if not isinstance(rel, str):
        raise DataError(f"line {lineno}: image path must be a string")
    p = base / rel
    if not p.is_file():
        raise DataError(f"line {lineno}: missing image file {p}")
    return read_raw(p)


def read_manifest(path) -> list[TrainingSample]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            tag = PromptTag(rec["prompt_tag"])
            source = rec["source_index"]
            sev = rec.get("severity")
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from None
        except ValueError:
            raise DataError(f"{path}:{lineno}: unknown prompt tag {rec['prompt_tag']!r}") from None
        if not isinstance(source, int):
            raise DataError(f"{path}:{lineno}: source_index must be an integer")
        x = _load_payload(path.parent, rec.get("input"), lineno)
        y = _load_payload(path.parent, rec.get("target"), lineno)
        if rec.get("mask") is None:
            m = np.ones(x.shape[:2], dtype=np.float32)
        else:
            m = _load_payload(path.parent, rec["mask"], lineno)
        out.append(TrainingSample(x, y, m, tag, source, None if sev is None else float(sev)))
    return out
