"""Command-line entry point: ``hazegen {augment,build,train,infer}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 incompatible
checkpoint. ``HAZEGEN_SEED`` overrides the global seed of any command.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from hazegen import kvconfig
from hazegen.adapters import resolve_enhancer, resolve_restorer
from hazegen.augment import AugmentConfig
from hazegen.backbone import BackboneConfig, ToyDenoiser
from hazegen.dataset import (
    PromptTag,
    TileConfig,
    TrainingSample,
    balanced_batches,
    build_bs_pairs,
    build_de_pairs,
    build_id_pairs,
    read_manifest,
    write_manifest,
)
from hazegen.errors import ConfigError, DataError, IncompatibleCheckpointError
from hazegen.finetune import (
    NoiseSchedule,
    TrainConfig,
    attach_lora,
    load_checkpoint,
    make_optimizer,
    probe_losses,
    save_checkpoint,
    train_step,
)
from hazegen.genmap import dual_infer, sample
from hazegen.imageio import list_images, read_image, resize_bilinear, write_png, write_raw

log = logging.getLogger("hazegen")

SEED_ENV = "HAZEGEN_SEED"
LOG_HEADER = "step,L_id,L_de,L_bs,L_all"


@dataclasses.dataclass(frozen=True)
class InferConfig:
    num_steps: int = 50


_SECTIONS = {
    "augment": AugmentConfig,
    "tiling": TileConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "backbone": BackboneConfig,
    "schedule": NoiseSchedule,
}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    tiling: TileConfig = TileConfig()
    train: TrainConfig = TrainConfig()
    infer: InferConfig = InferConfig()
    backbone: BackboneConfig = BackboneConfig()
    schedule: NoiseSchedule = NoiseSchedule()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = {}
        for key, value in data.items():
            if key == "seed":
                if not isinstance(value, int):
                    raise ConfigError("seed must be an integer")
                kwargs["seed"] = value
            elif key in _SECTIONS and isinstance(value, dict):
                sec = _SECTIONS[key]
                unknown = set(value) - {f.name for f in dataclasses.fields(sec)}
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                try:
                    kwargs[key] = sec(**value)
                except TypeError as exc:
                    raise ConfigError(f"[{key}]: {exc}") from None
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


def load_run_config(path=None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.from_dict(kvconfig.load(path)) if path else RunConfig()
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.with_seed(seed) if seed is not None else cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    kvconfig.dump(cfg.to_dict(), out_dir / "config.toml")


def _load_dir(path, what: str) -> list[np.ndarray]:
    files = list_images(path)
    if not files:
        raise DataError(f"no images in {what} directory {path}")
    return [read_image(p) for p in files]


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def cmd_augment(in_dir, light_dir, out_dir, cfg: RunConfig) -> tuple[Path, float]:
    clear = [_rgb(im) for im in _load_dir(in_dir, "clear image")]
    lights = _load_dir(light_dir, "light map")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aug_cfg = dataclasses.replace(cfg.augment, seed=cfg.seed)
    d_bs = build_bs_pairs(clear, lights, aug_cfg, np.random.default_rng(cfg.seed))
    manifest = out_dir / "bs.jsonl"
    write_manifest(d_bs, manifest)
    preview = out_dir / "augmented"
    preview.mkdir(exist_ok=True)
    for s in d_bs:
        write_png(preview / f"{s.source_index:05d}.png", s.input)
    _echo_config(cfg, out_dir)
    mean_s = float(np.mean([s.severity for s in d_bs]))
    print(f"records: {len(d_bs)}")
    print(f"mean severity: {mean_s!r}")
    return manifest, mean_s


def cmd_build(haze_dir, restorer_spec: str, out_dir, cfg: RunConfig, enhancer_spec: str = "toy:unsharp", workers: int = 1):
    restorer = resolve_restorer(restorer_spec, cfg.tiling.window)
    enhancer = resolve_enhancer(enhancer_spec)
    haze = [_rgb(im) for im in _load_dir(haze_dir, "haze image")]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        d_id = build_id_pairs(haze, restorer, cfg.tiling, workers=workers)
        d_de = build_de_pairs(d_id, enhancer)
    finally:
        for a in (restorer, enhancer):
            if hasattr(a, "close"):
                a.close()
    write_manifest(d_id, out_dir / "id.jsonl")
    write_manifest(d_de, out_dir / "de.jsonl")
    masks = out_dir / "masks"
    masks.mkdir(exist_ok=True)
    for s in d_id:
        write_png(masks / f"{s.source_index:05d}.png", s.mask)
    _echo_config(cfg, out_dir)
    print(f"records: ID {len(d_id)}, DE {len(d_de)}")
    return out_dir / "id.jsonl", out_dir / "de.jsonl"


def _fit(samples: list[TrainingSample], res: int) -> list[TrainingSample]:
    out = []
    for s in samples:
        if s.input.shape[:2] == (res, res):
            out.append(s)
            continue
        out.append(
            TrainingSample(
                resize_bilinear(s.input, res, res),
                resize_bilinear(s.target, res, res),
                resize_bilinear(s.mask, res, res),
                s.prompt,
                s.source_index,
                s.severity,
            )
        )
    return out


def build_model(cfg: RunConfig):
    model = ToyDenoiser(cfg.backbone)
    return attach_lora(model, cfg.train.rank, cfg.train.alpha, seed=cfg.seed)


def cmd_train(id_manifest, de_manifest, bs_manifest, out_dir, cfg: RunConfig) -> Path:
    tc = cfg.train
    subsets = {}
    for name, path, tag in (("ID", id_manifest, PromptTag.ID), ("DE", de_manifest, PromptTag.DE), ("BS", bs_manifest, PromptTag.BS)):
        data = [s for s in read_manifest(path) if s.prompt is tag]
        if not data:
            raise DataError(f"{name} subset is empty ({path})")
        subsets[name] = _fit(data, tc.resolution)
    d_id, d_de, d_bs = subsets["ID"], subsets["DE"], subsets["BS"]

    torch.manual_seed(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    model = build_model(cfg)
    schedule = cfg.schedule
    probe_before = probe_losses(model, d_id, d_de, d_bs, schedule, seed=cfg.seed)
    optimizer = make_optimizer(model, tc.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = balanced_batches(d_id, d_de, d_bs, tc.batch_size, np.random.default_rng(cfg.seed))

    with open(out_dir / "loss_log.csv", "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for step in range(tc.steps):
            lb = train_step(model, [next(batches) for _ in range(tc.grad_accum)], schedule, optimizer, gen)
            if step % tc.log_every == 0 or step == tc.steps - 1:
                fh.write(f"{step},{lb.id!r},{lb.de!r},{lb.bs!r},{lb.all!r}\n")
                fh.flush()
                log.info("step %d L_all %.5f", step, lb.all)
            if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                save_checkpoint(model, out_dir / "checkpoints" / f"step_{step + 1:06d}", schedule)

    probe_after = probe_losses(model, d_id, d_de, d_bs, schedule, seed=cfg.seed)
    ckpt = out_dir / "checkpoint"
    save_checkpoint(model, ckpt, schedule, extra={"steps": tc.steps})
    kvconfig.dump(
        {"probe_before": probe_before._asdict(), "probe_after": probe_after._asdict()},
        out_dir / "summary.toml",
    )
    print(f"probe L_all: {probe_before.all:.6f} -> {probe_after.all:.6f}")
    return ckpt


def cmd_infer(checkpoint, image, out_dir, cfg: RunConfig, level: str = "both", want_map: bool = False) -> dict[str, Path]:
    if want_map and level != "both":
        raise ConfigError("--map requires --level both")
    model, schedule, _ = load_checkpoint(checkpoint)
    x = _rgb(read_image(image))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = cfg.infer.num_steps
    written = {}
    if level == "both":
        outputs, gmap = dual_infer(model, x, schedule, seed=cfg.seed, num_steps=steps)
        images = {"out_low": outputs.out_low, "out_high": outputs.out_high}
    else:
        tag = PromptTag.LOW if level == "low" else PromptTag.HIGH
        images = {f"out_{level}": sample(model, x, schedule, tag, steps, cfg.seed)}
        gmap = None
    for name, img in images.items():
        written[name] = out_dir / f"{name}.png"
        write_png(written[name], img)
    if want_map:
        written["map_raw"] = out_dir / "genmap.f32"
        written["map_png"] = out_dir / "genmap.png"
        write_raw(written["map_raw"], gmap.values)
        write_png(written["map_png"], gmap.normalized())
    _echo_config(cfg, out_dir)
    for p in written.values():
        print(p)
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hazegen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", required=True)

    a = sub.add_parser("augment", help="build the severe degradation (BS) dataset")
    a.add_argument("--in-dir", required=True)
    a.add_argument("--light-dir", required=True)
    common(a)

    b = sub.add_parser("build", help="build ID and DE datasets with a teacher restorer")
    b.add_argument("--haze-dir", required=True)
    b.add_argument("--restorer", default="toy:stretch")
    b.add_argument("--enhancer", default="toy:unsharp")
    b.add_argument("--workers", type=int, default=1)
    common(b)

    t = sub.add_parser("train", help="LoRA fine-tuning on balanced ID/DE/BS batches")
    t.add_argument("--id", required=True, dest="id_manifest")
    t.add_argument("--de", required=True, dest="de_manifest")
    t.add_argument("--bs", required=True, dest="bs_manifest")
    t.add_argument("--steps", type=int)
    common(t)

    i = sub.add_parser("infer", help="sample low/high outputs and the generative-level map")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--level", choices=("low", "high", "both"), default="both")
    i.add_argument("--map", action="store_true", dest="want_map")
    i.add_argument("--steps", type=int)
    common(i)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "infer" and args.want_map and args.level != "both":
        parser.error("--map requires --level both")
    try:
        cfg = load_run_config(args.config, args.seed)
        if args.command == "augment":
            cmd_augment(args.in_dir, args.light_dir, args.out_dir, cfg)
        elif args.command == "build":
            cmd_build(args.haze_dir, args.restorer, args.out_dir, cfg, args.enhancer, args.workers)
        elif args.command == "train":
            if args.steps is not None:
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
            cmd_train(args.id_manifest, args.de_manifest, args.bs_manifest, args.out_dir, cfg)
        elif args.command == "infer":
            if args.steps is not None:
                cfg = dataclasses.replace(cfg, infer=InferConfig(args.steps))
            cmd_infer(args.checkpoint, args.image, args.out_dir, cfg, args.level, args.want_map)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IncompatibleCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
