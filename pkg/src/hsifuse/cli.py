"""Command-line surface: synth, convert, train, eval, ablate.

Exit codes: 0 success, 2 validation/config error, 3 runtime or training error.
All commands are bit-reproducible for fixed seeds and inputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Scene, SceneError, SynthSpec, load_scene, save_scene, synth_scene
from .diffusion import schedule_to_csv
from .train import (
    Checkpoint,
    DEFAULT_PALETTE,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    predict_raster,
    render_map,
    train_classifier,
    train_diffusion,
    write_log_csv,
)


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    """TrainConfig plus the scene path, output directory and ablation switches."""

    scene: str
    out_dir: str
    train: TrainConfig

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"scene", "out_dir"} | {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("scene", "out_dir"):
            if key not in doc:
                raise ConfigError(f"config is missing required key {key!r}")
        train_kw = {k: v for k, v in doc.items() if k not in ("scene", "out_dir")}
        try:
            train = TrainConfig(**train_kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad training configuration: {e}") from e
        return cls(scene=str(doc["scene"]), out_dir=str(doc["out_dir"]), train=train)

    def to_dict(self) -> dict:
        doc = {"scene": self.scene, "out_dir": self.out_dir}
        doc.update(dataclasses.asdict(self.train) | {"fuse_steps": list(self.train.fuse_steps)})
        return doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _require_empty_or_force(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists():
        _require_empty_or_force(out, args.force)
    spec = SynthSpec(height=args.height, width=args.width, c1=args.c1, c2=args.c2,
                     num_classes=args.k, texture_scale=args.texture, noise_sigma=args.noise)
    scene = synth_scene(spec, args.seed)
    save_scene(scene, out)
    print(f"wrote scene {scene.name!r} to {out}")
    for k in range(1, scene.num_classes + 1):
        print(f"class {k}: {int((scene.labels == k).sum())} pixels")
    return 0


def cmd_convert(args) -> int:
    out = Path(args.out)
    if out.exists():
        _require_empty_or_force(out, args.force)
    hsi = np.load(args.hsi).astype(np.float32)
    lidar = np.load(args.lidar).astype(np.float32)
    labels = np.load(args.labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ConfigError(f"labels must be integer, got {labels.dtype}")
    if labels.min() < 0:
        raise ConfigError("labels must be >= 0 (0 = unlabeled)")
    num_classes = int(labels.max())
    scene = Scene(hsi=hsi, lidar=lidar, labels=labels.astype(np.uint16), name=args.name,
                  num_classes=num_classes, class_names=[f"class_{i}" for i in range(1, num_classes + 1)])
    scene.validate()
    save_scene(scene, out)
    print(f"wrote scene {args.name!r} ({hsi.shape[0]}x{hsi.shape[1]}, "
          f"{hsi.shape[2]}+{lidar.shape[2]} channels, {num_classes} classes) to {out}")
    return 0


def cmd_train(args) -> int:
    run = RunConfig.from_file(args.config)
    scene = load_scene(run.scene)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.train
    schedule_to_csv(cfg.schedule(), out / "schedule.csv")

    if args.stage in ("diffusion", "all"):
        ckpts, histories = train_diffusion(scene, cfg, out_dir=out, resume=args.resume)
        for modality, hist in histories.items():
            if not hist["loss"]:
                print(f"diffusion[{modality}]: already complete, nothing to resume")
                continue
            write_log_csv(out / f"diffusion_{modality}_log.csv", hist, cfg.lr, cfg.sched_step, cfg.sched_gamma)
            print(f"diffusion[{modality}]: final loss {hist['loss'][-1]:.6f}")
    else:
        ckpts = {}
        for modality in ("hsi", "lidar"):
            path = out / f"diffusion_{modality}.ckpt"
            if not path.exists():
                raise ConfigError(f"classifier stage needs the diffusion checkpoint {path}")
            ckpts[modality] = Checkpoint.load(path)

    if args.stage in ("classifier", "all"):
        ckpt, history, metrics = train_classifier(scene, ckpts, cfg, out_dir=out, resume=args.resume)
        if history["loss"]:
            write_log_csv(out / "classifier_log.csv", history, cfg.lr, cfg.sched_step, cfg.sched_gamma)
            print(f"classifier: train OA {history['train_oa'][-1]:.4f}")
        else:
            print("classifier: already complete, nothing to resume")
        (out / "metrics.json").write_bytes(metrics.to_json().encode() + b"\n")
        print(f"test OA {metrics.oa:.4f}  AA {metrics.aa:.4f}  kappa {metrics.kappa:.4f}")
        print(f"metrics written to {out / 'metrics.json'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    scene = load_scene(args.scene)
    metrics = evaluate(scene, ckpt)
    out = Path(args.out) if args.out else None
    payload = metrics.to_json().encode() + b"\n"
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(payload)
    print(f"test OA {metrics.oa:.4f}  AA {metrics.aa:.4f}  kappa {metrics.kappa:.4f}")
    if args.render:
        preds = predict_raster(scene, ckpt)
        render_map(preds, DEFAULT_PALETTE, args.render)
        print(f"prediction map written to {args.render}")
    return 0


SWEEPS = ("single_steps", "no_freq", "no_frm")


def ablation_variants(cfg: TrainConfig, sweep: str) -> list[tuple[str, TrainConfig]]:
    base = dataclasses.asdict(cfg) | {"fuse_steps": tuple(cfg.fuse_steps)}
    variants: list[tuple[str, TrainConfig]] = [("fused", TrainConfig(**base))]
    if sweep == "single_steps":
        for t in cfg.fuse_steps:
            variants.append((f"step_{t}", TrainConfig(**(base | {"fuse_steps": (t,)}))))
    elif sweep == "no_freq":
        variants.append(("no_freq", TrainConfig(**(base | {"use_freq_parser": False}))))
    elif sweep == "no_frm":
        variants.append(("no_frm", TrainConfig(**(base | {"use_frm": False}))))
    else:
        raise ConfigError(f"unknown sweep {sweep!r} (choose from {', '.join(SWEEPS)})")
    return variants


def run_ablation(scene: Scene, cfg: TrainConfig, sweep: str, seeds) -> list[dict]:
    """Train every variant at every seed (identical seeds across variants).

    Returns one row per (variant, seed) plus a mean row per variant; rows carry
    oa/aa/kappa of the test split.
    """
    rows = []
    for name, vcfg in ablation_variants(cfg, sweep):
        per_seed = []
        for seed in seeds:
            scfg = TrainConfig(**(dataclasses.asdict(vcfg) | {"fuse_steps": tuple(vcfg.fuse_steps), "seed": int(seed)}))
            ckpts, _ = train_diffusion(scene, scfg)
            _, _, metrics = train_classifier(scene, ckpts, scfg)
            row = {"variant": name, "seed": int(seed), "oa": metrics.oa, "aa": metrics.aa,
                   "kappa": metrics.kappa}
            rows.append(row)
            per_seed.append(metrics)
        rows.append({
            "variant": name,
            "seed": "mean",
            "oa": float(np.mean([m.oa for m in per_seed])),
            "aa": float(np.mean([m.aa for m in per_seed])),
            "kappa": float(np.mean([m.kappa for m in per_seed])),
        })
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "oa", "aa", "kappa"])
        for row in rows:
            writer.writerow([row["variant"], row["seed"], repr(row["oa"]), repr(row["aa"]), repr(row["kappa"])])


def cmd_ablate(args) -> int:
    run = RunConfig.from_file(args.config)
    scene = load_scene(run.scene)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("need at least one seed")
    rows = run_ablation(scene, run.train, args.sweep, seeds)
    out = Path(args.out) if args.out else Path(run.out_dir) / f"ablation_{args.sweep}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out)
    for row in rows:
        if row["seed"] == "mean":
            print(f"{row['variant']:>10s}  mean OA {row['oa']:.4f}  AA {row['aa']:.4f}  kappa {row['kappa']:.4f}")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsifuse",
        description="Two-modality pixel classification on diffusion-noised patch stacks.",
    )
    parser.add_argument("--version", action="version", version=f"hsifuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="write a synthetic scene directory", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--height", type=int, default=64, help="scene height")
    p.add_argument("--width", type=int, default=64, help="scene width")
    p.add_argument("--c1", type=int, default=8, help="spectral channels")
    p.add_argument("--c2", type=int, default=1, help="elevation channels")
    p.add_argument("--k", type=int, default=3, help="number of classes")
    p.add_argument("--noise", type=float, default=0.05, help="additive noise sigma")
    p.add_argument("--texture", type=float, default=0.5, help="texture amplitude")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="build a scene directory from .npy arrays", formatter_class=fmt)
    p.add_argument("--hsi", required=True, help="float array [H,W,C1] (.npy)")
    p.add_argument("--lidar", required=True, help="float array [H,W,C2] (.npy)")
    p.add_argument("--labels", required=True, help="integer raster [H,W] (.npy), 0 = unlabeled")
    p.add_argument("--name", default="converted", help="scene name")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="run the two-stage pipeline", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--stage", choices=("diffusion", "classifier", "all"), default="all",
                   help="stage(s) to run")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a classifier checkpoint", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="classifier checkpoint")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--render", default=None, help="write a full-scene prediction map PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation variants and report metrics", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--sweep", choices=SWEEPS, required=True, help="which ablation to run")
    p.add_argument("--seeds", default="0", help="comma-separated seeds shared by all variants")
    p.add_argument("--out", default=None, help="report CSV path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError, SceneError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ArithmeticError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
