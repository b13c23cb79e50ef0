"""Command-line entry point: ``towelfold {datagen,train,eval,detect,fold-bench}``.

Configuration comes from an optional YAML/JSON file (``--config``) with the
sections ``generation``, ``training``, ``extraction``, ``geometry``,
``fold``, ``tolerance`` and ``benchmark`` plus top-level ``seed`` and
``out``. Command-line flags override file values. Unknown keys, unknown
flags and missing input files exit with status 2; runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, TowelFoldError
from .fold import BenchmarkConfig, FoldParams, ToleranceParams, noise_sweep, run_benchmark, write_report
from .heatmap import DEFAULT_MIN_PROBABILITY, DEFAULT_WINDOW, extract_keypoints
from .render import GenConfig
from .render.dataset import generate_dataset, read_image, write_image
from .trainer import TrainConfig, evaluate, load_dataset, train

log = logging.getLogger("towelfold")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flag, config key or input path."""


@dataclass(frozen=True)
class ExtractionConfig:
    min_probability: float = DEFAULT_MIN_PROBABILITY
    window: int = DEFAULT_WINDOW


@dataclass(frozen=True)
class GeometryConfig:
    camera_height_m: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    generation: GenConfig = field(default_factory=GenConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    fold: FoldParams = field(default_factory=FoldParams)
    tolerance: ToleranceParams = field(default_factory=ToleranceParams)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)


def _section(cls, data, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(name, "section must be a mapping")
    if cls is GenConfig:
        return GenConfig.from_dict(data)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**data)


def parse_run_config(data: dict | None) -> RunConfig:
    """Validates a raw config mapping; unknown keys raise ConfigError."""
    data = dict(data or {})
    sections = {f.name: f for f in fields(RunConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level config key")
    kwargs = {}
    for name, f in sections.items():
        if name in ("seed", "out"):
            if name in data:
                kwargs[name] = data[name]
            continue
        try:
            kwargs[name] = _section(f.default_factory, data.get(name), name)
        except TypeError as e:
            raise ConfigError(name, str(e)) from e
    return RunConfig(**kwargs)


def load_config_file(path) -> RunConfig:
    import yaml  # JSON is a subset of YAML

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"cannot parse {p}: {e}") from e
    return parse_run_config(data or {})


# ----------------------------------------------------------------- helpers


def _fresh_dir(path: Path) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise UsageError(f"output path {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _emit(args, payload: dict, summary: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=float))
    else:
        print(summary)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, default=float) + "\n")


def _resolve(args) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


# ---------------------------------------------------------------- commands


def cmd_datagen(args) -> int:
    cfg = _resolve(args)
    gen = cfg.generation
    if args.resolution is not None:
        gen = gen.replace(resolution=args.resolution)
    cfg = replace(cfg, generation=gen)
    out = _fresh_dir(Path(cfg.out))
    manifest = generate_dataset(args.n, cfg.seed, out, gen, workers=args.workers, fmt=args.format)
    _write_json(out / "run_config.json", {"command": "datagen", "n": args.n, **cfg.to_dict()})
    _emit(args, manifest.to_dict(), f"wrote {manifest.n} samples to {out} (content_hash {manifest.content_hash})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tc = cfg.training
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
        "base_channels": args.base_channels, "resolution": args.resolution,
    }
    tc = replace(tc, seed=cfg.seed, **{k: v for k, v in overrides.items() if v is not None})
    tc = replace(tc, min_probability=cfg.extraction.min_probability, window=cfg.extraction.window)
    cfg = replace(cfg, training=tc)
    data = load_dataset(_require(args.data, "dataset"), tc.resolution)
    out = _fresh_dir(Path(cfg.out))
    _write_json(out / "run_config.json", {"command": "train", "data": str(args.data), **cfg.to_dict()})
    report = train(data, tc, out_dir=out)
    summary = (f"trained {report.steps} steps in {report.wall_time_s:.1f}s; best val AP@2px "
               f"{report.best_val_ap:.4f} (epoch {report.best_epoch}); checkpoint {report.checkpoint_path}")
    _emit(args, report.to_dict(), summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .nnet import load_checkpoint

    cfg = _resolve(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    res = args.resolution or ckpt.meta.get("train_config", {}).get("resolution") or cfg.generation.resolution
    data = load_dataset(_require(args.data, "dataset"), res)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    metrics = evaluate(data, ckpt, cfg.extraction.min_probability, cfg.extraction.window, thresholds)
    metrics["checkpoint"] = str(args.checkpoint)
    metrics["data"] = str(args.data)
    metrics["config"] = cfg.to_dict()
    out = Path(cfg.out)
    if (out / "eval.json").exists():
        raise UsageError(f"{out / 'eval.json'} already exists")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", metrics)
    aps = ", ".join(f"AP@{k}px {v:.4f}" for k, v in metrics["ap_at"].items())
    _emit(args, metrics, f"{metrics['n_images']} images: {aps}")
    return EXIT_OK


def draw_overlay(image: np.ndarray, keypoints, color=(255, 255, 0), radius: int = 3) -> np.ndarray:
    """Copies ``image`` (H, W, 3 uint8) with a filled disc at each (u, v)."""
    out = image.copy()
    h, w = out.shape[:2]
    vv, uu = np.mgrid[0:h, 0:w]
    for u, v in keypoints:
        out[(uu - u) ** 2 + (vv - v) ** 2 <= radius * radius] = color
    return out


def _parse_color(text: str) -> tuple[int, int, int]:
    names = {"yellow": (255, 255, 0), "red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255),
             "white": (255, 255, 255), "magenta": (255, 0, 255), "cyan": (0, 255, 255)}
    if text in names:
        return names[text]
    try:
        rgb = tuple(int(x) for x in text.split(","))
    except ValueError:
        rgb = ()
    if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
        raise UsageError(f"bad colour {text!r}; use a name or R,G,B")
    return rgb


def cmd_detect(args) -> int:
    from PIL import Image

    from .nnet import load_checkpoint

    cfg = _resolve(args)
    color = _parse_color(args.color)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    img = read_image(_require(args.image, "image"))
    h, w = img.shape[:2]
    res = ckpt.meta.get("train_config", {}).get("resolution") or cfg.generation.resolution
    net_in = img if (h, w) == (res, res) else np.asarray(Image.fromarray(img).resize((res, res), Image.BILINEAR))
    x = net_in.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0)
    heat = ckpt.model().forward(x)[0, 0]
    dets = extract_keypoints(heat, cfg.extraction.min_probability, cfg.extraction.window)
    sx, sy = w / res, h / res
    kps = [{"u": (d.u + 0.5) * sx - 0.5, "v": (d.v + 0.5) * sy - 0.5, "probability": d.probability} for d in dets]
    payload = {"image": str(args.image), "width": w, "height": h, "keypoints": kps}
    if args.overlay:
        overlay = draw_overlay(img, [(k["u"], k["v"]) for k in kps], color)
        Path(args.overlay).parent.mkdir(parents=True, exist_ok=True)
        write_image(args.overlay, overlay)
        payload["overlay"] = str(args.overlay)
    print(json.dumps(payload, indent=2 if args.json else None))
    return EXIT_OK


def cmd_fold_bench(args) -> int:
    cfg = _resolve(args)
    bench = cfg.benchmark
    overrides = {"n_trials": args.n, "noise_px": args.noise_px}
    bench = replace(bench, seed=cfg.seed, **{k: v for k, v in overrides.items() if v is not None})
    if args.oracle:
        bench = replace(bench, oracle=True)
    bench = replace(bench, camera_height_m=cfg.geometry.camera_height_m,
                    min_probability=cfg.extraction.min_probability, window=cfg.extraction.window)
    cfg = replace(cfg, benchmark=bench)
    detector = None
    if not bench.oracle:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        detector = _require(args.checkpoint, "checkpoint")
    out = _fresh_dir(Path(cfg.out))
    _write_json(out / "run_config.json", {"command": "fold-bench", **cfg.to_dict()})
    kwargs = {"gen_config": cfg.generation, "params": cfg.fold, "tol": cfg.tolerance}
    report = run_benchmark(bench, detector, **kwargs)
    write_report(report, out)
    payload = report.to_dict(include_trials=False)
    if args.sweep:
        levels = [float(s) for s in args.sweep.split(",")]
        reports = noise_sweep(levels, bench, detector, **kwargs)
        sweep = [{"noise_px": lv, "grasp_rate": r.grasp_rate, "fold_rate": r.fold_rate}
                 for lv, r in zip(levels, reports)]
        _write_json(out / "noise_sweep.json", {"levels": sweep, "config": cfg.to_dict()})
        payload["noise_sweep"] = sweep
    lines = [f"{'setting':<14} grasp      fold"]
    for name, s in report.settings.items():
        lines.append(f"{name:<14} {s['grasp']:>3}/{s['trials']:<5} {s['fold']:>3}/{s['trials']}")
    lines.append(f"{'total':<14} {report.grasp_successes:>3}/{report.n_trials:<5} {report.fold_successes:>3}/{report.n_trials}"
                 f"  ({report.grasp_rate:.0%} grasp, {report.fold_rate:.0%} fold, {report.n_aborted} aborted)")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="towelfold", description="Synthetic towel keypoints and scripted folding.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default: config or 0)")
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON to stdout")

    p = sub.add_parser("datagen", parents=[common], help="render a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[common], help="train the keypoint detector")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="AP of a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", default="2", help="comma-separated pixel thresholds")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="detect corners in one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--overlay", help="write a copy of the image with keypoint discs")
    p.add_argument("--color", default="yellow", help="marker colour name or R,G,B")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("fold-bench", parents=[common], help="closed-loop fold benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use ground-truth corners instead of the detector")
    p.add_argument("--n", type=int, help="number of trials")
    p.add_argument("--noise-px", type=float, help="keypoint noise standard deviation in pixels")
    p.add_argument("--sweep", help="comma-separated noise levels for a paired sweep, e.g. 0,2,4,8")
    p.set_defaults(func=cmd_fold_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, FileNotFoundError) as e:
        print(f"towelfold {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TowelFoldError as e:
        print(f"towelfold {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
