"""Scripted fold plans, a geometric fold simulator and the closed-loop benchmark.

The simulator is a proxy: a grasp succeeds when the planned grasp point is
close to the true fold-side midpoint, and a fold succeeds when the reflected
fold-side corners land near their opposing corners. Cloth dynamics, corner
bending and gripper mechanics are not modelled; fold errors come only from
keypoint error propagated into the plan.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateGeometryError
from .geometry import TABLE, CameraModel, TablePlane, TowelFrame, reproject_to_plane, towel_frame
from .heatmap import DEFAULT_MIN_PROBABILITY, DEFAULT_WINDOW, DetectedKeypoint, extract_keypoints
from .render.dataset import sample_seed, to_uint8
from .render.raster import annotate_corners, render_scene
from .render.scene import GenConfig, LightingSpec, TowelGeometry, sample_scene, top_down_camera

log = logging.getLogger(__name__)

REPORT_NOTE = (
    "Geometric proxy: grasp and fold success are judged on rigid corner positions. "
    "Cloth dynamics and corner bending during the fold are not modelled."
)


@dataclass(frozen=True)
class FoldParams:
    arc_height: float = 0.1
    n_waypoints: int = 16
    pregrasp_offset: float = 0.05

    def __post_init__(self):
        if not self.arc_height > 0:
            raise ConfigError("fold.arc_height", "must be positive")
        if self.n_waypoints < 2:
            raise ConfigError("fold.n_waypoints", "need at least 2 waypoints")
        if self.pregrasp_offset < 0:
            raise ConfigError("fold.pregrasp_offset", "must be non-negative")


@dataclass(frozen=True)
class ToleranceParams:
    grasp_m: float = 0.02
    fold_frac: float = 0.1

    def __post_init__(self):
        if not self.grasp_m > 0:
            raise ConfigError("tolerance.grasp_m", "must be positive")
        if not self.fold_frac > 0:
            raise ConfigError("tolerance.fold_frac", "must be positive")


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    approach: tuple[float, float, float]  # unit direction of gripper travel


@dataclass(frozen=True)
class FoldPlan:
    pregrasp_pose: Pose
    grasp_pose: Pose
    arc_waypoints: np.ndarray  # (n, 3)
    fold_line_point: tuple[float, float]
    fold_line_direction: tuple[float, float]  # unit vector in the table plane

    @property
    def grasp(self) -> np.ndarray:
        return np.asarray(self.grasp_pose.position)

    def to_dict(self) -> dict:
        return {
            "pregrasp_pose": asdict(self.pregrasp_pose),
            "grasp_pose": asdict(self.grasp_pose),
            "arc_waypoints": self.arc_waypoints.tolist(),
            "fold_line": {"point": list(self.fold_line_point), "direction": list(self.fold_line_direction)},
        }


@dataclass(frozen=True)
class FoldOutcome:
    aborted: bool
    grasp_success: bool
    fold_success: bool
    corner_errors_m: tuple[float, float] = (math.nan, math.nan)
    grasp_error_m: float = math.nan
    reason: str = ""

    def __post_init__(self):
        if self.fold_success and not self.grasp_success or self.grasp_success and self.aborted:
            raise ValueError("outcome violates fold => grasp => not aborted")


ABORTED = FoldOutcome(aborted=True, grasp_success=False, fold_success=False, reason="fewer than 4 keypoints")


# ------------------------------------------------------------------ planning


def _unit(v):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateGeometryError("zero-length direction")
    return v / n


def _reflect(points, p, d):
    """Mirror ``points`` (..., 2) across the line through ``p`` with unit direction ``d``."""
    rel = np.asarray(points, dtype=np.float64) - p
    along = rel @ d
    return p + 2.0 * along[..., None] * d - rel


def plan_fold(frame: TowelFrame, params: FoldParams | None = None) -> FoldPlan:
    """Pregrasp, grasp and arc for folding the frame's fold side onto its opposite side.

    The grasp sits at the middle of the fold side. The fold line passes
    through the midpoint between the fold-side and opposite-side midpoints,
    parallel to the fold side. The arc runs in the vertical plane from the
    grasp point to its mirror image with apex height
    ``min(arc_height, travel / 2)``.
    """
    params = params or FoldParams()
    a, b = frame.fold_side
    c, d = frame.opposite_side
    grasp = 0.5 * (a + b)
    far = 0.5 * (c + d)
    centre = 0.5 * (grasp + far)
    direction = _unit((b - a)[:2])
    up = np.asarray(frame.z_axis, dtype=np.float64)

    target = grasp.copy()
    target[:2] = _reflect(grasp[:2], centre[:2], direction)
    travel = np.linalg.norm(target - grasp)
    if travel < 1e-9:
        raise DegenerateGeometryError("grasp point lies on the fold line")
    e = (target - grasp) / travel
    h = min(params.arc_height, travel / 2)
    phi = np.linspace(0.0, math.pi, params.n_waypoints)
    mid = 0.5 * (grasp + target)
    arc = mid - 0.5 * travel * np.cos(phi)[:, None] * e + h * np.sin(phi)[:, None] * up
    arc[0], arc[-1] = grasp, target
    arc[:, 2] = np.maximum(arc[:, 2], 0.0)  # clamp round-off below the table

    approach = np.asarray(frame.x_axis, dtype=np.float64).copy()
    approach[2] = 0.0
    approach = _unit(approach)
    pregrasp = grasp - params.pregrasp_offset * approach
    return FoldPlan(
        pregrasp_pose=Pose(tuple(map(float, pregrasp)), tuple(map(float, approach))),
        grasp_pose=Pose(tuple(map(float, grasp)), tuple(map(float, approach))),
        arc_waypoints=arc,
        fold_line_point=(float(centre[0]), float(centre[1])),
        fold_line_direction=(float(direction[0]), float(direction[1])),
    )


# ---------------------------------------------------------------- simulation


def simulate_fold(true_corners, plan: FoldPlan, tol: ToleranceParams | None = None) -> FoldOutcome:
    """Scores ``plan`` against the true towel (a TowelGeometry or 4 corners in order).

    The true fold side is the towel side whose midpoint is nearest the planned
    grasp point. Its corners that lie on the grasp side of the plan's fold
    line are mirrored across it; each is compared with the adjacent corner on
    the opposite side.
    """
    tol = tol or ToleranceParams()
    if isinstance(true_corners, TowelGeometry):
        true_corners = true_corners.corners_3d
    corners = np.asarray(true_corners, dtype=np.float64)[:, :2]
    grasp = plan.grasp[:2]

    mids = 0.5 * (corners + np.roll(corners, -1, axis=0))  # side k joins corners k, k+1
    dist = np.linalg.norm(mids - grasp, axis=1)
    k = int(np.argmin(dist))
    grasp_error = float(dist[k])
    if grasp_error > tol.grasp_m:
        return FoldOutcome(False, False, False, grasp_error_m=grasp_error, reason="grasp missed the fold side")

    ia, ib = k, (k + 1) % 4
    oa, ob = (k - 1) % 4, (k + 2) % 4  # neighbours across the towel
    p = np.asarray(plan.fold_line_point)
    d = np.asarray(plan.fold_line_direction)
    normal = np.array([-d[1], d[0]])
    grasp_side = np.sign((grasp - p) @ normal)
    moved = []
    for i in (ia, ib):
        c = corners[i]
        moved.append(_reflect(c, p, d) if np.sign((c - p) @ normal) == grasp_side else c)
    errors = (float(np.linalg.norm(moved[0] - corners[oa])), float(np.linalg.norm(moved[1] - corners[ob])))
    length = float(np.linalg.norm(mids[k] - mids[(k + 2) % 4]))
    ok = max(errors) <= tol.fold_frac * length
    return FoldOutcome(False, True, bool(ok), errors, grasp_error, "" if ok else "corners misaligned")


# ---------------------------------------------------------------- closed loop


def fold_from_keypoints(px, camera: CameraModel, true_corners, params=None, tol=None,
                        plane: TablePlane = TABLE) -> tuple[FoldOutcome, FoldPlan | None]:
    """Reprojects 4 pixel keypoints, plans and simulates. Fewer than 4 aborts."""
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    if len(px) < 4:
        return ABORTED, None
    try:
        frame = towel_frame(reproject_to_plane(camera, px[:4], plane), plane)
        plan = plan_fold(frame, params)
    except DegenerateGeometryError as e:
        return FoldOutcome(False, False, False, reason=f"degenerate keypoints: {e}"), None
    return simulate_fold(true_corners, plan, tol), plan


def fold_from_heatmap(heatmap, camera: CameraModel, true_corners, params=None, tol=None,
                      min_probability=DEFAULT_MIN_PROBABILITY, window=DEFAULT_WINDOW,
                      noise_px=None) -> tuple[FoldOutcome, FoldPlan | None, list[DetectedKeypoint]]:
    """Applies the abort rule to a heatmap, then folds with its 4 strongest peaks.

    ``noise_px`` (shape (4, 2)) is added to the selected keypoints.
    """
    dets = extract_keypoints(heatmap, min_probability, window)
    if len(dets) < 4:
        return ABORTED, None, dets
    px = np.array([(k.u, k.v) for k in dets[:4]], dtype=np.float64)
    if noise_px is not None:
        px = px + noise_px
    outcome, plan = fold_from_keypoints(px, camera, true_corners, params, tol)
    return outcome, plan, dets


# ---------------------------------------------------------------- benchmark


SETTINGS = ("natural_light", "led_light", "distractors")


def setting_config(base: GenConfig, setting: str) -> GenConfig:
    """Flat-towel generation config for one benchmark setting.

    natural_light: the base lighting ranges, no distractors.
    led_light: bright, cool, high overhead light, no distractors.
    distractors: base lighting with the maximum number of distractors.
    """
    flat = base.replace(wrinkle_amplitude=(0.0, 0.0))
    if setting == "natural_light":
        return flat.replace(distractor_min=0, distractor_max=0)
    if setting == "led_light":
        return flat.replace(distractor_min=0, distractor_max=0, light_intensity=(0.8, 0.9),
                            light_elevation_deg=(75.0, 90.0), ambient=(0.35, 0.5), env_tint_saturation=(0.0, 0.1))
    if setting == "distractors":
        return flat.replace(distractor_min=5, distractor_max=5)
    raise ConfigError("benchmark.setting", f"unknown setting {setting!r}; choose from {SETTINGS}")


def _led_tint(light: LightingSpec) -> LightingSpec:
    # cool white cast of LED panels
    return replace(light, env_tint=(0.6 * light.env_tint[0], 0.8 * light.env_tint[1], light.env_tint[2] + 0.05))


@dataclass
class TrialRecord:
    trial: int
    setting: str
    seed: int
    noise_px: float
    aborted: bool
    grasp_success: bool
    fold_success: bool
    grasp_error_m: float
    corner_error_0_m: float
    corner_error_1_m: float
    n_detections: int
    keypoint_error_px: float
    reason: str


@dataclass
class BenchmarkReport:
    n_trials: int
    n_aborted: int
    grasp_successes: int
    fold_successes: int
    grasp_rate: float
    fold_rate: float
    settings: dict
    trials: list[TrialRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    note: str = REPORT_NOTE

    def to_dict(self, include_trials: bool = True) -> dict:
        d = asdict(self)
        if not include_trials:
            d.pop("trials")
        else:
            d["trials"] = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in t.items()}
                           for t in d["trials"]]
        return d


@dataclass(frozen=True)
class BenchmarkConfig:
    n_trials: int = 100
    seed: int = 0
    oracle: bool = False
    noise_px: float = 0.0
    settings: tuple[str, ...] = SETTINGS
    camera_height_m: float = 1.0
    min_probability: float = DEFAULT_MIN_PROBABILITY
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("benchmark.n_trials", "must be >= 1")
        if self.noise_px < 0:
            raise ConfigError("benchmark.noise_px", "must be non-negative")
        for s in self.settings:
            if s not in SETTINGS:
                raise ConfigError("benchmark.settings", f"unknown setting {s!r}")


def _detector(model):
    if model is None:
        return None
    from .nnet import Checkpoint, KeypointNet, load_checkpoint

    if isinstance(model, KeypointNet):
        return model
    if isinstance(model, Checkpoint):
        return model.model()
    return load_checkpoint(model).model()


def run_benchmark(
    config: BenchmarkConfig | None = None,
    detector=None,
    gen_config: GenConfig | None = None,
    camera: CameraModel | None = None,
    params: FoldParams | None = None,
    tol: ToleranceParams | None = None,
) -> BenchmarkReport:
    """Closed-loop fold trials; trial ``i`` uses setting ``i mod len(settings)``.

    ``detector`` is a KeypointNet, Checkpoint or checkpoint path; it is
    ignored in oracle mode, where the projected true corners replace it.
    Noise is drawn once per trial from a standard normal and scaled by
    ``config.noise_px``, so runs at different noise levels are paired.
    """
    config = config or BenchmarkConfig()
    gen_config = gen_config or GenConfig()
    params = params or FoldParams()
    tol = tol or ToleranceParams()
    res = gen_config.resolution
    camera = camera or top_down_camera(res, config.camera_height_m)
    model = None if config.oracle else _detector(detector)
    if not config.oracle and model is None:
        raise ConfigError("benchmark.detector", "a detector checkpoint is required unless oracle mode is on")
    configs = {s: setting_config(gen_config, s) for s in config.settings}

    trials = []
    for i in range(config.n_trials):
        setting = config.settings[i % len(config.settings)]
        seed = sample_seed(config.seed, i)
        scene = replace(sample_scene(seed, configs[setting]), camera=camera, image_size=res)
        if setting == "led_light":
            scene = replace(scene, lighting=_led_tint(scene.lighting))
        truth = np.asarray(annotate_corners(scene, res).corners_px)
        z = np.random.default_rng(np.random.SeedSequence([int(config.seed), i, 7])).standard_normal((4, 2))
        noise = config.noise_px * z

        if config.oracle:
            px = truth + noise
            outcome, _ = fold_from_keypoints(px, camera, scene.towel, params, tol)
            n_det = 4
        else:
            img = to_uint8(render_scene(scene, res)).astype(np.float32) / np.float32(255.0)
            heat = model.forward(img.transpose(2, 0, 1)[None])[0, 0]
            outcome, _, dets = fold_from_heatmap(heat, camera, scene.towel, params, tol,
                                                 config.min_probability, config.window, noise)
            n_det = len(dets)
            px = np.array([(k.u, k.v) for k in dets[:4]], dtype=np.float64).reshape(-1, 2) + noise[:len(dets[:4])]
        kp_err = float(np.mean(np.min(np.linalg.norm(px[:, None] - truth[None], axis=-1), axis=1))) if len(px) else math.nan
        errs = outcome.corner_errors_m
        trials.append(TrialRecord(
            trial=i, setting=setting, seed=seed, noise_px=config.noise_px, aborted=outcome.aborted,
            grasp_success=outcome.grasp_success, fold_success=outcome.fold_success,
            grasp_error_m=outcome.grasp_error_m, corner_error_0_m=errs[0], corner_error_1_m=errs[1],
            n_detections=n_det, keypoint_error_px=kp_err, reason=outcome.reason,
        ))

    per_setting = {}
    for s in config.settings:
        rows = [t for t in trials if t.setting == s]
        per_setting[s] = {
            "trials": len(rows),
            "grasp": sum(t.grasp_success for t in rows),
            "fold": sum(t.fold_success for t in rows),
            "aborted": sum(t.aborted for t in rows),
        }
    n = len(trials)
    grasp = sum(t.grasp_success for t in trials)
    fold = sum(t.fold_success for t in trials)
    report = BenchmarkReport(
        n_trials=n,
        n_aborted=sum(t.aborted for t in trials),
        grasp_successes=grasp,
        fold_successes=fold,
        grasp_rate=grasp / n,
        fold_rate=fold / n,
        settings=per_setting,
        trials=trials,
        config={
            "benchmark": asdict(config),
            "generation": gen_config.to_dict(),
            "fold": asdict(params),
            "tolerance": asdict(tol),
            "camera": camera.to_dict(),
        },
    )
    log.info("benchmark: grasp %d/%d, fold %d/%d, aborted %d", grasp, n, fold, n, report.n_aborted)
    return report


def write_report(report: BenchmarkReport, out_dir) -> tuple[Path, Path]:
    """Writes ``benchmark.json`` (Table I style summary plus trials) and ``trials.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "benchmark.json"
    js.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    cs = out / "trials.csv"
    names = list(TrialRecord.__dataclass_fields__)
    with open(cs, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for t in report.trials:
            w.writerow([getattr(t, k) for k in names])
    return js, cs


def noise_sweep(levels: Sequence[float], config: BenchmarkConfig, detector=None, **kwargs) -> list[BenchmarkReport]:
    """Benchmarks at each keypoint-noise level with identical scenes and noise draws."""
    return [run_benchmark(replace(config, noise_px=float(s)), detector, **kwargs) for s in levels]
