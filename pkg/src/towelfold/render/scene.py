"""Randomised scene descriptions and their sampler.

Every quantity is drawn from one ``numpy`` PCG64 stream seeded with the
scene seed, in a fixed order, so ``sample_scene(seed, config)`` is a pure
function. Scene types are frozen dataclasses built from tuples and floats.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ConfigError
from ..geometry import CameraModel, look_at
from .noise import PerlinParams, perlin_noise

MAX_DISTRACTORS = 5
PATTERNS = ("none", "stripes", "checker")
DISTRACTOR_KINDS = ("box", "sphere", "cylinder")

Range = tuple[float, float]


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class SphericalCapParams:
    """Camera positions: distance in [r_min, r_max], polar angle <= polar_max_deg."""

    r_min: float = 0.8
    r_max: float = 1.2
    polar_max_deg: float = 25.0
    roll_deg: Range = (-180.0, 180.0)
    focal_factor: Range = (0.9, 1.1)

    def validate(self, prefix: str = "camera") -> None:
        if not 0 < self.r_min <= self.r_max:
            raise ConfigError(f"{prefix}.r_min", f"need 0 < r_min <= r_max, got {self.r_min}, {self.r_max}")
        if not 0 <= self.polar_max_deg <= 90:
            raise ConfigError(f"{prefix}.polar_max_deg", "must lie in [0, 90]")
        _check_range(f"{prefix}.roll_deg", self.roll_deg)
        _check_range(f"{prefix}.focal_factor", self.focal_factor, positive=True)


@dataclass(frozen=True)
class GenConfig:
    """Sampling ranges for synthetic scenes. Lengths in metres, angles in degrees."""

    resolution: int = 128
    towel_width: Range = (0.2, 0.5)
    towel_height: Range = (0.2, 0.5)
    workspace_half_extent: float = 0.1
    towel_yaw_deg: Range = (0.0, 360.0)
    wrinkle_amplitude: Range = (0.0, 0.01)
    wrinkle_frequency: Range = (2.0, 8.0)
    corner_jitter: float = 0.005
    towel_saturation: Range = (0.2, 1.0)
    towel_value: Range = (0.25, 1.0)
    towel_noise_octaves: tuple[int, int] = (1, 4)
    towel_noise_frequency: Range = (5.0, 40.0)
    towel_noise_amplitude: Range = (0.0, 0.35)
    ground_saturation: Range = (0.0, 0.8)
    ground_value: Range = (0.15, 0.95)
    ground_pattern_scale: Range = (0.02, 0.15)
    ground_noise_amplitude: Range = (0.0, 0.5)
    ground_noise_frequency: Range = (3.0, 30.0)
    distractor_min: int = 0
    distractor_max: int = MAX_DISTRACTORS
    distractor_size: Range = (0.03, 0.12)
    distractor_area_half_extent: float = 0.45
    ambient: Range = (0.15, 0.5)
    light_intensity: Range = (0.3, 0.9)
    light_elevation_deg: Range = (25.0, 90.0)
    env_tint_saturation: Range = (0.0, 0.4)
    env_tint_value: Range = (0.0, 0.25)
    camera: SphericalCapParams = field(default_factory=SphericalCapParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.resolution < 32:
            raise ConfigError("resolution", f"must be >= 32, got {self.resolution}")
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                _check_range(f.name, val)
        for name in ("towel_width", "towel_height", "distractor_size", "towel_noise_frequency",
                     "ground_pattern_scale", "ground_noise_frequency"):
            _check_range(name, getattr(self, name), positive=True)
        if self.towel_noise_octaves[0] < 1:
            raise ConfigError("towel_noise_octaves", "octaves must be >= 1")
        if not 0 <= self.distractor_min <= self.distractor_max <= MAX_DISTRACTORS:
            raise ConfigError(
                "distractor_max",
                f"need 0 <= distractor_min <= distractor_max <= {MAX_DISTRACTORS}",
            )
        for name in ("workspace_half_extent", "corner_jitter", "distractor_area_half_extent"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.wrinkle_amplitude[0] < 0:
            raise ConfigError("wrinkle_amplitude", "must be non-negative")
        self.camera.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown generation config key")
        cam = d.pop("camera", None)
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if cam is not None:
            cam_known = {f.name for f in fields(SphericalCapParams)}
            bad = set(cam) - cam_known
            if bad:
                raise ConfigError(f"camera.{sorted(bad)[0]}", "unknown camera config key")
            kwargs["camera"] = SphericalCapParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cam.items()})
        return cls(**kwargs)

    def replace(self, **changes) -> "GenConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return GenConfig(**d)


def _check_range(name: str, rng: tuple, positive: bool = False) -> None:
    if len(rng) != 2 or not all(np.isfinite(rng)):
        raise ConfigError(name, f"expected a finite (min, max) pair, got {rng!r}")
    if rng[0] > rng[1]:
        raise ConfigError(name, f"min {rng[0]} exceeds max {rng[1]}")
    if positive and rng[0] <= 0:
        raise ConfigError(name, f"range must be positive, got {rng!r}")


# ------------------------------------------------------------------- types

Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class WrinkleParams:
    amplitude: float
    frequency: float
    direction: float
    phase: float
    seed: int

    def height(self, local_xy) -> np.ndarray:
        """Heightfield in [0, amplitude] over towel-local coordinates."""
        xy = np.asarray(local_xy, dtype=np.float64)
        if self.amplitude == 0:
            return np.zeros(xy.shape[:-1])
        along = xy[..., 0] * math.cos(self.direction) + xy[..., 1] * math.sin(self.direction)
        wave = np.sin(2 * math.pi * self.frequency * along + self.phase)
        bumps = perlin_noise(xy, PerlinParams(octaves=2, frequency=self.frequency, amplitude=1.0, seed=self.seed))
        mix = np.clip(0.6 * wave + 0.4 * bumps, -1.0, 1.0)
        return self.amplitude * 0.5 * (1.0 + mix)


@dataclass(frozen=True)
class TowelGeometry:
    """Rectangular towel of ``width`` x ``height`` centred at ``center`` with ``yaw``.

    ``corner_offsets`` jitter the four local corners in-plane; ``corners_3d``
    lists them in counter-clockwise order starting at local (-w/2, -h/2).
    """

    width: float
    height: float
    center: Vec2
    yaw: float
    corner_offsets: tuple[Vec2, Vec2, Vec2, Vec2] = ((0.0, 0.0),) * 4
    wrinkle: WrinkleParams | None = None

    @property
    def local_corners(self) -> np.ndarray:
        hw, hh = self.width / 2, self.height / 2
        base = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        return base + np.asarray(self.corner_offsets, dtype=np.float64)

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([c, s]), np.array([-s, c])

    def local_to_world_xy(self, local_xy) -> np.ndarray:
        ex, ey = self.axes
        local_xy = np.asarray(local_xy, dtype=np.float64)
        return np.asarray(self.center) + local_xy[..., :1] * ex + local_xy[..., 1:2] * ey

    def world_to_local_xy(self, world_xy) -> np.ndarray:
        ex, ey = self.axes
        rel = np.asarray(world_xy, dtype=np.float64)[..., :2] - np.asarray(self.center)
        return np.stack([rel @ ex, rel @ ey], axis=-1)

    def surface_height(self, local_xy) -> np.ndarray:
        if self.wrinkle is None:
            return np.zeros(np.asarray(local_xy).shape[:-1])
        return self.wrinkle.height(local_xy)

    @property
    def corners_3d(self) -> np.ndarray:
        local = self.local_corners
        xy = self.local_to_world_xy(local)
        return np.column_stack([xy, self.surface_height(local)])

    def grid(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """(n+1) x (n+1) mesh vertices (world xyz) and local coordinates.

        The interior is a bilinear blend of the jittered corners.
        """
        s = np.linspace(0.0, 1.0, n + 1)
        a, b = np.meshgrid(s, s, indexing="ij")  # a along local x, b along local y
        c = self.local_corners
        local = (
            ((1 - a) * (1 - b))[..., None] * c[0]
            + (a * (1 - b))[..., None] * c[1]
            + (a * b)[..., None] * c[2]
            + ((1 - a) * b)[..., None] * c[3]
        )
        xyz = np.concatenate([self.local_to_world_xy(local), self.surface_height(local)[..., None]], axis=-1)
        return xyz, local


@dataclass(frozen=True)
class ProceduralMaterial:
    base_color_hsv: Vec3
    noise: PerlinParams
    pattern: str = "none"
    pattern_scale: float = 0.05
    pattern_angle: float = 0.0
    secondary_color_hsv: Vec3 = (0.0, 0.0, 0.5)

    @property
    def base_rgb(self) -> np.ndarray:
        return np.array(colorsys.hsv_to_rgb(*self.base_color_hsv))

    def albedo(self, xy) -> np.ndarray:
        """RGB albedo in [0, 1] at 2D texture coordinates ``xy`` (..., 2)."""
        xy = np.asarray(xy, dtype=np.float64)
        rgb = np.broadcast_to(self.base_rgb, xy.shape[:-1] + (3,)).copy()
        if self.pattern != "none":
            second = np.array(colorsys.hsv_to_rgb(*self.secondary_color_hsv))
            ca, sa = math.cos(self.pattern_angle), math.sin(self.pattern_angle)
            x = (xy[..., 0] * ca + xy[..., 1] * sa) / self.pattern_scale
            y = (-xy[..., 0] * sa + xy[..., 1] * ca) / self.pattern_scale
            if self.pattern == "stripes":
                mask = np.floor(x).astype(np.int64) % 2 == 1
            else:
                mask = (np.floor(x).astype(np.int64) + np.floor(y).astype(np.int64)) % 2 == 1
            rgb[mask] = second
        rgb *= (1.0 + perlin_noise(xy, self.noise))[..., None]
        return np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class Distractor:
    """Primitive resting on the table. ``size`` = (sx, sy, sz) half-extent style:

    box: full edge lengths; sphere: radius = sx; cylinder: radius = sx, height = sz.
    """

    kind: str
    center: Vec2
    yaw: float
    size: Vec3
    material: ProceduralMaterial


@dataclass(frozen=True)
class LightingSpec:
    ambient: float
    light_direction: Vec3  # unit vector from the surface towards the light
    light_intensity: float
    env_tint: Vec3  # RGB

    @property
    def env_rgb(self) -> np.ndarray:
        return np.asarray(self.env_tint, dtype=np.float64)


@dataclass(frozen=True)
class SceneSpec:
    towel: TowelGeometry
    towel_material: ProceduralMaterial
    ground_material: ProceduralMaterial
    distractors: tuple[Distractor, ...]
    lighting: LightingSpec
    camera: CameraModel
    image_size: int
    seed: int

    def __post_init__(self):
        if len(self.distractors) > MAX_DISTRACTORS:
            raise ConfigError("distractors", f"at most {MAX_DISTRACTORS} distractors allowed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        return d


# ----------------------------------------------------------------- sampling


def _u(rng, r: Range) -> float:
    return float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])


def sample_camera_pose(cap: SphericalCapParams, rng: np.random.Generator, resolution: int = 128,
                       center=(0.0, 0.0, 0.0)) -> CameraModel:
    """Camera inside a spherical cap above ``center``, looking at it.

    Distance is uniform in [r_min, r_max]; the direction is uniform over the
    cap's solid angle; roll is uniform in ``cap.roll_deg``; the principal point
    is the image centre and ``f = focal_factor * resolution``.
    """
    cap.validate()
    r = _u(rng, (cap.r_min, cap.r_max))
    cos_max = math.cos(math.radians(cap.polar_max_deg))
    cos_t = _u(rng, (cos_max, 1.0))
    polar = math.acos(min(1.0, cos_t))
    azimuth = _u(rng, (0.0, 2 * math.pi))
    roll = math.radians(_u(rng, cap.roll_deg))
    focal = _u(rng, cap.focal_factor) * resolution
    center = np.asarray(center, dtype=np.float64)
    pos = center + r * np.array([
        math.sin(polar) * math.cos(azimuth),
        math.sin(polar) * math.sin(azimuth),
        math.cos(polar),
    ])
    rot, trans = look_at(pos, center, roll=roll)
    c = (resolution - 1) / 2.0
    return CameraModel(focal, focal, c, c, rot, trans)


def top_down_camera(resolution: int = 128, height: float = 1.0, focal_factor: float = 1.0) -> CameraModel:
    """Fixed camera ``height`` metres above the origin, image +u along world +x."""
    rot, trans = look_at((0.0, 0.0, height))
    c = (resolution - 1) / 2.0
    return CameraModel(focal_factor * resolution, focal_factor * resolution, c, c, rot, trans)


def _hsv(rng, sat: Range, val: Range) -> Vec3:
    return (float(rng.uniform(0.0, 1.0)), _u(rng, sat), _u(rng, val))


def _material(rng, config: GenConfig, *, ground: bool) -> ProceduralMaterial:
    if ground:
        hsv = _hsv(rng, config.ground_saturation, config.ground_value)
        noise = PerlinParams(
            octaves=int(rng.integers(1, 5)),
            frequency=_u(rng, config.ground_noise_frequency),
            amplitude=_u(rng, config.ground_noise_amplitude),
            seed=int(rng.integers(0, 2 ** 32)),
        )
        pattern = PATTERNS[int(rng.integers(0, len(PATTERNS)))]
        scale = _u(rng, config.ground_pattern_scale)
        angle = _u(rng, (0.0, math.pi))
        second = _hsv(rng, config.ground_saturation, config.ground_value)
        return ProceduralMaterial(hsv, noise, pattern, scale, angle, second)
    hsv = _hsv(rng, config.towel_saturation, config.towel_value)
    noise = PerlinParams(
        octaves=int(rng.integers(config.towel_noise_octaves[0], config.towel_noise_octaves[1] + 1)),
        frequency=_u(rng, config.towel_noise_frequency),
        amplitude=_u(rng, config.towel_noise_amplitude),
        seed=int(rng.integers(0, 2 ** 32)),
    )
    return ProceduralMaterial(hsv, noise)


def sample_scene(seed: int, config: GenConfig | None = None) -> SceneSpec:
    """Draws one randomised scene; identical (seed, config) give identical scenes."""
    config = config or GenConfig()
    config.validate()
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)

    # towel
    width = _u(rng, config.towel_width)
    height = _u(rng, config.towel_height)
    half = config.workspace_half_extent
    center = (_u(rng, (-half, half)), _u(rng, (-half, half)))
    yaw = math.radians(_u(rng, config.towel_yaw_deg))
    jitter = tuple(
        (float(a), float(b))
        for a, b in rng.uniform(-config.corner_jitter, config.corner_jitter, (4, 2))
    ) if config.corner_jitter > 0 else ((0.0, 0.0),) * 4
    amp = _u(rng, config.wrinkle_amplitude)
    wrinkle = WrinkleParams(
        amplitude=amp,
        frequency=_u(rng, config.wrinkle_frequency),
        direction=_u(rng, (0.0, math.pi)),
        phase=_u(rng, (0.0, 2 * math.pi)),
        seed=int(rng.integers(0, 2 ** 32)),
    )
    towel = TowelGeometry(width, height, center, yaw, jitter, wrinkle if amp > 0 else None)

    towel_material = _material(rng, config, ground=False)
    ground_material = _material(rng, config, ground=True)

    n_distractors = int(rng.integers(config.distractor_min, config.distractor_max + 1))
    distractors = []
    area = config.distractor_area_half_extent
    for _ in range(n_distractors):
        kind = DISTRACTOR_KINDS[int(rng.integers(0, len(DISTRACTOR_KINDS)))]
        size = tuple(_u(rng, config.distractor_size) for _ in range(3))
        distractors.append(Distractor(
            kind=kind,
            center=(_u(rng, (-area, area)), _u(rng, (-area, area))),
            yaw=_u(rng, (0.0, 2 * math.pi)),
            size=size,
            material=_material(rng, config, ground=False),
        ))

    elevation = math.radians(_u(rng, config.light_elevation_deg))
    azimuth = _u(rng, (0.0, 2 * math.pi))
    light_dir = (
        math.cos(elevation) * math.cos(azimuth),
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
    )
    tint_hsv = _hsv(rng, config.env_tint_saturation, config.env_tint_value)
    lighting = LightingSpec(
        ambient=_u(rng, config.ambient),
        light_direction=light_dir,
        light_intensity=_u(rng, config.light_intensity),
        env_tint=tuple(float(x) for x in colorsys.hsv_to_rgb(*tint_hsv)),
    )

    camera = sample_camera_pose(config.camera, rng, config.resolution)
    return SceneSpec(
        towel=towel,
        towel_material=towel_material,
        ground_material=ground_material,
        distractors=tuple(distractors),
        lighting=lighting,
        camera=camera,
        image_size=config.resolution,
        seed=int(seed),
    )
