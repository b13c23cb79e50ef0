"""Procedural towel scenes, software rendering and dataset generation."""

from .noise import PerlinParams, perlin_noise
from .raster import KeypointAnnotation, annotate_corners, render_buffers, render_sample, render_scene
from .scene import (
    Distractor,
    GenConfig,
    LightingSpec,
    ProceduralMaterial,
    SceneSpec,
    SphericalCapParams,
    TowelGeometry,
    sample_camera_pose,
    sample_scene,
    top_down_camera,
)

__all__ = [
    "Distractor",
    "GenConfig",
    "KeypointAnnotation",
    "LightingSpec",
    "PerlinParams",
    "ProceduralMaterial",
    "SceneSpec",
    "SphericalCapParams",
    "TowelGeometry",
    "annotate_corners",
    "perlin_noise",
    "render_buffers",
    "render_sample",
    "render_scene",
    "sample_camera_pose",
    "sample_scene",
    "top_down_camera",
]
