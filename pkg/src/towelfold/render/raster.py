"""Z-buffered triangle rasterizer with Lambertian shading and corner annotation.

The table plane is intersected analytically per pixel; the towel and the
distractors are triangle meshes. Pixel (u, v) samples the ray through its
centre at integer coordinates. Object ids in the id buffer: -1 background,
0 ground, 1 towel, 2 + k for distractor k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import RenderError
from ..geometry import CameraModel, pixel_rays
from .scene import Distractor, SceneSpec

GROUND, TOWEL, DISTRACTOR0 = 0, 1, 2
TOWEL_GRID = 8  # must be even, see _towel_mesh
NEAR = 1e-3
GROUND_DEPTH_BIAS = 1e-5  # lets a towel lying at z = 0 win ties with the table


@dataclass(frozen=True)
class KeypointAnnotation:
    image_id: str
    corners_px: tuple  # 4 x (u, v)
    visible: tuple  # 4 x bool
    towel_size_m: tuple = (0.0, 0.0)

    def to_dict(self, file: str | None = None) -> dict:
        d = {
            "image_id": self.image_id,
            "corners_px": [list(c) for c in self.corners_px],
            "visible": list(self.visible),
            "towel_size_m": list(self.towel_size_m),
        }
        if file is not None:
            d["file"] = file
        return d


@dataclass
class RenderBuffers:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    object_id: np.ndarray  # (H, W) int
    depth: np.ndarray  # (H, W) camera-frame depth, inf where empty


def camera_for_resolution(scene: SceneSpec, resolution: int) -> CameraModel:
    """Scene camera with intrinsics rescaled from ``scene.image_size`` to ``resolution``."""
    if resolution == scene.image_size:
        return scene.camera
    s = resolution / scene.image_size
    cam = scene.camera
    return replace(cam, fx=cam.fx * s, fy=cam.fy * s,
                   cx=(cam.cx + 0.5) * s - 0.5, cy=(cam.cy + 0.5) * s - 0.5)


# ------------------------------------------------------------------ meshes


def _towel_mesh(scene: SceneSpec, n: int = TOWEL_GRID):
    """Grid mesh whose cell diagonals alternate so each corner sits in one triangle.

    Returns (vertices, triangles, boundary_edge_flags).
    """
    xyz, _ = scene.towel.grid(n)
    verts = xyz.reshape(-1, 3)

    def idx(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, d), (b, c, d)]
            else:
                tris += [(a, b, c), (a, c, d)]
    tris = np.array(tris)
    gi, gj = tris // (n + 1), tris % (n + 1)
    flags = np.zeros(tris.shape, dtype=bool)
    for e in range(3):
        f = (e + 1) % 3
        for g in (gi, gj):
            flags[:, e] |= (g[:, e] == g[:, f]) & ((g[:, e] == 0) | (g[:, e] == n))
    return verts, tris, flags


def _distractor_mesh(d: Distractor, segments: int = 12):
    sx, sy, sz = d.size
    if d.kind == "box":
        hx, hy = sx / 2, sy / 2
        local = np.array([[x, y, z] for z in (0.0, sz) for y in (-hy, hy) for x in (-hx, hx)])
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = [t for q in quads for t in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    elif d.kind == "sphere":
        r = sx / 2
        stacks = segments // 2
        local = [[0.0, 0.0, 0.0]]
        for k in range(1, stacks):
            th = math.pi * k / stacks
            for s in range(segments):
                ph = 2 * math.pi * s / segments
                local.append([r * math.sin(th) * math.cos(ph), r * math.sin(th) * math.sin(ph), r - r * math.cos(th)])
        local.append([0.0, 0.0, 2 * r])
        local = np.array(local)
        top = len(local) - 1
        tris = []
        ring = lambda k, s: 1 + (k - 1) * segments + s % segments  # noqa: E731
        for s in range(segments):
            tris.append((0, ring(1, s + 1), ring(1, s)))
            tris.append((top, ring(stacks - 1, s), ring(stacks - 1, s + 1)))
            for k in range(1, stacks - 1):
                tris.append((ring(k, s), ring(k, s + 1), ring(k + 1, s + 1)))
                tris.append((ring(k, s), ring(k + 1, s + 1), ring(k + 1, s)))
    elif d.kind == "cylinder":
        r = sx / 2
        ang = 2 * math.pi * np.arange(segments) / segments
        ringxy = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        local = np.vstack([
            np.column_stack([ringxy, np.zeros(segments)]),
            np.column_stack([ringxy, np.full(segments, sz)]),
            [[0.0, 0.0, 0.0], [0.0, 0.0, sz]],
        ])
        bc, tc = 2 * segments, 2 * segments + 1
        tris = []
        for s in range(segments):
            t = (s + 1) % segments
            tris += [(s, t, segments + t), (s, segments + t, segments + s), (bc, t, s), (tc, segments + s, segments + t)]
    else:
        raise RenderError(f"unknown distractor kind {d.kind!r}")
    c, s_ = math.cos(d.yaw), math.sin(d.yaw)
    rot = np.array([[c, -s_, 0], [s_, c, 0], [0, 0, 1.0]])
    verts = local @ rot.T + [d.center[0], d.center[1], 0.0]
    return verts, np.array(tris)


# ---------------------------------------------------------------- raster


def _rasterize(cam_pts, tris, flags, tri_ids, tri_normals, depth, ids, normals, cam: CameraModel):
    """Draws triangles into ``depth``/``ids``/``normals`` in place.

    ``cam_pts`` are camera-frame vertices. Edges flagged in ``flags`` are
    rasterized conservatively: any pixel whose square touches the edge's
    inner half-plane passes that edge test.
    """
    h, w = depth.shape
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([cam.fx * cam_pts[:, 0] / z + cam.cx, cam.fy * cam_pts[:, 1] / z + cam.cy])
    for t in range(len(tris)):
        tri = tris[t]
        tz = z[tri]
        if np.any(tz < NEAR):
            continue
        p = uv[tri]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if abs(area) < 1e-12:
            continue
        sign = 1.0 if area > 0 else -1.0
        fl = flags[t] if flags is not None else (False, False, False)
        margin = 1.0 if fl[0] or fl[1] or fl[2] else 0.0
        u0 = max(0, math.floor(p[:, 0].min() - margin))
        u1 = min(w - 1, math.ceil(p[:, 0].max() + margin))
        v0 = max(0, math.floor(p[:, 1].min() - margin))
        v1 = min(h - 1, math.ceil(p[:, 1].max() + margin))
        if u0 > u1 or v0 > v1:
            continue
        us = np.arange(u0, u1 + 1, dtype=np.float64)[None, :]
        vs = np.arange(v0, v1 + 1, dtype=np.float64)[:, None]
        inside = None
        bary = []
        for e in range(3):
            a, b = p[e], p[(e + 1) % 3]
            du, dv = b[0] - a[0], b[1] - a[1]
            ev = sign * (du * (vs - a[1]) - dv * (us - a[0]))
            bary.append(ev)
            test = ev + 0.5 * (abs(du) + abs(dv)) if fl[e] else ev
            ok = test >= 0
            inside = ok if inside is None else inside & ok
        if not inside.any():
            continue
        # edge e is opposite vertex (e + 2) % 3
        inv_area = 1.0 / abs(area)
        inv_z = (bary[1] / tz[0] + bary[2] / tz[1] + bary[0] / tz[2]) * inv_area
        with np.errstate(divide="ignore"):
            d = np.where(inv_z > 0, 1.0 / np.where(inv_z > 0, inv_z, 1.0), np.inf)
        sl = (slice(v0, v1 + 1), slice(u0, u1 + 1))
        win = inside & (d < depth[sl])
        if not win.any():
            continue
        depth[sl][win] = d[win]
        ids[sl][win] = tri_ids[t]
        normals[sl][win] = tri_normals[t]


def _face_normals(verts, tris):
    n = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def render_buffers(scene: SceneSpec, resolution: int | None = None, shade: bool = True) -> RenderBuffers:
    """Rasterizes ``scene``; ``shade=False`` skips colour computation."""
    res = int(resolution or scene.image_size)
    if res < 32:
        raise RenderError(f"resolution must be >= 32, got {res}")
    cam = camera_for_resolution(scene, res)
    centre = np.append(np.asarray(scene.towel.center, dtype=np.float64), 0.0)
    if cam.to_camera(centre)[2] <= 0:
        raise RenderError("scene centre lies behind the camera")

    vv, uu = np.mgrid[0:res, 0:res].astype(np.float64)
    rays = pixel_rays(cam, np.stack([uu, vv], axis=-1))  # (H, W, 3), unit camera depth
    c = cam.position

    depth = np.full((res, res), np.inf)
    ids = np.full((res, res), -1, dtype=np.int64)
    normals = np.zeros((res, res, 3))

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -c[2] / rays[..., 2]
    hit = np.isfinite(t_ground) & (t_ground > 0)
    depth[hit] = t_ground[hit] * (1.0 + GROUND_DEPTH_BIAS)
    ids[hit] = GROUND
    normals[hit] = (0.0, 0.0, 1.0)

    verts, tris, flags = _towel_mesh(scene)
    _rasterize(cam.to_camera(verts), tris, flags, np.full(len(tris), TOWEL),
               _face_normals(verts, tris), depth, ids, normals, cam)
    for k, dis in enumerate(scene.distractors):
        dv, dt = _distractor_mesh(dis)
        _rasterize(cam.to_camera(dv), dt, None, np.full(len(dt), DISTRACTOR0 + k),
                   _face_normals(dv, dt), depth, ids, normals, cam)

    image = np.zeros((res, res, 3))
    if shade:
        image = _shade(scene, ids, depth, normals, rays, c)
    return RenderBuffers(image=image, object_id=ids, depth=depth)


def _shade(scene: SceneSpec, ids, depth, normals, rays, cam_pos) -> np.ndarray:
    light = scene.lighting
    tint = light.env_rgb
    res = ids.shape[0]
    image = np.empty((res, res, 3))
    image[:] = np.clip(tint, 0.0, 1.0)
    filled = ids >= 0
    if not filled.any():
        return image
    pts = cam_pos + depth[filled][:, None] * rays[filled]
    nrm = normals[filled]
    # face the camera
    flip = np.einsum("ij,ij->i", nrm, cam_pos - pts) < 0
    nrm[flip] *= -1
    l_dir = np.asarray(light.light_direction, dtype=np.float64)
    l_dir = l_dir / np.linalg.norm(l_dir)
    lambert = np.maximum(0.0, nrm @ l_dir)
    obj = ids[filled]
    albedo = np.zeros((len(obj), 3))
    m = obj == GROUND
    if m.any():
        albedo[m] = scene.ground_material.albedo(pts[m, :2])
    m = obj == TOWEL
    if m.any():
        albedo[m] = scene.towel_material.albedo(scene.towel.world_to_local_xy(pts[m]))
    for k, dis in enumerate(scene.distractors):
        m = obj == DISTRACTOR0 + k
        if m.any():
            albedo[m] = dis.material.albedo(pts[m, :2] + pts[m, 2:3])
    intensity = light.ambient + light.light_intensity * lambert
    rgb = albedo * (intensity[:, None] + tint)
    image[filled] = np.clip(rgb, 0.0, 1.0)
    return image


def render_scene(scene: SceneSpec, resolution: int | None = None) -> np.ndarray:
    """RGB image (H, W, 3) in [0, 1] for ``scene`` at ``resolution`` (default: the scene's)."""
    return render_buffers(scene, resolution).image


def annotate_corners(scene: SceneSpec, resolution: int | None = None, image_id: str = "",
                     buffers: RenderBuffers | None = None) -> KeypointAnnotation:
    """Projects the towel corners and flags each one's visibility.

    A corner is visible when it projects inside [0, W-1] x [0, H-1] and the
    z-buffer winner at its nearest pixel is not a distractor.
    """
    res = int(resolution or scene.image_size)
    cam = camera_for_resolution(scene, res)
    corners = scene.towel.corners_3d
    pc = cam.to_camera(corners)
    if buffers is None:
        buffers = render_buffers(scene, res, shade=False)
    px, vis = [], []
    for (x, y, z) in pc:
        if z <= 0:
            px.append((float("nan"), float("nan")))
            vis.append(False)
            continue
        u, v = cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy
        px.append((float(u), float(v)))
        ok = 0 <= u <= res - 1 and 0 <= v <= res - 1
        if ok:
            ok = buffers.object_id[int(round(v)), int(round(u))] < DISTRACTOR0
        vis.append(bool(ok))
    return KeypointAnnotation(image_id, tuple(px), tuple(vis),
                              (float(scene.towel.width), float(scene.towel.height)))


def render_sample(scene: SceneSpec, resolution: int | None = None, image_id: str = ""):
    """Image and annotation from a single rasterization pass."""
    buf = render_buffers(scene, resolution)
    return buf.image, annotate_corners(scene, resolution, image_id, buffers=buf)
