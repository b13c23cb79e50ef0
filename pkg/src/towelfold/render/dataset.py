"""Deterministic, optionally parallel, synthetic dataset generation.

Layout of a dataset directory::

    images/000000.ppm ...      # or .png
    annotations.json           # list of per-image records
    manifest.json              # n, seed, resolution, config, format, content_hash

Sample ``i`` is rendered from the scene seeded by ``SeedSequence([seed, i])``,
so the bytes on disk do not depend on the worker count or on scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import DatasetError
from .raster import render_sample
from .scene import GenConfig, sample_scene

log = logging.getLogger(__name__)

FORMATS = ("ppm", "png")


@dataclass(frozen=True)
class DatasetManifest:
    n: int
    seed: int
    resolution: int
    config: dict
    format: str
    content_hash: str

    def to_dict(self) -> dict:
        return asdict(self)


def sample_seed(seed: int, index: int) -> int:
    """64-bit scene seed for sample ``index`` of a dataset seeded with ``seed``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# ------------------------------------------------------------------- image IO


def write_image(path, image: np.ndarray, fmt: str | None = None) -> None:
    """Writes an (H, W, 3) float [0, 1] or uint8 image as PPM (P6) or PNG."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    data = image if image.dtype == np.uint8 else to_uint8(image)
    if fmt == "ppm":
        h, w = data.shape[:2]
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(data).tobytes())
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(data, "RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # a single whitespace byte precedes the raster


def read_image(path) -> np.ndarray:
    """Reads a PPM (P6, maxval 255) or PNG file into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
        buf = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"image not found: {path}") from e
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as e:
        raise DatasetError(f"malformed PPM header in {path}") from e
    if magic != b"P6" or maxval != 255:
        raise DatasetError(f"{path}: only binary P6 with maxval 255 is supported")
    raster = buf[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


# ------------------------------------------------------------------ generation


def _render_one(args) -> dict:
    index, seed, config_dict, out_dir, fmt = args
    config = GenConfig.from_dict(config_dict)
    image_id = f"{index:06d}"
    scene = sample_scene(sample_seed(seed, index), config)
    image, ann = render_sample(scene, config.resolution, image_id)
    rel = f"images/{image_id}.{fmt}"
    write_image(Path(out_dir) / rel, image, fmt)
    return ann.to_dict(file=rel)


def _render_chunk(batch) -> list[dict]:
    return [_render_one(a) for a in batch]


def content_hash(out_dir, records: list[dict]) -> str:
    """SHA-256 over every image file (in record order) and the annotation JSON."""
    digest = hashlib.sha256()
    for rec in records:
        digest.update(rec["file"].encode())
        digest.update((Path(out_dir) / rec["file"]).read_bytes())
    digest.update(_annotations_bytes(records))
    return digest.hexdigest()


def _annotations_bytes(records: list[dict]) -> bytes:
    return json.dumps(records, indent=1).encode() + b"\n"


def generate_dataset(n: int, seed: int, out_dir, config: GenConfig | None = None,
                     workers: int = 1, fmt: str = "ppm") -> DatasetManifest:
    """Renders ``n`` samples into ``out_dir`` and writes annotations and manifest.

    Raises:
        DatasetError: if the output cannot be written. Files written so far
            are left in place and a warning is logged.
    """
    config = config or GenConfig()
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    out_dir = Path(out_dir)
    cfg = config.to_dict()
    jobs = [(i, int(seed), cfg, str(out_dir), fmt) for i in range(n)]
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        if workers <= 1 or n < 2:
            records = [_render_one(j) for j in jobs]
        else:
            workers = min(workers, n)
            size = -(-n // workers)
            chunks = [jobs[i:i + size] for i in range(0, n, size)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = [r for chunk in pool.map(_render_chunk, chunks) for r in chunk]
        (out_dir / "annotations.json").write_bytes(_annotations_bytes(records))
        manifest = DatasetManifest(
            n=n, seed=int(seed), resolution=config.resolution, config=cfg, format=fmt,
            content_hash=content_hash(out_dir, records),
        )
        (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        log.warning("dataset generation aborted; partial output left in %s", out_dir)
        raise DatasetError(f"writing dataset to {out_dir} failed: {e}") from e
    log.info("wrote %d samples to %s (hash %s)", n, out_dir, manifest.content_hash[:12])
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"no manifest.json in {data_dir}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"unreadable manifest {path}: {e}") from e


def load_annotations(data_dir) -> list[dict]:
    path = Path(data_dir) / "annotations.json"
    try:
        records = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"no annotations.json in {data_dir}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"unreadable annotations {path}: {e}") from e
    for rec in records:
        missing = {"image_id", "file", "corners_px", "visible"} - set(rec)
        if missing:
            raise DatasetError(f"annotation record lacks {sorted(missing)}")
    return records


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
