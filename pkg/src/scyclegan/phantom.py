"""Procedural phantom scenes rendered in two styles.

A scene is a handful of rotated elliptical "organ" blobs over a flat
background. The same scene rasterizes to a class mask plus two images:

* CT style: piecewise-constant intensities with a little smooth noise and
  sharp boundaries.
* US style: fan-sector footprint, multiplicative speckle, exponential depth
  attenuation, and bright blob boundaries (the low-contrast/shadow/speckle
  look of real probes, at toy scale).

Everything is a pure function of its arguments, so datasets rebuild
byte-identically.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import data
from .errors import DataError, IOFailure, UsageError

# Per-class base intensities. Classes must be tellable apart from texture
# alone, so each organ class gets its own band (plus a small per-blob jitter).
CT_CLASS_INTENSITY = {1: 0.25, 2: 0.40, 3: 0.65, 4: 0.80}
CT_BACKGROUND = 0.52
# US bases stay <= 0.5 so speckle (bounded by 1.4^2) never clips at 1.0.
US_CLASS_INTENSITY = {1: 0.48, 2: 0.36, 3: 0.26, 4: 0.16}
US_BACKGROUND = 0.08
INTENSITY_JITTER = 0.02
CT_NOISE_AMPLITUDE = 0.05

MIN_SEMI_AXIS = 2.0


@dataclass(frozen=True)
class OrganBlob:
    class_id: int
    center: tuple[float, float]  # (row, col)
    semi_axes: tuple[float, float]
    rotation: float
    base_intensity_ct: float
    base_intensity_us: float

    def __post_init__(self):
        if self.class_id not in (1, 2, 3, 4):
            raise UsageError(f"blob class_id must be 1..4, got {self.class_id}")
        if min(self.semi_axes) < MIN_SEMI_AXIS:
            raise UsageError(f"semi-axes must be >= {MIN_SEMI_AXIS} px, got {self.semi_axes}")
        for v in (self.base_intensity_ct, self.base_intensity_us):
            if not (0.0 <= v <= 1.0):
                raise UsageError(f"base intensity {v} outside [0, 1]")


@dataclass(frozen=True)
class SpeckleParams:
    grain_scale: int = 2
    attenuation_per_px: float = 0.004
    edge_gain: float = 0.15
    noise_seed: int = 0

    def __post_init__(self):
        if self.grain_scale < 1:
            raise UsageError(f"grain_scale must be >= 1, got {self.grain_scale}")
        if self.attenuation_per_px < 0 or self.edge_gain < 0:
            raise UsageError("attenuation_per_px and edge_gain must be >= 0")


@dataclass(frozen=True)
class PhantomScene:
    seed: int
    canvas: tuple[int, int]
    blobs: tuple[OrganBlob, ...]
    fan: data.FanGeometry

    def __post_init__(self):
        if not self.blobs:
            raise UsageError("scene must contain at least one blob")
        h, w = self.canvas
        for b in self.blobs:
            if not (0 <= b.center[0] < h and 0 <= b.center[1] < w):
                raise UsageError(f"blob center {b.center} outside canvas {self.canvas}")


def _seed_entropy(seed: int) -> int:
    return seed & 0xFFFFFFFFFFFFFFFF


derive_seed = data.derive_seed


def _check_canvas(canvas) -> tuple[int, int]:
    try:
        h, w = int(canvas[0]), int(canvas[1])
    except (TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"canvas must be an (h, w) pair, got {canvas!r}") from exc
    if h < 32 or w < 32 or h % 8 or w % 8:
        raise UsageError(f"canvas sides must be >= 32 and divisible by 8, got {h}x{w}")
    return h, w


def generate_scene(seed: int, canvas: tuple[int, int], n_blobs_range: tuple[int, int] = (2, 5)) -> PhantomScene:
    """Draw a deterministic scene: blob count, classes, geometry, intensities.

    Blobs are sorted by (class, center) so the scene is reproducible
    field-for-field regardless of draw order.
    """
    h, w = _check_canvas(canvas)
    lo, hi = int(n_blobs_range[0]), int(n_blobs_range[1])
    if not (1 <= lo <= hi <= 8):
        raise UsageError(f"n_blobs_range must satisfy 1 <= min <= max <= 8, got {n_blobs_range}")
    rng = np.random.default_rng(np.random.SeedSequence([_seed_entropy(seed)]))
    n = int(rng.integers(lo, hi + 1))
    blobs = []
    max_axis = min(h, w) / 3.0
    for _ in range(n):
        class_id = int(rng.integers(1, 5))
        center = (float(rng.uniform(0, h)), float(rng.uniform(0, w)))
        axes = (float(rng.uniform(4.0, max_axis)), float(rng.uniform(4.0, max_axis)))
        rotation = float(rng.uniform(0, math.pi))
        jitter_ct, jitter_us = rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER, 2)
        blobs.append(
            OrganBlob(
                class_id=class_id,
                center=center,
                semi_axes=axes,
                rotation=rotation,
                base_intensity_ct=float(np.clip(CT_CLASS_INTENSITY[class_id] + jitter_ct, 0.01, 0.99)),
                base_intensity_us=float(np.clip(US_CLASS_INTENSITY[class_id] + jitter_us, 0.01, 0.50)),
            )
        )
    blobs.sort(key=lambda b: (b.class_id, b.center))
    return PhantomScene(seed=seed, canvas=(h, w), blobs=tuple(blobs), fan=data.default_fan(h, w))


def _blob_coverage(blob: OrganBlob, h: int, w: int) -> np.ndarray:
    rows, cols = np.indices((h, w), dtype=np.float64)
    dr = rows - blob.center[0]
    dc = cols - blob.center[1]
    c, s = math.cos(blob.rotation), math.sin(blob.rotation)
    u = dr * c + dc * s
    v = -dr * s + dc * c
    a, b = blob.semi_axes
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def rasterize_mask(scene: PhantomScene) -> np.ndarray:
    """Class of the front-most covering blob per pixel; list order wins ties."""
    h, w = scene.canvas
    mask = np.zeros((h, w), dtype=np.uint8)
    for blob in scene.blobs:
        mask[_blob_coverage(blob, h, w)] = blob.class_id
    return mask


def _paint_base(scene: PhantomScene, background: float, attr: str) -> np.ndarray:
    h, w = scene.canvas
    base = np.full((h, w), background, dtype=np.float64)
    for blob in scene.blobs:
        base[_blob_coverage(blob, h, w)] = getattr(blob, attr)
    return base


def _to_byte_image(field: np.ndarray) -> np.ndarray:
    u8 = np.rint(np.clip(field, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.repeat(u8[..., None], 3, axis=2)


def render_ct_style(scene: PhantomScene) -> np.ndarray:
    """Piecewise-constant organs over mid-gray, plus low-frequency noise.

    No fan cropping here; that is a separate preprocessing step
    (:func:`scyclegan.data.apply_fan_mask`).
    """
    h, w = scene.canvas
    base = _paint_base(scene, CT_BACKGROUND, "base_intensity_ct")
    rng = np.random.default_rng(np.random.SeedSequence([_seed_entropy(scene.seed), 1]))
    coarse = rng.uniform(-CT_NOISE_AMPLITUDE, CT_NOISE_AMPLITUDE, (h // 8, w // 8))
    noise = ndimage.zoom(coarse, 8, order=1)  # bilinear, stays within +-amplitude
    return _to_byte_image(base + noise)


def _boundary_band(mask: np.ndarray) -> np.ndarray:
    """Pixels adjacent to a class change (1-2 px wide band along boundaries)."""
    band = np.zeros(mask.shape, dtype=bool)
    band[:-1, :] |= mask[:-1, :] != mask[1:, :]
    band[1:, :] |= mask[1:, :] != mask[:-1, :]
    band[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    band[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    return band


def render_us_style(scene: PhantomScene, params: SpeckleParams) -> np.ndarray:
    """Fan-shaped render with speckle, depth attenuation, and edge highlights.

    Outside the fan sector the output is exactly 0. Speckle is the product of
    two unit-mean fields box-smoothed at ``grain_scale`` (scale 1 = raw
    grain), so organ means stay close to their base intensities.
    """
    h, w = scene.canvas
    base = _paint_base(scene, US_BACKGROUND, "base_intensity_us")
    rng = np.random.default_rng(np.random.SeedSequence([_seed_entropy(params.noise_seed)]))
    speckle = np.ones((h, w), dtype=np.float64)
    for _ in range(2):
        grain = rng.uniform(0.6, 1.4, (h, w))
        if params.grain_scale > 1:
            grain = ndimage.uniform_filter(grain, size=params.grain_scale, mode="reflect")
        speckle *= grain
    rows, cols = np.indices((h, w), dtype=np.float64)
    depth = np.hypot(rows - scene.fan.apex[0], cols - scene.fan.apex[1])
    attenuation = np.exp(-params.attenuation_per_px * depth)
    band = _boundary_band(rasterize_mask(scene))
    field = (base * speckle + params.edge_gain * band) * attenuation
    field[~data.fan_keep_mask(scene.fan, h, w)] = 0.0
    return _to_byte_image(field)


def build_phantom_dataset(
    seed: int,
    n_ct: int,
    n_us: int,
    canvas: tuple[int, int],
    out_dir: str,
    paired: bool = False,
    blob_range: tuple[int, int] = (2, 5),
) -> data.DatasetManifest:
    """Write an unpaired two-domain dataset in the standard layout.

    CT and US scenes come from independent seed streams; ``paired=True``
    reuses the CT scenes for US so ground-truth cross-domain checks line up.
    CT images get the fan footprint applied (as the preprocessing convention
    for probe-shaped inputs); masks are cropped to the same footprint so
    image and label stay aligned.
    """
    h, w = _check_canvas(canvas)
    if n_ct < 1 or n_us < 1:
        raise UsageError(f"need at least one sample per domain, got {n_ct}, {n_us}")
    try:
        for domain in data.DOMAINS:
            os.makedirs(os.path.join(out_dir, domain, "images"), exist_ok=True)
            os.makedirs(os.path.join(out_dir, domain, "masks"), exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create dataset directory {out_dir}: {exc}") from exc

    keep_cache: dict[tuple, np.ndarray] = {}

    def write_pair(domain: str, idx: int, image: np.ndarray, mask: np.ndarray, fan: data.FanGeometry):
        key = (fan.apex, fan.half_aperture, fan.r_min, fan.r_max)
        if key not in keep_cache:
            keep_cache[key] = data.fan_keep_mask(fan, h, w)
        cropped = mask.copy()
        cropped[~keep_cache[key]] = 0
        sample_id = f"{idx:04d}"
        data.save_image(image, os.path.join(out_dir, domain, "images", sample_id + ".png"))
        data.save_image(
            data.encode_mask(cropped), os.path.join(out_dir, domain, "masks", sample_id + ".png")
        )

    for i in range(n_ct):
        scene = generate_scene(derive_seed(seed, 0, i), (h, w), blob_range)
        image = data.apply_fan_mask(render_ct_style(scene), scene.fan)
        write_pair(data.CT, i, image, rasterize_mask(scene), scene.fan)

    for i in range(n_us):
        stream = 0 if paired else 1
        scene = generate_scene(derive_seed(seed, stream, i), (h, w), blob_range)
        params = SpeckleParams(noise_seed=derive_seed(seed, 2, i))
        image = render_us_style(scene, params)
        write_pair(data.US, i, image, rasterize_mask(scene), scene.fan)

    manifest = data.DatasetManifest(
        classes=data.NUM_CLASSES,
        palette=dict(data.DEFAULT_PALETTE),
        counts={data.CT: n_ct, data.US: n_us},
        canvas=(h, w),
        seed=seed,
    )
    data.write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
