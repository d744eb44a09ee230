"""On-disk dataset format, palette-coded masks, fan-shape preprocessing,
normalization, and deterministic unpaired batch sampling.

Dataset directory layout (bit-exact contract)::

    <root>/manifest.json        # version, classes, palette (hex), counts, canvas, seed
    <root>/ct/images/<id>.png   # 8-bit, 3-channel
    <root>/ct/masks/<id>.png    # palette-colored, same id set
    <root>/us/images/<id>.png
    <root>/us/masks/<id>.png

Images are plain 8-bit RGB PNGs; ids are zero-padded decimal strings.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError, IOFailure, ShapeError, UsageError

MANIFEST_VERSION = 1
NUM_CLASSES = 5  # background + the four annotated organs
CLASS_NAMES = ("background", "liver", "kidney", "spleen", "pancreas")

# Class index -> RGB. Organ colors follow the usual named-color conventions
# (violet, yellow, pink, blue); background is black by definition.
DEFAULT_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (0, 0, 0),
    1: (238, 130, 238),
    2: (255, 255, 0),
    3: (255, 192, 203),
    4: (0, 0, 255),
}

CT, US = "ct", "us"
DOMAINS = (CT, US)


def validate_palette(palette: dict[int, tuple[int, int, int]]) -> None:
    """Check the class<->color map is bijective and maps class 0 to black."""
    if palette.get(0) != (0, 0, 0):
        raise DataError("palette must map class 0 to (0, 0, 0)")
    colors = list(palette.values())
    if len(set(colors)) != len(colors):
        raise DataError("palette colors must be distinct (map must be invertible)")
    for cls, rgb in palette.items():
        if cls < 0:
            raise DataError(f"negative class index {cls} in palette")
        if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
            raise DataError(f"palette entry {cls} -> {rgb} is not an RGB byte triple")


def palette_to_hex(palette: dict[int, tuple[int, int, int]]) -> dict[str, str]:
    return {str(c): "#%02x%02x%02x" % rgb for c, rgb in sorted(palette.items())}


def palette_from_hex(hexmap: dict[str, str]) -> dict[int, tuple[int, int, int]]:
    out = {}
    for cls, hx in hexmap.items():
        hx = hx.lstrip("#")
        if len(hx) != 6:
            raise DataError(f"bad palette hex string {hx!r} for class {cls}")
        out[int(cls)] = tuple(int(hx[i : i + 2], 16) for i in (0, 2, 4))
    validate_palette(out)
    return out


# ---------------------------------------------------------------------------
# Mask encoding


def encode_mask(mask: np.ndarray, palette: dict[int, tuple[int, int, int]] | None = None) -> np.ndarray:
    """Paint a (H, W) class-index mask into a (H, W, 3) uint8 image."""
    palette = DEFAULT_PALETTE if palette is None else palette
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    present = np.unique(mask)
    missing = [int(c) for c in present if int(c) not in palette]
    if missing:
        raise DataError(f"mask contains classes {missing} absent from palette")
    lut = np.zeros((max(palette) + 1, 3), dtype=np.uint8)
    for cls, rgb in palette.items():
        lut[cls] = rgb
    return lut[mask.astype(np.int64)]


def decode_mask(image: np.ndarray, palette: dict[int, tuple[int, int, int]] | None = None) -> np.ndarray:
    """Invert :func:`encode_mask`. Every pixel must match a palette color exactly."""
    palette = DEFAULT_PALETTE if palette is None else palette
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    # Pack RGB into a single int for exact lookup.
    packed = (
        image[..., 0].astype(np.int64) << 16
        | image[..., 1].astype(np.int64) << 8
        | image[..., 2].astype(np.int64)
    )
    table = {(r << 16 | g << 8 | b): cls for cls, (r, g, b) in palette.items()}
    mask = np.zeros(packed.shape, dtype=np.uint8)
    known = np.zeros(packed.shape, dtype=bool)
    for key, cls in table.items():
        hit = packed == key
        mask[hit] = cls
        known |= hit
    if not known.all():
        row, col = np.argwhere(~known)[0]
        rgb = tuple(int(v) for v in image[row, col])
        raise DataError(f"pixel ({row}, {col}) has color {rgb} not present in the palette")
    return mask


def one_hot(mask: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    """Expand a (H, W) class mask into (C, H, W) indicator planes."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.min() < 0 or mask.max() >= num_classes:
        raise DataError(
            f"mask indices span [{mask.min()}, {mask.max()}] outside [0, {num_classes})"
        )
    planes = np.zeros((num_classes,) + mask.shape, dtype=dtype)
    rows, cols = np.indices(mask.shape)
    planes[mask.astype(np.int64), rows, cols] = 1
    return planes


# ---------------------------------------------------------------------------
# Fan-shape preprocessing


@dataclass(frozen=True)
class FanGeometry:
    """Sector footprint of a convex probe: apex, half-aperture, radial band.

    Angles are measured from the downward vertical (increasing row direction);
    a pixel at integer coordinates (row, col) is retained iff

        r_min <= hypot(row - apex_row, col - apex_col) <= r_max
        and |atan2(col - apex_col, row - apex_row)| <= half_aperture
    """

    apex: tuple[float, float]
    half_aperture: float
    r_min: float
    r_max: float

    def __post_init__(self):
        if not (0.0 < self.half_aperture < math.pi / 2):
            raise UsageError(f"half_aperture must be in (0, pi/2), got {self.half_aperture}")
        if not (0.0 <= self.r_min < self.r_max):
            raise UsageError(f"need 0 <= r_min < r_max, got {self.r_min}, {self.r_max}")


def default_fan(height: int, width: int) -> FanGeometry:
    """Convex-probe-like footprint: apex top-center, 35 deg half-aperture,
    radial band [0.05 h, 0.95 h]."""
    return FanGeometry(
        apex=(0.0, width / 2.0),
        half_aperture=math.radians(35.0),
        r_min=0.05 * height,
        r_max=0.95 * height,
    )


def fan_keep_mask(fan: FanGeometry, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) array of pixels retained by the fan sector."""
    rows, cols = np.indices((height, width), dtype=np.float64)
    dr = rows - fan.apex[0]
    dc = cols - fan.apex[1]
    r = np.hypot(dr, dc)
    ang = np.abs(np.arctan2(dc, dr))
    return (r >= fan.r_min) & (r <= fan.r_max) & (ang <= fan.half_aperture)


def apply_fan_mask(image: np.ndarray, fan: FanGeometry) -> np.ndarray:
    """Zero out pixels outside the fan sector (to the domain minimum).

    Byte images go to 0, normalized images to -1. Idempotent.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C) image, got shape {image.shape}")
    if fan.apex[0] > image.shape[0]:
        raise UsageError(f"fan apex row {fan.apex[0]} lies below the canvas")
    keep = fan_keep_mask(fan, image.shape[0], image.shape[1])
    fill = 0 if image.dtype == np.uint8 else -1.0
    out = image.copy()
    out[~keep] = fill
    return out


# ---------------------------------------------------------------------------
# Normalization


def normalize(image: np.ndarray) -> np.ndarray:
    """Map byte values to [-1, 1]: v -> v / 127.5 - 1."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError(f"normalize expects uint8 byte images, got dtype {image.dtype}")
    return image.astype(np.float64) / 127.5 - 1.0


def denormalize(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] back to bytes: v -> clamp(round((v + 1) * 127.5), 0, 255)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        raise DataError("denormalize expects a normalized (floating) image, got uint8")
    v = np.rint((image + 1.0) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifest and dataset handle


@dataclass
class DatasetManifest:
    classes: int
    palette: dict[int, tuple[int, int, int]]
    counts: dict[str, int]
    canvas: tuple[int, int]
    seed: int | None = None
    version: int = MANIFEST_VERSION

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "classes": self.classes,
            "palette": palette_to_hex(self.palette),
            "counts": {d: int(self.counts[d]) for d in DOMAINS},
            "canvas": [int(self.canvas[0]), int(self.canvas[1])],
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(
                version=int(d["version"]),
                classes=int(d["classes"]),
                palette=palette_from_hex(d["palette"]),
                counts={k: int(v) for k, v in d["counts"].items()},
                canvas=(int(d["canvas"][0]), int(d["canvas"][1])),
                seed=None if d.get("seed") is None else int(d["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    text = json.dumps(manifest.to_json_dict(), indent=2, sort_keys=True) + "\n"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return DatasetManifest.from_json_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest file {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc


@dataclass
class Sample:
    domain: str
    id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray | None  # (H, W) uint8 class indices; None = unlabeled

    def __post_init__(self):
        if self.mask is not None and self.image.shape[:2] != self.mask.shape:
            raise ShapeError(
                f"sample {self.id}: image {self.image.shape[:2]} and mask "
                f"{self.mask.shape} dimensions differ"
            )


def save_image(array: np.ndarray, path: str) -> None:
    try:
        Image.fromarray(array, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IOFailure(f"cannot write image {path}: {exc}") from exc


def load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataError(f"missing image file {path}") from exc
    except OSError as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return arr


class Dataset:
    """Read-only handle over the on-disk layout; samples decode lazily."""

    def __init__(self, root: str, manifest: DatasetManifest, ids: dict[str, list[str]]):
        self.root = root
        self.manifest = manifest
        self.ids = ids
        self._cache: dict[tuple[str, str], Sample] = {}

    def count(self, domain: str) -> int:
        return len(self.ids[domain])

    @property
    def n_ct(self) -> int:
        return self.count(CT)

    @property
    def n_us(self) -> int:
        return self.count(US)

    def image_path(self, domain: str, sample_id: str) -> str:
        return os.path.join(self.root, domain, "images", sample_id + ".png")

    def mask_path(self, domain: str, sample_id: str) -> str:
        return os.path.join(self.root, domain, "masks", sample_id + ".png")

    def read_sample(self, domain: str, index: int, cache: bool = True) -> Sample:
        sample_id = self.ids[domain][index]
        key = (domain, sample_id)
        if key in self._cache:
            return self._cache[key]
        image = load_image(self.image_path(domain, sample_id))
        self._check_dims(domain, sample_id, image.shape[:2])
        mask_img = load_image(self.mask_path(domain, sample_id))
        if mask_img.shape[:2] != image.shape[:2]:
            raise DataError(
                f"{domain}/{sample_id}: mask {mask_img.shape[:2]} does not match "
                f"image {image.shape[:2]}"
            )
        mask = decode_mask(mask_img, self.manifest.palette)
        if mask.max(initial=0) >= self.manifest.classes:
            raise DataError(f"{domain}/{sample_id}: class index exceeds manifest classes")
        sample = Sample(domain=domain, id=sample_id, image=image, mask=mask)
        if cache:
            self._cache[key] = sample
        return sample

    def samples(self, domain: str):
        for i in range(self.count(domain)):
            yield self.read_sample(domain, i)

    def _check_dims(self, domain, sample_id, hw):
        h, w = hw
        if h % 8 or w % 8:
            raise DataError(
                f"{domain}/{sample_id}: dimensions {h}x{w} are not divisible by 8"
            )
        if (h, w) != tuple(self.manifest.canvas):
            raise DataError(
                f"{domain}/{sample_id}: dimensions {h}x{w} differ from manifest "
                f"canvas {self.manifest.canvas}"
            )


def load_dataset(root: str) -> Dataset:
    """Open a dataset directory, validating the manifest against the files."""
    manifest = read_manifest(os.path.join(root, "manifest.json"))
    ids: dict[str, list[str]] = {}
    for domain in DOMAINS:
        img_dir = os.path.join(root, domain, "images")
        mask_dir = os.path.join(root, domain, "masks")
        if not os.path.isdir(img_dir):
            raise DataError(f"missing directory {img_dir}")
        found = sorted(f[:-4] for f in os.listdir(img_dir) if f.endswith(".png"))
        if len(found) != manifest.counts[domain]:
            raise DataError(
                f"{domain}: manifest promises {manifest.counts[domain]} samples, "
                f"found {len(found)} image files"
            )
        for sample_id in found:
            if not os.path.isfile(os.path.join(mask_dir, sample_id + ".png")):
                raise DataError(f"{domain}/{sample_id}: mask file is missing")
        ids[domain] = found
    ds = Dataset(root, manifest, ids)
    # Cheap header-only dimension check so shape violations surface at load.
    for domain in DOMAINS:
        for sample_id in ids[domain]:
            for path in (ds.image_path(domain, sample_id), ds.mask_path(domain, sample_id)):
                try:
                    with Image.open(path) as img:
                        w, h = img.size
                except OSError as exc:
                    raise DataError(f"unreadable image {path}: {exc}") from exc
                ds._check_dims(domain, sample_id, (h, w))
    return ds


# ---------------------------------------------------------------------------
# Deterministic unpaired sampling


def derive_seed(seed: int, *path: int) -> int:
    """Stable child seed for a (seed, path...) tuple."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *path])
    return int(ss.generate_state(1, np.uint64)[0])


def _permutation(seed: int, domain: str, epoch: int, block: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, DOMAINS.index(domain), epoch, block]
    )
    return np.random.default_rng(ss).permutation(n)


def domain_index_at(n: int, epoch: int, step: int, seed: int, domain: str) -> int:
    """Index drawn for one domain at (epoch, step) under the counter-based sampler.

    Each domain is permuted independently per epoch; when an epoch is longer
    than the domain (unequal set sizes), the domain is re-permuted per block.
    """
    if n <= 0:
        raise DataError(f"domain {domain} is empty")
    block, offset = divmod(step, n)
    return int(_permutation(seed, domain, epoch, block, n)[offset])


def sample_unpaired_batch(dataset: Dataset, epoch: int, step: int, seed: int) -> tuple[Sample, Sample]:
    """Deterministic batch of one CT + one US sample for (epoch, step, seed)."""
    i_ct = domain_index_at(dataset.n_ct, epoch, step, seed, CT)
    i_us = domain_index_at(dataset.n_us, epoch, step, seed, US)
    return dataset.read_sample(CT, i_ct), dataset.read_sample(US, i_us)
