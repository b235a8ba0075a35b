"""Paired satellite/street corpora: manifests, preprocessing and a toy-scene fabricator.

On disk a split looks like::

    {root}/{split}/manifest.csv
    {root}/{split}/metadata.json
    {root}/{split}/satellite/{id}.png
    {root}/{split}/street/{id}.png

Images in memory are float arrays of shape (C, H, W).
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .polar import PolarParams, polar_transform

TOY_GENERATOR_VERSION = "1"


class DataError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    satellite: Path
    street: Path
    coords: Optional[Tuple[float, float]] = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: List[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def has_coords(self):
        return bool(self.entries) and self.entries[0].coords is not None


@dataclass
class ImagePair:
    id: str
    satellite: np.ndarray
    street: np.ndarray
    coords: Optional[Tuple[float, float]] = None


def read_image(path) -> np.ndarray:
    """8-bit PNG -> float64 (3, H, W) array in [0, 255]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1)


def write_image(path, image, value_range=(0.0, 255.0)):
    """Write a (C, H, W) or (H, W) array as an 8-bit RGB PNG."""
    lo, hi = value_range
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    arr = np.clip((arr - lo) / (hi - lo) * 255.0, 0, 255)
    Image.fromarray(np.rint(arr).astype(np.uint8).transpose(1, 2, 0), "RGB").save(path)


def load_manifest(path) -> DatasetManifest:
    """Read a ``id,satellite,street[,easting,northing]`` CSV; paths are relative to it."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    seen = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        if header not in (["id", "satellite", "street"],
                          ["id", "satellite", "street", "easting", "northing"]):
            raise DataError(f"{path}: bad header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ident, sat, street = (c.strip() for c in row[:3])
            if not ident:
                raise DataError(f"{path}:{lineno}: empty id")
            if ident in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ident!r} (first on line {seen[ident]})")
            seen[ident] = lineno
            coords = None
            if len(row) == 5:
                e, n = row[3].strip(), row[4].strip()
                if e or n:
                    try:
                        coords = (float(e), float(n))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad coordinates {e!r}, {n!r}") from None
            entry = ManifestEntry(ident, base / sat, base / street, coords)
            for p in (entry.satellite, entry.street):
                if not p.is_file():
                    raise DataError(f"{path}:{lineno}: missing file {p}")
            entries.append(entry)
    with_coords = sum(e.coords is not None for e in entries)
    if 0 < with_coords < len(entries):
        raise DataError(f"{path}: coordinates given on {with_coords} of {len(entries)} rows; need all or none")
    return DatasetManifest(base, base.name, entries)


def write_manifest(path, entries):
    path = Path(path)
    with_coords = any(e.coords is not None for e in entries)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "satellite", "street"] + (["easting", "northing"] if with_coords else []))
        for e in entries:
            row = [e.id, os.path.relpath(e.satellite, path.parent), os.path.relpath(e.street, path.parent)]
            if with_coords:
                row += [repr(e.coords[0]), repr(e.coords[1])]
            writer.writerow(row)


def load_pair(entry: ManifestEntry) -> ImagePair:
    return ImagePair(entry.id, read_image(entry.satellite), read_image(entry.street), entry.coords)


def to_signed(image, value_range=(0.0, 255.0)):
    """Affinely map ``value_range`` onto [-1, 1]."""
    lo, hi = value_range
    return (np.asarray(image, dtype=np.float64) - lo) * (2.0 / (hi - lo)) - 1.0


def hflip(image):
    return np.ascontiguousarray(image[..., ::-1])


def prepare_pair(pair: ImagePair, params: PolarParams, augment=False, rng=None,
                 value_range=(0.0, 255.0), out_of_bounds="clamp"):
    """Polar-warp the satellite, rescale both images to [-1, 1] and maybe flip both.

    Returns float32 ``(polar, street)``, each (3, polar_height, polar_width).
    """
    street_shape = pair.street.shape[-2:]
    if street_shape != (params.polar_height, params.polar_width):
        raise DataError(
            f"pair {pair.id}: street image is {street_shape[0]}x{street_shape[1]}, "
            f"expected {params.polar_height}x{params.polar_width}"
        )
    try:
        polar = polar_transform(pair.satellite, params, out_of_bounds)
    except ValueError as exc:
        raise DataError(f"pair {pair.id}: {exc}") from None
    polar = to_signed(polar, value_range)
    street = to_signed(pair.street, value_range)
    if augment:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        if rng.random() < 0.5:
            polar, street = hflip(polar), hflip(street)
    return polar.astype(np.float32), street.astype(np.float32)


@dataclass
class PreparedSplit:
    """A whole split held in memory, ready for batching."""

    ids: List[str]
    polar: np.ndarray  # (N, 3, H, W) float32 in [-1, 1]
    street: np.ndarray
    coords: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.ids)


def load_split(manifest: DatasetManifest, params: PolarParams, out_of_bounds="clamp") -> PreparedSplit:
    if len(manifest) == 0:
        raise DataError(f"split {manifest.split!r} is empty")
    polar, street = [], []
    for entry in manifest.entries:
        p, s = prepare_pair(load_pair(entry), params, out_of_bounds=out_of_bounds)
        polar.append(p)
        street.append(s)
    coords = np.array([e.coords for e in manifest.entries]) if manifest.has_coords else None
    return PreparedSplit([e.id for e in manifest.entries], np.stack(polar), np.stack(street), coords)


# --- toy scene fabricator -------------------------------------------------

@dataclass(frozen=True)
class ToyGeometry:
    sat_size: int = 96
    height: int = 32
    width: int = 176
    sky_fraction: float = 0.3

    @property
    def sky_rows(self):
        return int(round(self.sky_fraction * self.height))

    @property
    def ground_params(self):
        """Polar geometry of the below-sky band of the panorama."""
        return PolarParams(self.sat_size, self.sat_size, self.width, self.height - self.sky_rows)

    @property
    def polar_params(self):
        """Polar geometry of the generator input (full panorama size)."""
        return PolarParams(self.sat_size, self.sat_size, self.width, self.height)


@dataclass
class Landmark:
    azimuth: float  # radians, clockwise from north
    distance: float  # pixels from the image center
    radius: float  # pixels
    color: Tuple[float, float, float]


@dataclass
class ToyScene:
    satellite: np.ndarray  # (3, S, S) in [0, 1]
    panorama: np.ndarray  # (3, H, W) in [0, 1]
    street_mask: np.ndarray  # (H, W) bool, pixels drawn by the street-only layer
    landmarks: List[Landmark]


def _smooth_fill(dist, half_width):
    """Anti-aliased coverage of a band of given half width around dist == 0."""
    return np.clip(half_width + 0.5 - np.abs(dist), 0.0, 1.0)


def _paint(canvas, coverage, color):
    color = np.asarray(color, dtype=np.float64)[:, None, None]
    canvas *= 1.0 - coverage
    canvas += coverage * color


def azimuth_to_column(azimuth, width):
    """Panorama column whose polar ray points at ``azimuth`` (clockwise from north)."""
    return (azimuth % (2 * math.pi)) / (2 * math.pi) * width


def render_toy_scene(rng: np.random.Generator, geometry: ToyGeometry = ToyGeometry(), landmarks=None) -> ToyScene:
    s = geometry.sat_size
    c = s / 2.0
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    dx, dy = xs - c, ys - c
    r = np.hypot(dx, dy)
    theta = np.arctan2(dx, -dy)  # clockwise from north

    base = rng.uniform(0.2, 0.6, size=3)
    sat = np.empty((3, s, s))
    for ch in range(3):
        tex = np.zeros((s, s))
        for _ in range(3):
            fx, fy = rng.uniform(-4, 4, size=2) * 2 * math.pi / s
            tex += np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * math.pi))
        sat[ch] = base[ch] + 0.04 * tex

    for _ in range(rng.integers(0, 3)):
        ring_r = rng.uniform(0.25, 0.9) * c
        _paint(sat, _smooth_fill(r - ring_r, rng.uniform(0.8, 2.0)), rng.uniform(0.0, 1.0, size=3))

    for _ in range(rng.integers(1, 4)):
        az = rng.uniform(0, 2 * math.pi)
        # perpendicular distance to the ray, only ahead of the center
        along = dx * math.sin(az) - dy * math.cos(az)
        across = dx * math.cos(az) + dy * math.sin(az)
        cover = _smooth_fill(np.where(along >= 0, across, np.inf), rng.uniform(0.02, 0.04) * s)
        _paint(sat, cover, np.full(3, rng.uniform(0.3, 0.6)))

    if landmarks is None:
        landmarks = []
        for _ in range(rng.integers(2, 5)):
            landmarks.append(Landmark(
                azimuth=rng.uniform(0, 2 * math.pi),
                distance=rng.uniform(0.3, 0.8) * c,
                radius=rng.uniform(0.06, 0.12) * s,
                color=tuple(rng.uniform(0.0, 1.0, size=3)),
            ))
    for lm in landmarks:
        lx = c + lm.distance * math.sin(lm.azimuth)
        ly = c - lm.distance * math.cos(lm.azimuth)
        d = np.hypot(xs - lx, ys - ly)
        _paint(sat, np.clip(lm.radius + 0.5 - d, 0.0, 1.0), lm.color)
    sat = np.clip(sat, 0.0, 1.0)

    h, w = geometry.height, geometry.width
    sky = geometry.sky_rows
    pano = np.empty((3, h, w))
    tint = rng.uniform(-0.05, 0.05, size=3)
    t = np.linspace(0.0, 1.0, max(sky, 1))[:, None]
    for ch, (top, bottom) in enumerate(((0.35, 0.8), (0.55, 0.88), (0.85, 0.95))):
        pano[ch, :sky] = np.clip(top + (bottom - top) * t + tint[ch], 0, 1)
    pano[:, sky:] = polar_transform(sat, geometry.ground_params)

    # facades: street-only detail rising from the horizon at each landmark azimuth
    mask = np.zeros((h, w), dtype=bool)
    cols = np.arange(w)
    for lm in landmarks:
        center = azimuth_to_column(lm.azimuth, w)
        half = max(math.atan2(lm.radius, lm.distance) / (2 * math.pi) * w, 1.0)
        offset = (cols - center + w / 2) % w - w / 2
        in_stripe = np.abs(offset) <= half
        top = sky - max(1, int(round(rng.uniform(0.4, 0.9) * sky)))
        bottom = sky + max(1, int(round(0.1 * (h - sky))))
        rows = slice(top, bottom)
        windows = 0.75 + 0.25 * ((cols[in_stripe] // 2) % 2)
        facade = np.asarray(lm.color)[:, None] * 0.7 * windows[None]
        pano[:, rows, in_stripe] = facade[:, None, :]
        mask[rows, in_stripe] = True
    return ToyScene(sat.astype(np.float64), np.clip(pano, 0, 1), mask, landmarks)


def make_toy_dataset(root, n_pairs, geometry: ToyGeometry = ToyGeometry(), seed=0, split="train") -> DatasetManifest:
    """Fabricate ``n_pairs`` scenes under ``{root}/{split}`` and return the manifest.

    Pair ``i`` is drawn from its own generator seeded with ``(seed, i)`` so the
    corpus is reproducible byte for byte.
    """
    if n_pairs < 1:
        raise DataError(f"n_pairs must be at least 1, got {n_pairs}")
    split_dir = Path(root) / split
    (split_dir / "satellite").mkdir(parents=True, exist_ok=True)
    (split_dir / "street").mkdir(parents=True, exist_ok=True)
    width = len(str(n_pairs - 1))
    entries = []
    for i in range(n_pairs):
        scene = render_toy_scene(np.random.default_rng([seed, i]), geometry)
        ident = f"{split}_{i:0{width}d}"
        sat_path = split_dir / "satellite" / f"{ident}.png"
        street_path = split_dir / "street" / f"{ident}.png"
        write_image(sat_path, scene.satellite, (0.0, 1.0))
        write_image(street_path, scene.panorama, (0.0, 1.0))
        entries.append(ManifestEntry(ident, sat_path, street_path))
    write_manifest(split_dir / "manifest.csv", entries)
    meta = {
        "generator": "toy-scenes",
        "generator_version": TOY_GENERATOR_VERSION,
        "seed": seed,
        "n_pairs": n_pairs,
        "sat_size": geometry.sat_size,
        "height": geometry.height,
        "width": geometry.width,
        "sky_fraction": geometry.sky_fraction,
        "sky_rows": geometry.sky_rows,
    }
    with open(split_dir / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return load_manifest(split_dir / "manifest.csv")
