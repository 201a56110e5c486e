"""Synthetic spot-pattern identities standing in for real head crops.

Each identity is a fixed constellation of dark spots on a bright elliptical
"head".  Images of an identity differ by pixel noise and by the three
augmentations (tilt, vertical shift, brightness).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    ContractError,
    FinprintError,
    ManifestEntry,
    RngState,
    Sample,
    Split,
    as_rng,
    ensure_dir,
    write_manifest,
    write_tensor,
)

BACKGROUND = 0.15
HEAD_AXES = (0.42, 0.34)   # semi-axes of the head ellipse, fraction of (W, H)
SPOT_AXES = (0.34, 0.26)   # spot centres are drawn inside this inner ellipse
RADIUS_RANGE = (0.035, 0.065)


@dataclass(frozen=True)
class Spot:
    cx: float
    cy: float
    r: float
    intensity: float


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    spots: tuple
    base_brightness: float = 0.8

    def __post_init__(self):
        if len(self.spots) < 1:
            raise ContractError("an identity needs at least one spot")
        for s in self.spots:
            if not (0.0 <= s.cx <= 1.0 and 0.0 <= s.cy <= 1.0):
                raise ContractError(f"spot centre {s.cx, s.cy} outside the unit square")


@dataclass(frozen=True)
class AugmentParams:
    tilt_max_deg: float = 15.0
    vshift_max_frac: float = 0.10
    brightness_range: tuple = (0.7, 1.3)
    noise_sigma: float = 0.02
    copies_per_image: int = 5

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not lo <= 1.0 <= hi:
            raise ContractError("brightness_range must satisfy low <= 1 <= high")
        if self.copies_per_image < 0:
            raise ContractError("copies_per_image must be >= 0")
        if self.tilt_max_deg < 0 or self.vshift_max_frac < 0 or self.noise_sigma < 0:
            raise ContractError("augmentation magnitudes must be >= 0")


def pattern_margin(a: IdentitySpec, b: IdentitySpec) -> float:
    """How far the most displaced spot is from its nearest counterpart, minus 2r.

    Positive means at least one spot of one pattern has no spot of the other
    within twice its radius, i.e. the two patterns are distinguishable.
    """
    pa = np.array([[s.cx, s.cy] for s in a.spots])
    pb = np.array([[s.cx, s.cy] for s in b.spots])
    ra = np.array([s.r for s in a.spots])
    rb = np.array([s.r for s in b.spots])
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max((d.min(axis=1) - 2 * ra).max(), (d.min(axis=0) - 2 * rb).max()))


def _draw_spec(identity: int, n_spots: int, gen: np.random.Generator) -> IdentitySpec:
    spots = []
    while len(spots) < n_spots:
        cx, cy = gen.uniform(0.0, 1.0, size=2)
        if ((cx - 0.5) / SPOT_AXES[0]) ** 2 + ((cy - 0.5) / SPOT_AXES[1]) ** 2 > 1.0:
            continue
        r = gen.uniform(*RADIUS_RANGE)
        intensity = gen.uniform(0.6, 0.95)
        spots.append(Spot(float(cx), float(cy), float(r), float(intensity)))
    return IdentitySpec(identity, tuple(spots), float(gen.uniform(0.75, 0.9)))


def gen_identities(n: int, spots_per_identity: int, rng, max_retries: int = 200) -> list[IdentitySpec]:
    if n < 1:
        raise ContractError("need at least one identity")
    if spots_per_identity < 1:
        raise ContractError("need at least one spot per identity")
    base = rng if isinstance(rng, RngState) else RngState(0)
    specs: list[IdentitySpec] = []
    for i in range(n):
        gen = as_rng(base.child("identity", i)) if isinstance(rng, RngState) else as_rng(rng)
        for _ in range(max_retries):
            cand = _draw_spec(i, spots_per_identity, gen)
            if all(pattern_margin(cand, other) > 0 for other in specs):
                specs.append(cand)
                break
        else:
            raise FinprintError(
                f"could not place identity {i} apart from the others after {max_retries} tries; "
                "use fewer spots per identity or a larger canvas"
            )
    return specs


def _coverage(dist_px: np.ndarray) -> np.ndarray:
    """Anti-aliased inside-ness from a signed distance in pixels (negative = inside)."""
    return np.clip(0.5 - dist_px, 0.0, 1.0)


def render_pixels(spec: IdentitySpec, size=(64, 64), gen: Optional[np.random.Generator] = None,
                  noise_sigma: float = 0.02, channels: int = 1) -> np.ndarray:
    h, w = size
    if h < 16 or w < 16:
        raise ContractError("render size must be at least 16x16")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs, ys = (xx + 0.5) / w, (yy + 0.5) / h
    # approximate signed pixel distance to the ellipse edge
    rho = np.sqrt(((xs - 0.5) / HEAD_AXES[0]) ** 2 + ((ys - 0.5) / HEAD_AXES[1]) ** 2)
    head = _coverage((rho - 1.0) * min(HEAD_AXES[0] * w, HEAD_AXES[1] * h))
    img = BACKGROUND + (spec.base_brightness - BACKGROUND) * head
    scale = min(h, w)
    for s in spec.spots:
        d = np.sqrt(((xs - s.cx) * w) ** 2 + ((ys - s.cy) * h) ** 2)
        img = img * (1.0 - s.intensity * _coverage(d - s.r * scale) * head)
    if noise_sigma > 0:
        if gen is None:
            raise ContractError("pixel noise needs an rng")
        img = img + gen.normal(0.0, noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], channels, axis=2)


def render(spec: IdentitySpec, size=(64, 64), rng=None, noise_sigma: float = 0.02,
           channels: int = 1, sample_id: int = 0, split: Split = Split.TRAIN) -> Sample:
    gen = None if rng is None else as_rng(rng)
    px = render_pixels(spec, size, gen, noise_sigma, channels)
    return Sample(sample_id, spec.identity, px, split)


def transform(pixels: np.ndarray, tilt_deg: float, shift_px: float, brightness: float) -> np.ndarray:
    """Rotate about the centre, shift down by ``shift_px`` and scale brightness.

    Bilinear resampling with edge replication; output clamped to [0, 1].
    """
    out = np.asarray(pixels, dtype=np.float64)
    if tilt_deg != 0.0 or shift_px != 0.0:
        h, w = out.shape[:2]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        th = math.radians(tilt_deg)
        cos_t, sin_t = math.cos(th), math.sin(th)
        # inverse map: output pixel -> source location
        dy, dx = yy - shift_px - cy, xx - cx
        src_y = cos_t * dy - sin_t * dx + cy
        src_x = sin_t * dy + cos_t * dx + cx
        out = np.stack(
            [ndimage.map_coordinates(out[:, :, ch], [src_y, src_x], order=1, mode="nearest")
             for ch in range(out.shape[2])],
            axis=2,
        )
    if brightness != 1.0:
        out = out * brightness
    return np.clip(out, 0.0, 1.0)


def augment(s: Sample, p: AugmentParams = AugmentParams(), rng=None, first_id: Optional[int] = None) -> list[Sample]:
    """``p.copies_per_image`` randomly tilted, shifted and re-lit copies of ``s``.

    Copies get consecutive sample ids from ``first_id`` (default
    ``s.sample_id + 1``) and inherit identity and split.
    """
    if p.copies_per_image == 0:
        return []
    gen = as_rng(rng if rng is not None else RngState(0, ("augment", s.sample_id)))
    start = s.sample_id + 1 if first_id is None else first_id
    h = s.pixels.shape[0]
    lo, hi = p.brightness_range
    out = []
    for i in range(p.copies_per_image):
        tilt = gen.uniform(-p.tilt_max_deg, p.tilt_max_deg)
        shift = gen.uniform(-p.vshift_max_frac, p.vshift_max_frac) * h
        bright = gen.uniform(lo, hi)
        px = transform(s.pixels, tilt, shift, bright)
        out.append(Sample(start + i, s.identity, px, s.split, s.sample_id))
    return out


@dataclass
class Dataset:
    samples: list
    identities: list = field(default_factory=list)

    def split(self, which) -> list:
        which = Split(which)
        return [s for s in self.samples if s.split == which]

    @property
    def train(self) -> list:
        return self.split(Split.TRAIN)

    @property
    def test(self) -> list:
        return self.split(Split.TEST)


def _test_originals(n_ids: int, imgs_per_id: int, split_frac: float, base: RngState,
                    by_identity: bool) -> set:
    test = set()
    if by_identity:
        n_test = int(round(n_ids * (1.0 - split_frac)))
        ids = as_rng(base.child("split")).permutation(n_ids)[:n_test]
        for i in ids:
            test.update((int(i), j) for j in range(imgs_per_id))
        return test
    n_test = int(round(imgs_per_id * (1.0 - split_frac)))
    for i in range(n_ids):
        picks = as_rng(base.child("split", i)).permutation(imgs_per_id)[:n_test]
        test.update((i, int(j)) for j in picks)
    return test


def build_dataset(n_ids: int, imgs_per_id: int, p: AugmentParams = AugmentParams(),
                  split_frac: float = 0.9, rng=None, out_dir=None, size=(64, 64),
                  spots_per_identity: int = 8, channels: int = 1,
                  split_by_identity: bool = False) -> Dataset:
    """Render, augment and split a synthetic dataset; optionally write it to ``out_dir``.

    The split is drawn per original image and stratified per identity, so an
    original and all its augmented copies always share a split.  Sample ids
    run in order: each original is followed by its copies.
    """
    if not 0.0 < split_frac < 1.0:
        raise ContractError("split_frac must lie in (0, 1)")
    if imgs_per_id < 1:
        raise ContractError("imgs_per_id must be >= 1")
    base = rng if isinstance(rng, RngState) else RngState(0 if rng is None else int(rng))
    base = base.child("synth")
    specs = gen_identities(n_ids, spots_per_identity, base)
    test = _test_originals(n_ids, imgs_per_id, split_frac, base, split_by_identity)
    samples = []
    next_id = 0
    for spec in specs:
        for j in range(imgs_per_id):
            split = Split.TEST if (spec.identity, j) in test else Split.TRAIN
            orig = render(spec, size, base.child("render", spec.identity, j), p.noise_sigma,
                          channels, next_id, split)
            copies = augment(orig, p, base.child("augment", spec.identity, j), next_id + 1)
            samples.append(orig)
            samples.extend(copies)
            next_id += 1 + len(copies)
    ds = Dataset(samples, specs)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: Dataset, out_dir) -> Path:
    root = ensure_dir(out_dir)
    ensure_dir(root / "tensors")
    entries = []
    for s in ds.samples:
        rel = f"tensors/{s.sample_id:07d}.fnt"
        write_tensor(root / rel, s.pixels.shape, s.pixels)
        entries.append(ManifestEntry(s.sample_id, s.identity, rel, s.split, s.augmented_from))
    manifest = root / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def dataset_counts(samples: Sequence[Sample]) -> dict:
    counts = {"train": 0, "test": 0}
    for s in samples:
        counts[Split(s.split).value] += 1
    return counts
