"""Synthetic multi-institution datasets with controlled domain shift.

Each site draws randomized nested-ellipse phantoms and pushes them
through a per-site appearance pipeline (contrast curve, smooth bias
field, optional bright lesion, pixel noise). Sites therefore share
anatomy-like structure but differ in intensity statistics, which is the
shift the cross-site alignment machinery is meant to bridge.

Datasets serialize to a small binary format (magic ``FLMR``): reference
images are stored as f32 and the undersampled network inputs are
regenerated from reference + mask on load, keeping the acquisition model
the single source of truth.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .autodiff import Tensor
from .kspace import KSpaceSample, MaskSpec, acquire, make_mask

__all__ = [
    "SiteProfile",
    "SiteDataset",
    "DatasetFormatError",
    "generate_site",
    "default_profiles",
    "generate_default_sites",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"FLMR"
VERSION = 1


@dataclass(frozen=True)
class SiteProfile:
    """Appearance parameters of one synthetic institution."""

    site_id: str
    contrast_gamma: float = 1.0
    bias_field_strength: float = 0.0
    noise_sigma: float = 0.0
    structure_scale: float = 1.0
    lesion_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be > 0")
        if self.bias_field_strength < 0 or self.noise_sigma < 0:
            raise ValueError("bias_field_strength and noise_sigma must be >= 0")
        if self.structure_scale <= 0:
            raise ValueError("structure_scale must be > 0")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must be in [0, 1]")


@dataclass
class SiteDataset:
    profile: SiteProfile
    train: List[KSpaceSample] = field(default_factory=list)
    test: List[KSpaceSample] = field(default_factory=list)


def _ellipse(yy, xx, cx, cy, ax, ay, theta):
    ct, st = np.cos(theta), np.sin(theta)
    xr = (xx - cx) * ct + (yy - cy) * st
    yr = -(xx - cx) * st + (yy - cy) * ct
    return (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0


def _phantom(rng, size: int, scale: float) -> np.ndarray:
    """Nested random ellipses on [-1,1]^2, normalized to peak 1."""
    coords = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((size, size))
    outer_ax = rng.uniform(0.65, 0.9) * scale
    outer_ay = rng.uniform(0.65, 0.9) * scale
    img[_ellipse(yy, xx, 0.0, 0.0, outer_ax, outer_ay, rng.uniform(0, np.pi))] += rng.uniform(0.4, 0.6)
    for _ in range(int(rng.integers(2, 8))):
        cx, cy = rng.uniform(-0.35, 0.35, size=2)
        ax = rng.uniform(0.1, 0.45) * scale
        ay = rng.uniform(0.1, 0.45) * scale
        val = rng.uniform(-0.25, 0.35)
        img[_ellipse(yy, xx, cx, cy, ax, ay, rng.uniform(0, np.pi))] += val
    img = np.clip(img, 0.0, None)
    peak = img.max()
    return img / peak if peak > 0 else img


def _bias_field(rng, size: int, strength: float) -> np.ndarray:
    """Smooth multiplicative field 1 + strength * g with max|g| = 1."""
    coords = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    g = np.zeros((size, size))
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        py, px = rng.uniform(0.0, 2 * np.pi, size=2)
        g += np.cos(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    g /= np.abs(g).max()
    return 1.0 + strength * g


def _reference_image(rng, size: int, profile: SiteProfile) -> np.ndarray:
    img = _phantom(rng, size, profile.structure_scale)
    img = img ** profile.contrast_gamma
    if profile.bias_field_strength > 0:
        img = img * _bias_field(rng, size, profile.bias_field_strength)
    if profile.lesion_probability > 0 and rng.uniform() < profile.lesion_probability:
        coords = np.linspace(-1.0, 1.0, size)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        cx, cy = rng.uniform(-0.3, 0.3, size=2)
        ax = rng.uniform(0.05, 0.12)
        ay = rng.uniform(0.05, 0.12)
        img = img + rng.uniform(0.3, 0.5) * _ellipse(yy, xx, cx, cy, ax, ay, 0.0)
    if profile.noise_sigma > 0:
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak > 0:
        img = img / peak
    # store-exact: quantize to f32 so disk round trips are bit-identical
    return img.astype(np.float32).astype(np.float64)


def _make_sample(profile: SiteProfile, split: int, index: int, size: int,
                 acceleration: float, center_fraction: float) -> KSpaceSample:
    rng = np.random.default_rng(np.random.SeedSequence((profile.seed, split, index)))
    ref = _reference_image(rng, size, profile)
    mask = make_mask(size, acceleration, center_fraction, rng)
    return KSpaceSample(acquire(ref, mask), Tensor(ref), mask, profile.site_id)


def generate_site(profile: SiteProfile, n_train: int, n_test: int, image_size: int,
                  mask_params: Tuple[float, float]) -> SiteDataset:
    """Build one site's train/test sets, fully determined by profile.seed.

    ``mask_params`` is (acceleration, center_fraction). Train and test
    samples come from disjoint per-sample seed streams.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    if image_size < 2 or (image_size & (image_size - 1)) != 0:
        raise ValueError(f"image_size must be a power of two, got {image_size}")
    af, cf = mask_params
    train = [_make_sample(profile, 0, i, image_size, af, cf) for i in range(n_train)]
    test = [_make_sample(profile, 1, i, image_size, af, cf) for i in range(n_test)]
    return SiteDataset(profile, train, test)


def default_profiles(seed: int = 0) -> List[SiteProfile]:
    """Four sites with distinct appearance; "C" is the small-site stand-in."""
    return [
        SiteProfile("A", contrast_gamma=0.6, bias_field_strength=0.08,
                    noise_sigma=0.01, structure_scale=1.0,
                    lesion_probability=0.25, seed=seed * 1000 + 1),
        SiteProfile("B", contrast_gamma=1.0, bias_field_strength=0.0,
                    noise_sigma=0.0, structure_scale=1.0,
                    lesion_probability=0.15, seed=seed * 1000 + 2),
        SiteProfile("C", contrast_gamma=1.6, bias_field_strength=0.15,
                    noise_sigma=0.02, structure_scale=0.8,
                    lesion_probability=0.35, seed=seed * 1000 + 3),
        SiteProfile("D", contrast_gamma=2.4, bias_field_strength=0.05,
                    noise_sigma=0.015, structure_scale=1.2,
                    lesion_probability=0.1, seed=seed * 1000 + 4),
    ]


SMALL_SITE_ID = "C"


def generate_default_sites(image_size: int, n_train: int, n_test: int,
                           mask_params: Tuple[float, float], seed: int = 0) -> List[SiteDataset]:
    """The default four-site cohort; site "C" gets 10x fewer train samples."""
    sites = []
    for profile in default_profiles(seed):
        nt = max(1, n_train // 10) if profile.site_id == SMALL_SITE_ID else n_train
        sites.append(generate_site(profile, nt, n_test, image_size, mask_params))
    return sites


# -- on-disk format --------------------------------------------------------


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _profile_metadata(ds: SiteDataset) -> List[str]:
    p = ds.profile
    af = ds.train[0].mask.acceleration
    cf = ds.train[0].mask.center_fraction
    return [
        f"site_id={p.site_id}",
        f"contrast_gamma={p.contrast_gamma!r}",
        f"bias_field_strength={p.bias_field_strength!r}",
        f"noise_sigma={p.noise_sigma!r}",
        f"structure_scale={p.structure_scale!r}",
        f"lesion_probability={p.lesion_probability!r}",
        f"seed={p.seed}",
        f"acceleration={af!r}",
        f"center_fraction={cf!r}",
        f"n_train={len(ds.train)}",
    ]


def save_dataset(ds: SiteDataset, path) -> None:
    if not ds.train:
        raise ValueError("refusing to save a dataset with an empty train split")
    for s in ds.train + ds.test:
        if s.site_id != ds.profile.site_id:
            raise ValueError(f"sample site_id {s.site_id!r} != profile {ds.profile.site_id!r}")
    h, w = ds.train[0].reference.data.shape
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    meta = _profile_metadata(ds)
    chunks.append(struct.pack("<I", len(meta)))
    for line in meta:
        raw = line.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    samples = ds.train + ds.test
    chunks.append(struct.pack("<III", len(samples), h, w))
    for s in samples:
        ref32 = s.reference.data.astype("<f4")
        chunks.append(ref32.tobytes())
        kept = s.mask.kept_columns
        chunks.append(struct.pack("<H", len(kept)))
        chunks.append(struct.pack(f"<{len(kept)}H", *kept))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_dataset(path) -> SiteDataset:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic, not a dataset file", 0)
    (version,) = rd.unpack("<H", "version")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    (n_meta,) = rd.unpack("<I", "metadata count")
    meta = {}
    for _ in range(n_meta):
        (ln,) = rd.unpack("<H", "metadata length")
        line = rd.take(ln, "metadata line").decode("utf-8")
        key, _, value = line.partition("=")
        meta[key] = value
    try:
        profile = SiteProfile(
            site_id=meta["site_id"],
            contrast_gamma=float(meta["contrast_gamma"]),
            bias_field_strength=float(meta["bias_field_strength"]),
            noise_sigma=float(meta["noise_sigma"]),
            structure_scale=float(meta["structure_scale"]),
            lesion_probability=float(meta["lesion_probability"]),
            seed=int(meta["seed"]),
        )
        acceleration = float(meta["acceleration"])
        center_fraction = float(meta["center_fraction"])
        n_train = int(meta["n_train"])
    except KeyError as exc:
        raise DatasetFormatError(f"missing metadata key {exc}", rd.pos) from None
    count, h, w = rd.unpack("<III", "sample header")
    samples = []
    for _ in range(count):
        ref = np.frombuffer(rd.take(4 * h * w, "reference pixels"), dtype="<f4")
        ref = ref.reshape(h, w).astype(np.float64)
        (n_kept,) = rd.unpack("<H", "mask size")
        kept = rd.unpack(f"<{n_kept}H", "mask columns")
        mask = MaskSpec(w, acceleration, center_fraction, tuple(kept))
        samples.append(KSpaceSample(acquire(ref, mask), Tensor(ref), mask, profile.site_id))
    if rd.pos != len(rd.data):
        raise DatasetFormatError("trailing bytes after last sample", rd.pos)
    if n_train > count:
        raise DatasetFormatError(f"n_train {n_train} exceeds sample count {count}", rd.pos)
    return SiteDataset(profile, samples[:n_train], samples[n_train:])
