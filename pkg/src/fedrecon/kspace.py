"""Undersampled Fourier acquisition: orthonormal FFT, Cartesian column
masks, and zero-filled reconstruction.

The forward model is: transform the reference image to the frequency
domain, optionally add complex Gaussian noise, zero every column the
mask drops, transform back, and take the magnitude. That magnitude
image is the network input.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = [
    "ComplexImage",
    "MaskSpec",
    "KSpaceSample",
    "fft2",
    "ifft2",
    "make_mask",
    "apply_mask",
    "acquire",
    "lowest_frequency_order",
]


def _require_pow2(n, what):
    if n < 2 or (n & (n - 1)) != 0:
        raise ValueError(f"{what} must be a power of two >= 2, got {n}")


@dataclass
class ComplexImage:
    """A complex 2D array stored as separate real and imaginary planes."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.ndim != 2:
            raise ValueError(f"expected 2D planes, got shape {self.re.shape}")
        if self.re.shape != self.im.shape:
            raise ValueError(
                f"re/im shape mismatch: {self.re.shape} vs {self.im.shape}"
            )

    @property
    def height(self) -> int:
        return self.re.shape[0]

    @property
    def width(self) -> int:
        return self.re.shape[1]

    @classmethod
    def from_real(cls, arr) -> "ComplexImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.copy(), np.zeros_like(arr))

    @classmethod
    def from_complex(cls, z) -> "ComplexImage":
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def energy(self) -> float:
        return float(np.sum(self.re * self.re + self.im * self.im))


def fft2(img: ComplexImage) -> ComplexImage:
    """Orthonormal 2D DFT (unitary: 1/sqrt(HW) scaling both ways)."""
    _require_pow2(img.height, "image height")
    _require_pow2(img.width, "image width")
    return ComplexImage.from_complex(np.fft.fft2(img.to_complex(), norm="ortho"))


def ifft2(img: ComplexImage) -> ComplexImage:
    _require_pow2(img.height, "image height")
    _require_pow2(img.width, "image width")
    return ComplexImage.from_complex(np.fft.ifft2(img.to_complex(), norm="ortho"))


def lowest_frequency_order(width: int) -> np.ndarray:
    """Column indices sorted by absolute frequency, lowest first.

    Column j carries frequency min(j, width - j); ties resolve to the
    smaller index so the order is fully deterministic.
    """
    cols = np.arange(width)
    return np.argsort(np.minimum(cols, width - cols), kind="stable")


@dataclass(frozen=True)
class MaskSpec:
    """A 1D Cartesian column undersampling mask."""

    width: int
    acceleration: float
    center_fraction: float
    kept_columns: tuple

    def __post_init__(self):
        kept = tuple(int(c) for c in self.kept_columns)
        object.__setattr__(self, "kept_columns", kept)
        if len(set(kept)) != len(kept):
            raise ValueError("kept_columns contains duplicates")
        if list(kept) != sorted(kept):
            raise ValueError("kept_columns must be sorted ascending")
        if kept and (kept[0] < 0 or kept[-1] >= self.width):
            raise ValueError("kept_columns out of range")
        want = int(round(self.width / self.acceleration))
        if len(kept) != want:
            raise ValueError(
                f"mask keeps {len(kept)} columns, expected round({self.width}/"
                f"{self.acceleration}) = {want}"
            )
        n_center = max(1, int(round(self.center_fraction * self.width)))
        center = set(lowest_frequency_order(self.width)[:n_center].tolist())
        if not center.issubset(kept):
            raise ValueError("mask is missing required low-frequency columns")

    @property
    def n_center(self) -> int:
        return max(1, int(round(self.center_fraction * self.width)))

    def as_row(self) -> np.ndarray:
        """Dense 0/1 indicator over columns."""
        row = np.zeros(self.width, dtype=np.float64)
        row[list(self.kept_columns)] = 1.0
        return row


def make_mask(width: int, acceleration: float, center_fraction: float, rng) -> MaskSpec:
    """Draw a column mask: low-frequency center always kept, the rest uniform.

    Keeps exactly round(width / acceleration) columns. The
    max(1, round(center_fraction * width)) lowest-frequency columns are
    always included; the remainder are drawn without replacement from the
    other columns.
    """
    if width < 1:
        raise ValueError(f"width must be positive, got {width}")
    if acceleration <= 0:
        raise ValueError(f"acceleration must be positive, got {acceleration}")
    if not 0.0 < center_fraction < 1.0:
        raise ValueError(f"center_fraction must be in (0, 1), got {center_fraction}")
    total = int(round(width / acceleration))
    n_center = max(1, int(round(center_fraction * width)))
    if total < n_center:
        raise ValueError(
            f"round(width/acceleration) = {total} is below the "
            f"{n_center} required center columns"
        )
    if total > width:
        raise ValueError(f"cannot keep {total} of {width} columns")
    center = lowest_frequency_order(width)[:n_center]
    pool = np.setdiff1d(np.arange(width), center)
    extra = rng.choice(pool, size=total - n_center, replace=False)
    kept = tuple(sorted(np.concatenate([center, extra]).tolist()))
    return MaskSpec(width, acceleration, center_fraction, kept)


def apply_mask(k: ComplexImage, mask: MaskSpec) -> ComplexImage:
    """Zero every column the mask drops. Idempotent (a projection)."""
    if k.width != mask.width:
        raise ValueError(f"k-space width {k.width} != mask width {mask.width}")
    row = mask.as_row()
    return ComplexImage(k.re * row, k.im * row)


def acquire(reference, mask: MaskSpec, noise_sigma: float = 0.0, rng=None) -> Tensor:
    """Simulate undersampled acquisition and return the zero-filled image.

    Accepts a 2D reference as a Tensor or array; returns the magnitude of
    the inverse transform of the masked (optionally noisy) spectrum.
    """
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    if ref.ndim != 2:
        raise ValueError(f"reference must be 2D, got shape {ref.shape}")
    if ref.shape[1] != mask.width:
        raise ValueError(
            f"reference width {ref.shape[1]} != mask width {mask.width}"
        )
    k = fft2(ComplexImage.from_real(ref))
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        k.re += rng.normal(0.0, noise_sigma, size=k.re.shape)
        k.im += rng.normal(0.0, noise_sigma, size=k.im.shape)
    return Tensor(ifft2(apply_mask(k, mask)).magnitude())


@dataclass
class KSpaceSample:
    """One training pair: zero-filled input, fully-sampled reference."""

    input: Tensor
    reference: Tensor
    mask: MaskSpec
    site_id: str

    def __post_init__(self):
        if self.input.data.shape != self.reference.data.shape:
            raise ValueError(
                f"input shape {self.input.data.shape} != reference shape "
                f"{self.reference.data.shape}"
            )
