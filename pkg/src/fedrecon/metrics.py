"""Image quality metrics (PSNR, Gaussian-window SSIM) and evaluation reports."""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .autodiff import ParamSet, Tensor
from .model import encoder_forward, reconstruct

__all__ = [
    "MetricsReport",
    "psnr",
    "ssim",
    "evaluate",
    "export_latents",
    "SSIM_WINDOW",
    "SSIM_SIGMA",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(img) -> np.ndarray:
    return img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)


def psnr(pred, ref, data_range: float) -> float:
    """10 log10(range^2 / MSE); +inf when the images are identical."""
    a, b = _as_array(pred), _as_array(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def ssim(pred, ref, data_range: float) -> float:
    """Mean structural similarity over all valid 11x11 window positions."""
    a, b = _as_array(pred), _as_array(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be 2D and at least {SSIM_WINDOW} px per side")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _windowed(a, w)
    mu_b = _windowed(b, w)
    var_a = _windowed(a * a, w) - mu_a * mu_a
    var_b = _windowed(b * b, w) - mu_b * mu_b
    cov = _windowed(a * b, w) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    strategy: str
    train_sites: List[str]
    test_site: str
    seed: int
    per_sample: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def mean_ssim(self) -> float:
        return sum(s for _, s, _ in self.per_sample) / len(self.per_sample)

    @property
    def mean_psnr(self) -> float:
        return sum(p for _, _, p in self.per_sample) / len(self.per_sample)

    def to_json(self) -> str:
        return json.dumps(
            {
                "strategy": self.strategy,
                "train_sites": self.train_sites,
                "test_site": self.test_site,
                "seed": self.seed,
                "mean_ssim": self.mean_ssim,
                "mean_psnr": self.mean_psnr,
                "per_sample": [
                    {"index": i, "ssim": s, "psnr": p} for i, s, p in self.per_sample
                ],
            },
            sort_keys=True,
        )


def data_range_of(ref: np.ndarray) -> float:
    dr = float(ref.max() - ref.min())
    return dr if dr > 0 else 1.0


def predict(params: ParamSet, sample) -> np.ndarray:
    """Reconstruct one sample (no gradients recorded)."""
    x = Tensor(sample.input.data[None, None, :, :])
    return reconstruct(params, x).data[0, 0]


def evaluate(params: ParamSet, test_set, *, strategy: str = "", train_sites=(),
             test_site: str = "", seed: int = 0) -> MetricsReport:
    """Reconstruct every test sample and score it against its reference."""
    if not test_set:
        raise ValueError("empty test set")
    frozen = params.detached()
    report = MetricsReport(strategy, list(train_sites), test_site, seed)
    for i, sample in enumerate(test_set):
        ref = sample.reference.data
        pred = predict(frozen, sample)
        dr = data_range_of(ref)
        report.per_sample.append((i, ssim(pred, ref, dr), psnr(pred, ref, dr)))
    return report


def zero_filled_report(test_set, **meta) -> MetricsReport:
    """Metrics of the raw undersampled inputs: the no-model floor."""
    if not test_set:
        raise ValueError("empty test set")
    report = MetricsReport(
        meta.get("strategy", "ZeroFilled"),
        list(meta.get("train_sites", ())),
        meta.get("test_site", ""),
        meta.get("seed", 0),
    )
    for i, sample in enumerate(test_set):
        ref = sample.reference.data
        dr = data_range_of(ref)
        x = sample.input.data
        report.per_sample.append((i, ssim(x, ref, dr), psnr(x, ref, dr)))
    return report


def export_latents(params: ParamSet, samples, path) -> None:
    """Write flattened bottleneck features, one labeled CSV row per sample."""
    frozen = params.detached()
    rows = []
    width = None
    for sample in samples:
        x = Tensor(sample.input.data[None, None, :, :])
        latent, _ = encoder_forward(frozen, x, origin_site=sample.site_id)
        flat = latent.features.data.reshape(-1)
        if width is None:
            width = flat.size
        rows.append((sample.site_id, flat))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id"] + [f"f{i}" for i in range(width or 0)])
        for site_id, flat in rows:
            writer.writerow([site_id] + [repr(v) for v in flat.tolist()])
