"""Evaluation metrics: NRMSE, PSNR, SSIM, I-SSIM, and the weighted risk."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .data import Volume

PSNR_CAP_DB = 100.0


def _as_stack(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.pixel_stack().astype(np.float64)
    arr = np.asarray(v, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def nrmse(pred, truth) -> float:
    """RMSE normalized by the intensity range of the ground truth."""
    p, t = _as_stack(pred), _as_stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    rng = t.max() - t.min()
    if rng == 0:
        raise ValueError("truth is constant; NRMSE normalization undefined")
    return float(np.sqrt(np.mean((p - t) ** 2)) / rng)


def psnr(pred, truth, max_val: float = 1.0, cap_db: float = PSNR_CAP_DB) -> float:
    p, t = _as_stack(pred), _as_stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0:
        return cap_db
    return min(float(10.0 * np.log10(max_val ** 2 / mse)), cap_db)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than window {window}")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, w, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def volume_ssim(pred, truth, **kw) -> float:
    p, t = _as_stack(pred), _as_stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean([ssim(pi, ti, **kw) for pi, ti in zip(p, t)]))


def issim(volume, **kw) -> float:
    """Mean SSIM between adjacent slices; a through-plane continuity proxy."""
    v = _as_stack(volume)
    if len(v) < 2:
        raise ValueError("issim requires at least 2 slices")
    return float(np.mean([ssim(v[i], v[i + 1], **kw) for i in range(len(v) - 1)]))


def weighted_risk(y_true: int, y_pred: int, w_fn: float, w_fp: float) -> float:
    """Asymmetric misclassification risk for binary pathology labels."""
    if y_true not in (0, 1) or y_pred not in (0, 1):
        raise ValueError("labels must be in {0, 1}")
    if w_fn < 0 or w_fp < 0:
        raise ValueError("weights must be >= 0")
    return w_fn * float(y_true == 1 and y_pred == 0) + \
        w_fp * float(y_true == 0 and y_pred == 1)


def mean_weighted_risk(y_true, y_pred, w_fn: float, w_fp: float) -> float:
    return float(np.mean([weighted_risk(t, p, w_fn, w_fp)
                          for t, p in zip(y_true, y_pred, strict=True)]))


@dataclass
class MetricsReport:
    nrmse: float
    psnr: float
    ssim: float
    issim: float
    per_slice_ssim: list[float] = field(default_factory=list)
    per_slice_psnr: list[float] = field(default_factory=list)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    def csv_row(self) -> dict:
        return {"nrmse": self.nrmse, "psnr": self.psnr,
                "ssim": self.ssim, "issim": self.issim}

    def append_csv(self, path, label: str = "") -> None:
        path = Path(path)
        row = {"label": label, **self.csv_row()}
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)


def evaluate_volumes(pred: Volume, truth: Volume) -> MetricsReport:
    p, t = _as_stack(pred), _as_stack(truth)
    per_ssim = [ssim(pi, ti) for pi, ti in zip(p, t, strict=True)]
    per_psnr = [psnr(pi, ti) for pi, ti in zip(p, t, strict=True)]
    return MetricsReport(
        nrmse=nrmse(pred, truth),
        psnr=psnr(pred, truth),
        ssim=float(np.mean(per_ssim)),
        issim=issim(pred),
        per_slice_ssim=per_ssim,
        per_slice_psnr=per_psnr,
    )
