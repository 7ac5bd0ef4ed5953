"""
Metrics Service - image-quality and edit metrics, plus training metric logs.

All metric functions are pure.
"""
import logging
import os
from typing import Optional

import numpy as np
import pandas as pd

from field_engine.scene import MaskImage

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def masked_psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray) -> float:
    """PSNR over the pixels where `region` is set."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "masked_psnr")
    region = np.asarray(region, dtype=bool)
    _check_same_shape(a[..., 0], region, "masked_psnr region")
    if not region.any():
        raise ValueError("masked_psnr: empty region")
    return psnr(a[region], b[region])


def leakage(alpha: np.ndarray, gt_mask: MaskImage) -> float:
    """Mean opacity over the pixels the ground-truth mask marks as background."""
    alpha = np.asarray(alpha, dtype=np.float64)
    _check_same_shape(alpha, gt_mask.data, "leakage")
    outside = gt_mask.data == 0
    if not outside.any():
        raise ValueError("no background pixels")
    return float(alpha[outside].mean())


def mask_iou(a: MaskImage, b: MaskImage) -> float:
    _check_same_shape(a.data, b.data, "mask_iou")
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.data, b.data).sum() / union)


def temporal_consistency(frames: list) -> float:
    """Mean PSNR between consecutive frames of a render sequence."""
    if len(frames) < 2:
        raise ValueError("temporal consistency needs at least two frames")
    return float(np.mean([psnr(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]))


def mean_masked_color(rgb: np.ndarray, mask: np.ndarray) -> Optional[np.ndarray]:
    """Mean rgb over pixels where `mask` (binary or alpha) is set; weighted by alpha."""
    weights = np.asarray(mask, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        return None
    return np.einsum("hw,hwc->c", weights, np.asarray(rgb, dtype=np.float64)) / total


def edit_alignment(renders: list, alphas: list, target) -> float:
    """Max per-channel distance between the mean rendered object colour and `target`."""
    target = np.asarray(target, dtype=np.float64)
    colors = [mean_masked_color(rgb, alpha) for rgb, alpha in zip(renders, alphas)]
    colors = [c for c in colors if c is not None]
    if not colors:
        raise ValueError("no object pixels in any render")
    return float(np.max(np.abs(np.mean(colors, axis=0) - target)))


# ---------------------------------------------------------------- metrics logs

def write_metrics_log(path: str, records: list, header: Optional[str] = None) -> None:
    """CSV of (iteration, loss, psnr[, depth_error]) records, with an optional '# ...' header line."""
    frame = pd.DataFrame(records)
    if "depth_error" in frame and frame["depth_error"].isna().all():
        frame = frame.drop(columns="depth_error")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {len(frame)} metric records to {path}")


def read_metrics_log(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_log_header(path: str) -> Optional[str]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    return first[2:] if first.startswith("# ") else None
