"""Reconstruction quality metrics (MSE, PSNR, SSIM) and batch alignment.

PSNR uses peak 1.0 (pixels live in [0,1]); mse=0 maps to float('inf'),
serialized as "inf". SSIM follows the standard 11x11 Gaussian window with
sigma 1.5, C1=(0.01*peak)^2, C2=(0.03*peak)^2, computed over valid window
positions per channel and averaged.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeMismatchError

_WINDOW = 11
_SIGMA = 1.5


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(reconstructed, reference) -> float:
    a = np.asarray(reconstructed, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(reconstructed, reference, peak: float = 1.0) -> float:
    err = mse(reconstructed, reference)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def _gaussian_kernel() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    xs = np.arange(_WINDOW) - half
    k = np.exp(-(xs**2) / (2.0 * _SIGMA**2))
    return k / k.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of one (H, W) plane."""
    n = kernel.size
    h, w = plane.shape
    out = np.zeros((h - n + 1, w))
    for i in range(n):
        out += kernel[i] * plane[i : i + h - n + 1]
    final = np.zeros((h - n + 1, w - n + 1))
    for j in range(n):
        final += kernel[j] * out[:, j : j + w - n + 1]
    return final


def _ssim_plane(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    if min(x.shape) < _WINDOW:
        warnings.warn(
            f"image {x.shape} smaller than the {_WINDOW}x{_WINDOW} window; "
            "falling back to one global window"
        )
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return float(
            ((2 * mx * my + c1) * (2 * cov + c2))
            / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        )
    k = _gaussian_kernel()
    mx = _filter_valid(x, k)
    my = _filter_valid(y, k)
    mxx = _filter_valid(x * x, k)
    myy = _filter_valid(y * y, k)
    mxy = _filter_valid(x * y, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(reconstructed, reference, peak: float = 1.0) -> float:
    a = np.asarray(reconstructed, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    return float(np.mean([_ssim_plane(a[ch], b[ch], c1, c2) for ch in range(a.shape[0])]))


def _pairwise_mse(recon: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """cost[i, j] = mse(recon[j], truth[i])."""
    r = recon.reshape(recon.shape[0], -1)
    t = truth.reshape(truth.shape[0], -1)
    diff = t[:, None, :] - r[None, :, :]
    return np.mean(diff * diff, axis=2)


def align_batches(recon, truth, recon_labels, truth_labels) -> np.ndarray:
    """MSE-minimizing assignment within label groups.

    Returns `perm` with truth[i] matched to recon[perm[i]]. Reconstruction
    order inside equal labels is not identifiable, so scoring uses this
    alignment. Mismatched label multisets fall back to one global assignment.
    """
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    recon_labels = np.asarray(recon_labels)
    truth_labels = np.asarray(truth_labels)
    if recon.shape != truth.shape:
        raise ShapeMismatchError(f"batch shapes differ: {recon.shape} vs {truth.shape}")
    n = recon.shape[0]
    perm = np.full(n, -1, dtype=np.int64)
    if sorted(recon_labels.tolist()) != sorted(truth_labels.tolist()):
        warnings.warn("label multisets differ; aligning globally instead")
        cost = _pairwise_mse(recon, truth)
        rows, cols = linear_sum_assignment(cost)
        perm[rows] = cols
        return perm
    for label in np.unique(truth_labels):
        t_idx = np.flatnonzero(truth_labels == label)
        r_idx = np.flatnonzero(recon_labels == label)
        cost = _pairwise_mse(recon[r_idx], truth[t_idx])
        rows, cols = linear_sum_assignment(cost)
        perm[t_idx[rows]] = r_idx[cols]
    return perm


def score_batch(recon, truth, recon_labels, truth_labels) -> list:
    """Aligned per-image (mse, psnr, ssim) rows, in truth order."""
    perm = align_batches(recon, truth, recon_labels, truth_labels)
    rows = []
    for i, j in enumerate(perm):
        rows.append(
            {
                "index": i,
                "mse": mse(recon[j], truth[i]),
                "psnr": psnr(recon[j], truth[i]),
                "ssim": ssim(recon[j], truth[i]),
            }
        )
    return rows
