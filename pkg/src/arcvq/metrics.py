"""Reconstruction metrics (l1, PSNR, SSIM) and PCA latent-map rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import pnm
from .errors import ContractError, ShapeError

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WIN = 11
SSIM_SIGMA = 1.5


@dataclass
class EvalReport:
    l1: float
    psnr: float
    ssim: float
    usage_fraction: float
    perplexity: float
    n_images: int = 0
    ssim_global: bool = False
    psnr_capped: int = 0

    def line(self) -> str:
        note = " (global-window ssim)" if self.ssim_global else ""
        return (
            f"l1={self.l1:.6f} psnr={self.psnr:.4f}dB ssim={self.ssim:.6f} "
            f"usage={100 * self.usage_fraction:.2f}% perplexity={self.perplexity:.2f} images={self.n_images}{note}"
        )


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image dims {list(x.shape)} and {list(y.shape)} do not match")
    return x, y


def psnr(x, x_hat, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give the 100 dB cap."""
    x, x_hat = _check_pair(x, x_hat)
    if peak <= 0:
        raise ContractError("psnr: peak must be positive")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def psnr_batch(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Per-image PSNR over the leading axis."""
    x, x_hat = _check_pair(x, x_hat)
    mse = ((x - x_hat) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak * peak / mse)
    return np.minimum(np.where(mse == 0.0, PSNR_CAP, out), PSNR_CAP)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    n = w.size
    rows = np.lib.stride_tricks.sliding_window_view(a, n, axis=-2) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=-1) @ w


def _ssim_terms(mx, my, sxx, syy, sxy):
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim_batch(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean SSIM per image for B x H x W stacks with values in [0, 1].

    Uses an 11x11 Gaussian window (sigma 1.5) over valid positions.  Images
    smaller than the window fall back to a single window spanning the image.
    """
    x, y = _check_pair(x, y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < SSIM_WIN:
        flat_x = x.reshape(x.shape[0], -1)
        flat_y = y.reshape(y.shape[0], -1)
        mx, my = flat_x.mean(1), flat_y.mean(1)
        sxx = flat_x.var(1)
        syy = flat_y.var(1)
        sxy = ((flat_x - mx[:, None]) * (flat_y - my[:, None])).mean(1)
        return _ssim_terms(mx, my, sxx, syy, sxy)
    w = gaussian_window()
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    return _ssim_terms(mx, my, sxx, syy, sxy).reshape(x.shape[0], -1).mean(axis=1)


def ssim(x, x_hat) -> float:
    x, x_hat = _check_pair(x, x_hat)
    if x.ndim != 2:
        raise ShapeError(f"ssim: expected a single H x W image, got dims {list(x.shape)}")
    return float(ssim_batch(x, x_hat)[0])


def ssim_uses_global(shape) -> bool:
    return min(shape[-2:]) < SSIM_WIN


def principal_components(rows: np.ndarray, n: int = 3, iters: int = 100, seed: int = 0):
    """Top-``n`` principal axes of ``rows`` by power iteration with deflation.

    Each axis is re-orthogonalized against the previous ones every iteration
    and sign-fixed so its largest-magnitude coordinate is positive.

    Returns:
      (components n' x d with n' = min(n, d), eigenvalue estimates).
    """
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / max(rows.shape[0], 1)
    d = cov.shape[0]
    rng = np.random.default_rng(seed)
    comps, eigs = [], []
    work = cov.copy()

    scale = max(float(np.abs(cov).max()), 1e-300)

    def orthogonalize(v):
        for _ in range(2):  # second pass mops up what the first leaves behind
            for c in comps:
                v = v - (v @ c) * c
        return v / np.linalg.norm(v)

    for _ in range(min(n, d)):
        v = orthogonalize(rng.normal(size=d))
        for _ in range(iters):
            u = work @ v
            if np.linalg.norm(u) <= 1e-12 * scale:  # remaining spectrum is roundoff; any orthogonal axis will do
                break
            v = orthogonalize(u)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        lam = float(v @ cov @ v)
        comps.append(v)
        eigs.append(lam)
        work = work - lam * np.outer(v, v)
    return np.array(comps), np.array(eigs)


def latent_map_rgb(indices: np.ndarray, entries: np.ndarray, grid: tuple, components: Optional[np.ndarray] = None) -> np.ndarray:
    """Color each token by the top-3 PCA coordinates of its assigned codebook row.

    PCA is fit on the whole codebook so colors mean the same thing across
    images; each channel is then min-max scaled over this image.
    """
    h, w = grid
    indices = np.asarray(indices)
    if indices.size != h * w:
        raise ShapeError(f"latent map: {indices.size} tokens do not fill a {h}x{w} grid")
    entries = np.asarray(entries, dtype=np.float64)
    if components is None:
        components, _ = principal_components(entries)
    coords = (entries[indices] - entries.mean(axis=0)) @ components.T
    out = np.zeros((h * w, 3))
    for c in range(coords.shape[1]):
        out[:, c] = pnm.minmax_scale(coords[:, c])
    return out.reshape(h, w, 3)
