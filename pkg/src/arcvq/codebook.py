"""Codebook state: initialization, the growing norm ball, usage and geometry.

The norm bound at optimizer step ``t`` is ``M(t) = exp(alpha * t)``; after each
update every entry whose norm exceeds ``M(t)`` is pulled back onto the sphere
of that radius.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .errors import ConfigError, ContractError, CorruptStateError

BOUND_MODES = ("exponential", "fixed-one", "unbounded")


@dataclass
class Codebook:
    entries: np.ndarray
    alpha: float = 3e-4
    step: int = 0
    bound_mode: str = "exponential"
    usage_counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.bound_mode not in BOUND_MODES:
            raise ConfigError(f"unknown bound mode {self.bound_mode!r}")
        if self.entries.ndim != 2:
            raise ConfigError(f"codebook entries must be K x d, got dims {list(self.entries.shape)}")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.K, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def bound(self) -> float:
        return norm_bound(self.step, self.alpha, self.bound_mode)

    def reset_usage(self) -> None:
        self.usage_counts = np.zeros(self.K, dtype=np.int64)

    def record_usage(self, indices: np.ndarray) -> None:
        self.usage_counts += np.bincount(indices, minlength=self.K)

    def copy(self) -> "Codebook":
        return Codebook(self.entries.copy(), self.alpha, self.step, self.bound_mode, self.usage_counts.copy())


def init_codebook(
    K: int,
    d: int,
    seed: int,
    alpha: float = 3e-4,
    bound_mode: str = "exponential",
    normalize: bool = True,
    dtype=np.float64,
) -> Codebook:
    """Draw K rows uniformly from (-1, 1)^d and, by default, project them onto the unit sphere.

    ``normalize=False`` gives the plain uniform initialization used by the
    unconstrained baseline.
    """
    if K < 1:
        raise ConfigError(f"codebook size must be >= 1, got {K}")
    if d < 2:
        raise ConfigError(f"embedding dim must be >= 2, got {d}")
    rng = np.random.default_rng(seed)
    entries = rng.uniform(-1.0, 1.0, size=(K, d))
    norms = np.linalg.norm(entries, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        entries[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), d))
        norms = np.linalg.norm(entries, axis=1)
    if normalize:
        entries = entries / norms[:, None]
    return Codebook(entries.astype(dtype), alpha, 0, bound_mode)


def norm_bound(t: int, alpha: float, mode: str = "exponential") -> float:
    if t < 0:
        raise ContractError(f"norm_bound: step must be >= 0, got {t}")
    if alpha < 0:
        raise ContractError(f"norm_bound: alpha must be >= 0, got {alpha}")
    if mode == "exponential":
        return math.exp(alpha * t)
    if mode == "fixed-one":
        return 1.0
    if mode == "unbounded":
        return math.inf
    raise ConfigError(f"unknown bound mode {mode!r}")


def apply_bound(cb: Codebook) -> int:
    """Rescale rows lying outside the current ball onto its surface, in place.

    Returns the number of rows that were rescaled.  Zero rows stay zero.
    """
    if not np.all(np.isfinite(cb.entries)):
        raise CorruptStateError(f"codebook holds non-finite entries at step {cb.step}")
    radius = cb.bound
    if math.isinf(radius):
        return 0
    norms = np.linalg.norm(cb.entries, axis=1)
    over = norms > radius
    if np.any(over):
        cb.entries[over] = cb.entries[over] / norms[over, None] * radius
    return int(over.sum())


@dataclass
class CodebookStats:
    norms: np.ndarray
    pairwise: np.ndarray
    usage_fraction: float
    perplexity: float
    zero_rows: int = 0


def pairwise_distances(entries: np.ndarray) -> np.ndarray:
    return np.sqrt(_sq_dists(entries, entries))


def usage_perplexity(counts: np.ndarray) -> tuple[float, float]:
    """Fraction of used entries and exp(entropy) of the selection distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    fraction = float(np.count_nonzero(counts) / counts.size)
    if total <= 0:
        return fraction, 1.0
    p = counts[counts > 0] / total
    return fraction, float(np.exp(-(p * np.log(p)).sum()))


def compute_stats(cb: Codebook) -> CodebookStats:
    entries = np.asarray(cb.entries, dtype=np.float64)
    norms = np.linalg.norm(entries, axis=1)
    fraction, ppl = usage_perplexity(cb.usage_counts)
    return CodebookStats(norms, pairwise_distances(entries), fraction, ppl, int(np.count_nonzero(norms == 0)))


def _sq_dists(points: np.ndarray, centers: np.ndarray, chunk: int = 64) -> np.ndarray:
    # direct differences, not the |a|^2 - 2ab + |b|^2 expansion: exact zeros on the diagonal
    out = np.empty((points.shape[0], centers.shape[0]))
    for lo in range(0, points.shape[0], chunk):
        diff = points[lo : lo + chunk, None, :] - centers[None, :, :]
        out[lo : lo + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def kmeans_reduce(cb: Codebook, K_target: int, iters: int = 50, seed: int = 0) -> Codebook:
    """Cluster the codebook rows into ``K_target`` centroids with Lloyd's algorithm.

    Seeds are picked by farthest-point traversal from a random first row and
    kept in ascending row order, so ``K_target == K`` with ``iters=0`` returns
    the original rows unchanged.
    """
    if not 1 <= K_target <= cb.K:
        raise ConfigError(f"k-means target must lie in [1, {cb.K}], got {K_target}")
    points = np.asarray(cb.entries, dtype=np.float64)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(cb.K))]
    nearest = _sq_dists(points, points[chosen]).min(axis=1)
    while len(chosen) < K_target:
        nxt = int(np.argmax(nearest))
        if nearest[nxt] == 0.0:
            # fewer distinct points than clusters: take unused rows in order
            unused = np.setdiff1d(np.arange(cb.K), chosen)
            chosen.extend(int(i) for i in unused[: K_target - len(chosen)])
            break
        chosen.append(nxt)
        nearest = np.minimum(nearest, _sq_dists(points, points[[nxt]])[:, 0])
    centers = points[np.sort(chosen)].copy()

    for _ in range(iters):
        dist = _sq_dists(points, centers)
        assign = np.argmin(dist, axis=1)  # lowest index wins ties
        own = dist[np.arange(cb.K), assign]
        new = centers.copy()
        taken = np.zeros(cb.K, dtype=bool)
        for c in range(K_target):
            members = assign == c
            if np.any(members):
                new[c] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(np.where(taken, -1.0, own)))
                taken[far] = True
                new[c] = points[far]
        if np.array_equal(new, centers):
            break
        centers = new
    return Codebook(centers.astype(cb.entries.dtype), cb.alpha, cb.step, cb.bound_mode)


def export_stats(stats: CodebookStats, counts: np.ndarray, out_dir: str) -> dict:
    """Write norms.csv, pairwise.csv, usage.csv and pairwise.pgm; return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in ("norms.csv", "pairwise.csv", "usage.csv", "pairwise.pgm")}
    with open(paths["norms.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "norm"])
        for i, v in enumerate(stats.norms):
            w.writerow([i, repr(float(v))])
    with open(paths["pairwise.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        for row in stats.pairwise:
            w.writerow([repr(float(v)) for v in row])
    with open(paths["usage.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "count"])
        for i, c in enumerate(counts):
            w.writerow([i, int(c)])
    pnm.write_pgm(paths["pairwise.pgm"], pnm.minmax_scale(stats.pairwise))
    return paths
