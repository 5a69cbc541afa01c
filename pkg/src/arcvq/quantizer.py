"""Token-to-codebook assignment (Euclidean and spherical) and neighbor sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .codebook import Codebook
from .errors import ConfigError, ContractError, ShapeError

MODES = ("euclidean", "spherical")


@dataclass
class QuantizationResult:
    indices: np.ndarray
    quantized: np.ndarray
    cos_table: Optional[np.ndarray]
    mode: str


@dataclass
class NeighborSets:
    """For each codebook entry j, the token indices closest to it in angle.

    ``members[j]`` is sorted by descending cosine, ties by ascending token.
    """

    members: np.ndarray  # K x min(k, N), int64
    n_tokens: int

    def mask(self) -> np.ndarray:
        """Boolean N x K table, True where token i is a positive for entry j."""
        out = np.zeros((self.n_tokens, self.members.shape[0]), dtype=bool)
        out[self.members, np.arange(self.members.shape[0])[:, None]] = True
        return out


def normalize_rows(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norms, eps)


def cosine_table(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """N x K cosines between normalized tokens and normalized entries, clipped to [-1, 1]."""
    return np.clip(normalize_rows(z) @ normalize_rows(entries).T, -1.0, 1.0)


def _nearest_euclidean(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    e_sq = np.einsum("ij,ij->i", e, e)
    z_sq = np.einsum("ij,ij->i", z, z)
    scores = e_sq[None, :] - 2.0 * (z @ e.T)
    idx = np.argmin(scores, axis=1)
    if e.shape[0] == 1:
        return idx
    # The expansion loses digits to cancellation; settle near-ties with exact distances.
    best = scores[np.arange(len(idx)), idx]
    tol = 1e-9 * (z_sq + e_sq.max() + 1.0)
    near = scores <= (best + tol)[:, None]
    for i in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[i])
        diff = e[cand] - z[i]
        idx[i] = cand[np.argmin(np.einsum("ij,ij->i", diff, diff))]
    return idx


def quantize(
    z: np.ndarray,
    cb: Codebook,
    mode: str = "spherical",
    record_usage: bool = False,
) -> QuantizationResult:
    """Assign each row of ``z`` to a codebook entry.

    Euclidean mode picks the nearest entry; spherical mode picks the entry with
    the largest cosine.  Either way the returned quantized rows are the raw,
    unnormalized entries, and ties go to the lowest index.
    """
    z = np.asarray(z)
    if mode not in MODES:
        raise ConfigError(f"unknown quantization mode {mode!r}")
    if cb.K == 0:
        raise ConfigError("empty codebook")
    if z.ndim != 2 or z.shape[1] != cb.d:
        raise ShapeError(f"quantize: tokens of dims {list(z.shape)} do not match codebook dim {cb.d}")
    if z.shape[0] < 1:
        raise ContractError("quantize: need at least one token")
    cos = None
    if mode == "spherical":
        cos = cosine_table(z, cb.entries)
        idx = np.argmax(cos, axis=1)
    else:
        idx = _nearest_euclidean(z, cb.entries)
    if record_usage:
        cb.record_usage(idx)
    return QuantizationResult(idx.astype(np.int64), cb.entries[idx], cos, mode)


def angles(cos_table: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    if not 0 < eps <= 1e-3:
        raise ContractError(f"angles: eps must lie in (0, 1e-3], got {eps}")
    return np.arccos(np.clip(cos_table, -1.0 + eps, 1.0 - eps))


def top_k_sets(cos_table: np.ndarray, k: int) -> NeighborSets:
    if k < 1:
        raise ContractError(f"top_k_sets: k must be >= 1, got {k}")
    cos_table = np.ascontiguousarray(cos_table, dtype=np.float64)
    return NeighborSets(kernels.topk_columns(cos_table, k), cos_table.shape[0])
