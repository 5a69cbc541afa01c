"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module ``_ckernels`` must
match them (bit-for-bit for the integer and scatter kernels, to rounding
for the ArcLoss columns).
"""

import numpy as np


def scatter_add_rows(index, src, n_rows):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, index, src)
    return out


def topk_columns(cos, k):
    """Per column, the ``min(k, N)`` row indices with the largest value.

    Rows are ordered by descending value; equal values by ascending row.
    """
    n, n_cols = cos.shape
    kk = min(k, n)
    if kk == n:
        return np.argsort(-cos, axis=0, kind="stable")[:kk].T.copy()
    part = np.argpartition(-cos, kk - 1, axis=0)[:kk]
    vals = np.take_along_axis(cos, part, axis=0)
    thr = vals.min(axis=0)
    # argpartition picks arbitrarily among ties at the cut; redo those columns
    ambiguous = np.flatnonzero((cos >= thr).sum(axis=0) > kk)
    order = np.lexsort((part.T, -vals.T))
    out = np.take_along_axis(part.T, order, axis=1)
    for j in ambiguous:
        out[j] = np.argsort(-cos[:, j], kind="stable")[:kk]
    return out.astype(np.int64)


def arc_columns(cos, pos, s, m, eps):
    """Per-column ArcLoss values and the gradient of their mean w.r.t. ``cos``.

    Args:
      cos: N x K cosine table (already clipped to [-1, 1]).
      pos: K x kk positive token indices per column.
      s, m: logit scale and additive angular margin.
      eps: clamp keeping cosines inside (-1, 1).

    Returns:
      (column losses [K], d mean / d cos [N x K], number of positive pairs
      whose margin-shifted angle exceeds pi).
    """
    n, n_cols = cos.shape
    c = np.clip(cos, -1.0 + eps, 1.0 - eps)
    inside = (cos > -1.0 + eps) & (cos < 1.0 - eps)
    cols = np.broadcast_to(np.arange(n_cols)[:, None], pos.shape)
    cp = c[pos, cols]
    sp = np.sqrt(1.0 - cp * cp)
    cos_m, sin_m = np.cos(m), np.sin(m)
    bp = s * (cp * cos_m - sp * sin_m)

    mxp = bp.max(axis=1)
    lse_pos = mxp + np.log(np.exp(bp - mxp[:, None]).sum(axis=1))

    neg = s * c
    neg[pos, cols] = -np.inf
    mxn = neg.max(axis=0)
    shift = np.where(np.isfinite(mxn), mxn, 0.0)
    with np.errstate(divide="ignore"):
        lse_neg = shift + np.log(np.exp(neg - shift).sum(axis=0))
    # -log(P / (P + N)) = softplus(lse_neg - lse_pos), non-negative by construction
    gap = lse_neg - lse_pos
    loss = np.maximum(gap, 0.0) + np.log1p(np.exp(-np.abs(gap)))
    lse_all = lse_pos + loss

    dlogit = np.exp(neg - lse_all)
    dlogit[pos, cols] = np.exp(bp - lse_all[:, None]) - np.exp(bp - lse_pos[:, None])
    dlc = np.full_like(c, s)
    dlc[pos, cols] = s * (cos_m + sin_m * cp / sp)
    dcos = dlogit * dlc * inside / n_cols

    wraps = int(np.count_nonzero(np.arccos(cp) + m > np.pi))
    return loss, dcos, wraps
