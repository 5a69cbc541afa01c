"""VQ objective, ArcLoss, loss-weight schedules and the combined objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from . import tensorcore as tc
from .errors import ConfigError, ContractError, ShapeError
from .quantizer import NeighborSets, normalize_rows

VARIANTS = ("vanilla", "cosine-only", "bbnr-only", "fixed-bound", "full")
ARC_VARIANTS = ("fixed-bound", "full")


@dataclass
class LossConfig:
    beta: float = 0.25
    s: float = 10.0
    m: float = 0.1
    k: int = 3
    gamma0: float = 1.0
    lam: float = 5e-4
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        checks = [
            ("beta", self.beta > 0),
            ("s", self.s > 0),
            ("m", self.m >= 0),
            ("k", self.k >= 1),
            ("gamma0", self.gamma0 >= 0),
            ("lambda", self.lam >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid {name}={getattr(self, 'lam' if name == 'lambda' else name)}")

    @property
    def uses_arc(self) -> bool:
        return self.variant in ARC_VARIANTS


@dataclass
class LossBreakdown:
    total: float
    recon: float
    codebook_term: float
    commit_term: float
    arc: Optional[float] = None
    gamma_t: Optional[float] = None
    M_t: Optional[float] = None
    arc_wraps: int = 0


def vq_loss(x: np.ndarray, x_hat: tc.Node, z_e: tc.Node, z_q_rows: tc.Node, beta: float):
    """Reconstruction + codebook + beta * commitment, each a mean over elements.

    ``z_q_rows`` should be a gather of the codebook parameter so that the
    codebook term reaches the codebook; ``z_e`` is the encoder output.

    Returns:
      (total node, dict of the three term nodes).
    """
    x = np.asarray(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"vq_loss: image dims {list(x.shape)} and {list(x_hat.shape)} do not match")
    if z_e.shape != z_q_rows.shape:
        raise ShapeError(f"vq_loss: token dims {list(z_e.shape)} and {list(z_q_rows.shape)} do not match")
    recon = tc.mean(tc.square(tc.sub(tc.const(x.astype(x_hat.value.dtype)), x_hat)))
    codebook_term = tc.mean(tc.square(tc.sub(z_q_rows, tc.detach(z_e))))
    commit_term = tc.mean(tc.square(tc.sub(tc.detach(z_q_rows), z_e)))
    total = tc.add(tc.add(recon, codebook_term), tc.scale(commit_term, beta))
    return total, {"recon": recon, "codebook": codebook_term, "commit": commit_term}


def arc_loss(
    z: tc.Node,
    cb_snapshot: np.ndarray,
    sets: NeighborSets,
    s: float,
    m: float,
    eps: float = 1e-7,
) -> tc.Node:
    """Additive angular margin contrast between codebook entries and tokens.

    For each entry j the top-k tokens in ``sets`` are positives with logits
    ``s*cos(theta+m)`` and every other token is a negative with logit
    ``s*cos(theta)``; the loss is the mean over entries of
    ``-log(sum_pos / (sum_pos + sum_neg))``.  The codebook is a constant here,
    so only ``z`` receives gradient, including the Jacobian of its row
    normalization.  The node carries the count of positive pairs with
    ``theta + m > pi`` in ``node.info["wraps"]``.
    """
    zv = z.value
    if zv.ndim != 2 or zv.shape[0] < 1:
        raise ContractError(f"arc_loss: need a non-empty N x d token matrix, got dims {list(zv.shape)}")
    cb = np.asarray(cb_snapshot, dtype=np.float64)
    if cb.ndim != 2 or cb.shape[1] != zv.shape[1]:
        raise ShapeError(f"arc_loss: codebook dims {list(cb.shape)} do not match tokens {list(zv.shape)}")
    if sets.n_tokens != zv.shape[0] or sets.members.shape[0] != cb.shape[0]:
        raise ContractError("arc_loss: neighbor sets were built for a different batch or codebook")

    z64 = np.asarray(zv, dtype=np.float64)
    norms = np.linalg.norm(z64, axis=1, keepdims=True)
    safe = np.maximum(norms, 1e-12)
    z_hat = z64 / safe
    e_hat = normalize_rows(cb)
    cos = np.clip(z_hat @ e_hat.T, -1.0, 1.0)
    col_loss, dcos, wraps = kernels.arc_columns(cos, sets.members, float(s), float(m), float(eps))
    value = np.array([col_loss.mean()], dtype=zv.dtype)

    def backward(g):
        g_hat = (dcos @ e_hat) * float(g[0])
        radial = np.einsum("ij,ij->i", z_hat, g_hat)[:, None]
        # tangent projection of the map z -> z/|z|; below eps the map is linear
        grad = np.where(norms > 1e-12, (g_hat - z_hat * radial) / safe, g_hat / safe)
        return (grad.astype(zv.dtype, copy=False),)

    node = tc.make_node(value, "arc_loss", (z,), backward)
    node.info["wraps"] = wraps
    return node


def gamma_schedule(t: int, gamma0: float, lam: float) -> float:
    if t < 0:
        raise ContractError(f"gamma_schedule: step must be >= 0, got {t}")
    return gamma0 * math.exp(-lam * t)


def total_loss(vq_total: tc.Node, vq_parts: dict, arc: Optional[tc.Node], cfg: LossConfig, t: int, M_t=None):
    """Combine the VQ objective with the decaying ArcLoss term for the configured variant."""
    if cfg.uses_arc and arc is None:
        raise ConfigError(f"variant {cfg.variant!r} needs the ArcLoss term")
    if not cfg.uses_arc and arc is not None:
        raise ConfigError(f"variant {cfg.variant!r} does not use the ArcLoss term")
    parts = {k: float(v.value[0]) for k, v in vq_parts.items()}
    if arc is None:
        total = vq_total
        breakdown = LossBreakdown(float(total.value[0]), parts["recon"], parts["codebook"], parts["commit"], M_t=M_t)
        return total, breakdown
    gamma_t = gamma_schedule(t, cfg.gamma0, cfg.lam)
    total = tc.add(vq_total, tc.scale(arc, gamma_t))
    breakdown = LossBreakdown(
        float(total.value[0]),
        parts["recon"],
        parts["codebook"],
        parts["commit"],
        arc=float(arc.value[0]),
        gamma_t=gamma_t,
        M_t=M_t,
        arc_wraps=arc.info.get("wraps", 0),
    )
    return total, breakdown
