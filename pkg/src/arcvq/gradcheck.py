"""Finite-difference verification suites for the autodiff core, ArcLoss and the full pipeline.

Each suite returns a list of :class:`CheckResult`; ``run_suites`` is what the
``gradcheck`` CLI command prints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .codebook import Codebook
from .losses import arc_loss
from .model import PARAM_NAMES, PatchAutoencoder
from .quantizer import NeighborSets, cosine_table, quantize, top_k_sets

OPS_TOL = 1e-6
ARC_TOL = 1e-4
PIPELINE_TOL = 1e-5
ARC_GRID = [(s, m, k) for s in (5.0, 10.0, 20.0) for m in (0.1, 0.5, 1.0) for k in (1, 3, 8)]
SUITES = ("ops", "arcloss", "pipeline")

LD = np.longdouble


@dataclass
class CheckResult:
    suite: str
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _weighted(node: tc.Node, w: np.ndarray) -> tc.Node:
    # random-sign weights of magnitude in [0.5, 1.5] keep every output coordinate in play
    return tc.sum(tc.mul(node, tc.const(w.astype(node.value.dtype))))


def _weights(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _away_from(rng, shape, kinks, gap=0.1, lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.sign(x[near] - k + 1e-300) * gap
    return x


def op_cases(seed: int = 0):
    """(name, builder, inputs) triples covering every differentiable primitive."""
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-2.0, 2.0, size=shape)  # noqa: E731
    w34, w32, w4, w3, w12 = _weights(rng, (3, 4)), _weights(rng, (3, 2)), _weights(rng, (4,)), _weights(rng, (3,)), _weights(rng, (12,))
    w43 = _weights(rng, (4, 3))
    cases = [
        ("add", lambda n: _weighted(tc.add(n[0], n[1]), w34), [u(3, 4), u(3, 4)]),
        ("sub", lambda n: _weighted(tc.sub(n[0], n[1]), w34), [u(3, 4), u(3, 4)]),
        ("mul", lambda n: _weighted(tc.mul(n[0], n[1]), w34), [u(3, 4), u(3, 4)]),
        ("scale", lambda n: _weighted(tc.scale(n[0], -1.7), w34), [u(3, 4)]),
        ("matmul", lambda n: _weighted(tc.matmul(n[0], n[1]), w32), [u(3, 4), u(4, 2)]),
        ("add_bias", lambda n: _weighted(tc.add_bias(n[0], n[1]), w34), [u(3, 4), u(4)]),
        ("relu", lambda n: _weighted(tc.relu(n[0]), w34), [_away_from(rng, (3, 4), [0.0])]),
        ("tanh", lambda n: _weighted(tc.tanh(n[0]), w34), [u(3, 4)]),
        ("square", lambda n: _weighted(tc.square(n[0]), w34), [u(3, 4)]),
        ("sqrt", lambda n: _weighted(tc.sqrt(n[0]), w34), [rng.uniform(0.2, 2.0, size=(3, 4))]),
        ("clamp", lambda n: _weighted(tc.clamp(n[0], -1.0, 1.0), w34), [_away_from(rng, (3, 4), [-1.0, 1.0])]),
        ("reshape", lambda n: _weighted(tc.reshape(n[0], (12,)), w12), [u(3, 4)]),
        ("transpose", lambda n: _weighted(tc.transpose(n[0]), w43), [u(3, 4)]),
        ("sum", lambda n: tc.sum(tc.square(n[0])), [u(3, 4)]),
        ("sum_axis0", lambda n: _weighted(tc.sum(n[0], axis=0), w4), [u(3, 4)]),
        ("mean", lambda n: tc.mean(tc.square(n[0])), [u(3, 4)]),
        ("mean_axis1", lambda n: _weighted(tc.mean(n[0], axis=1), w3), [u(3, 4)]),
        ("logsumexp", lambda n: _weighted(tc.logsumexp(n[0]), w3), [u(3, 4)]),
        ("logsumexp_1d", lambda n: tc.logsumexp(n[0]), [u(5)]),
        ("gather_rows", lambda n: _weighted(tc.gather_rows(n[0], np.array([2, 0, 2])), w34), [u(4, 4)]),
        ("fan_out", lambda n: _weighted(tc.mul(tc.add(n[0], n[0]), tc.tanh(n[0])), w34), [u(3, 4)]),
    ]
    return cases


def run_ops(seed: int = 0) -> list:
    results = []
    for name, f, inputs in op_cases(seed):
        rep = tc.grad_check(f, inputs, eps=1e-6, tol=OPS_TOL, numeric_dtype=LD)
        results.append(CheckResult("ops", name, rep.max_rel_err, OPS_TOL))

    # stop-gradient and straight-through cannot be probed by perturbing their
    # input (that is their point); check them against the frozen surrogate.
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-2.0, 2.0, size=(3, 4))
    frozen = x.copy()
    rep = tc.grad_check(
        lambda n: tc.sum(tc.mul(tc.detach(n[0]), n[0])),
        [x],
        tol=OPS_TOL,
        numeric_f=lambda a: np.sum(frozen.astype(LD) * a[0]),
        numeric_dtype=LD,
    )
    results.append(CheckResult("ops", "detach", rep.max_rel_err, OPS_TOL))

    q = rng.uniform(-2.0, 2.0, size=(3, 4))
    w = _weights(rng, (3, 4))
    offset = q - x
    rep = tc.grad_check(
        lambda n: _weighted(tc.tanh(tc.quantize_ste(n[0], n[0].value + offset)), w),
        [x],
        tol=OPS_TOL,
        numeric_dtype=LD,
    )
    results.append(CheckResult("ops", "quantize_ste", rep.max_rel_err, OPS_TOL))
    return results


def arc_loss_reference(z, entries, members, s, m, eps=1e-7, dtype=LD) -> float:
    """ArcLoss evaluated directly from angles in extended precision.

    Independent of the fused kernel: takes arccos, adds the margin, and sums
    the positive and negative exponentials explicitly per codebook entry.
    """
    z = np.asarray(z, dtype=dtype)
    e = np.asarray(entries, dtype=dtype)
    zh = z / np.sqrt((z * z).sum(axis=1, keepdims=True))
    eh = e / np.sqrt((e * e).sum(axis=1, keepdims=True))
    c = np.clip(zh @ eh.T, dtype(-1) + dtype(eps), dtype(1) - dtype(eps))
    theta = np.arccos(c)
    n, n_cols = c.shape
    total = dtype(0)
    for j in range(n_cols):
        is_pos = np.zeros(n, dtype=bool)
        is_pos[members[j]] = True
        pos_logits = s * np.cos(theta[is_pos, j] + dtype(m))
        neg_logits = s * c[~is_pos, j]
        top = max(pos_logits.max(), neg_logits.max() if neg_logits.size else pos_logits.max())
        pos_sum = np.exp(pos_logits - top).sum()
        neg_sum = np.exp(neg_logits - top).sum()
        total += -np.log(pos_sum / (pos_sum + neg_sum))
    return total / n_cols


def run_arcloss(seed: int = 0, n_configs: int = 100, N: int = 12, K: int = 4, d: int = 5) -> list:
    rng = np.random.default_rng(seed)
    worst_by_cfg: dict = {}
    for trial in range(n_configs):
        s, m, k = ARC_GRID[trial % len(ARC_GRID)]
        z = rng.normal(size=(N, d))
        e = rng.normal(size=(K, d))
        sets = top_k_sets(cosine_table(z, e), k)
        rep = tc.grad_check(
            lambda n: arc_loss(n[0], e, sets, s, m),
            [z],
            eps=1e-6,
            tol=ARC_TOL,
            numeric_f=lambda a: arc_loss_reference(a[0], e, sets.members, s, m),
            numeric_dtype=LD,
        )
        key = (s, m, k)
        worst_by_cfg[key] = max(worst_by_cfg.get(key, 0.0), rep.max_rel_err)
    return [CheckResult("arcloss", f"s={s:g} m={m:g} k={k}", err, ARC_TOL) for (s, m, k), err in sorted(worst_by_cfg.items())]


def run_pipeline(seed: int = 0, n_instances: int = 3) -> list:
    """mean((x - decode(ste(encode(x))))^2) w.r.t. every encoder/decoder parameter."""
    results = []
    for inst in range(n_instances):
        rng = np.random.default_rng(seed + inst)
        model = PatchAutoencoder(side=8, patch=4, d=3, hidden=5, seed=seed + inst)
        x = rng.uniform(0.0, 1.0, size=(2, 8, 8))
        cb = Codebook(rng.normal(size=(4, 3)), bound_mode="unbounded")
        z0 = model.encode_array(x)
        q = quantize(z0, cb, "spherical" if inst % 2 else "euclidean").quantized
        # the quantized value is held at z + (q - z0): equal to q at the base point,
        # and its derivative in z is exactly the straight-through identity
        offset = q - z0

        def f(nodes):
            params = dict(zip(PARAM_NAMES, nodes))
            z = model.encode(x, params)
            x_hat = model.decode(tc.quantize_ste(z, z.value + offset.astype(z.value.dtype)), params)
            return tc.mean(tc.square(tc.sub(tc.const(x.astype(x_hat.value.dtype)), x_hat)))

        rep = tc.grad_check(f, [model.params[n] for n in PARAM_NAMES], eps=1e-6, tol=PIPELINE_TOL, numeric_dtype=LD)
        for name, err in zip(PARAM_NAMES, rep.per_input):
            results.append(CheckResult("pipeline", f"instance{inst}/{name}", err, PIPELINE_TOL))
    return results


def run_suites(which: str = "all", seed: int = 0) -> tuple[list, float]:
    """Run the named suite (or all); returns (results, elapsed seconds)."""
    runners = {"ops": run_ops, "arcloss": run_arcloss, "pipeline": run_pipeline}
    names = SUITES if which == "all" else (which,)
    start = time.perf_counter()
    results = []
    for name in names:
        results.extend(runners[name](seed))
    return results, time.perf_counter() - start


def format_table(results: list) -> str:
    width = max([len(r.suite) + len(r.name) + 1 for r in results] + [10])
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.suite + '/' + r.name:<{width}}  {r.max_rel_err:12.3e}  {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
