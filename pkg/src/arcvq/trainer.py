"""Training loop, Adam, evaluation passes, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import codebook as cbm
from . import losses
from . import quantizer
from . import tensorcore as tc
from .data import Dataset, load_idx, synth_dataset
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged, TruncatedFileError
from .losses import LossBreakdown, LossConfig
from .metrics import EvalReport, psnr_batch, ssim_batch, ssim_uses_global
from .model import PARAM_NAMES, PatchAutoencoder

logger = logging.getLogger(__name__)

CSV_HEADER = ["step", "total", "recon", "codebook", "commit", "arc", "gamma", "M", "max_norm", "usage", "perplexity", "psnr", "ssim", "l1"]

# quantization mode, bound mode, spherical init
VARIANT_SETUP = {
    "vanilla": ("euclidean", "unbounded", False),
    "cosine-only": ("spherical", "unbounded", False),
    "bbnr-only": ("euclidean", "exponential", True),
    "fixed-bound": ("spherical", "fixed-one", True),
    "full": ("spherical", "exponential", True),
}

CONFIG_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    variant: str = "full"
    K: int = 512
    d: int = 64
    patch: int = 4
    hidden: int = 128
    batch_size: int = 256
    epochs: int = 10
    learning_rate: float = 3e-4
    alpha: float = 3e-4
    beta: float = 0.25
    s: float = 10.0
    m: float = 0.1
    k: int = 3
    gamma0: float = 1.0
    lam: float = 5e-4
    seed: int = 0
    data: str = "synth"
    train_images: str = ""
    val_images: str = ""
    n_train: int = 10000
    n_val: int = 10000
    side: int = 28
    clusters: int = 10
    data_seed: int = 1234
    out_dir: str = ""
    eval_every: int = 0
    precision: str = "double"
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANT_SETUP:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANT_SETUP)}")
        self.loss_config()
        positive = {"K": self.K, "patch": self.patch, "hidden": self.hidden, "batch_size": self.batch_size, "learning_rate": self.learning_rate, "side": self.side, "clusters": self.clusters, "threads": self.threads}
        for name, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{name} must be positive, got {val}")
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        if self.alpha < 0 or self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("alpha, epochs and eval_every must be non-negative")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if self.data not in ("synth", "idx"):
            raise ConfigError(f"data must be 'synth' or 'idx', got {self.data!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.beta, self.s, self.m, self.k, self.gamma0, self.lam, self.variant)

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def quant_mode(self) -> str:
        return VARIANT_SETUP[self.variant][0]

    @property
    def bound_mode(self) -> str:
        return VARIANT_SETUP[self.variant][1]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, text: str, kind):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    return text


_FIELD_TYPES = {"int": int, "float": float, "str": str}


def config_field_types() -> dict:
    return {f.name: _FIELD_TYPES.get(f.type if isinstance(f.type, str) else f.type.__name__, str) for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = config_field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = CONFIG_ALIASES.get(key, key)
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path: str, **overrides) -> TrainConfig:
    with open(path) as fh:
        values = parse_config_text(fh.read(), path)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place on ``params``."""
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"adam: shape mismatch for {name}")
    state.t += 1
    c1 = 1.0 - ADAM_B1**state.t
    c2 = 1.0 - ADAM_B2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = ADAM_B1 * state.m[name] + (1.0 - ADAM_B1) * g
        v = state.v[name] = ADAM_B2 * state.v[name] + (1.0 - ADAM_B2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype, copy=False)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: PatchAutoencoder
    codebook: cbm.Codebook
    adam: AdamState
    step: int = 0

    def parameters(self) -> dict:
        return {**self.model.params, "codebook": self.codebook.entries}


def init_state(cfg: TrainConfig) -> TrainState:
    mode, bound_mode, spherical_init = VARIANT_SETUP[cfg.variant]
    model = PatchAutoencoder(cfg.side, cfg.patch, cfg.d, cfg.hidden, seed=cfg.seed, dtype=cfg.dtype)
    cb = cbm.init_codebook(cfg.K, cfg.d, seed=cfg.seed + 1_000_003, alpha=cfg.alpha, bound_mode=bound_mode, normalize=spherical_init, dtype=cfg.dtype)
    return TrainState(cfg, model, cb, AdamState())


def _dump_divergence(state: TrainState, info: dict) -> Optional[str]:
    if not state.cfg.out_dir:
        return None
    os.makedirs(state.cfg.out_dir, exist_ok=True)
    path = os.path.join(state.cfg.out_dir, f"diverged-step{state.step}.json")
    with open(path, "w") as fh:
        json.dump(info, fh, indent=2, default=str)
    return path


def train_step(state: TrainState, batch: np.ndarray) -> LossBreakdown:
    """Forward, loss, backward, Adam update, ball projection, then t += 1."""
    cfg = state.cfg
    lcfg = cfg.loss_config()
    cb = state.codebook
    t = state.step
    batch = np.asarray(batch, dtype=cfg.dtype)

    nodes = state.model.param_nodes()
    z = state.model.encode(batch, nodes)
    qr = quantizer.quantize(z.value, cb, cfg.quant_mode)
    cb_node = tc.leaf(cb.entries)
    z_q_rows = tc.gather_rows(cb_node, qr.indices)
    x_hat = state.model.decode(tc.quantize_ste(z, z_q_rows.value), nodes)
    vq_total, vq_parts = losses.vq_loss(batch, x_hat, z, z_q_rows, lcfg.beta)

    arc = None
    if lcfg.uses_arc:
        sets = quantizer.top_k_sets(qr.cos_table, lcfg.k)
        arc = losses.arc_loss(z, cb.entries, sets, lcfg.s, lcfg.m)
    bounded = cb.bound_mode != "unbounded"
    M_t = cbm.norm_bound(t, cb.alpha, cb.bound_mode) if bounded else None
    total, breakdown = losses.total_loss(vq_total, vq_parts, arc, lcfg, t, M_t)

    scalars = [breakdown.total, breakdown.recon, breakdown.codebook_term, breakdown.commit_term]
    if breakdown.arc is not None:
        scalars.append(breakdown.arc)
    if not all(math.isfinite(v) for v in scalars):
        path = _dump_divergence(state, {"step": t, "breakdown": dataclasses.asdict(breakdown), "config": dataclasses.asdict(cfg)})
        raise TrainingDiverged(f"non-finite loss at step {t}: {breakdown}" + (f" (dump: {path})" if path else ""))

    tc.backward(total)
    grads = {name: nodes[name].grad for name in nodes}
    grads["codebook"] = cb_node.grad if cb_node.grad is not None else np.zeros_like(cb.entries)
    adam_update(state.parameters(), grads, state.adam, cfg.learning_rate)
    if bounded:
        cbm.apply_bound(cb)
    state.step = t + 1
    cb.step = state.step
    return breakdown


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.data == "synth":
        train = synth_dataset(cfg.n_train, cfg.side, cfg.clusters, seed=cfg.data_seed)
        val = synth_dataset(cfg.n_val, cfg.side, cfg.clusters, seed=cfg.data_seed + 1)
        return train, val
    if not cfg.train_images or not cfg.val_images:
        raise ConfigError("data = idx needs train_images and val_images paths")
    train, val = load_idx(cfg.train_images), load_idx(cfg.val_images)
    if cfg.n_train:
        train = Dataset(train.images[: cfg.n_train])
    if cfg.n_val:
        val = Dataset(val.images[: cfg.n_val])
    return train, val


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return -(-n_images // batch_size)


def batch_for_step(images: np.ndarray, cfg: TrainConfig, step: int) -> np.ndarray:
    """Deterministic batch for a global step: a fresh permutation per (seed, epoch)."""
    per = steps_per_epoch(images.shape[0], cfg.batch_size)
    epoch, offset = divmod(step, per)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(images.shape[0])
    return images[order[offset * cfg.batch_size : (offset + 1) * cfg.batch_size]]


def evaluate(model: PatchAutoencoder, cb: cbm.Codebook, images: np.ndarray, mode: str, batch_size: int = 500) -> EvalReport:
    """One full pass: usage counters are reset and accumulated over exactly this pass."""
    cb.reset_usage()
    images = np.asarray(images, dtype=np.float64)
    l1_sum, psnrs, ssims = 0.0, [], []
    for lo in range(0, images.shape[0], batch_size):
        x = images[lo : lo + batch_size]
        z = model.encode_array(x)
        qr = quantizer.quantize(z, cb, mode, record_usage=True)
        x_hat = np.asarray(model.decode_array(qr.quantized, clamp_output=True), dtype=np.float64)
        l1_sum += float(np.abs(x - x_hat).sum())
        psnrs.append(psnr_batch(x, x_hat))
        ssims.append(ssim_batch(x, x_hat))
    psnrs = np.concatenate(psnrs)
    fraction, ppl = cbm.usage_perplexity(cb.usage_counts)
    return EvalReport(
        l1=l1_sum / images.size,
        psnr=float(psnrs.mean()),
        ssim=float(np.concatenate(ssims).mean()),
        usage_fraction=fraction,
        perplexity=ppl,
        n_images=images.shape[0],
        ssim_global=ssim_uses_global(images.shape),
        psnr_capped=int(np.count_nonzero(psnrs >= 100.0)),
    )


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def loss_row(step: int, b: LossBreakdown, max_norm: float) -> list:
    return [str(step), _fmt(b.total), _fmt(b.recon), _fmt(b.codebook_term), _fmt(b.commit_term), _fmt(b.arc), _fmt(b.gamma_t), _fmt(b.M_t), _fmt(max_norm), "", "", "", "", ""]


def eval_row(step: int, r: EvalReport) -> list:
    return [str(step)] + [""] * 8 + [_fmt(r.usage_fraction), _fmt(r.perplexity), _fmt(r.psnr), _fmt(r.ssim), _fmt(r.l1)]


def append_csv(path: str, rows: list) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_HEADER)
        w.writerows(rows)


@dataclass
class TrainResult:
    state: TrainState
    report: EvalReport
    history: list


def train(
    cfg: TrainConfig,
    datasets: Optional[tuple] = None,
    on_step: Optional[Callable[[TrainState, LossBreakdown], None]] = None,
    max_steps: Optional[int] = None,
    state: Optional[TrainState] = None,
) -> TrainResult:
    """Run the configured number of epochs (or ``max_steps``) and a final evaluation.

    With ``cfg.out_dir`` set, writes ``metrics.csv``, one checkpoint per epoch
    and ``final.avqc``.
    """
    train_ds, val_ds = datasets if datasets is not None else load_datasets(cfg)
    state = state or init_state(cfg)
    per = steps_per_epoch(len(train_ds), cfg.batch_size)
    total_steps = per * cfg.epochs if max_steps is None else max_steps
    csv_path = os.path.join(cfg.out_dir, "metrics.csv") if cfg.out_dir else None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        if state.step == 0 and os.path.exists(csv_path):
            os.remove(csv_path)
    history, pending = [], []

    def flush():
        if csv_path and pending:
            append_csv(csv_path, pending)
        pending.clear()

    while state.step < total_steps:
        batch = batch_for_step(train_ds.images, cfg, state.step)
        b = train_step(state, batch)
        max_norm = float(np.linalg.norm(state.codebook.entries, axis=1).max())
        history.append((state.step - 1, b, max_norm))
        pending.append(loss_row(state.step - 1, b, max_norm))
        if on_step is not None:
            on_step(state, b)
        if cfg.eval_every and state.step % cfg.eval_every == 0 and state.step < total_steps:
            r = evaluate(state.model, state.codebook, val_ds.images, cfg.quant_mode)
            pending.append(eval_row(state.step, r))
            logger.info("step %d eval: %s", state.step, r.line())
        if cfg.out_dir and state.step % per == 0:
            flush()
            save_checkpoint(state, os.path.join(cfg.out_dir, f"epoch{state.step // per:03d}.avqc"))
    report = evaluate(state.model, state.codebook, val_ds.images, cfg.quant_mode)
    pending.append(eval_row(state.step, report))
    flush()
    if cfg.out_dir:
        save_checkpoint(state, os.path.join(cfg.out_dir, "final.avqc"))
    return TrainResult(state, report, history)


# --- checkpoint format -------------------------------------------------------
#
# magic "AVQC", u32 version, u32 tensor count, then per tensor:
#   u32 name length, name bytes (utf-8), u32 ndim, ndim x u64 dims,
#   little-endian f64 payload.
# All integers little-endian.  Config strings ride in tensor names
# ("config/<key>=<value>") with a single zero payload.

MAGIC = b"AVQC"
VERSION = 1


def write_tensors(path: str, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for a checkpoint header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = raw[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors


def state_tensors(state: TrainState) -> dict:
    out = {"state/step": [state.step], "state/adam_t": [state.adam.t]}
    for f in dataclasses.fields(TrainConfig):
        val = getattr(state.cfg, f.name)
        if isinstance(val, str):
            out[f"config/{f.name}={val}"] = [0.0]
        else:
            out[f"config/{f.name}"] = [val]
    for name, arr in state.model.params.items():
        out[f"param/{name}"] = arr
    out["codebook/entries"] = state.codebook.entries
    out["codebook/usage_counts"] = state.codebook.usage_counts
    for name in state.adam.m:
        out[f"adam/m/{name}"] = state.adam.m[name]
        out[f"adam/v/{name}"] = state.adam.v[name]
    return out


def save_checkpoint(state: TrainState, path: str) -> None:
    write_tensors(path, state_tensors(state))


def load_checkpoint(path: str) -> TrainState:
    """Rebuild a training state; the file is fully parsed before anything is constructed."""
    tensors = read_tensors(path)
    types = config_field_types()
    values = {}
    for name, arr in tensors.items():
        if not name.startswith("config/"):
            continue
        key = name[len("config/") :]
        if "=" in key:
            key, text = key.split("=", 1)
            values[key] = text
        else:
            values[key] = int(arr[0]) if types.get(key) is int else float(arr[0])
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise FormatError(f"{path}: config echo does not match this version: {exc}") from None
    needed = ["state/step", "codebook/entries"] + [f"param/{n}" for n in PARAM_NAMES]
    missing = [n for n in needed if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    state = init_state(cfg)
    dtype = cfg.dtype
    for name in state.model.params:
        state.model.params[name] = tensors[f"param/{name}"].astype(dtype)
    step = int(tensors["state/step"][0])
    entries = tensors["codebook/entries"].astype(dtype)
    counts = tensors.get("codebook/usage_counts", np.zeros(entries.shape[0])).astype(np.int64)
    state.codebook = cbm.Codebook(entries, cfg.alpha, step, cfg.bound_mode, counts)
    state.step = step
    state.adam = AdamState(t=int(tensors.get("state/adam_t", [0])[0]))
    for name in list(state.model.params) + ["codebook"]:
        if f"adam/m/{name}" in tensors:
            state.adam.m[name] = tensors[f"adam/m/{name}"].astype(dtype)
            state.adam.v[name] = tensors[f"adam/v/{name}"].astype(dtype)
    return state
