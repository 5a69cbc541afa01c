"""Per-patch MLP autoencoder producing a token grid from grayscale images."""

from __future__ import annotations

import math

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ShapeError

PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """B x H x H images -> (B * (H/p)^2) x p^2 patches, batch-major then row-major."""
    b, h, w = x.shape
    g = h // p
    return x.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b * g * g, p * p)


def unpatchify(patches: np.ndarray, b: int, h: int, p: int) -> np.ndarray:
    g = h // p
    return patches.reshape(b, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(b, h, h)


def _unpatchify_node(patches: tc.Node, b: int, h: int, p: int) -> tc.Node:
    return tc.make_node(
        unpatchify(patches.value, b, h, p), "unpatchify", (patches,), lambda g: (patchify(g, p),)
    )


class PatchAutoencoder:
    """Shared MLP (linear -> tanh -> linear) applied to every p x p patch.

    Args:
      side: image side H; must be divisible by ``patch``.
      patch: patch side p (the spatial downsampling factor).
      d: token dimension.
      hidden: hidden width of both MLPs.
      seed: initialization seed.
    """

    def __init__(self, side: int = 28, patch: int = 4, d: int = 64, hidden: int = 128, seed: int = 0, dtype=np.float64):
        if patch < 1 or side % patch:
            raise ConfigError(f"image side {side} is not divisible by patch {patch}")
        self.side, self.patch, self.d, self.hidden = side, patch, d, hidden
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        pp = patch * patch
        shapes = {
            "enc_w1": (pp, hidden),
            "enc_b1": (hidden,),
            "enc_w2": (hidden, d),
            "enc_b2": (d,),
            "dec_w1": (d, hidden),
            "dec_b1": (hidden,),
            "dec_w2": (hidden, pp),
            "dec_b2": (pp,),
        }
        fan_in = {"enc_w1": pp, "enc_b1": pp, "enc_w2": hidden, "enc_b2": hidden, "dec_w1": d, "dec_b1": d, "dec_w2": hidden, "dec_b2": hidden}
        self.params = {}
        for name in PARAM_NAMES:
            bound = 1.0 / math.sqrt(fan_in[name])
            self.params[name] = rng.uniform(-bound, bound, size=shapes[name]).astype(self.dtype)

    @property
    def grid(self) -> int:
        return self.side // self.patch

    def tokens_per_image(self) -> int:
        return self.grid * self.grid

    def param_nodes(self) -> dict:
        return {k: tc.leaf(v) for k, v in self.params.items()}

    def encode(self, x: np.ndarray, nodes: dict | None = None) -> tc.Node:
        """Images B x H x H -> tokens N x d with N = B * (H/p)^2."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1] != x.shape[2]:
            raise ShapeError(f"encode: expected B x H x H images, got dims {list(x.shape)}")
        if x.shape[1] % self.patch or x.shape[1] != self.side:
            raise ConfigError(f"encode: image side {x.shape[1]} does not fit side={self.side}, patch={self.patch}")
        nodes = nodes or self.param_nodes()
        h = tc.const(patchify(x.astype(self.dtype, copy=False), self.patch))
        h = tc.tanh(tc.add_bias(tc.matmul(h, nodes["enc_w1"]), nodes["enc_b1"]))
        return tc.add_bias(tc.matmul(h, nodes["enc_w2"]), nodes["enc_b2"])

    def decode(self, z_q: tc.Node, nodes: dict | None = None, clamp_output: bool = False) -> tc.Node:
        """Tokens N x d -> images B x H x H; ``clamp_output`` clips to [0, 1] for evaluation."""
        n = z_q.shape[0]
        per = self.tokens_per_image()
        if z_q.value.ndim != 2 or z_q.shape[1] != self.d or n % per:
            raise ShapeError(f"decode: {list(z_q.shape)} is not a whole number of {per}-token images of dim {self.d}")
        nodes = nodes or self.param_nodes()
        h = tc.tanh(tc.add_bias(tc.matmul(z_q, nodes["dec_w1"]), nodes["dec_b1"]))
        patches = tc.add_bias(tc.matmul(h, nodes["dec_w2"]), nodes["dec_b2"])
        out = _unpatchify_node(patches, n // per, self.side, self.patch)
        return tc.clamp(out, 0.0, 1.0) if clamp_output else out

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free encode for evaluation."""
        p = self.params
        h = np.tanh(patchify(np.asarray(x, dtype=self.dtype), self.patch) @ p["enc_w1"] + p["enc_b1"])
        return h @ p["enc_w2"] + p["enc_b2"]

    def decode_array(self, z_q: np.ndarray, clamp_output: bool = True) -> np.ndarray:
        p = self.params
        h = np.tanh(np.asarray(z_q, dtype=self.dtype) @ p["dec_w1"] + p["dec_b1"])
        out = unpatchify(h @ p["dec_w2"] + p["dec_b2"], z_q.shape[0] // self.tokens_per_image(), self.side, self.patch)
        return np.clip(out, 0.0, 1.0) if clamp_output else out
