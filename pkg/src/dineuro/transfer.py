"""Seeding the 3D model from 2D pre-trained weights.

Checkpoint archives use these tensor names (linear weights stored [in, out])::

    meta.header                 [E, C, layers, heads] as float64
    patch.kernel                [E, C, 16, 16]
    pos.embed                   [tokens, E]
    block{i}.attn.{q,k,v,o}     [E, E]
    block{i}.mlp.fc1 / fc2      [E, 4E] / [4E, E]
    block{i}.{ln1,ln2}.{g,b}    [E]
    final_ln.{g,b}              [E]
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import archive
from .config import AXES, PATCH, TUBE_LEN, ModelConfig, block_names, encoder_params, init_params
from .errors import IncompatibleCheckpointError


def _arr(x):
    return np.asarray(getattr(x, "data", x))


def _check_kernel(k):
    if k.ndim != 4 or k.shape[2:] != (PATCH, PATCH):
        raise ValueError(f"expected a [E, C, {PATCH}, {PATCH}] kernel, got {k.shape}")


def inflate_average(k2d, depth: int) -> np.ndarray:
    """Replicate the 2D kernel over ``depth`` slices, each scaled by 1/depth."""
    k = _arr(k2d)
    _check_kernel(k)
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    return np.repeat((k / depth)[:, :, None], depth, axis=2)


def inflate_center(k2d, depth: int) -> np.ndarray:
    """Place the 2D kernel in the middle slice of an otherwise zero 3D kernel."""
    k = _arr(k2d)
    _check_kernel(k)
    if depth < 1 or depth % 2 == 0:
        raise ValueError(f"center inflation needs an odd depth >= 1, got {depth}")
    out = np.zeros(k.shape[:2] + (depth,) + k.shape[2:], dtype=k.dtype)
    out[:, :, depth // 2] = k
    return out


@dataclass(frozen=True)
class TubularKernel:
    """Per-channel line of 256 weights; tube index t = 16 * row + col."""

    weights: np.ndarray
    axis: str
    channel_reduction: str = "mean"

    def unflatten(self):
        e = self.weights.shape[0]
        return self.weights.reshape(e, PATCH, PATCH)


def flatten_tubular(k2d, axis: str, reduction: str = "mean") -> TubularKernel:
    k = _arr(k2d)
    if k.ndim != 4 or k.shape[2:] != (PATCH, PATCH):
        raise ValueError(f"tubular flattening needs a {PATCH}x{PATCH} kernel, got {k.shape}")
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if reduction == "mean":
        red = k.mean(axis=1)
    elif reduction == "sum":
        red = k.sum(axis=1)
    else:
        raise ValueError(f"unknown channel reduction {reduction!r}")
    return TubularKernel(red.reshape(k.shape[0], TUBE_LEN).copy(), axis, reduction)


# ---- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint2D:
    tensors: dict

    @property
    def header(self):
        e, c, layers, heads = (int(v) for v in self.tensors["meta.header"])
        return e, c, layers, heads

    @property
    def embed_dim(self):
        return self.header[0]

    @property
    def in_channels(self):
        return self.header[1]

    @property
    def layers(self):
        return self.header[2]

    @property
    def heads(self):
        return self.header[3]

    @property
    def patch_kernel(self):
        return self.tensors["patch.kernel"]

    @property
    def pos_embed(self):
        return self.tensors["pos.embed"]

    @classmethod
    def from_tensors(cls, tensors):
        tensors = {k: np.asarray(v) for k, v in tensors.items()}
        if "meta.header" not in tensors or tensors["meta.header"].shape != (4,):
            raise IncompatibleCheckpointError("missing or malformed header", ["meta.header"])
        ck = cls(tensors)
        e, c, layers, heads = ck.header
        if e < 1 or c < 1 or layers < 0 or heads < 1 or e % heads:
            raise IncompatibleCheckpointError(f"inconsistent header {ck.header}", ["meta.header"])
        expected = {"patch.kernel": (e, c, PATCH, PATCH)}
        ref = encoder_params(np.random.default_rng(0), e, layers, 4)
        for name, arr in ref.items():
            expected[name] = arr.shape
        if "block0.mlp.fc1" in tensors:
            hidden = tensors["block0.mlp.fc1"].shape[-1]
            for i in range(layers):
                expected[f"block{i}.mlp.fc1"] = (e, hidden)
                expected[f"block{i}.mlp.fc2"] = (hidden, e)
        missing = [n for n in expected if n not in tensors]
        if "pos.embed" not in tensors:
            missing.append("pos.embed")
        if missing:
            raise IncompatibleCheckpointError("checkpoint is missing tensors", missing)
        bad = [n for n, s in expected.items() if tensors[n].shape != s]
        pe = tensors["pos.embed"]
        if pe.ndim != 2 or pe.shape[1] != e:
            bad.append("pos.embed")
        if bad:
            raise IncompatibleCheckpointError("tensor shapes disagree with the header", bad)
        return ck

    @classmethod
    def load(cls, path):
        return cls.from_tensors(archive.load(path))

    def save(self, path):
        archive.save(path, self.tensors)


def fixture_checkpoint(embed_dim=8, in_channels=3, layers=2, heads=1, tokens=9, seed=0,
                       mlp_ratio=4) -> Checkpoint2D:
    """A random but well-formed 2D checkpoint, for tests and dry runs."""
    rng = np.random.default_rng(seed)
    t = {"meta.header": np.array([embed_dim, in_channels, layers, heads], dtype=np.float64),
         "patch.kernel": rng.normal(0, 1 / math.sqrt(in_channels * TUBE_LEN),
                                    size=(embed_dim, in_channels, PATCH, PATCH)),
         "pos.embed": rng.normal(0, 0.02, size=(tokens, embed_dim))}
    t.update(encoder_params(rng, embed_dim, layers, mlp_ratio))
    return Checkpoint2D.from_tensors(t)


def _square(n):
    s = math.isqrt(n)
    return s if s * s == n else None


def _interp_axis(arr, n_out, axis):
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    if n_in == 1:
        return np.repeat(arr, n_out, axis=axis)
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, lo + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    out = (1 - frac) * a + frac * b
    # pin the last sample so the far endpoint is reproduced bit-for-bit
    idx = [slice(None)] * arr.ndim
    idx[axis] = -1
    out[tuple(idx)] = np.take(arr, n_in - 1, axis=axis)
    return out


def resize_pos_embed(pe, grid):
    """Linearly interpolate [tokens, E] positional embeddings onto a (gh, gw) token grid.

    Square source grids are resized bilinearly in 2D with aligned corners;
    otherwise the token sequence is resized in 1D.
    """
    pe = np.asarray(pe)
    gh, gw = grid
    n_out = gh * gw
    if pe.shape[0] == n_out:
        return pe.copy()
    side = _square(pe.shape[0])
    if side is None:
        return _interp_axis(pe, n_out, 0)
    g = pe.reshape(side, side, -1)
    g = _interp_axis(g, gh, 0)
    g = _interp_axis(g, gw, 1)
    return g.reshape(n_out, -1)


def seed_model(ck: Checkpoint2D, cfg: ModelConfig, seed=None) -> dict:
    """3D parameter map: transferred patch embedding, copied encoder, random head."""
    if cfg.strategy == "random":
        raise ValueError("strategy 'random' does not take a checkpoint; use init_params")
    e, c, layers, _ = ck.header
    bad = []
    if e != cfg.embed_dim:
        bad = [n for n in ck.tensors if n != "meta.header"]
        raise IncompatibleCheckpointError(
            f"embedding dim {e} != configured {cfg.embed_dim}", bad)
    if c != cfg.in_channels:
        raise IncompatibleCheckpointError(
            f"input channels {c} != configured {cfg.in_channels}", ["patch.kernel"])
    if cfg.layers > layers:
        raise IncompatibleCheckpointError(
            f"config wants {cfg.layers} layers, checkpoint has {layers}",
            [n for i in range(layers, cfg.layers) for n in block_names(i)])
    hidden = ck.tensors["block0.mlp.fc1"].shape[-1] if layers else cfg.mlp_ratio * e
    if cfg.layers and hidden != cfg.mlp_ratio * e:
        raise IncompatibleCheckpointError(
            f"mlp width {hidden} != {cfg.mlp_ratio} x {e}",
            [n for i in range(cfg.layers) for n in (f"block{i}.mlp.fc1", f"block{i}.mlp.fc2")])

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = init_params(cfg, rng)
    k = ck.patch_kernel
    depth = cfg.block[0]
    if cfg.strategy == "average":
        params["patch.kernel3d"] = inflate_average(k, depth)
    elif cfg.strategy == "center":
        params["patch.kernel3d"] = inflate_center(k, depth)
    else:
        for ax in AXES:
            params[f"tube.{ax}.w"] = flatten_tubular(k, ax, cfg.channel_reduction).weights
    for i in range(cfg.layers):
        for n in block_names(i):
            params[n] = ck.tensors[n].copy()
    params["final_ln.g"] = ck.tensors["final_ln.g"].copy()
    params["final_ln.b"] = ck.tensors["final_ln.b"].copy()
    params["pos.embed"] = resize_pos_embed(ck.pos_embed, cfg.grid)
    return params


def checkpoint_from_params(params: dict, cfg: ModelConfig) -> Checkpoint2D:
    """Export a depth-1 model's encoder as a 2D checkpoint."""
    if cfg.block[0] != 1 or cfg.strategy == "tubular":
        raise ValueError("only depth-1 conv-embedding models export as 2D checkpoints")
    t = {"meta.header": np.array([cfg.embed_dim, cfg.in_channels, cfg.layers, cfg.heads],
                                 dtype=np.float64),
         "patch.kernel": np.asarray(params["patch.kernel3d"])[:, :, 0].astype(np.float64),
         "pos.embed": np.asarray(params["pos.embed"], dtype=np.float64)}
    for i in range(cfg.layers):
        for n in block_names(i):
            t[n] = np.asarray(params[n], dtype=np.float64)
    t["final_ln.g"] = np.asarray(params["final_ln.g"], dtype=np.float64)
    t["final_ln.b"] = np.asarray(params["final_ln.b"], dtype=np.float64)
    return Checkpoint2D.from_tensors(t)
