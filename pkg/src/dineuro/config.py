"""Model geometry and parameter initialisation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

PATCH = 16
TUBE_LEN = PATCH * PATCH
AXES = ("z", "y", "x")
STRATEGIES = ("random", "average", "center", "tubular")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 8
    layers: int = 2
    heads: int = 1
    block: tuple = (5, 100, 100)
    strategy: str = "tubular"
    in_channels: int = 3
    upsample: tuple = (4, 4)
    mlp_ratio: int = 4
    channel_reduction: str = "mean"
    freeze_blocks: bool = False
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.block[0] % 2 == 0:
            raise ValueError(f"block depth must be odd, got {self.block[0]}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if math.prod(self.upsample) != PATCH:
            raise ValueError(f"upsampling factors {self.upsample} must multiply to {PATCH}")
        if self.channel_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown channel reduction {self.channel_reduction!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def grid(self):
        _, h, w = self.block
        return -(-h // PATCH), -(-w // PATCH)

    @property
    def tokens(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def padded(self):
        gh, gw = self.grid
        return self.block[0], gh * PATCH, gw * PATCH

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    def to_items(self):
        """Flat key=value pairs, tuples joined by 'x'."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(i) for i in v)
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for k, v in items:
            if k not in types:
                raise KeyError(f"unknown model config key {k!r}")
            ref = getattr(defaults, k)
            if isinstance(ref, tuple):
                kw[k] = tuple(int(p) for p in str(v).split("x"))
            elif isinstance(ref, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes")
            elif isinstance(ref, int):
                kw[k] = int(v)
            else:
                kw[k] = str(v)
        return cls(**kw)


def block_names(i):
    p = f"block{i}"
    return [f"{p}.attn.q", f"{p}.attn.k", f"{p}.attn.v", f"{p}.attn.o",
            f"{p}.mlp.fc1", f"{p}.mlp.fc2",
            f"{p}.ln1.g", f"{p}.ln1.b", f"{p}.ln2.g", f"{p}.ln2.b"]


def _normal(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def encoder_params(rng, e, layers, mlp_ratio):
    """Randomly initialised transformer blocks and final norm ([in, out] weights)."""
    p = {}
    hidden = mlp_ratio * e
    for i in range(layers):
        for n in ("q", "k", "v", "o"):
            p[f"block{i}.attn.{n}"] = _normal(rng, (e, e), e)
        p[f"block{i}.mlp.fc1"] = _normal(rng, (e, hidden), e)
        p[f"block{i}.mlp.fc2"] = _normal(rng, (hidden, e), hidden)
        for ln in ("ln1", "ln2"):
            p[f"block{i}.{ln}.g"] = np.ones(e)
            p[f"block{i}.{ln}.b"] = np.zeros(e)
    p["final_ln.g"] = np.ones(e)
    p["final_ln.b"] = np.zeros(e)
    return p


def init_params(cfg: ModelConfig, rng=None):
    """Random parameters for every tensor the 3D model uses (float64 arrays)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    e, c = cfg.embed_dim, cfg.in_channels
    d = cfg.block[0]
    p = {}
    if cfg.strategy == "tubular":
        for ax in AXES:
            p[f"tube.{ax}.w"] = _normal(rng, (e, TUBE_LEN), TUBE_LEN)
        p["offset.w"] = np.zeros((d * TUBE_LEN, len(AXES) * 2 * (TUBE_LEN - 1)))
        p["offset.b"] = np.zeros(len(AXES) * 2 * (TUBE_LEN - 1))
        p["fuse.ln.g"] = np.ones(e)
        p["fuse.ln.b"] = np.zeros(e)
    else:
        p["patch.kernel3d"] = _normal(rng, (e, c, d, PATCH, PATCH), c * d * TUBE_LEN)
    p["pos.embed"] = rng.normal(0.0, 0.02, size=(cfg.tokens, e))
    p.update(encoder_params(rng, e, cfg.layers, cfg.mlp_ratio))
    p["head.conv1.w"] = _normal(rng, (e, e, 3, 3), 9 * e) * math.sqrt(2)
    p["head.conv1.b"] = np.zeros(e)
    p["head.conv2.w"] = _normal(rng, (e, e, 3, 3), 9 * e) * math.sqrt(2)
    p["head.conv2.b"] = np.zeros(e)
    p["head.out.w"] = _normal(rng, (1, e, 1, 1), e)
    p["head.out.b"] = np.zeros(1)
    return p
