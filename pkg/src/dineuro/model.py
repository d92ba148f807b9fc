"""3D ViT with block-to-slice segmentation head.

A 5-slice block becomes a grid of 16x16 in-plane tokens (inflated patch
convolution or fused tubular views), passes through a pre-norm transformer
encoder, and is decoded to foreground logits for the block's center slice.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from . import archive
from . import tensor as T
from .config import PATCH, ModelConfig, block_names, init_params
from .data import Volume
from .errors import ContractError, DimensionError
from .tensor import Tensor
from .transfer import Checkpoint2D, seed_model
from .tubular import patch_columns, tubular_tokens

LOGIT_CLAMP = 30.0
DICE_SMOOTH = 1.0


class SegModel:
    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.params = {k: Tensor(np.array(v, dtype=dt), requires_grad=True)
                       for k, v in params.items()}
        self.frozen = set()
        if cfg.freeze_blocks:
            for i in range(cfg.layers):
                self.frozen.update(block_names(i))
            self.frozen.update(("final_ln.g", "final_ln.b"))
        for name in self.frozen:
            self.params[name].requires_grad = False

    @classmethod
    def random(cls, cfg: ModelConfig, seed=None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        return cls(cfg, init_params(cfg, rng))

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint2D, cfg: ModelConfig, seed=None):
        return cls(cfg, seed_model(ck, cfg, seed))

    def trainable(self):
        return {k: p for k, p in self.params.items() if k not in self.frozen}

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def save(self, path):
        archive.save(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: ModelConfig):
        return cls(cfg, archive.load(path))

    def __call__(self, block):
        return forward(self, block)


# ---- forward -------------------------------------------------------------------


def _pad_block(block, cfg):
    d, h, w = cfg.block
    _, hp, wp = cfg.padded
    x = block if isinstance(block, Tensor) else Tensor(np.asarray(block, dtype=cfg.np_dtype))
    if x.shape != (d, h, w):
        raise DimensionError(f"block shape {x.shape} does not match configured {cfg.block}")
    if (hp, wp) != (h, w):
        x = T.pad_edge(x, [(0, 0), (0, hp - h), (0, wp - w)])
    return x


def embed(model, x):
    p = model.params
    if model.cfg.strategy == "tubular":
        return tubular_tokens(x, p)
    cols = patch_columns(x)
    k = p["patch.kernel3d"]
    # a gray block is fed to every input channel, so the channels fold into one kernel
    kernel = T.reshape(k.sum(axis=1), (k.shape[0], -1))
    return T.matmul(cols, T.transpose(kernel, (1, 0)))


def attention(x, p, prefix, heads):
    n, e = x.shape
    dh = e // heads

    def split(t):
        return T.transpose(T.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(T.matmul(x, p[f"{prefix}.q"]))
    k = split(T.matmul(x, p[f"{prefix}.k"]))
    v = split(T.matmul(x, p[f"{prefix}.v"]))
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, e))
    return T.matmul(ctx, p[f"{prefix}.o"])


def encoder_block(x, p, i, heads):
    b = f"block{i}"
    h = T.layernorm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
    x = x + attention(h, p, f"{b}.attn", heads)
    h = T.layernorm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
    h = T.matmul(T.gelu(T.matmul(h, p[f"{b}.mlp.fc1"])), p[f"{b}.mlp.fc2"])
    return x + h


def head(tokens, p, cfg):
    gh, gw = cfg.grid
    e = cfg.embed_dim
    x = T.transpose(T.reshape(tokens, (gh, gw, e)), (2, 0, 1))
    for stage, factor in enumerate(cfg.upsample, start=1):
        x = T.upsample_nearest(x, factor)
        x = T.gelu(T.conv2d(x, p[f"head.conv{stage}.w"], p[f"head.conv{stage}.b"]))
    x = T.conv2d(x, p["head.out.w"], p["head.out.b"])
    return x[0]


def forward(model: SegModel, block) -> Tensor:
    """Foreground logits [H, W] for the center slice of a [D, H, W] block."""
    cfg = model.cfg
    p = model.params
    x = _pad_block(block, cfg)
    tok = embed(model, x) + p["pos.embed"]
    for i in range(cfg.layers):
        tok = encoder_block(tok, p, i, cfg.heads)
    tok = T.layernorm(tok, p["final_ln.g"], p["final_ln.b"])
    logits = head(tok, p, cfg)
    _, h, w = cfg.block
    if logits.shape != (h, w):
        logits = logits[:h, :w]
    return logits


# ---- loss ----------------------------------------------------------------------


def loss(logits, soft_label, fg_threshold=0.5):
    """0.5 * BCE + 0.5 * (1 - soft Dice), against the label binarized at ``fg_threshold``."""
    lab = np.asarray(getattr(soft_label, "data", soft_label))
    if lab.shape != logits.shape:
        raise DimensionError(f"label {lab.shape} vs logits {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() > 1):
        raise ContractError("soft labels must lie in [0, 1]")
    y = Tensor((lab >= fg_threshold).astype(logits.dtype))
    z = T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    bce = T.mean(T.softplus(z) - z * y)
    prob = T.sigmoid(z)
    inter = (prob * y).sum()
    dice = (2.0 * inter + DICE_SMOOTH) / (prob.sum() + float(y.data.sum()) + DICE_SMOOTH)
    return 0.5 * bce + 0.5 * (1.0 - dice)


# ---- training ------------------------------------------------------------------


class MomentumSGD:
    def __init__(self, params: dict, lr, momentum=0.9, clip_norm=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if self.clip_norm:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            p.data = p.data - self.lr * v


def _augment(block, label, rng, flips):
    if not flips:
        return block, label
    if rng.random() < 0.5:
        block, label = block[:, ::-1], label[::-1]
    if rng.random() < 0.5:
        block, label = block[:, :, ::-1], label[:, ::-1]
    return np.ascontiguousarray(block), np.ascontiguousarray(label)


def train(model: SegModel, dataset, steps, lr=0.05, seed=0, batch_size=1, momentum=0.9,
          clip_norm=1.0, flips=False, trace_path=None, log_every=0, logger=None):
    """Momentum-SGD training on (block, soft_label) pairs; returns the per-step loss trace."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    opt = MomentumSGD(model.trainable(), lr, momentum, clip_norm)
    dt = model.cfg.np_dtype
    trace = []
    for step in range(steps):
        opt.zero_grad()
        idx = rng.integers(0, len(dataset), size=batch_size)
        total = None
        for i in idx:
            item = dataset[int(i)]
            block, label = (item.data, item.soft_label) if hasattr(item, "soft_label") else item
            block, label = _augment(np.asarray(block, dtype=dt), np.asarray(label), rng, flips)
            li = loss(forward(model, block), label)
            total = li if total is None else total + li
        total = total * (1.0 / batch_size)
        T.backward(total, leaves=list(opt.params.values()))
        opt.step()
        trace.append(total.item())
        if logger and log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.5f", step + 1, np.mean(trace[-log_every:]))
    if trace_path is not None:
        write_trace(trace_path, trace)
    return trace


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def smoothed(trace, window=20):
    trace = np.asarray(trace, dtype=np.float64)
    n = len(trace) // window
    return trace[:n * window].reshape(n, window).mean(axis=1)


# ---- inference -----------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def predict_slice(model, block):
    with T.no_grad():
        return forward(model, block).data


def window_indices(depth, z, d=5):
    """Slice indices of the depth window centred on ``z``, clamped at the volume ends."""
    r = d // 2
    return np.clip(np.arange(z - r, z + r + 1), 0, depth - 1)


def segment_volume(model: SegModel, vol) -> Volume:
    """Stack center-slice predictions over a stride-1 depth sweep.

    In-plane, the volume is covered by model-sized tiles (the last tile in
    each direction is shifted to fit, overlaps are averaged); volumes smaller
    than the tile are replicate-padded.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    d, h, w = model.cfg.block
    depth, H, W = data.shape
    if depth < d:
        raise ValueError(f"volume depth {depth} is below the block depth {d}")
    ph, pw = max(0, h - H), max(0, w - W)
    src = np.pad(data, ((0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else data
    Hs, Ws = src.shape[1:]
    ys = _starts(Hs, h)
    xs = _starts(Ws, w)
    dt = model.cfg.np_dtype
    out = np.zeros((depth, Hs, Ws), dtype=np.float64)
    count = np.zeros((Hs, Ws), dtype=np.float64)
    for y in ys:
        for x in xs:
            count[y:y + h, x:x + w] += 1
    for z in range(depth):
        win = src[window_indices(depth, z, d)]
        for y in ys:
            for x in xs:
                blk = np.ascontiguousarray(win[:, y:y + h, x:x + w], dtype=dt)
                out[z, y:y + h, x:x + w] += _sigmoid(predict_slice(model, blk).astype(np.float64))
    out /= count
    return Volume(out[:, :H, :W])


def _starts(n, size):
    if n <= size:
        return [0]
    s = list(range(0, n - size + 1, size))
    if s[-1] != n - size:
        s.append(n - size)
    return s
