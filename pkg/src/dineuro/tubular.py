"""Deformable tubular patch embedding.

Each token position (anchor) gets one 256-sample tube per view axis. Along
its own axis a tube advances one voxel per sample, from ``anchor - 127`` to
``anchor + 128``. The two off-axis coordinates start at the anchor and
accumulate bounded per-step offsets walking outward from the center sample,
so consecutive samples never move more than one voxel off-axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AXES, PATCH, TUBE_LEN
from .errors import ContractError, DimensionError
from .tensor import Tensor

CENTER = TUBE_LEN // 2 - 1  # tube index of the anchor sample, h = 0
STEPS = TUBE_LEN - 1
AXIAL = np.arange(TUBE_LEN) - CENTER  # h = -127 .. 128


def off_axes(axis):
    """Indices (in z, y, x order) of the two coordinates an axis-``axis`` tube bends in."""
    i = AXES.index(axis)
    return tuple(j for j in range(3) if j != i)


@dataclass(frozen=True)
class TubeGrid:
    axis: str
    anchor: tuple
    coords: np.ndarray  # [256, 3] as (z, y, x)


def anchors_for(shape):
    """Token anchors (z, y, x): mid-depth, one per 16x16 in-plane patch."""
    d, h, w = shape
    gh, gw = h // PATCH, w // PATCH
    ys = np.arange(gh) * PATCH + PATCH // 2
    xs = np.arange(gw) * PATCH + PATCH // 2
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    zz = np.full(yy.size, d // 2)
    return np.stack([zz, yy.ravel(), xx.ravel()], axis=1).astype(np.float64)


def tube_coords(anchors, axis, offsets):
    """Differentiable tube coordinates.

    ``anchors`` is [A, 3]; ``offsets`` a Tensor [A, 255, 2] where entry ``i``
    is the step that reaches tube index ``i`` (``i < 127``) or ``i + 1``
    (``i >= 127``) from its neighbour nearer the center. Returns [A, 256, 3].
    """
    anchors = np.asarray(anchors, dtype=offsets.dtype)
    a = anchors.shape[0]
    if offsets.shape != (a, STEPS, 2):
        raise DimensionError(f"offsets must be [{a}, {STEPS}, 2], got {offsets.shape}")
    back = T.flip(T.cumsum(T.flip(offsets[:, :CENTER], 1), 1), 1)
    fwd = T.cumsum(offsets[:, CENTER:], 1)
    zero = Tensor(np.zeros((a, 1, 2), dtype=offsets.dtype))
    disp = T.concat([back, zero, fwd], axis=1)
    ax = AXES.index(axis)
    bent = off_axes(axis)
    cols = [None, None, None]
    cols[ax] = Tensor(anchors[:, ax:ax + 1] + AXIAL[None, :].astype(offsets.dtype))
    for k, j in enumerate(bent):
        cols[j] = disp[:, :, k] + Tensor(anchors[:, j:j + 1])
    return T.stack(cols, axis=-1)


def build_tube(anchor, axis, offsets) -> TubeGrid:
    """Tube for a single anchor from 255 (Δa, Δb) offset pairs, each in [-1, 1]."""
    off = np.asarray(getattr(offsets, "data", offsets), dtype=np.float64)
    if off.shape != (STEPS, 2):
        raise DimensionError(f"expected {STEPS} offset pairs, got shape {off.shape}")
    if np.any(np.abs(off) > 1):
        raise ContractError("tube offsets must lie in [-1, 1]")
    with T.no_grad():
        coords = tube_coords(np.asarray([anchor], dtype=np.float64), axis, Tensor(off[None]))
    return TubeGrid(axis, tuple(float(v) for v in anchor), coords.data[0])


def patch_columns(block):
    """[D, H, W] -> [A, D*16*16] with anchors in row-major token order."""
    d, h, w = block.shape
    if h % PATCH or w % PATCH:
        raise DimensionError(f"in-plane extents {h}x{w} are not multiples of {PATCH}")
    gh, gw = h // PATCH, w // PATCH
    x = T.reshape(block, (d, gh, PATCH, gw, PATCH))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    return T.reshape(x, (gh * gw, d * PATCH * PATCH))


def predict_offsets(block, weight, bias):
    """Per-anchor, per-view offsets in [-1, 1] from one patch-sized linear filter.

    ``weight`` is [D*256, 3*255*2], ``bias`` [3*255*2]. Returns a dict
    axis -> Tensor[A, 255, 2].
    """
    cols = patch_columns(block)
    if weight.shape[0] != cols.shape[1]:
        raise DimensionError(f"offset filter expects {weight.shape[0]} inputs per patch, "
                             f"block gives {cols.shape[1]}")
    raw = T.tanh(T.matmul(cols, weight) + bias)
    raw = T.reshape(raw, (cols.shape[0], len(AXES), STEPS, 2))
    return {ax: raw[:, i] for i, ax in enumerate(AXES)}


def sample_tubes(block, coords):
    """Trilinear samples of ``block`` at [A, 256, 3] coordinates -> [A, 256]."""
    a = coords.shape[0]
    flat = T.reshape(coords, (a * TUBE_LEN, 3))
    return T.reshape(T.trilinear_sample(block, flat), (a, TUBE_LEN))


def embed_view(block, weights, coords):
    """token[a, e] = sum_t weights[e, t] * block(coords[a, t])."""
    if coords.shape[0] == 0:
        raise ValueError("no anchors to embed")
    return T.matmul(sample_tubes(block, coords), T.transpose(weights, (1, 0)))


def mean3(a, b, c):
    """Element-wise mean of three tensors, independent of argument order."""
    if not (a.shape == b.shape == c.shape):
        raise DimensionError(f"view shapes differ: {a.shape}, {b.shape}, {c.shape}")
    s = np.sort(np.stack([a.data, b.data, c.data]), axis=0)
    out = (s[0] + s[1] + s[2]) / 3.0
    return T._make(out, (a, b, c), lambda g: (g / 3.0, g / 3.0, g / 3.0), "mean3")


def fuse_views(tok_z, tok_y, tok_x, gamma, beta, eps=1e-5):
    return T.layernorm(mean3(tok_z, tok_y, tok_x), gamma, beta, eps)


def tubular_tokens(block, params):
    """Full tubular embedding of a padded block: offsets, three views, fusion."""
    anchors = anchors_for(block.shape)
    offsets = predict_offsets(block, params["offset.w"], params["offset.b"])
    toks = {}
    for ax in AXES:
        coords = tube_coords(anchors, ax, offsets[ax])
        toks[ax] = embed_view(block, params[f"tube.{ax}.w"], coords)
    return fuse_views(toks["z"], toks["y"], toks["x"], params["fuse.ln.g"], params["fuse.ln.b"])


def write_grid_csv(path, grid: TubeGrid):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "z", "y", "x"])
        for t, (z, y, x) in enumerate(grid.coords):
            w.writerow([t, repr(float(z)), repr(float(y)), repr(float(x))])
