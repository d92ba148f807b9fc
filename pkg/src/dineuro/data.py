"""Volumes, training blocks, distance-ramp soft labels and tubular phantoms."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import VolumeFormatError
from .morpho import SwcNode, SwcTree

DEFAULT_DECAY = 1.5
DEFAULT_RATIO = 0.001
BLOCK_SHAPE = (5, 100, 100)


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeFormatError(f"volume needs three extents >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeFormatError("volume contains non-finite voxels")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


def save_volume(path, vol: Volume) -> None:
    """Write ``<name>.vjson`` and the raw little-endian f32 payload ``<name>.vraw`` beside it."""
    path = os.fspath(path)
    base = path[:-6] if path.endswith(".vjson") else path
    raw_name = os.path.basename(base) + ".vraw"
    header = {"shape": list(vol.shape), "dtype": "f32", "spacing": list(vol.spacing),
              "data": raw_name}
    with open(os.path.join(os.path.dirname(base), raw_name), "wb") as fh:
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    with open(base + ".vjson", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh)
        fh.write("\n")


def load_volume(path) -> Volume:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{path}: invalid JSON header ({e})") from None
    for key in ("shape", "dtype", "data"):
        if key not in header:
            raise VolumeFormatError(f"{path}: header missing {key!r}")
    shape = header["shape"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and s >= 1 for s in shape)):
        raise VolumeFormatError(f"{path}: shape must be three positive integers, got {shape}")
    if header["dtype"] != "f32":
        raise VolumeFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    raw_path = os.path.join(os.path.dirname(path), header["data"])
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(payload) != expected:
        raise VolumeFormatError(f"{raw_path}: payload size mismatch, expected {expected} bytes, "
                                f"got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


# ---- blocks ----------------------------------------------------------------


@dataclass
class Block:
    origin: tuple
    data: np.ndarray
    soft_label: np.ndarray
    foreground_ratio: float


def _origins(n, size, stride):
    if n < size:
        raise ValueError(f"extent {n} smaller than block extent {size}")
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def tile_origins(shape, block=BLOCK_SHAPE, stride=50, depth_stride=1):
    zs = _origins(shape[0], block[0], depth_stride)
    ys = _origins(shape[1], block[1], stride)
    xs = _origins(shape[2], block[2], stride)
    return [(z, y, x) for z in zs for y in ys for x in xs]


def partition_blocks(vol, labels, ratio_threshold=DEFAULT_RATIO, block=BLOCK_SHAPE, stride=50,
                     depth_stride=1, fg_threshold=0.5):
    """Tile ``vol`` into blocks, keeping those whose center-slice foreground fraction
    (label >= ``fg_threshold``) reaches ``ratio_threshold``. Order is z, then y, then x."""
    if not 0.0 <= ratio_threshold <= 1.0:
        raise ValueError(f"ratio threshold must lie in [0, 1], got {ratio_threshold}")
    v = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    lab = labels.data if isinstance(labels, Volume) else np.asarray(labels)
    if v.shape != lab.shape:
        raise ValueError(f"volume {v.shape} and labels {lab.shape} differ in shape")
    d, h, w = block
    out = []
    for z, y, x in tile_origins(v.shape, block, stride, depth_stride):
        soft = lab[z + d // 2, y:y + h, x:x + w]
        ratio = float(np.mean(soft >= fg_threshold))
        if ratio >= ratio_threshold:
            out.append(Block((z, y, x), v[z:z + d, y:y + h, x:x + w].copy(), soft.copy(), ratio))
    return out


# ---- soft labels -------------------------------------------------------------


def _segments(tree: SwcTree):
    xyz = tree.xyz
    r = tree.radii
    edges = tree.edges()
    singles = set(range(len(tree))) - {i for e in edges for i in e}
    pairs = list(edges) + [(i, i) for i in sorted(singles)]
    a = np.array([xyz[p] for p, _ in pairs])
    b = np.array([xyz[c] for _, c in pairs])
    ra = np.array([r[p] for p, _ in pairs])
    rb = np.array([r[c] for _, c in pairs])
    return a, b, ra, rb


def centerline_distance(points, tree: SwcTree):
    """Exact distance from each (x, y, z) point to the nearest tree segment, with the
    radius linearly interpolated at the closest point of that segment."""
    a, b, ra, rb = _segments(tree)
    best = np.full(len(points), np.inf)
    rad = np.zeros(len(points))
    for k in range(len(a)):
        ab = b[k] - a[k]
        l2 = float(ab @ ab)
        if l2 > 0:
            t = np.clip((points - a[k]) @ ab / l2, 0.0, 1.0)
        else:
            t = np.zeros(len(points))
        closest = a[k] + t[:, None] * ab
        d = np.sqrt(np.sum((points - closest) ** 2, axis=1))
        better = d < best
        best[better] = d[better]
        rad[better] = (ra[k] + t * (rb[k] - ra[k]))[better]
    return best, rad


def dt_labels(vol_shape, swc: SwcTree, decay=DEFAULT_DECAY) -> Volume:
    """Radius-normalised linear distance ramp: clamp(1 - d / (r * decay), 0, 1)."""
    if len(swc) == 0:
        raise ValueError("dt_labels needs a non-empty tree")
    if np.any(swc.radii <= 0):
        raise ValueError("dt_labels needs positive radii")
    D, H, W = vol_shape
    z, y, x = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.float64)
    d, r = centerline_distance(pts, swc)
    label = np.clip(1.0 - d / (r * decay), 0.0, 1.0)
    return Volume(label.reshape(vol_shape))


# ---- phantoms ------------------------------------------------------------------


def _unit(v):
    return v / np.linalg.norm(v)


def _random_direction(rng, dz_scale):
    theta = rng.uniform(0, 2 * math.pi)
    return _unit(np.array([math.cos(theta), math.sin(theta), rng.normal(scale=dz_scale)]))


def _inside(p, lo, hi):
    return bool(np.all(p >= lo) and np.all(p <= hi))


def _walk(rng, start, direction, max_len, step, lo, hi, tortuosity):
    pts = []
    p = start.copy()
    d = direction.copy()
    travelled = 0.0
    while travelled + step <= max_len + 1e-9:
        if tortuosity > 0:
            d = _unit(d + rng.normal(scale=tortuosity, size=3) * np.array([1.0, 1.0, 0.3]))
        nxt = p + step * d
        if not _inside(nxt, lo, hi):
            break
        pts.append(nxt)
        p = nxt
        travelled += step
    return pts


def gen_phantom(seed, size=(16, 48, 48), branches=3, radius_range=(1.5, 3.0), noise=0.1,
                tortuosity=0.0, node_step=2.0, decay=DEFAULT_DECAY):
    """Random branching tree rendered as soft tubes plus clipped Gaussian noise.

    ``size`` is (D, H, W). Returns ``(Volume, SwcTree)``; the tree uses voxel
    coordinates that all lie inside the volume. With ``branches=1`` and no
    tortuosity the tree is one straight tube of constant radius.
    """
    if isinstance(size, int):
        size = (size, size, size)
    D, H, W = size
    if H < 32 or W < 32 or D < 5:
        raise ValueError(f"phantom needs H, W >= 32 and D >= 5, got {size}")
    rmin, rmax = (float(v) for v in radius_range)
    if not (0 < rmin <= rmax) or not math.isfinite(rmax):
        raise ValueError(f"degenerate radius range {radius_range}")
    if branches < 1:
        raise ValueError("branches must be >= 1")
    rng = np.random.default_rng(seed)
    lo = np.array([1.0, 1.0, 1.0])
    hi = np.array([W - 2.0, H - 2.0, D - 2.0])
    dz_scale = 0.15 * D / max(H, W)

    center = np.array([W, H, D], dtype=np.float64) / 2 + rng.uniform(-0.15, 0.15, 3) * [W, H, D]
    center = np.clip(center, lo, hi)
    direction = _random_direction(rng, dz_scale)
    r0 = float(rng.uniform(rmin, rmax))
    span = 2.0 * max(H, W)
    fwd = _walk(rng, center, direction, span, node_step, lo, hi, tortuosity)
    back = _walk(rng, center, -direction, span, node_step, lo, hi, tortuosity)
    trunk = list(reversed(back)) + [center] + fwd

    nodes = []
    coords = []
    radii = []
    for i, p in enumerate(trunk):
        nodes.append(SwcNode(i + 1, 3 if i else 1, *map(float, p), r0, i if i else -1))
        coords.append(p)
        radii.append(r0)

    attempts = 0
    made = 1
    while made < branches and attempts < 50 * branches:
        attempts += 1
        k = int(rng.integers(1, len(nodes) - 1)) if len(nodes) > 2 else 0
        base = nodes[k]
        parent_dir = coords[min(k + 1, len(coords) - 1)] - coords[max(k - 1, 0)]
        parent_dir = parent_dir if np.linalg.norm(parent_dir) > 0 else direction
        angle = rng.uniform(math.radians(35), math.radians(80)) * rng.choice([-1, 1])
        c, s = math.cos(angle), math.sin(angle)
        px, py = parent_dir[0], parent_dir[1]
        d = _unit(np.array([c * px - s * py, s * px + c * py, rng.normal(scale=dz_scale)]))
        length = rng.uniform(0.3, 0.7) * max(H, W)
        pts = _walk(rng, np.array(coords[k]), d, length, node_step, lo, hi, tortuosity)
        if len(pts) < 3:
            continue
        r = float(rng.uniform(rmin, min(rmax, base.radius)))
        prev = base.id
        for p in pts:
            nid = len(nodes) + 1
            nodes.append(SwcNode(nid, 3, *map(float, p), r, prev))
            coords.append(p)
            radii.append(r)
            prev = nid
        made += 1

    tree = SwcTree(nodes)
    clean = dt_labels(size, tree, decay).data.astype(np.float64)
    if noise > 0:
        clean = clean + rng.normal(scale=noise, size=clean.shape)
    return Volume(np.clip(clean, 0.0, 1.0)), tree
