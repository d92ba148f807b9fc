"""Desk-scale comparison of initialisation strategies on synthetic neurites.

Four arms share one phantom suite, one training budget and one seed:
random init, average inflation, center inflation and tubular transfer.
The 2D weights they inflate come from a small depth-1 model trained on
2D images of random elliptical blobs. That stand-in for a large generic 2D
encoder never sees neurites, so no arm starts from a model of the target task.

Every CSV written here is a pure function of the settings, so two runs with
the same settings produce byte-identical files.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ModelConfig
from .data import dt_labels, gen_phantom, partition_blocks, save_volume
from .metrics import binarize, dice, hd95
from .model import SegModel, segment_volume, train, write_trace
from .morpho import neuron_distance, save_swc, trace
from .transfer import Checkpoint2D, checkpoint_from_params

log = logging.getLogger(__name__)

ARMS = ("random", "average", "center", "tubular")


@dataclass(frozen=True)
class DeskSettings:
    shape: tuple = (16, 48, 48)
    branches: int = 4
    radius_range: tuple = (2.5, 4.5)
    noise: float = 0.1
    tortuosity: float = 0.15
    train_seeds: tuple = tuple(range(10))
    test_seeds: tuple = (100, 101, 102)
    pretrain_data_seed: int = 900
    embed_dim: int = 8
    layers: int = 2
    heads: int = 1
    steps: int = 500
    pretrain_steps: int = 500
    lr: float = 0.1
    batch_size: int = 2
    model_seed: int = 11
    pretrain_seed: int = 7
    data_seed: int = 5
    tube_seed: int = 7

    @property
    def block(self):
        return (5,) + tuple(self.shape[1:])

    def model_config(self, strategy, depth=None, seed=None):
        d = self.block[0] if depth is None else depth
        return ModelConfig(embed_dim=self.embed_dim, layers=self.layers, heads=self.heads,
                           block=(d,) + self.block[1:], strategy=strategy, dtype="f32",
                           seed=self.model_seed if seed is None else seed)

    def to_items(self):
        out = []
        for k in ("shape", "branches", "radius_range", "noise", "tortuosity", "train_seeds",
                  "test_seeds", "pretrain_data_seed", "embed_dim", "layers", "heads", "steps",
                  "pretrain_steps", "lr", "batch_size", "model_seed", "pretrain_seed",
                  "data_seed", "tube_seed"):
            v = getattr(self, k)
            out.append((k, ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)))
        return out


def phantom_suite(settings: DeskSettings, seeds, branches=None):
    """[(volume, soft labels, tree)] for each seed."""
    out = []
    for s in seeds:
        vol, tree = gen_phantom(s, settings.shape,
                                branches=settings.branches if branches is None else branches,
                                radius_range=settings.radius_range, noise=settings.noise,
                                tortuosity=settings.tortuosity)
        out.append((vol, dt_labels(vol.shape, tree), tree))
    return out


def training_blocks(suite, block):
    blocks = []
    for vol, lab, _ in suite:
        blocks.extend(partition_blocks(vol.data, lab.data, 0.001, block=block, stride=block[1]))
    return blocks


def blob_slices(settings: DeskSettings, count=120, seed=900):
    """2D pretext images: noisy max-blended anisotropic Gaussian blobs, masked at 0.5."""
    rng = np.random.default_rng(seed)
    h, w = settings.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = []
    for _ in range(count):
        img = np.zeros((h, w))
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sy, sx = rng.uniform(2, 8, 2)
            th = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(th) + dx * np.sin(th)
            v = -dy * np.sin(th) + dx * np.cos(th)
            img = np.maximum(img, np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2)))
        label = (img >= 0.5).astype(np.float32)
        noisy = np.clip(img + rng.normal(0, settings.noise, img.shape), 0, 1)
        out.append((noisy[None].astype(np.float32), label))
    return out


def pretrain_2d(settings: DeskSettings) -> Checkpoint2D:
    """Train a depth-1 model on the blob pretext set and export it as a 2D checkpoint."""
    cfg = settings.model_config("center", depth=1, seed=settings.pretrain_seed)
    model = SegModel.random(cfg)
    train(model, blob_slices(settings, seed=settings.pretrain_data_seed),
          settings.pretrain_steps, lr=settings.lr, seed=settings.data_seed,
          batch_size=settings.batch_size)
    return checkpoint_from_params(model.state_dict(), cfg)


def build_arm(arm, settings: DeskSettings, ck: Checkpoint2D):
    cfg = settings.model_config(arm)
    return SegModel.random(cfg) if arm == "random" else SegModel.from_checkpoint(ck, cfg)


def evaluate(model, suite):
    """Per-volume (dice, hd95) of the thresholded prediction against labels >= 0.5."""
    rows = []
    for vol, lab, _ in suite:
        pred = binarize(segment_volume(model, vol).data)
        gt = binarize(lab.data)
        h = hd95(pred, gt) if pred.any() and gt.any() else float("inf")
        rows.append((dice(pred, gt), h))
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def run_desk(out_dir, settings: DeskSettings = DeskSettings(), threads=1):
    """Train and score all four arms. Returns {arm: mean test dice} and the tubular model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(threads):
        t0 = time.perf_counter()
        ck = pretrain_2d(settings)
        ck.save(out / "pretrained_2d.dtna")
        train_suite = phantom_suite(settings, settings.train_seeds)
        test_suite = phantom_suite(settings, settings.test_seeds)
        blocks = training_blocks(train_suite, settings.block)
        log.info("pretrained 2D weights in %.1fs; %d training blocks",
                 time.perf_counter() - t0, len(blocks))
        scores, rows, models = {}, [], {}
        for arm in ARMS:
            t = time.perf_counter()
            model = build_arm(arm, settings, ck)
            loss_trace = train(model, blocks, settings.steps, lr=settings.lr,
                               seed=settings.data_seed, batch_size=settings.batch_size)
            write_trace(out / f"loss_{arm}.csv", loss_trace)
            per_vol = evaluate(model, test_suite)
            for seed, (d, h) in zip(settings.test_seeds, per_vol):
                rows.append((arm, f"phantom{seed}", d, h))
            scores[arm] = float(np.mean([d for d, _ in per_vol]))
            models[arm] = model
            log.info("arm %-8s dice %.4f (%.1fs)", arm, scores[arm], time.perf_counter() - t)
    _write_csv(out / "desk_volumes.csv", ["arm", "volume_id", "dice", "hd95"], rows)
    _write_csv(out / "desk_dice.csv", ["arm", "mean_dice"], [(a, scores[a]) for a in ARMS])
    return scores, models


def single_tube_phantom(settings: DeskSettings, seed):
    vol, tree = gen_phantom(seed, settings.shape, branches=1,
                            radius_range=settings.radius_range, noise=settings.noise)
    return vol, tree


def run_reconstruction(out_dir, model, settings: DeskSettings = DeskSettings(), threads=1):
    """Segment, trace and score a single-tube phantom; also trace its ground-truth mask.

    Returns {"predicted": NeuronDistance, "ground_truth": NeuronDistance}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol, tree = single_tube_phantom(settings, settings.tube_seed)
    with threadpool_limits(threads):
        prob = segment_volume(model, vol)
    gt = dt_labels(vol.shape, tree)
    save_volume(out / "tube.vjson", vol)
    save_swc(out / "tube_gt.swc", tree)
    res = {}
    for name, field_ in (("predicted", prob.data), ("ground_truth", gt.data)):
        traced = trace(field_)
        save_swc(out / f"tube_{name}.swc", traced)
        res[name] = neuron_distance(traced, tree)
    _write_csv(out / "reconstruction.csv", ["source", "esa", "dsa", "pds"],
               [(k, v.esa, v.dsa, v.pds) for k, v in res.items()])
    return res


def run_all(out_dir, settings: DeskSettings = DeskSettings(), threads=1):
    scores, models = run_desk(out_dir, settings, threads)
    recon = run_reconstruction(out_dir, models["tubular"], settings, threads)
    return scores, recon


__all__ = ["ARMS", "DeskSettings", "phantom_suite", "training_blocks", "pretrain_2d",
           "build_arm", "evaluate", "run_desk", "run_reconstruction", "run_all",
           "single_tube_phantom", "blob_slices"]
