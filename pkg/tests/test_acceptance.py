"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary block
at the end of any pytest run repeats the lines.
"""

import math
import time

import numpy as np
import pytest

from conftest import directional_check, gradcheck
from dineuro import archive
from dineuro import tensor as T
from dineuro.config import ModelConfig, init_params
from dineuro.data import Volume, load_volume, save_volume
from dineuro.errors import ArchiveError, SwcParseError, VolumeFormatError
from dineuro.experiment import DeskSettings, run_desk, run_reconstruction
from dineuro.metrics import dice, hd95
from dineuro.model import SegModel, attention, embed, forward, head, loss
from dineuro.morpho import SwcNode, SwcTree, neuron_distance, parse_swc, resample, write_swc
from dineuro.tensor import Tensor
from dineuro.transfer import fixture_checkpoint, inflate_average
from dineuro.tubular import (AXIAL, STEPS, anchors_for, embed_view, fuse_views, off_axes,
                             predict_offsets, tube_coords)

AX = {"z": 0, "y": 1, "x": 2}


# ---- 1: gradients ----------------------------------------------------------------


def _gradient_suite(rng):
    errs = {}
    vol = rng.random((4, 5, 6))
    coords = rng.uniform(0.1, 0.9, size=(12, 3)) * (np.array([3, 4, 5]) - 0.2) + 0.05
    w = rng.normal(size=12)
    errs["trilinear (volume, coordinates)"] = gradcheck(
        lambda v, c: (T.trilinear_sample(v, c) * Tensor(w)).sum(), [vol, coords])

    block = rng.random((5, 16, 16))
    anchors = anchors_for(block.shape)
    off = rng.uniform(-0.8, 0.8, size=(1, STEPS, 2))
    kern = rng.normal(size=(3, 256))
    probe = rng.normal(size=(1, 3))
    errs["tubular embedding (block, kernel, offsets)"] = gradcheck(
        lambda b, k, o: (embed_view(b, k, tube_coords(anchors, "y", o)) * Tensor(probe)).sum(),
        [block, kern, off])
    ow = rng.normal(scale=0.01, size=(5 * 256, 3 * STEPS * 2))
    ob = rng.normal(scale=0.3, size=3 * STEPS * 2)
    oprobe = {ax: rng.normal(size=(1, STEPS, 2)) for ax in "zyx"}
    errs["offset predictor"] = directional_check(
        lambda b, wt, bs: sum((o * Tensor(oprobe[ax])).sum()
                              for ax, o in predict_offsets(b, wt, bs).items()),
        [block, ow, ob], rng)

    views = [rng.normal(size=(4, 6)) for _ in range(3)] + [rng.normal(size=6), rng.normal(size=6)]
    fprobe = rng.normal(size=(4, 6))
    errs["fusion"] = gradcheck(lambda *t: (fuse_views(*t) * Tensor(fprobe)).sum(), views)

    x = rng.normal(size=(5, 8))
    mats = [rng.normal(scale=0.4, size=(8, 8)) for _ in range(4)]
    aprobe = rng.normal(size=(5, 8))

    def att(xx, q, k, v, o):
        return (attention(xx, {"a.q": q, "a.k": k, "a.v": v, "a.o": o}, "a", 2)
                * Tensor(aprobe)).sum()

    errs["attention"] = gradcheck(att, [x] + mats)

    cfg = ModelConfig(embed_dim=8, layers=1, heads=1, block=(5, 16, 16), strategy="center",
                      dtype="f64")
    hp = init_params(cfg, np.random.default_rng(2))
    hnames = ["head.conv1.w", "head.conv1.b", "head.conv2.w", "head.conv2.b", "head.out.w",
              "head.out.b"]
    hprobe = rng.normal(size=(16, 16))
    errs["segmentation head"] = gradcheck(
        lambda tok, *vals: (head(tok, dict(zip(hnames, vals)), cfg) * Tensor(hprobe)).sum(),
        [rng.normal(size=(1, 8))] + [hp[n] for n in hnames])

    label = rng.random((6, 7))
    errs["loss"] = gradcheck(lambda z: loss(z, label), [rng.normal(size=(6, 7))])

    for strategy in ("center", "tubular"):
        cfg = ModelConfig(embed_dim=8, layers=1, heads=1, block=(5, 16, 16), strategy=strategy,
                          dtype="f64")
        params = init_params(cfg, np.random.default_rng(4))
        if strategy == "tubular":
            params["offset.w"] = rng.normal(scale=0.002, size=params["offset.w"].shape)
            params["offset.b"] = rng.normal(scale=0.2, size=params["offset.b"].shape)
        names = sorted(params)
        lab = rng.random((16, 16))

        def build(blk, *vals, cfg=cfg, names=names, lab=lab):
            m = SegModel.__new__(SegModel)
            m.cfg, m.params, m.frozen = cfg, dict(zip(names, vals)), set()
            return loss(forward(m, blk), lab)

        errs[f"full model ({strategy})"] = directional_check(
            build, [rng.random((5, 16, 16))] + [params[n] for n in names], rng)
    return errs


def test_criterion_1_gradients(rng, criterion):
    t0 = time.perf_counter()
    errs = _gradient_suite(rng)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-4 and elapsed < 120
    for name, e in errs.items():
        print(f"  {name}: rel. err {e:.2e}")
    criterion(1, "gradient suite", ok, f"worst rel. err {worst:.2e} over {len(errs)} checks, "
              f"{elapsed:.1f}s")
    assert ok


# ---- 2: inflation ----------------------------------------------------------------


def test_criterion_2_inflation(rng, criterion):
    cfg = ModelConfig(embed_dim=8, layers=2, heads=1, block=(5, 32, 32), strategy="center",
                      dtype="f32")
    m = SegModel.from_checkpoint(fixture_checkpoint(tokens=4), cfg)
    worst_a = 0.0
    for _ in range(5):
        x = rng.random((5, 32, 32)).astype(np.float32)
        y = x.copy()
        y[[0, 1, 3, 4]] = rng.normal(scale=rng.uniform(0.1, 100), size=(4, 32, 32))
        worst_a = max(worst_a, float(np.max(np.abs(forward(m, x).data - forward(m, y).data))))

    cfg = ModelConfig(embed_dim=8, layers=1, heads=1, block=(5, 32, 48), strategy="average",
                      dtype="f64")
    ck = fixture_checkpoint(tokens=6)
    am = SegModel.from_checkpoint(ck, cfg)
    np.testing.assert_array_equal(am.params["patch.kernel3d"].data,
                                  inflate_average(ck.patch_kernel, 5))
    img = rng.random((32, 48))
    tok = embed(am, Tensor(np.repeat(img[None], 5, axis=0))).data
    k2 = ck.patch_kernel.sum(axis=1)  # a gray image feeds every channel
    oracle = np.zeros((6, 8))
    for i in range(2):
        for j in range(3):
            patch = img[16 * i:16 * i + 16, 16 * j:16 * j + 16]
            for e in range(8):
                oracle[i * 3 + j, e] = float(np.sum(k2[e] * patch))
    worst_b = float(np.max(np.abs(tok - oracle)))
    ok = worst_a <= 1e-6 and worst_b <= 1e-6
    criterion(2, "inflation equivalences", ok,
              f"center logit drift {worst_a:.1e}, average vs 2D oracle {worst_b:.1e}")
    assert ok


# ---- 3: tubular contracts --------------------------------------------------------


def test_criterion_3_tubular(rng, criterion):
    span_ok = step_ok = True
    for trial in range(6):
        block = Tensor(rng.random((5, 32, 32)))
        w = Tensor(rng.normal(scale=trial, size=(5 * 256, 3 * STEPS * 2)))
        b = Tensor(rng.normal(size=3 * STEPS * 2))
        anchors = anchors_for(block.shape)
        for axis, off in predict_offsets(block, w, b).items():
            c = tube_coords(anchors, axis, off).data
            a = AX[axis]
            span_ok &= bool(np.all(c[:, :, a] - anchors[:, a:a + 1] == AXIAL[None, :]))
            d = np.abs(np.diff(c, axis=1))
            span_ok &= bool(np.all(d[:, :, a] == 1))
            step_ok &= all(d[:, :, j].max() <= 1 + 1e-12 for j in off_axes(axis))

    worst_conv = 0.0
    block = rng.random((5, 32, 48))
    weights = rng.normal(size=(4, 256))
    anchors = anchors_for(block.shape)
    for axis in "zyx":
        coords = tube_coords(anchors, axis, Tensor(np.zeros((len(anchors), STEPS, 2))))
        tok = embed_view(Tensor(block), Tensor(weights), coords).data
        a = AX[axis]
        for i, anc in enumerate(anchors.astype(int)):
            idx = np.tile(anc, (256, 1))
            idx[:, a] = np.clip(anc[a] + AXIAL, 0, block.shape[a] - 1)
            line = block[idx[:, 0], idx[:, 1], idx[:, 2]]
            worst_conv = max(worst_conv, float(np.max(np.abs(tok[i] - weights @ line))))

    block = rng.random((5, 32, 32))
    wy, wx = rng.normal(size=(4, 256)), rng.normal(size=(4, 256))
    anc = rng.uniform(0, 31, size=(5, 3))
    oy, ox = rng.uniform(-1, 1, size=(2, 5, STEPS, 2))
    ty = embed_view(Tensor(block), Tensor(wy), tube_coords(anc, "y", Tensor(oy))).data
    tx = embed_view(Tensor(block), Tensor(wx), tube_coords(anc, "x", Tensor(ox))).data
    sw = np.ascontiguousarray(block.transpose(0, 2, 1))
    anc_s = anc[:, [0, 2, 1]]
    ty_s = embed_view(Tensor(sw), Tensor(wx), tube_coords(anc_s, "y", Tensor(ox))).data
    tx_s = embed_view(Tensor(sw), Tensor(wy), tube_coords(anc_s, "x", Tensor(oy))).data
    swap_ok = np.array_equal(ty_s, tx) and np.array_equal(tx_s, ty)

    ok = span_ok and step_ok and worst_conv <= 1e-6 and swap_ok
    criterion(3, "tubular contracts", ok,
              f"axial span {'ok' if span_ok else 'broken'}, step bound "
              f"{'ok' if step_ok else 'broken'}, straight-conv diff {worst_conv:.1e}, "
              f"y/x swap {'exact' if swap_ok else 'inexact'}")
    assert ok


# ---- 4: metric oracles -----------------------------------------------------------


def _hd95_oracle(a, b):
    pa = np.argwhere(a).astype(float)
    pb = np.argwhere(b).astype(float)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.sort(np.concatenate([d.min(1), d.min(0)]))
    pos = 0.95 * (len(pooled) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])


def _dice_oracle(a, b):
    sa = {tuple(p) for p in np.argwhere(a)}
    sb = {tuple(p) for p in np.argwhere(b)}
    return 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))


def _random_tree(r, n):
    nodes = [SwcNode(1, 1, *map(float, r.uniform(0, 6, 3)), 1.0, -1)]
    for i in range(2, n + 1):
        p = nodes[int(r.integers(1, i)) - 1]
        pos = np.array([p.x, p.y, p.z]) + r.normal(scale=2.0, size=3)
        nodes.append(SwcNode(i, 3, *map(float, pos), 1.0, p.id))
    return SwcTree(nodes)


def _nd_oracle(a, b, thr):
    pa, pb = resample(a, 1.0).xyz, resample(b, 1.0).xyz
    d = [min(math.dist(p, q) for q in pb) for p in pa] + \
        [min(math.dist(q, p) for p in pa) for q in pb]
    far = [x for x in d if x > thr]
    return sum(d) / len(d), (sum(far) / len(far) if far else 0.0), len(far) / len(d)


def test_criterion_4_metrics(criterion):
    r = np.random.default_rng(44)
    dice_bad = 0
    hd_worst = 0.0
    for _ in range(200):
        shape = tuple(int(s) for s in r.integers(1, 17, size=3))
        p = r.uniform(0.01, 0.3)
        a = r.random(shape) < p
        b = r.random(shape) < p
        a.flat[r.integers(a.size)] = True
        b.flat[r.integers(b.size)] = True
        dice_bad += dice(a, b) != _dice_oracle(a, b)
        hd_worst = max(hd_worst, abs(hd95(a, b) - _hd95_oracle(a, b)))
    nd_worst = 0.0
    for _ in range(50):
        ta, tb = _random_tree(r, int(r.integers(1, 8))), _random_tree(r, int(r.integers(1, 8)))
        got = tuple(neuron_distance(ta, tb, 2.0))
        nd_worst = max(nd_worst, max(abs(x - y) for x, y in zip(got, _nd_oracle(ta, tb, 2.0))))
    t = _random_tree(r, 6)
    ident = tuple(neuron_distance(t, t))
    ok = dice_bad == 0 and hd_worst <= 1e-9 and nd_worst <= 1e-9 and ident == (0.0, 0.0, 0.0)
    criterion(4, "metric oracles", ok,
              f"dice mismatches {dice_bad}/200, hd95 max diff {hd_worst:.1e}, "
              f"ESA/DSA/PDS max diff {nd_worst:.1e} over 50 pairs, identical {ident}")
    assert ok


# ---- 5: formats ------------------------------------------------------------------


def test_criterion_5_formats(tmp_path, criterion):
    r = np.random.default_rng(55)
    fails = []
    for i in range(40):
        tensors = {}
        for j in range(int(r.integers(0, 5))):
            shape = tuple(int(s) for s in r.integers(0, 5, size=int(r.integers(0, 4))))
            dt = [np.float32, np.float64][int(r.integers(0, 2))]
            tensors[f"t{j}.{'x' * int(r.integers(0, 20))}"] = (r.normal(size=shape) * 100).astype(dt)
        buf = archive.dumps(tensors)
        back = archive.loads(buf)
        if list(back) != list(tensors) or any(
                back[k].dtype != v.dtype or back[k].shape != v.shape
                or back[k].tobytes() != v.tobytes() for k, v in tensors.items()) \
                or archive.dumps(back) != buf:
            fails.append(f"archive fixture {i}")
        vol = Volume(r.random(tuple(int(s) for s in r.integers(1, 9, size=3))),
                     spacing=tuple(float(s) for s in r.uniform(0.1, 3, 3)))
        save_volume(tmp_path / f"v{i}.vjson", vol)
        vb = load_volume(tmp_path / f"v{i}.vjson")
        if vb.data.tobytes() != vol.data.tobytes() or vb.spacing != vol.spacing:
            fails.append(f"volume fixture {i}")
        tree = _random_tree(r, int(r.integers(1, 12)))
        text = write_swc(tree)
        if write_swc(parse_swc(text)) != text or parse_swc(text) != tree:
            fails.append(f"swc fixture {i}")
        messy = "\n".join("  ".join(line.split()) + "   " for line in text.splitlines())
        if write_swc(parse_swc(messy)) != text:
            fails.append(f"swc whitespace fixture {i}")

    diagnostics = []
    good = archive.dumps({"a": np.arange(3, dtype=np.float32)})
    for buf, offset in [(b"XTNA" + good[4:], 0), (good[:4] + b"\x02" + good[5:], 4),
                        (good[:-2], None)]:
        try:
            archive.loads(buf)
            diagnostics.append("archive corruption accepted")
        except ArchiveError as exc:
            if offset is not None and exc.offset != offset:
                diagnostics.append(f"archive offset {exc.offset} != {offset}")
    try:
        parse_swc("1 1 0 0 0 1 -1\n2 3 1 0 0 1 99\n")
        diagnostics.append("dangling parent accepted")
    except SwcParseError as exc:
        if exc.line != 2:
            diagnostics.append(f"swc line {exc.line} != 2")
    save_volume(tmp_path / "cut.vjson", Volume(np.zeros((2, 2, 2))))
    raw = tmp_path / "cut.vraw"
    raw.write_bytes(raw.read_bytes()[:-1])
    try:
        load_volume(tmp_path / "cut.vjson")
        diagnostics.append("truncated volume accepted")
    except VolumeFormatError as exc:
        if "expected 32 bytes, got 31" not in str(exc):
            diagnostics.append(f"volume message {exc}")
    ok = not fails and not diagnostics
    criterion(5, "format round trips", ok,
              f"{len(fails)} round-trip failures over 40x4 fuzzed fixtures, "
              f"diagnostic problems: {diagnostics or 'none'}")
    assert ok


# ---- 6-8: desk experiment --------------------------------------------------------


def _run_everything(out):
    t0 = time.perf_counter()
    scores, models = run_desk(out, DeskSettings())
    desk_time = time.perf_counter() - t0
    recon = run_reconstruction(out, models["tubular"], DeskSettings())
    return scores, recon, desk_time


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("desk_a")
    b = tmp_path_factory.mktemp("desk_b")
    first = _run_everything(a)
    second = _run_everything(b)
    return a, b, first, second


def test_criterion_6_desk_experiment(desk_runs, criterion):
    _, _, (scores, _, elapsed), _ = desk_runs
    i, ii, iii, iv = (scores[k] for k in ("random", "average", "center", "tubular"))
    ok = iv >= iii and iii >= i - 0.02 and iv >= 0.6 and elapsed < 15 * 60
    criterion(6, "desk-scale directional experiment", ok,
              f"Dice random {i:.4f}, average {ii:.4f}, center {iii:.4f}, tubular {iv:.4f}; "
              f"needs tubular >= center ({iv >= iii}), center >= random - 0.02 "
              f"({iii >= i - 0.02}), tubular >= 0.6 ({iv >= 0.6}); {elapsed:.0f}s")
    assert ok


def test_criterion_7_reconstruction(desk_runs, criterion):
    _, _, (_, recon, _), _ = desk_runs
    pred, gt = recon["predicted"], recon["ground_truth"]
    ok = pred.esa <= 1.5 and gt.esa <= 1.0
    criterion(7, "end-to-end reconstruction", ok,
              f"segment->trace ESA {pred.esa:.3f} (<= 1.5), ground-truth trace ESA "
              f"{gt.esa:.3f} (<= 1.0)")
    assert ok


def test_criterion_8_determinism(desk_runs, criterion):
    a, b, _, _ = desk_runs
    names = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".swc"))
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = bool(names) and not differ
    criterion(8, "determinism", ok,
              f"{len(names) - len(differ)}/{len(names)} CSV/SWC outputs byte-identical"
              + (f"; differing: {differ}" if differ else ""))
    assert ok
