"""Command-line entry point: ``dineuro <subcommand> ...``.

Every subcommand writes into ``--out-dir``, echoes its resolved settings to
``run_config.txt`` and appends one JSON record to ``manifest.jsonl``.
Model directories also hold ``config.txt``, the model geometry that
``segment``, ``tubes`` and ``train --init`` read back. Apart from the manifest's wall-clock
field, outputs depend only on inputs, flags and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensor as T
from .config import AXES, ModelConfig
from .data import dt_labels, gen_phantom, load_volume, partition_blocks, save_volume
from .errors import (ArchiveError, ContractError, DimensionError, EmptyTraceError,
                     IncompatibleCheckpointError, SwcParseError, UndefinedDistanceError,
                     VolumeFormatError)
from .metrics import binarize, dice, hd95, write_rows
from .model import SegModel, _pad_block, segment_volume, train
from .morpho import neuron_distance, read_swc, save_swc, trace
from .report import bar_chart, line_chart, read_loss_csv, read_metric_csv, write_table
from .transfer import Checkpoint2D, flatten_tubular
from .tubular import anchors_for, build_tube, predict_offsets, write_grid_csv

log = logging.getLogger("dineuro")

MANIFEST = "manifest.jsonl"
CONFIG = "config.txt"
MODEL = "model.dtna"
RUN_CONFIG = "run_config.txt"


class UsageError(Exception):
    pass


# ---- config files ---------------------------------------------------------------


def read_kv(path):
    items = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        items.append((k.strip(), v.strip()))
    return items


def write_kv(path, items):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items))


def _overrides(args):
    out = []
    for s in args.set or []:
        if "=" not in s:
            raise UsageError(f"--set expects key=value, got {s!r}")
        k, v = s.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def model_config(args, base_items=(), forced=()):
    """Model config from (later wins) ``base_items``, ``--config``, ``--set``, ``forced``."""
    items = list(base_items)
    if getattr(args, "config", None):
        items += read_kv(_need(args.config))
    items += _overrides(args)
    items += list(forced)
    try:
        return ModelConfig.from_items(items)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _need(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def _model_dir_config(model_path):
    cfg_path = Path(model_path).parent / CONFIG
    return read_kv(cfg_path) if cfg_path.exists() else []


# ---- manifest -------------------------------------------------------------------


def append_manifest(out_dir, args, config_items, inputs, outputs, started):
    rec = {"subcommand": args.cmd,
           "config": {k: v for k, v in config_items},
           "inputs": [str(p) for p in inputs],
           "outputs": [str(p) for p in outputs],
           "seed": args.seed,
           "version": __version__,
           "wall_clock_s": round(time.perf_counter() - started, 3)}
    with open(Path(out_dir) / MANIFEST, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---- subcommands ----------------------------------------------------------------


def cmd_transfer(args, out):
    ck = Checkpoint2D.load(_need(args.input))
    cfg = model_config(args, [("seed", str(args.seed))], forced=[("strategy", args.strategy)])
    if cfg.strategy == "random":
        raise UsageError("transfer needs strategy average, center or tubular")
    model = SegModel.from_checkpoint(ck, cfg, seed=args.seed)
    model.save(out / MODEL)
    write_kv(out / CONFIG, cfg.to_items())
    outputs = [out / MODEL, out / CONFIG]
    if cfg.strategy == "tubular":
        # reload and confirm the three per-axis kernels
        back = SegModel.load(out / MODEL, cfg)
        for ax in AXES:
            want = flatten_tubular(ck.patch_kernel, ax, cfg.channel_reduction).weights
            got = back.params[f"tube.{ax}.w"].data
            if not np.allclose(got, want.astype(got.dtype), rtol=0, atol=1e-6):
                raise ContractError(f"reloaded tube.{ax}.w does not match the flattened kernel")
    return cfg.to_items(), [args.input], outputs


def _parse_triple(s, cast=int):
    parts = [cast(p) for p in str(s).replace("x", ",").split(",")]
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated values, got {s!r}")
    return tuple(parts)


def cmd_phantom(args, out):
    shape = _parse_triple(args.shape)
    radius = tuple(float(v) for v in args.radius.split(","))
    vol, tree = gen_phantom(args.seed, shape, branches=args.branches, radius_range=radius,
                            noise=args.noise, tortuosity=args.tortuosity)
    labels = dt_labels(vol.shape, tree)
    save_volume(out / "phantom.vjson", vol)
    save_volume(out / "labels.vjson", labels)
    save_swc(out / "phantom.swc", tree)
    items = [("shape", "x".join(map(str, shape))), ("branches", str(args.branches)),
             ("radius", args.radius), ("noise", str(args.noise)),
             ("tortuosity", str(args.tortuosity))]
    outputs = [out / n for n in ("phantom.vjson", "phantom.vraw", "labels.vjson", "labels.vraw",
                                 "phantom.swc")]
    return items, [], outputs


def _dataset(dirs, block, stride):
    blocks, inputs = [], []
    for d in dirs:
        d = Path(d)
        vol = load_volume(_need(d / "phantom.vjson"))
        lab = load_volume(_need(d / "labels.vjson"))
        inputs += [d / "phantom.vjson", d / "labels.vjson"]
        blocks += partition_blocks(vol.data, lab.data, 0.001, block=block, stride=stride)
    if not blocks:
        raise UsageError("no training blocks pass the foreground threshold")
    return blocks, inputs


def cmd_train(args, out):
    base = _model_dir_config(args.init) if args.init else []
    base = base + [("seed", str(args.seed))]
    cfg = model_config(args, base)
    blocks, inputs = _dataset(args.data, cfg.block, args.stride or cfg.block[1])
    if args.init:
        model = SegModel.load(_need(args.init), cfg)
        inputs.append(args.init)
    else:
        model = SegModel.random(cfg)
    log.info("training on %d blocks for %d steps", len(blocks), args.steps)
    train(model, blocks, args.steps, lr=args.lr, seed=args.seed, batch_size=args.batch_size,
          trace_path=out / "loss.csv", log_every=args.log_every, logger=log)
    model.save(out / MODEL)
    write_kv(out / CONFIG, cfg.to_items())
    items = cfg.to_items() + [("steps", str(args.steps)), ("lr", str(args.lr)),
                              ("batch_size", str(args.batch_size))]
    return items, inputs, [out / "loss.csv", out / MODEL, out / CONFIG]


def _load_model(args):
    cfg = model_config(args, _model_dir_config(args.model))
    return SegModel.load(_need(args.model), cfg), cfg


def cmd_segment(args, out):
    model, cfg = _load_model(args)
    vol = load_volume(_need(args.volume))
    prob = segment_volume(model, vol)
    save_volume(out / "prob.vjson", prob)
    return cfg.to_items(), [args.model, args.volume], [out / "prob.vjson", out / "prob.vraw"]


def cmd_trace(args, out):
    vol = load_volume(_need(args.prob))
    tree = trace(vol.data, binarize=args.threshold, prune_len=args.prune_len)
    save_swc(out / "trace.swc", tree)
    items = [("threshold", str(args.threshold)), ("prune_len", str(args.prune_len))]
    return items, [args.prob], [out / "trace.swc"]


def cmd_metrics(args, out):
    inputs, outputs = [], []
    items = [("threshold", str(args.threshold))]
    if args.pred:
        if not args.gt or len(args.gt) != len(args.pred):
            raise UsageError("--pred and --gt need the same number of volumes")
        rows = []
        for p, g in zip(args.pred, args.gt):
            a = binarize(load_volume(_need(p)).data, args.threshold)
            b = binarize(load_volume(_need(g)).data, args.threshold)
            rows.append((Path(p).stem, dice(a, b), hd95(a, b)))
            inputs += [p, g]
        write_rows(out / "metrics.csv", rows, args.threshold)
        outputs.append(out / "metrics.csv")
    if args.swc_pred:
        if not args.swc_gt or len(args.swc_gt) != len(args.swc_pred):
            raise UsageError("--swc-pred and --swc-gt need the same number of files")
        rows = []
        for p, g in zip(args.swc_pred, args.swc_gt):
            d = neuron_distance(read_swc(_need(p)), read_swc(_need(g)), args.distance_threshold)
            rows.append((Path(p).stem, d.esa, d.dsa, d.pds))
            inputs += [p, g]
        write_table(out / "morphology.csv", ["tree_id", "esa", "dsa", "pds"], rows)
        outputs.append(out / "morphology.csv")
        items.append(("distance_threshold", str(args.distance_threshold)))
    if not outputs:
        raise UsageError("metrics needs --pred/--gt or --swc-pred/--swc-gt")
    return items, inputs, outputs


def cmd_report(args, out):
    losses, metrics, inputs = {}, {}, []
    for d in args.runs:
        d = Path(d)
        name = d.name or str(d)
        loss_path, metric_path = d / "loss.csv", d / "metrics.csv"
        if loss_path.exists():
            losses[name] = read_loss_csv(loss_path)
            inputs.append(loss_path)
        if metric_path.exists():
            metrics[name] = read_metric_csv(metric_path)
            inputs.append(metric_path)
    if not losses and not metrics:
        raise FileNotFoundError(f"missing input file: no loss.csv or metrics.csv under {args.runs}")
    outputs = []
    if losses:
        (out / "loss.svg").write_text(line_chart(losses, title="training loss"))
        write_table(out / "loss_summary.csv", ["run", "steps", "first_loss", "last_loss"],
                    [(k, len(v), v[0], v[-1]) for k, v in losses.items()])
        outputs += [out / "loss.svg", out / "loss_summary.csv"]
    if metrics:
        (out / "metrics.svg").write_text(
            bar_chart({k: v["dice"] for k, v in metrics.items()}, title="mean dice",
                      ylabel="dice"))
        write_table(out / "metric_summary.csv", ["run", "dice", "hd95"],
                    [(k, v["dice"], v["hd95"]) for k, v in metrics.items()])
        outputs += [out / "metrics.svg", out / "metric_summary.csv"]
    return [], inputs, outputs


def cmd_tubes(args, out):
    model, cfg = _load_model(args)
    if cfg.strategy != "tubular":
        raise UsageError("tubes needs a tubular model")
    vol = load_volume(_need(args.volume))
    d, h, w = cfg.block
    z0 = args.z - d // 2
    if z0 < 0 or z0 + d > vol.shape[0] or vol.shape[1] < h or vol.shape[2] < w:
        raise UsageError(f"a {cfg.block} block centred at z={args.z} does not fit {vol.shape}")
    block = _pad_block(np.ascontiguousarray(vol.data[z0:z0 + d, :h, :w]), cfg)
    with T.no_grad():
        offsets = predict_offsets(block, model.params["offset.w"], model.params["offset.b"])
    anchors = anchors_for(block.shape)
    if not 0 <= args.anchor < len(anchors):
        raise UsageError(f"anchor index must be in [0, {len(anchors)})")
    outputs = []
    for ax in AXES:
        grid = build_tube(anchors[args.anchor], ax, offsets[ax].data[args.anchor])
        path = out / f"tube_{ax}_{args.anchor}.csv"
        write_grid_csv(path, grid)
        outputs.append(path)
    return [("z", str(args.z)), ("anchor", str(args.anchor))], [args.model, args.volume], outputs


def cmd_desk(args, out):
    from .experiment import DeskSettings, run_all
    settings = DeskSettings(steps=args.steps)
    scores, recon = run_all(out, settings, threads=args.threads or 1)
    for arm, s in scores.items():
        log.info("dice %-8s %.4f", arm, s)
    for k, v in recon.items():
        log.info("reconstruction %-12s esa %.3f dsa %.3f pds %.3f", k, v.esa, v.dsa, v.pds)
    skip = (MANIFEST, RUN_CONFIG)
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in skip)
    return settings.to_items(), [], outputs


COMMANDS = {"transfer": cmd_transfer, "phantom": cmd_phantom, "train": cmd_train,
            "segment": cmd_segment, "trace": cmd_trace, "metrics": cmd_metrics,
            "report": cmd_report, "tubes": cmd_tubes, "desk": cmd_desk}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="flat key=value model config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out-dir", required=True)
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dineuro", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("transfer", parents=[common], help="seed a 3D model from a 2D archive")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--strategy", required=True, choices=["average", "center", "tubular"])

    s = sub.add_parser("phantom", parents=[common], help="synthetic neurite volume + SWC")
    s.add_argument("--shape", default="16,48,48", help="D,H,W")
    s.add_argument("--branches", type=int, default=3)
    s.add_argument("--radius", default="1.5,3.0", help="min,max radius")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--tortuosity", type=float, default=0.0)

    s = sub.add_parser("train", parents=[common], help="train on phantom directories")
    s.add_argument("--data", nargs="+", required=True,
                   help="directories holding phantom.vjson and labels.vjson")
    s.add_argument("--init", help="model.dtna to start from (its config.txt is used)")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--stride", type=int, default=None)
    s.add_argument("--log-every", type=int, default=50)

    s = sub.add_parser("segment", parents=[common], help="probability volume from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)

    s = sub.add_parser("trace", parents=[common], help="skeleton tracing to SWC")
    s.add_argument("--prob", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--prune-len", type=int, default=5)

    s = sub.add_parser("metrics", parents=[common], help="dice/hd95 and ESA/DSA/PDS tables")
    s.add_argument("--pred", nargs="+")
    s.add_argument("--gt", nargs="+")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--swc-pred", nargs="+")
    s.add_argument("--swc-gt", nargs="+")
    s.add_argument("--distance-threshold", type=float, default=2.0)

    s = sub.add_parser("report", parents=[common], help="SVG charts and CSV summaries")
    s.add_argument("--runs", nargs="+", required=True)

    s = sub.add_parser("tubes", parents=[common], help="dump one anchor's tube grids to CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--z", type=int, required=True, help="center slice of the block")
    s.add_argument("--anchor", type=int, default=0)

    s = sub.add_parser("desk", parents=[common],
                       help="four-arm phantom comparison and reconstruction check")
    s.add_argument("--steps", type=int, default=500)
    return p


KNOWN_ERRORS = (ArchiveError, ContractError, DimensionError, EmptyTraceError,
                IncompatibleCheckpointError, SwcParseError, UndefinedDistanceError,
                VolumeFormatError, ValueError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    started = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(args.threads):
            items, inputs, outputs = COMMANDS[args.cmd](args, out)
        missing = [str(p) for p in outputs if not Path(p).exists()]
        if missing:
            raise ContractError(f"declared outputs were not written: {missing}")
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KNOWN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    write_kv(out / RUN_CONFIG, [("subcommand", args.cmd), ("seed", str(args.seed))] + list(items))
    append_manifest(out, args, items, inputs, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
