"""Command-line entry point: synth, flow, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure. Every subcommand echoes its fully resolved configuration before
doing any work, and no subcommand mutates its inputs.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (DatasetError, attach_flow_cache, load_sequence,
                      make_samples, meta_hash, precompute_flows)
from .metrics import write_comparison_csv, write_report_json, write_scatter_csv
from .model import (BranchConfig, CheckpointError, SingleStreamModel,
                    TwoStreamModel, load_checkpoint, param_count,
                    save_checkpoint)
from .optflow import FlowCacheError, FlowParams, encode_flow_rgb, read_flow
from .selfcheck import GRADCHECK_THRESHOLD, gradcheck_suite, suite_passes
from .trainer import (NumericalError, TrainConfig, assemble_two_stream,
                      evaluate_model, fine_tune, train_branch)
from .synth import SynthConfig, synth_generate

__all__ = ["main"]


class UsageError(Exception):
    """Flag combinations argparse cannot express (conditional requirements)."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("%s: error: %s\n" % (self.prog, message))
        raise SystemExit(1)


def _echo(subcommand, resolved):
    print("config: %s" % json.dumps({"subcommand": subcommand, **resolved},
                                    sort_keys=True))


def _parse_blocks(text):
    try:
        channels = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise DatasetError("bad --blocks %r; expected comma-separated channel "
                           "counts like 16,32,64" % (text,))
    if not channels:
        raise DatasetError("bad --blocks %r; needs at least one channel count"
                           % (text,))
    return BranchConfig(blocks=tuple((c, 3, 2, 1) for c in channels))


def _parse_hidden(text):
    if not text.strip():
        return ()
    try:
        return tuple(int(c) for c in text.split(",") if c.strip())
    except ValueError:
        raise DatasetError("bad --mlp-hidden %r; expected comma-separated "
                           "widths like 64" % (text,))


def _flow_params(args):
    return FlowParams(pyramid_scale=args.pyramid_scale, levels=args.levels,
                      window_size=args.window_size, iterations=args.iterations,
                      poly_n=args.poly_n, poly_sigma=args.poly_sigma)


def _add_flow_flags(p):
    d = FlowParams()
    p.add_argument("--pyramid-scale", type=float, default=d.pyramid_scale)
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--window-size", type=int, default=d.window_size)
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--poly-n", type=int, default=d.poly_n)
    p.add_argument("--poly-sigma", type=float, default=d.poly_sigma)


def build_parser():
    parser = _Parser(prog="tsnet",
                     description="Two-stream spatiotemporal steering regressor")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic driving scene")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--band-width", type=float, default=10.0)
    p.add_argument("--k1", type=float, default=0.5)
    p.add_argument("--k2", type=float, default=2.0)
    p.add_argument("--amplitude", type=float, default=10.0)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--freq-lo", type=float, default=0.012)
    p.add_argument("--freq-hi", type=float, default=0.08)
    p.add_argument("--center-offset", type=float, default=0.0)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--clutter", type=float, default=0.0)
    p.add_argument("--clutter-seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("flow", help="precompute the optical-flow cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="cache dir (default <data>/flows)")
    p.add_argument("--viz", default=None, help="write encoded flow PNGs here")
    _add_flow_flags(p)

    p = sub.add_parser("train", help="stage-1 branch or stage-2 fine-tune")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--stream", choices=("spatial", "temporal"))
    p.add_argument("--ckpt", action="append", default=[],
                   help="stage 2: the two stage-1 checkpoints (spatial, temporal)")
    p.add_argument("--flow-cache", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="mtl_lambda", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", default="16,32,64,128")
    p.add_argument("--mlp-hidden", default="64")
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--no-freeze", action="store_true",
                   help="stage 2: also update branch weights")
    p.add_argument("--augment", action="store_true")

    p = sub.add_parser("eval", help="evaluate checkpoints on a held-out set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", action="append", default=[], required=True)
    p.add_argument("--flow-cache", default=None)
    p.add_argument("--dt", type=float, default=None,
                   help="sample period in seconds (default from dataset rate)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--eps", type=float, default=1e-6)
    return parser


def cmd_synth(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError("output dir %s exists and is not empty; "
                           "pass --force to overwrite" % (out,))
    cfg = SynthConfig(width=args.width, height=args.height, n_frames=args.frames,
                      seed=args.seed, band_width=args.band_width,
                      k1=args.k1, k2=args.k2, sample_rate_hz=args.rate,
                      center_offset_px=args.center_offset,
                      n_motion_components=args.components,
                      max_amplitude=args.amplitude,
                      freq_range=(args.freq_lo, args.freq_hi),
                      noise_std=args.noise_std, clutter=args.clutter,
                      clutter_seed=args.clutter_seed)
    _echo("synth", {"out": str(out), **dataclasses.asdict(cfg)})
    synth_generate(cfg, out)
    print("wrote %d frames + steering.csv + meta.json to %s (meta sha256 %s)"
          % (args.frames, out, meta_hash(out)))
    return 0


def cmd_flow(args):
    seq = load_sequence(args.data)
    params = _flow_params(args)
    cache = Path(args.out) if args.out else seq.root / "flows"
    _echo("flow", {"data": str(seq.root), "out": str(cache),
                   "viz": args.viz, **dataclasses.asdict(params)})
    precompute_flows(seq, params=params, cache_dir=cache)
    print("flow cache: %d pairs in %s (max magnitude %.4f)"
          % (seq.n_frames - 1, cache, seq.flow_max_magnitude))
    if args.viz:
        viz = Path(args.viz)
        viz.mkdir(parents=True, exist_ok=True)
        for i in range(seq.n_frames - 1):
            flow = read_flow(cache / ("flow_%06d.bin" % i))
            rgb = encode_flow_rgb(flow, seq.flow_max_magnitude)
            Image.fromarray(rgb).save(viz / ("flow_%06d.png" % i))
        print("wrote %d visualization PNGs to %s" % (seq.n_frames - 1, viz))
    return 0


def _train_common(args):
    seq = load_sequence(args.data)
    cache = Path(args.flow_cache) if args.flow_cache else seq.root / "flows"
    attach_flow_cache(seq, cache)
    samples = make_samples(seq)
    return seq, cache, samples


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        if not args.stream:
            raise UsageError("stage 1 needs --stream spatial|temporal")
        cfg = TrainConfig(stage=1,
                          lr=args.lr if args.lr is not None else 1e-4,
                          batch_size=args.batch if args.batch is not None else 64,
                          epochs=args.epochs if args.epochs is not None else 30,
                          mtl_lambda=args.mtl_lambda,
                          shuffle_seed=args.seed, augment=args.augment)
        seq, cache, samples = _train_common(args)
        branch = _parse_blocks(args.blocks)
        resolved = {"data": str(seq.root), "out": str(out), "stage": 1,
                    "stream": args.stream, "blocks": args.blocks,
                    "dropout": args.dropout, "seed": args.seed,
                    **cfg.to_dict()}
        _echo("train", resolved)
        model, report = train_branch(samples, branch,
                                     (seq.height, seq.width), args.dropout,
                                     args.stream, cfg, init_seed=args.seed,
                                     log=print)
        ckpt = out / ("stage1_%s.ckpt" % args.stream)
        extra = {"data_meta_sha256": meta_hash(seq.root),
                 "flow_max_magnitude": seq.flow_max_magnitude,
                 "train_config": cfg.to_dict(), "init_seed": args.seed}
        save_checkpoint(model, ckpt, stage="stage1:%s" % args.stream,
                        extra=extra)
        _write_stage_report(out / ("stage1_%s_report.json" % args.stream), report)
        print("checkpoint: %s (%d params, final loss %.6f, %.1fs)"
              % (ckpt, param_count(model), report.final_loss,
                 report.wall_time_s))
        return 0

    if len(args.ckpt) != 2:
        raise UsageError("stage 2 needs exactly two --ckpt arguments "
                         "(stage-1 spatial and temporal), got %d" % len(args.ckpt))
    cfg = TrainConfig(stage=2,
                      lr=args.lr if args.lr is not None else 0.5e-4,
                      batch_size=args.batch if args.batch is not None else 8,
                      epochs=args.epochs if args.epochs is not None else 1,
                      mtl_lambda=args.mtl_lambda, shuffle_seed=args.seed,
                      freeze_branches=not args.no_freeze, augment=args.augment)
    seq, cache, samples = _train_common(args)
    resolved = {"data": str(seq.root), "out": str(out), "stage": 2,
                "ckpts": [str(c) for c in args.ckpt],
                "mlp_hidden": args.mlp_hidden, "dropout": args.dropout,
                "seed": args.seed, **cfg.to_dict()}
    _echo("train", resolved)
    model = assemble_two_stream(args.ckpt[0], args.ckpt[1],
                                mlp_hidden=_parse_hidden(args.mlp_hidden),
                                dropout_p=args.dropout, init_seed=args.seed)
    model, report = fine_tune(model, samples, cfg, log=print)
    ckpt = out / "two_stream.ckpt"
    extra = {"data_meta_sha256": meta_hash(seq.root),
             "flow_max_magnitude": seq.flow_max_magnitude,
             "train_config": cfg.to_dict(), "init_seed": args.seed,
             "stage1_checkpoints": [str(c) for c in args.ckpt]}
    save_checkpoint(model, ckpt, stage="stage2", extra=extra)
    _write_stage_report(out / "stage2_report.json", report)
    print("checkpoint: %s (%d params, final loss %.6f, %.1fs)"
          % (ckpt, param_count(model), report.final_loss, report.wall_time_s))
    return 0


def _write_stage_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def _model_row_name(model):
    if isinstance(model, TwoStreamModel):
        return "two_stream_mtl"
    return "%s_only" % model.stream


def cmd_eval(args):
    seq = load_sequence(args.data)
    cache = Path(args.flow_cache) if args.flow_cache else seq.root / "flows"
    attach_flow_cache(seq, cache)
    test_hash = meta_hash(seq.root)
    dt = args.dt if args.dt is not None else 1.0 / seq.sample_rate_hz
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo("eval", {"data": str(seq.root), "out": str(out),
                   "ckpts": [str(c) for c in args.ckpt], "dt": dt})

    reports = []
    for ckpt_path in args.ckpt:
        model = load_checkpoint(ckpt_path)
        extra = getattr(model, "extra", {}) or {}
        train_hash = extra.get("data_meta_sha256")
        if train_hash is not None and train_hash == test_hash:
            raise DatasetError(
                "leakage: checkpoint %s was trained on this exact dataset "
                "(meta sha256 %s); evaluate on a held-out sequence"
                % (ckpt_path, test_hash))
        samples = make_samples(seq, max_magnitude=extra.get("flow_max_magnitude"))
        name = _model_row_name(model)
        report, preds = evaluate_model(name, model, samples, dt)
        trues = np.array([s.target_main for s in samples])
        stamps = np.array([seq.records[s.index].timestamp_s for s in samples])
        write_report_json(report, out / ("%s_report.json" % name))
        write_scatter_csv(out / ("%s_scatter.csv" % name), stamps, preds,
                          trues, dt)
        reports.append(report)
        print("%s: rmse %.4f deg, whiteness %.4f (true %.4f)"
              % (name, report.rmse_deg, report.whiteness_pred,
                 report.whiteness_true))
    write_comparison_csv(out / "comparison.csv", reports)
    print("comparison table: %s" % (out / "comparison.csv"))
    return 0


def cmd_gradcheck(args):
    _echo("gradcheck", {"eps": args.eps, "threshold": GRADCHECK_THRESHOLD})
    results = gradcheck_suite(eps=args.eps)
    width = max(len(k) for k in results)
    for name in sorted(results):
        status = "PASS" if results[name] < GRADCHECK_THRESHOLD else "FAIL"
        print("  %-*s %.3e  %s" % (width, name, results[name], status))
    if not suite_passes(results):
        print("gradient check FAILED (threshold %g)" % GRADCHECK_THRESHOLD)
        return 3
    print("gradient check passed: %d checks, max err %.3e"
          % (len(results), max(results.values())))
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"synth": cmd_synth, "flow": cmd_flow, "train": cmd_train,
                "eval": cmd_eval, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.subcommand](args)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, NotADirectoryError) as exc:
        # DatasetError, FlowCacheError, and CheckpointError are ValueErrors;
        # plain ValueError covers config validation (e.g. band excursion).
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except NumericalError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
