"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, inspect-kernels,
dump-contrast.  Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fileio, report
from .backbone import IR, RGB, embed
from .config import ConfigError, RunConfig, describe_keys, load_config
from .contrast import SamplingConfig, contrastive_correlate, contrastive_kernels, kernel_origins, sample_kernels
from .datagen import DataError, generate_dataset, read_dataset, write_dataset
from .gradsuite import run_suite
from .model import build_model, load_model
from .retrieval import evaluate
from .train import NumericAbort, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_or_default_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _train_split(cfg: RunConfig):
    return generate_dataset(cfg.data_seed, cfg.train_ids, cfg.per_modality)


def _test_split(cfg: RunConfig):
    return generate_dataset(cfg.data_seed, cfg.test_ids, cfg.per_modality,
                            first_id=cfg.train_ids)


def _split_eval_sets(samples):
    queries = [s for s in samples if s.modality == IR]
    gallery = [s for s in samples if s.modality == RGB]
    if not queries or not gallery:
        raise DataError("evaluation set needs samples of both modalities")
    return queries, gallery


def cmd_gen_data(args) -> int:
    samples = generate_dataset(args.seed, args.ids, args.per_modality,
                               first_id=args.first_id)
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({args.ids} identities, "
          f"{args.per_modality} per modality) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_or_default_config(args.config)
    if args.checkpoint:
        cfg.checkpoint_path = args.checkpoint
    if args.report_dir:
        cfg.report_dir = args.report_dir
    if args.dataset:
        cfg.dataset_path = args.dataset
    if os.path.exists(cfg.dataset_path):
        dataset = read_dataset(cfg.dataset_path)
        print(f"loaded {len(dataset)} samples from {cfg.dataset_path}")
    else:
        dataset = _train_split(cfg)
        print(f"dataset {cfg.dataset_path} not found; generated "
              f"{len(dataset)} samples from config seeds")

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  lr {rec.lr:.4f}  pbce {rec.pbce:.4f}  "
              f"id {rec.id:.4f}  total {rec.total:.4f}  {rec.seconds:.1f}s")
        sys.stdout.flush()

    _model, _opt, log = train(cfg, dataset, progress)
    csv_path = os.path.join(cfg.report_dir, "train_log.csv")
    report.write_train_log(log, csv_path)
    report.plot_train_log(log, os.path.join(cfg.report_dir, "loss_curves.png"))
    print(f"checkpoint: {cfg.checkpoint_path}")
    print(f"train log: {csv_path}")
    return EXIT_OK


def _build_from_config(cfg: RunConfig, checkpoint: str):
    model = build_model(cfg.backbone_config(), cfg.sampling_config(),
                        num_classes=cfg.train_ids)
    load_model(checkpoint, model)
    return model


def cmd_eval(args) -> int:
    cfg = _load_or_default_config(args.config)
    if args.mode:
        cfg.eval_mode = args.mode
    if args.report_dir:
        cfg.report_dir = args.report_dir
    checkpoint = args.checkpoint or cfg.checkpoint_path
    model = _build_from_config(cfg, checkpoint)
    if args.dataset:
        samples = read_dataset(args.dataset)
    else:
        samples = _test_split(cfg)
    queries, gallery = _split_eval_sets(samples)
    modes = ("simplified", "full") if cfg.eval_mode == "both" else (cfg.eval_mode,)
    for mode in modes:
        result = evaluate(model, queries, gallery, mode)
        paths = report.write_eval_report(result, mode, cfg.report_dir)
        print(f"[{mode}] cmc-1 {result.cmc[0]:.4f}  map {result.map:.4f}  "
              f"backbone_evals {result.backbone_evals}  ccn_evals {result.ccn_evals}")
        print(f"[{mode}] report: {paths['txt']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.width == 64 else np.float32
    tolerance = 1e-6 if args.width == 64 else 1e-3
    results = run_suite(dtype, eps=args.eps)
    worst = max(r.error for r in results)
    for r in results:
        flag = "ok" if r.error < tolerance else "FAIL"
        print(f"{r.name:32s} {r.error:.3e}  {flag}")
    print(f"max relative error: {worst:.3e} (tolerance {tolerance:.0e}, "
          f"{args.width}-bit)")
    return EXIT_OK if worst < tolerance else EXIT_NUMERIC


def cmd_inspect_kernels(args) -> int:
    for snap in (False, True):
        cfg = SamplingConfig(h_k=args.kh, w_k=args.kw,
                             stride_v=args.stride_v, stride_h=args.stride_h,
                             edge_snap=snap)
        origins = kernel_origins(args.map_h, args.map_w, cfg)
        label = "edge-snapped" if snap else "plain grid"
        print(f"{label}: {len(origins)} kernels on {args.map_h}x{args.map_w} map "
              f"(kernel {args.kh}x{args.kw}, strides {args.stride_v}/{args.stride_h})")
        print("  origins: " + " ".join(f"({i},{j})" for i, j in origins))
    print("note: the two enumerations differ whenever a stride skips the last "
          "valid row/column; pick via ccn.edge_snap")
    return EXIT_OK


def cmd_dump_contrast(args) -> int:
    cfg = _load_or_default_config(args.config)
    checkpoint = args.checkpoint or cfg.checkpoint_path
    model = _build_from_config(cfg, checkpoint)
    samples = read_dataset(args.dataset) if args.dataset else _test_split(cfg)
    queries, gallery = _split_eval_sets(samples)
    if not 0 <= args.query_index < len(queries):
        raise DataError(f"query index {args.query_index} out of range "
                        f"(have {len(queries)} queries)")
    if not 0 <= args.gallery_index < len(gallery):
        raise DataError(f"gallery index {args.gallery_index} out of range "
                        f"(have {len(gallery)} gallery images)")
    q = queries[args.query_index]
    g = gallery[args.gallery_index]
    f_q = embed(model.backbone, q.image, q.modality)
    f_g = embed(model.backbone, g.image, g.modality)
    kc = contrastive_kernels(sample_kernels(f_g, model.sampling),
                             sample_kernels(f_q, model.sampling))
    written = []
    for tag, feat_map in (("query", f_q), ("gallery", f_g)):
        feature = contrastive_correlate(kc, feat_map)
        written += report.write_contrast_dump(feature.map.data, args.out_dir,
                                              stem=f"contrast_{tag}")
    print(f"query identity {q.identity} ({q.modality}) vs gallery identity "
          f"{g.identity} ({g.modality})")
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccreid",
        description="Cross-modality person re-identification via contrastive "
                    "correlation, on a self-contained tensor engine.",
        epilog="config keys (defaults in parentheses-free form):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic dataset to a file")
    gen.add_argument("--ids", type=int, default=32, help="number of identities")
    gen.add_argument("--per-modality", type=int, default=20,
                     help="images per identity per modality")
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--first-id", type=int, default=0,
                     help="first identity label (use to carve disjoint splits)")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model end to end")
    tr.add_argument("--config", help="run config file (defaults when omitted)")
    tr.add_argument("--dataset", help="override paths.dataset")
    tr.add_argument("--checkpoint", help="override paths.checkpoint")
    tr.add_argument("--report-dir", help="override paths.report")
    tr.add_argument("--threads", type=int, default=1,
                    help="compute threads (only 1 is implemented; kept for "
                         "script compatibility)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on held-out identities")
    ev.add_argument("--config", help="run config file (defaults when omitted)")
    ev.add_argument("--checkpoint", help="override paths.checkpoint")
    ev.add_argument("--dataset", help="evaluation dataset file (generated "
                                      "held-out split when omitted)")
    ev.add_argument("--mode", choices=["simplified", "full", "both"],
                    help="override eval.mode")
    ev.add_argument("--report-dir", help="override paths.report")
    ev.add_argument("--threads", type=int, default=1,
                    help="compute threads (only 1 is implemented)")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--width", type=int, choices=[32, 64], default=64)
    gc.add_argument("--eps", type=float, help="central-difference step")
    gc.set_defaults(func=cmd_gradcheck)

    ik = sub.add_parser("inspect-kernels",
                        help="enumerate sampling grids under both loop variants")
    ik.add_argument("--map-h", type=int, default=8)
    ik.add_argument("--map-w", type=int, default=4)
    ik.add_argument("--kh", type=int, default=3)
    ik.add_argument("--kw", type=int, default=3)
    ik.add_argument("--stride-v", type=int, default=1)
    ik.add_argument("--stride-h", type=int, default=1)
    ik.set_defaults(func=cmd_inspect_kernels)

    dc = sub.add_parser("dump-contrast",
                        help="write one pair's contrastive feature channels")
    dc.add_argument("--config", help="run config file (defaults when omitted)")
    dc.add_argument("--checkpoint", help="override paths.checkpoint")
    dc.add_argument("--dataset", help="dataset file (generated split when omitted)")
    dc.add_argument("--query-index", type=int, default=0)
    dc.add_argument("--gallery-index", type=int, default=0)
    dc.add_argument("--out-dir", default="runs/contrast")
    dc.set_defaults(func=cmd_dump_contrast)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, fileio.FileFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
