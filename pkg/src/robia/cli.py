"""Command-line entry points: warmup, adapt, proxy, report, bench."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import reporting
from .checkpoint import load_model, save_model
from .config import RunConfig, load_config, save_config
from .harness import run_sequence, warmup_from_config
from .proxy import proxy_label
from .types import StereoPair

BACKBONE_SUFFIX = ".backbone"


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def cmd_warmup(args) -> int:
    cfg = _load_run_config(args.config)
    student, backbone = warmup_from_config(cfg)
    save_model(args.out, student, metadata={"kind": "student",
                                            "backbone": BACKBONE_SUFFIX})
    save_model(args.out + BACKBONE_SUFFIX, backbone, metadata={"kind": "backbone"})
    print(f"wrote {args.out} and {args.out}{BACKBONE_SUFFIX}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load_run_config(args.config)
    student, _ = load_model(args.ckpt)
    backbone_path = args.ckpt + BACKBONE_SUFFIX
    backbone = None
    if os.path.exists(backbone_path):
        backbone, _ = load_model(backbone_path)
    seed = args.seed if args.seed is not None else cfg.seeds.runs[0]

    result = run_sequence(cfg, seed=seed, student=student, backbone=backbone,
                          zero_gt=args.zero_gt)
    os.makedirs(args.out_dir, exist_ok=True)
    records = result.record_dicts()
    reporting.write_records(os.path.join(args.out_dir, "records.ndjson"), records)
    save_config(cfg, os.path.join(args.out_dir, "resolved_config.yaml"))
    reporting.emit_summary(records, args.out_dir, formats=("csv", "json"),
                           plots=args.plots)
    for metric in ("epe", "d1_all"):
        print(reporting.format_table(reporting.pivot_table(records, metric)))
        print()
    print(f"wrote {len(records)} records to {args.out_dir}")
    return 0


def cmd_proxy(args) -> int:
    cfg = _load_run_config(args.params)
    with np.load(args.input) as data:
        if "left" not in data or "right" not in data:
            raise SystemExit(f"{args.input}: expected arrays 'left' and 'right'")
        pair = StereoPair(np.asarray(data["left"], dtype=np.float32),
                          np.asarray(data["right"], dtype=np.float32))
    d_proxy, masks, density = proxy_label(pair, cfg.proxy)
    out = args.out or (os.path.splitext(args.input)[0] + "_proxy.npz")
    np.savez(out, disparity=d_proxy.data, valid=masks.valid,
             invalid=masks.invalid)
    print(f"proxy density {density:.4f}; wrote {out}")
    return 0


def cmd_report(args) -> int:
    path = args.records
    if os.path.isdir(path):
        path = os.path.join(path, "records.ndjson")
    records = reporting.read_records(path)
    if not records:
        raise SystemExit(f"{path}: no records")
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(path))
    formats = (args.format,) if args.format else ("csv", "json")
    written = reporting.emit_summary(records, out_dir, formats=formats,
                                     plots=args.plots)
    for metric in ("epe", "d1_all"):
        print(reporting.format_table(reporting.pivot_table(records, metric)))
        print()
    for kind, p in written.items():
        print(f"{kind}: {p}")
    return 0


def cmd_bench(args) -> int:
    rows = bench_mod.run_bench(height=args.height, width=args.width,
                               max_disp=args.max_disp, repeats=args.repeats)
    print(bench_mod.format_bench(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robia",
        description="Continual test-time adaptation for stereo depth.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warmup", help="pre-train on clean source frames")
    p.add_argument("--config", help="YAML run config (defaults when omitted)")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=cmd_warmup)

    p = sub.add_parser("adapt", help="run the online adaptation sequence")
    p.add_argument("--config", help="YAML run config (defaults when omitted)")
    p.add_argument("--ckpt", required=True, help="warm-up checkpoint")
    p.add_argument("--out-dir", required=True, help="directory for records/summary")
    p.add_argument("--seed", type=int, help="sequence seed (default: first run seed)")
    p.add_argument("--zero-gt", action="store_true",
                   help="replace ground truth with zeros (protocol check)")
    p.add_argument("--plots", action="store_true", help="render region curves")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("proxy", help="pseudo-label one stereo pair")
    p.add_argument("--input", required=True,
                   help="npz file with float 'left'/'right' HxWx3 arrays")
    p.add_argument("--params", help="YAML config; its proxy section is used")
    p.add_argument("--out", help="output npz (default: <input>_proxy.npz)")
    p.set_defaults(fn=cmd_proxy)

    p = sub.add_parser("report", help="summarize a records file")
    p.add_argument("--records", required=True,
                   help="records.ndjson file or a directory holding one")
    p.add_argument("--format", choices=("csv", "json"),
                   help="emit only this table format (default: both)")
    p.add_argument("--plots", action="store_true", help="render region curves")
    p.add_argument("--out-dir", help="where to write tables (default: alongside)")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("bench", help="time compiled vs numpy kernels")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-disp", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
