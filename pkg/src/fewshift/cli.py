"""Command-line entry points.

Subcommands:
  sweep      run the full variant x fraction x lr x seed protocol
  zero-shot  evaluate a variant with no task training
  scaling    data-parallel scaling study over worker counts
  report     emit CSV/JSON/plot-data (and rendered figures) from a results store
  reduce     run one rank of a socket-transport ring all-reduce
  dataset    export the synthetic dataset splits as newline-delimited JSON
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import export_ndjson, generate_dataset
from .dist import SocketTransport, read_group_file, ring_all_reduce
from .experiment import (
    RESULTS_ENV_VAR,
    ExperimentConfig,
    ResultsStore,
    emit_report,
    emit_scaling_report,
    run_scaling_study,
    run_sweep,
    run_zero_shot,
)


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.from_json(path) if path else ExperimentConfig()


def _store_path(arg: str | None) -> str:
    return arg or os.environ.get(RESULTS_ENV_VAR, "results.jsonl")


def _cmd_sweep(args) -> int:
    config = _load_config(args.config)
    store = ResultsStore(_store_path(args.store))
    report = run_sweep(config, store)
    written = emit_report(report, args.out)
    from .figures import render_report_figures

    written += render_report_figures(report, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_zero_shot(args) -> int:
    config = _load_config(args.config)
    rec = run_zero_shot(args.variant, config, seed=args.seed)
    print(json.dumps(rec.to_dict(), sort_keys=True))
    return 0


def _cmd_scaling(args) -> int:
    config = _load_config(args.config)
    if args.timeout_secs is not None:
        config.timeout_secs = args.timeout_secs
    worker_counts = [int(w) for w in args.workers.split(",")]
    transport = args.transport.replace("-", "_")
    result = run_scaling_study(config, worker_counts, transport)
    written = emit_scaling_report(result, args.out)
    from .figures import render_scaling_figures

    written += render_scaling_figures(result, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_report(args) -> int:
    config = _load_config(args.config)
    store = ResultsStore(_store_path(args.store))
    report = run_sweep(config, store)  # store hits make this a pure re-aggregation
    formats = (args.format,) if args.format else ("csv", "json", "plotdata")
    written = emit_report(report, args.out, formats)
    from .figures import render_report_figures

    written += render_report_figures(report, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_reduce(args) -> int:
    addresses = read_group_file(args.group_file)
    with open(args.input) as f:
        local = np.array(json.load(f), dtype=np.float64)
    transport = SocketTransport(args.rank, addresses, args.timeout_secs)
    try:
        reduced = ring_all_reduce(local, args.rank, len(addresses), transport)
    finally:
        transport.close()
    out = reduced.tolist()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f)
    else:
        print(json.dumps(out))
    return 0


def _cmd_dataset(args) -> int:
    config = _load_config(args.config)
    bundle = generate_dataset(config.dataset)
    os.makedirs(args.out, exist_ok=True)
    for name, samples in (
        ("train", bundle.train),
        ("id_test", bundle.id_test),
        ("ood_test", bundle.ood_test),
    ):
        path = os.path.join(args.out, f"{name}.ndjson")
        export_ndjson(samples, path)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshift")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sweep", help="run the full experiment sweep")
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--store", help=f"results store path (default ${RESULTS_ENV_VAR} or results.jsonl)")
    sp.add_argument("--out", default="report", help="output directory")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("zero-shot", help="evaluate a variant with no task training")
    sp.add_argument("--variant", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_zero_shot)

    sp = sub.add_parser("scaling", help="data-parallel scaling study")
    sp.add_argument("--workers", default="1,2,4", help="comma-separated worker counts")
    sp.add_argument("--transport", choices=["in-process", "socket"], default="in-process")
    sp.add_argument("--timeout-secs", type=float, default=None)
    sp.add_argument("--config")
    sp.add_argument("--out", default="scaling", help="output directory")
    sp.set_defaults(func=_cmd_scaling)

    sp = sub.add_parser("report", help="emit report files from a results store")
    sp.add_argument("--config")
    sp.add_argument("--store")
    sp.add_argument("--format", choices=["csv", "json", "plotdata"])
    sp.add_argument("--out", default="report", help="output directory")
    sp.set_defaults(func=_cmd_report)

    sp = sub.add_parser("reduce", help="one rank of a socket ring all-reduce")
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--group-file", required=True, help="JSON file listing rank addresses")
    sp.add_argument("--input", required=True, help="JSON array of float64 values")
    sp.add_argument("--out", help="write the reduced vector here instead of stdout")
    sp.add_argument("--timeout-secs", type=float, default=30.0)
    sp.set_defaults(func=_cmd_reduce)

    sp = sub.add_parser("dataset", help="export the synthetic dataset as NDJSON")
    sp.add_argument("--config")
    sp.add_argument("--out", default="dataset", help="output directory")
    sp.set_defaults(func=_cmd_dataset)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
