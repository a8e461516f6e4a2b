"""Command line: ``insitu-wfs {bench,full,cs,replay}``.

Exit status is 0 only when every job converged; 1 if any job failed or did
not converge; 2 for bad arguments or configuration; 3 for I/O failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import ExperimentConfig, emit, export_bench, run

log = logging.getLogger("insitu_wfs")


def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", type=Path, help="YAML or JSON experiment file")
        p.add_argument("--preset", choices=("none", "glass", "scatterer"),
                       help="start from a built-in bench preset")
    p.add_argument("--n", type=_csv_list(int), help="basis sizes, comma separated")
    p.add_argument("--basis", type=_csv_list(str), help="hadamard and/or canonical")
    p.add_argument("--ordering", type=_csv_list(str), help="natural,walsh,cake,random:<seed>")
    p.add_argument("--cr", type=_csv_list(float), help="compression ratios in (0, 1]")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insitu-wfs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("bench", help="render the perturbation, baselines and orderings"))
    _add_common(sub.add_parser("full", help="full-measurement corrections"))
    _add_common(sub.add_parser("cs", help="compressive corrections over orderings and cr"))
    rp = sub.add_parser("replay", help="rescore saved interferograms of an earlier run")
    rp.add_argument("--from", dest="source", type=Path, required=True,
                    help="output directory of the run to replay")
    rp.add_argument("--config", type=Path, help="defaults to <from>/config.resolved.json")
    _add_common(rp, with_config=False)
    return parser


def resolve_config(args, mode: str | None) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
        if getattr(args, "preset", None):
            raise ValueError("use either --config or --preset")
    elif getattr(args, "preset", None):
        cfg = ExperimentConfig.preset(args.preset)
    else:
        cfg = ExperimentConfig()
    return cfg.replace(n_list=args.n, bases=args.basis, orderings=args.ordering,
                       cr_grid=args.cr, master_seed=args.seed,
                       output_dir=str(args.out) if args.out is not None else None, mode=mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    replay_dir = None
    try:
        if args.command == "replay":
            if args.config is None:
                args.config = args.source / "config.resolved.json"
            cfg = resolve_config(args, None)
            if args.out is None:
                cfg = cfg.replace(output_dir=str(args.source / "replay"))
            replay_dir = args.source / "interferograms"
        else:
            cfg = resolve_config(args, None if args.command == "bench" else args.command)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg.output_dir)
    if args.command == "bench":
        try:
            files = export_bench(cfg, out)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
        log.info("wrote %d files to %s", len(files), out)
        return 0

    try:
        records, igrams = run(cfg, replay_dir)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        emit(records, out, cfg, igrams if cfg.save_interferograms else None)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    failed = [r for r in records if not r.converged]
    for r in failed:
        log.warning("%s did not converge: %s", r.run_id, r.error or r.diagnostics.get("message", ""))
    print(f"{len(records)} runs, {len(failed)} not converged; results in {out / 'results.csv'}")
    return 0 if not failed else 1


if __name__ == "__main__":
    raise SystemExit(main())
