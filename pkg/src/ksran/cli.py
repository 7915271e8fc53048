"""Command-line entry point: ``ksran <run|auth|beam|channel|compare> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .scenario import ScenarioError, load_scenario
from .sim import AUTH_OUTCOMES, Metrics, metrics_csv, run, run_dir_name, write_outputs

DEFAULT_SCENARIOS = {
    "run": "warehouse_default",
    "compare": "warehouse_default",
    "auth": "auth_spoofing",
    "beam": "warehouse_default",
    "channel": "channel_change",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ksran", description="Knowledge-supported RAN simulator.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "run": "run one scenario end to end",
        "auth": "position-verified random access under spoofing",
        "beam": "beam steering overhead and misselection, baseline vs knowledge",
        "channel": "channel estimation error and blockage advisory lead time",
        "compare": "same scenario and seed in baseline and knowledge mode",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--scenario", default=DEFAULT_SCENARIOS[name],
                       help="scenario file, or the name of a bundled scenario")
        p.add_argument("--seed", type=_seed, default=None, help="override the scenario seed")
        p.add_argument("--out", default="runs", help="output directory (default: ./runs)")
        if name in ("run", "auth", "channel"):
            p.add_argument("--mode", choices=("baseline", "knowledge"), default=None,
                           help="override the scenario mode")
        p.add_argument("--quiet", action="store_true", help="print nothing on success")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    return parser


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _execute(config, out, quiet):
    result = run(config)
    path = write_outputs(result, f"{out}/{run_dir_name(config)}")
    if not quiet:
        print(f"wrote {path}", file=sys.stderr)
    return result


def _rows(*metrics: Metrics) -> str:
    text = metrics_csv(metrics[0])
    for m in metrics[1:]:
        text += metrics_csv(m).splitlines()[1] + "\n"
    return text


def _overhead(base: Metrics, know: Metrics) -> float:
    return know.beam_measurements_total / base.beam_measurements_total if base.beam_measurements_total else 0.0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if not args.quiet else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        config = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "mode", None):
        config = config.with_mode(args.mode)
    quiet = args.quiet

    if args.command in ("compare", "beam"):
        base = _execute(config.with_mode("baseline"), args.out, quiet).metrics
        know = _execute(config.with_mode("knowledge"), args.out, quiet).metrics
        if quiet:
            return 0
        if args.command == "compare":
            print(_rows(base, know), end="")
            print(f"overhead_ratio,{_overhead(base, know):.6g}")
        else:
            print(f"{'mode':<10} {'measurements':>13} {'misselection':>13} {'mean_rssi':>10}")
            for m in (base, know):
                print(f"{m.mode:<10} {m.beam_measurements_total:>13d} {m.beam_misselection_rate:>13.4f} "
                      f"{m.mean_rssi:>10.2f}")
            print(f"overhead ratio {_overhead(base, know):.4f}")
        return 0

    m = _execute(config, args.out, quiet).metrics
    if quiet:
        return 0
    if args.command == "run":
        print(metrics_csv(m), end="")
    elif args.command == "auth":
        print(f"{'verdict':<11} {'reason':<21} {'count':>7}")
        for verdict, reason in AUTH_OUTCOMES:
            count = getattr(m, f"auth_{verdict.value.lower()}_{reason.value.lower()}")
            print(f"{verdict.value:<11} {reason.value:<21} {count:>7d}")
    else:
        nmse = f"{m.channel_nmse:.4g}" if m.channel_nmse_valid else "n/a"
        lead = f"{m.blockage_lead_time:.3f} s" if m.blockage_lead_valid else "n/a"
        print(f"channel estimates  {m.channel_estimation_events}")
        print(f"channel_nmse       {nmse} (magnitude-only {m.channel_pdp_nmse:.4g})")
        print(f"pilot symbols      {m.pilot_symbols_total}")
        print(f"LOS losses         {m.blockage_losses} ({m.blockage_unadvised} unadvised)")
        print(f"advisories         {m.blockage_advisories} ({m.blockage_false_advisories} unmatched)")
        print(f"mean lead time     {lead}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
