#!/usr/bin/env python3
import argparse
import json
import logging
import os
import sys

from banach import TikhonovError
from experiment import MAX_FAILED_FRACTION, ConfigError, load_config, probe, run, summary_json, write_rows
from rates import FAIL
from selftest import run_selftest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3


def setup_logging():
    handlers = [logging.StreamHandler(sys.stderr)]
    log_file = os.environ.get('TIKRATES_LOG_FILE')
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=os.environ.get('TIKRATES_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='tikhonov_rates',
        description='Convergence-rate experiments for convex Tikhonov regularization on l^r spaces')
    sub = parser.add_subparsers(dest='command', required=True)

    run_p = sub.add_parser('run', help='sweep a config and fit the observed rate')
    run_p.add_argument('--config', required=True, help='experiment JSON file')
    run_p.add_argument('--out', required=True, help='CSV file for the result rows')
    run_p.add_argument('--summary', help='JSON summary file (default: stdout only)')
    run_p.add_argument('--jobs', type=int, default=1, help='worker processes (default 1)')

    probe_p = sub.add_parser('probe', help='range diagnostic and source-inequality probe')
    probe_p.add_argument('--config', required=True, help='experiment JSON file')
    probe_p.add_argument('--out', help='JSON file for the probe report')

    self_p = sub.add_parser('selftest', help='oracle and identity checks')
    self_p.add_argument('--tolerance', type=float, help='override every check tolerance')
    return parser


def cmd_run(args) -> int:
    if args.jobs < 1:
        logger.error(f"--jobs must be >= 1, got {args.jobs}")
        return EXIT_USAGE
    cfg = load_config(args.config)
    report = run(cfg, jobs=args.jobs)
    write_rows(report, args.out)
    text = summary_json(cfg, report)
    print(text)
    if args.summary:
        with open(args.summary, 'w') as f:
            f.write(text + '\n')
        logger.info(f"Summary written to {args.summary}")

    if report.failed_fraction > MAX_FAILED_FRACTION:
        logger.error(f"{report.n_failed}/{report.n_rows} solves did not converge")
        return EXIT_NOT_CONVERGED
    if report.verdict == FAIL:
        if report.exploratory:
            logger.warning("Rate verdict failed on an exploratory experiment")
            return EXIT_OK
        return EXIT_FAILED
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    result = probe(cfg)
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        with open(args.out, 'w') as f:
            f.write(text + '\n')
        logger.info(f"Probe report written to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest(args.tolerance) else EXIT_FAILED


COMMANDS = {'run': cmd_run, 'probe': cmd_probe, 'selftest': cmd_selftest}


def main(argv=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except TikhonovError as e:
        logger.error(f"Error: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
