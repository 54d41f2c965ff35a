"""
Batch command line for Monte Carlo sweeps.

    python cli.py --sweep task_bits --values 40,80,120 --schemes Proposed,SC,FSA \
        --realizations 20 --seed 1 --scenario S1 --out results/task_bits.csv
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError
from tqdm import tqdm

from config import config
from simulation import (
    DEFAULT_VALUES,
    DELAY_SCENARIOS,
    FULL_SCALE_VALUES,
    SweepRunner,
    SweepSpec,
    delay_scenario,
    emit_csv,
)
from solver.benchmarks import SchemeId
from solver.scasolver import ScaConfig
from solver.sysmodel import load_scenario, scale_subcarriers

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CELL_ERROR = 1
EXIT_USAGE = 2


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text}")


def _scheme_list(text: str) -> List[SchemeId]:
    try:
        return [SchemeId.parse(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Average transmit power of the allocation schemes over fading realizations"
    )
    parser.add_argument("--config", default=None,
                        help=f"Scenario JSON file, or a name in {config.SCENARIO_DIR}/ (default {config.DEFAULT_SCENARIO})")
    parser.add_argument("--scenario", default="S0", choices=DELAY_SCENARIOS,
                        help="Delay scenario: S0 no restriction, S1 first half of the users with D = tau + 2")
    parser.add_argument("--sweep", choices=("task_bits", "error_prob"), default="task_bits")
    parser.add_argument("--values", type=_float_list, help="Comma-separated sweep values")
    parser.add_argument("--schemes", type=_scheme_list, default=[SchemeId.PROPOSED, SchemeId.SC, SchemeId.FSA],
                        help="Comma-separated schemes: Proposed,SC,FSA,Oracle")
    parser.add_argument("--realizations", type=int, help="Realizations per sweep value")
    parser.add_argument("--seed", type=int, default=0, help="Master seed")
    parser.add_argument("--out", type=Path, default=None, help="Output CSV path")
    parser.add_argument("--full-scale", action="store_true",
                        help=f"{config.FULL_SUBCARRIERS} sub-carriers and {config.FULL_REALIZATIONS} realizations")
    parser.add_argument("--timing", action="store_true", help="Write measured wall times to the CSV")
    parser.add_argument("--dump-dir", type=Path, default=None, help="Save every final allocation as JSON here")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes (default from MAX_WORKERS)")
    parser.add_argument("--verbose", action="store_true", help="Log at INFO level")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if (args.verbose or config.DEBUG) else logging.WARNING,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        cfg = load_scenario(args.config or config.DEFAULT_SCENARIO)
        total = config.FULL_SUBCARRIERS if args.full_scale else config.DESK_SUBCARRIERS
        if args.full_scale or args.config is None:
            cfg = scale_subcarriers(cfg, total)
        realizations = args.realizations or (
            config.FULL_REALIZATIONS if args.full_scale else config.DESK_REALIZATIONS
        )
        spec = SweepSpec(
            axis=args.sweep,
            values=args.values or (FULL_SCALE_VALUES if args.full_scale else DEFAULT_VALUES)[args.sweep],
            schemes=args.schemes,
            realizations=realizations,
            delay_scenario=args.scenario,
        )
        delay_scenario(cfg, spec.delay_scenario)
    except (ValueError, ValidationError) as e:
        logger.error(f"Invalid sweep setup: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    out = args.out or Path(config.RESULTS_DIR) / f"sweep_{spec.axis}_{spec.delay_scenario}.csv"
    total_runs = len(spec.values) * len(spec.schemes) * spec.realizations
    with tqdm(total=total_runs, desc=f"{spec.axis} sweep", unit="run", disable=None) as bar:
        cells = list(SweepRunner().iter_cells(
            spec, cfg, args.seed, sca=ScaConfig(), workers=args.workers,
            progress=lambda _result: bar.update(1), dump_dir=args.dump_dir,
        ))

    try:
        emit_csv(cells, out, timing=args.timing)
    except OSError as e:
        logger.error(f"Cannot write {out}: {e}")
        print(f"error: cannot write {out}: {e}", file=sys.stderr)
        return EXIT_CELL_ERROR

    errors = sum(cell.error_count for cell in cells)
    if errors:
        logger.error(f"{errors} runs ended with an error; see the log above")
        return EXIT_CELL_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
