"""
Command-Line Entry Point

Validates and classifies instruments, and emits CGF curves, tail-bound tables,
rates, variance reports, simulated trajectories and exact oracle data as
JSON or CSV.

Usage:
    python cli.py classify --fixture shift-d3
    python cli.py cgf path/to/instrument.json --theta -2:2:41 --output cgf.csv
    python cli.py bounds --fixture iid-coin --a 0.75 --n 8,10,12
    python cli.py fcs export --fixture classical-chain --output chain-fcs.json

Environment Variables:
    See qhmm/config.py (QHMM_THREADS, LOG_LEVEL, LOG_FORMAT, QHMM_* tolerances)
"""

import argparse
import logging
import math
import sys
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from qhmm.config import Settings, get_settings
from qhmm.core.logging import configure_logging
from qhmm.core.operators import DimensionMismatchError, NotDensityOperatorError, NotHermitianError
from qhmm.models.instrument import FcsModelError, Instrument
from qhmm.models.reports import TailDirection
from qhmm.models.run_config import Command, RunConfig
from qhmm.services.cgf_service import CgfService, DegenerateCgfError, UnreachableLevelError
from qhmm.services.deviation_service import DeviationService, WrongSideError
from qhmm.services.instrument_service import InstrumentService, InvalidInstrumentError, TiltOverflowError
from qhmm.services.perron_frobenius_service import NotIrreducibleError, PerronFrobeniusService
from qhmm.services.simulation_service import OracleCapExceededError, SimulationError, SimulationService
from qhmm.services.variance_service import NotPrimitiveError, VarianceService, ZeroVarianceError
from qhmm.utils import io
from qhmm.utils.fixtures import UnknownFixtureError, load_fixture

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID_INPUT = 2
EXIT_PRECONDITION = 3
EXIT_INFEASIBLE = 4

INVALID_INPUT_ERRORS = (
    ValidationError,
    io.InstrumentFormatError,
    InvalidInstrumentError,
    DimensionMismatchError,
    NotHermitianError,
    NotDensityOperatorError,
    FcsModelError,
    UnknownFixtureError,
    FileNotFoundError,
)

PRECONDITION_ERRORS = (
    NotIrreducibleError,
    NotPrimitiveError,
    DegenerateCgfError,
    UnreachableLevelError,
    ZeroVarianceError,
    WrongSideError,
    OracleCapExceededError,
    TiltOverflowError,
    SimulationError,
)

BOUNDS_COLUMNS = (
    "n",
    "lower_bound",
    "upper_bound",
    "oracle_neg_log_prob",
    "upper_feasible",
    "smallest_feasible_n",
)
CGF_COLUMNS = ("theta", "phi", "phi_prime", "delta_upper", "delta_lower")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per analysis."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("instrument", nargs="?", help="Instrument JSON path (FCS JSON for fcs import)")
    common.add_argument("--fixture", help="Bundled fixture name instead of a path")
    common.add_argument("--output", help="Output file (stdout if absent)")
    common.add_argument("--log-level", help="Override LOG_LEVEL")
    common.add_argument("--eig-tol", type=float, help="Override the eigenvalue clustering tolerance")
    common.add_argument("--positivity-margin", type=float, help="Override the positivity margin")

    parser = argparse.ArgumentParser(prog="qhmm", description="Quantum hidden Markov process analysis")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("validate", parents=[common], help="Check instrument invariants")
    commands.add_parser("classify", parents=[common], help="Irreducibility and primitivity")

    cgf = commands.add_parser("cgf", parents=[common], help="CGF curve on a theta grid")
    cgf.add_argument("--theta", required=True, help="start:stop:steps")

    bounds = commands.add_parser("bounds", parents=[common], help="Finite-n tail exponent bounds")
    bounds.add_argument("--a", type=float, required=True, help="Threshold level")
    bounds.add_argument("--n", dest="n_values", required=True, help="Comma-separated sample sizes")
    bounds.add_argument("--direction", choices=[d.value for d in TailDirection], default="upper")

    rates = commands.add_parser("rates", parents=[common], help="Large and moderate deviation rates")
    rates.add_argument("--delta", type=float, required=True)
    rates.add_argument("--t", type=float, help="Moderate-deviation exponent in (0, 1/2)")
    rates.add_argument("--n", type=int, help="Sample size for finite-n moderate-deviation bounds")

    variance = commands.add_parser("variance", parents=[common], help="Asymptotic variance report")
    variance.add_argument("--n", type=int, help="Also report the exact finite-n variance")

    simulate = commands.add_parser("simulate", parents=[common], help="Sample trajectories")
    simulate.add_argument("--n", type=int, required=True)
    simulate.add_argument("--trials", type=int, default=1000)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--report", help="CLT report JSON path")

    oracle = commands.add_parser("oracle", parents=[common], help="Exact sum distribution")
    oracle.add_argument("--n", type=int, required=True)

    fcs = commands.add_parser("fcs", parents=[common], help="Convert to or from an FCS model")
    fcs.add_argument("action", choices=["export", "import"])
    return parser


def parse_config(argv: Optional[Sequence[str]] = None) -> tuple[RunConfig, Optional[str]]:
    """
    Parse the command line into a RunConfig.

    Returns:
        (config, log level override)

    Raises:
        SystemExit: On argparse errors (status 2)
        ValidationError: On invalid parameter combinations
    """
    args = build_parser().parse_args(argv)
    command = args.command if args.command != "fcs" else f"fcs-{args.action}"
    fields = {
        "command": command,
        "instrument_path": args.instrument,
        "fixture": args.fixture,
        "output": args.output,
        "eig_tol": args.eig_tol,
        "positivity_margin": args.positivity_margin,
    }
    for name in ("theta", "a", "n_values", "n", "trials", "seed", "delta", "t", "direction", "report"):
        if getattr(args, name, None) is not None:
            fields[name] = getattr(args, name)
    return RunConfig(**fields), args.log_level


class QhmmApplication:
    """Runs one configured command against the analysis services."""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.instruments = InstrumentService(settings)
        self.pf_service = PerronFrobeniusService(settings, self.instruments)
        self.variance_service = VarianceService(settings, self.pf_service)
        self.cgf_service = CgfService(settings, self.pf_service)
        self.deviation_service = DeviationService(settings, self.variance_service)
        self.simulation_service = SimulationService(settings, self.variance_service)

    def load(self, config: RunConfig) -> Instrument:
        """Instrument from the fixture name or JSON path."""
        if config.fixture is not None:
            return load_fixture(config.fixture, self.settings)
        return io.load_instrument(config.instrument_path)

    def run(self, config: RunConfig) -> int:
        """Execute the command and return its exit status."""
        logger.info(f"Running {config.command.value}")
        if config.command is Command.FCS_IMPORT:
            model = io.load_fcs(config.instrument_path)
            io.dump_instrument(self.instruments.from_fcs(model), config.output)
            return EXIT_OK

        instr = self.load(config)
        handler = {
            Command.VALIDATE: self.validate,
            Command.CLASSIFY: self.classify,
            Command.CGF: self.cgf,
            Command.BOUNDS: self.bounds,
            Command.RATES: self.rates,
            Command.VARIANCE: self.variance,
            Command.SIMULATE: self.simulate,
            Command.ORACLE: self.oracle,
            Command.FCS_EXPORT: self.fcs_export,
        }[config.command]
        status = handler(instr, config)
        logger.info(f"Finished {config.command.value} with status {status}")
        return status

    def validate(self, instr: Instrument, config: RunConfig) -> int:
        report = self.instruments.validate(instr)
        io.write_json(report.model_dump(mode="json"), config.output)
        return EXIT_OK if report.passed else EXIT_INVALID_INPUT

    def classify(self, instr: Instrument, config: RunConfig) -> int:
        self.instruments.require_valid(instr)
        classification = self.pf_service.classify_instrument(instr)
        logger.info(
            f"Classification: irreducible={classification.irreducible}, primitive={classification.primitive}"
        )
        io.write_json(classification.model_dump(mode="json"), config.output)
        return EXIT_OK

    def cgf(self, instr: Instrument, config: RunConfig) -> int:
        profile = self.cgf_service.profile(instr)
        grid = config.theta_grid()
        profile.prefetch(grid)
        rows = []
        for theta in grid:
            upper, lower = profile.deltas(theta)
            rows.append((float(theta), profile.phi(theta), profile.phi_prime(theta), upper, lower))
        io.write_csv(config.output, CGF_COLUMNS, rows)
        return EXIT_OK

    def _oracle_neg_log(self, instr: Instrument, config: RunConfig, n: int) -> Optional[float]:
        try:
            probability = self.simulation_service.exact_tail(instr, instr.state(), n, config.a, config.direction)
        except OracleCapExceededError as e:
            logger.info(f"Skipping oracle at n={n}: {e}")
            return None
        return math.inf if probability <= 0 else -math.log(probability)

    def bounds(self, instr: Instrument, config: RunConfig) -> int:
        profile = self.cgf_service.profile(instr)
        rows = []
        infeasible = False
        for n in config.n_values:
            report = self.deviation_service.tail_report(profile, config.a, n, config.direction)
            infeasible |= not report.upper_feasible
            rows.append(
                (
                    n,
                    report.exponent_lower_bound,
                    report.exponent_upper_bound,
                    self._oracle_neg_log(instr, config, n),
                    str(report.upper_feasible).lower(),
                    "" if report.smallest_feasible_n is None else report.smallest_feasible_n,
                )
            )
        io.write_csv(config.output, BOUNDS_COLUMNS, rows)
        if infeasible:
            logger.error("Upper exponent bound infeasible for at least one n")
            return EXIT_INFEASIBLE
        return EXIT_OK

    def rates(self, instr: Instrument, config: RunConfig) -> int:
        profile = self.cgf_service.profile(instr)
        result = {
            "delta": config.delta,
            "mean": profile.phi_prime(0.0),
            "ldp_rate_upper": self.deviation_service.ldp_rate(profile, config.delta, TailDirection.UPPER),
            "ldp_rate_lower": self.deviation_service.ldp_rate(profile, config.delta, TailDirection.LOWER),
            "mdp_rate": self.deviation_service.mdp_rate(profile, config.delta),
        }
        status = EXIT_OK
        if config.t is not None:
            reports = [
                self.deviation_service.mdp_exponent_bounds(profile, config.delta, config.t, config.n, direction)
                for direction in TailDirection
            ]
            result["moderate_deviation"] = [r.model_dump(mode="json") for r in reports]
            if not all(r.upper_feasible for r in reports):
                logger.error("Moderate-deviation upper bound infeasible")
                status = EXIT_INFEASIBLE
        io.write_json(result, config.output)
        return status

    def variance(self, instr: Instrument, config: RunConfig) -> int:
        self.instruments.require_valid(instr)
        report = self.variance_service.variance_report(instr, n=config.n)
        io.write_json(report.model_dump(mode="json"), config.output)
        return EXIT_OK

    def simulate(self, instr: Instrument, config: RunConfig) -> int:
        """
        Trajectories go to --output (stdout if absent). The CLT report goes to
        --report, or to stdout when the trajectories went to a file.
        """
        state = instr.state()
        means = np.empty(config.trials)

        def recorded(trajectories):
            for trajectory in trajectories:
                means[trajectory.trial] = trajectory.mean
                yield trajectory

        trajectories = self.simulation_service.sample_trajectories(
            instr, state, config.n, config.trials, config.seed
        )
        count = io.write_trajectories(config.output, recorded(trajectories))
        logger.info(f"Sampled {count} trajectories of length {config.n}")
        try:
            report = self.simulation_service.clt_check(
                instr, state, config.n, config.trials, config.seed, means=means
            )
        except (ZeroVarianceError, NotIrreducibleError) as e:
            logger.warning(f"No CLT comparison: {e}")
            return EXIT_OK

        logger.info(f"KS statistic {report.ks_statistic:.6f} (p={report.p_value:.4g})")
        if config.report is not None:
            io.write_json(report.model_dump(mode="json"), config.report)
        elif config.output is not None:
            io.write_json(report.model_dump(mode="json"))
        else:
            logger.info("Trajectories occupy stdout; pass --report to keep the CLT report")
        return EXIT_OK

    def oracle(self, instr: Instrument, config: RunConfig) -> int:
        distribution = self.simulation_service.exact_sum_distribution(instr, instr.state(), config.n)
        io.write_sum_distribution(config.output, distribution)
        return EXIT_OK

    def fcs_export(self, instr: Instrument, config: RunConfig) -> int:
        io.dump_fcs(self.instruments.to_fcs(instr), config.output)
        return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    base = get_settings()
    configure_logging(base)
    try:
        config, log_level = parse_config(argv)
        settings = base.model_copy(update=config.settings_overrides())
        configure_logging(settings, log_level)
        return QhmmApplication(settings).run(config)
    except INVALID_INPUT_ERRORS as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID_INPUT
    except PRECONDITION_ERRORS as e:
        logger.error(f"Precondition violated: {e}")
        return EXIT_PRECONDITION
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
