"""Gradient-check command."""
import argparse
import logging

from .errors import EXIT_OK, GradCheckFailure, UsageError
from .gradcheck import DEFAULT_TOL, failures, format_results, run_gradcheck_suite

logger = logging.getLogger("CheckCommands")


class CheckCommands:
    def __init__(self, app):
        self.app = app
        self._register_commands()

    def _register_commands(self):
        self.app.command("gradcheck", [
            (("--seed",), dict(type=int, default=0)),
            (("--tol",), dict(type=float, default=DEFAULT_TOL, help="max relative error per component")),
            (("--points",), dict(type=int, default=3, help="seeded points per component")),
        ])(self.gradcheck)

    def gradcheck(self, args: argparse.Namespace) -> int:
        """Compare analytic and central-difference gradients for every component."""
        if args.points < 1:
            raise UsageError("--points must be at least 1, got {0}".format(args.points))
        if args.tol < 0:
            raise UsageError("--tol must be non-negative, got {0}".format(args.tol))
        results = run_gradcheck_suite(seed=args.seed, points=args.points)
        print(format_results(results, args.tol), end="")
        failed = failures(results, args.tol)
        if failed:
            raise GradCheckFailure("{0} component(s) above tol {1:g}: {2}".format(
                len(failed), args.tol, ", ".join(r.component for r in failed)))
        logger.info("All {0} components within tol {1:g}".format(len(results), args.tol))
        return EXIT_OK
