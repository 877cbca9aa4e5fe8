"""combolab command line: data synthesis, training, evaluation, loss comparison, gradient checks."""
import argparse
import logging
import sys
from typing import Callable, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from . import __version__
from .errors import EXIT_USAGE, ComboLabError
from .settings import configure_logging, get_settings

logger = logging.getLogger("ComboLabCLI")

Handler = Callable[[argparse.Namespace], int]
Argument = Tuple[Tuple[str, ...], dict]


class ComboLabApp:
    """Registry of subcommands on top of argparse.

    Command collections register their handlers with ``app.command(...)(handler)``;
    a handler takes the parsed namespace and returns an exit code.
    """

    def __init__(self, name: str = "combolab", description: str = ""):
        self.parser = argparse.ArgumentParser(prog=name, description=description)
        self.parser.add_argument("--version", action="version", version="%(prog)s {0}".format(__version__))
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND")
        self.subparsers.required = True
        self.commands: List[str] = []

    def command(self, name: str, arguments: Sequence[Argument] = ()) -> Callable[[Handler], Handler]:
        def register(handler: Handler) -> Handler:
            doc = (handler.__doc__ or "").strip().splitlines()
            sub = self.subparsers.add_parser(name, help=doc[0] if doc else None,
                                             description=handler.__doc__)
            for flags, options in arguments:
                sub.add_argument(*flags, **options)
            sub.set_defaults(handler=handler)
            self.commands.append(name)
            return handler
        return register

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            # argparse exits 2 on usage errors and 0 for --help/--version
            return e.code if isinstance(e.code, int) else EXIT_USAGE
        try:
            return args.handler(args)
        except ComboLabError as e:
            logger.error("{0} failed: {1}".format(args.command, e))
            print("error: {0}".format(e), file=sys.stderr)
            return e.exit_code
        except ValidationError as e:
            logger.error("{0} failed: {1}".format(args.command, e))
            print("error: {0}".format(e), file=sys.stderr)
            return EXIT_USAGE


def create_app() -> ComboLabApp:
    from .check_commands import CheckCommands
    from .data_commands import DataCommands
    from .train_commands import TrainCommands

    app = ComboLabApp("combolab", description="ComboLoss score regression toolkit")

    # Initialize command collections
    DataCommands(app)
    TrainCommands(app)
    CheckCommands(app)
    return app


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    try:
        settings = get_settings()
    except ComboLabError as e:
        print("error: {0}".format(e), file=sys.stderr)
        return e.exit_code
    configure_logging(settings)
    return create_app().run(argv)


if __name__ == "__main__":
    sys.exit(main())
