"""Dataset commands."""
import argparse
import logging
from pathlib import Path
from typing import Tuple

import numpy as np

from .data import synth_generate, write_binary, write_csv
from .discretize import DiscretizationSpec, discretize_scores, histogram
from .errors import EXIT_OK, UsageError

logger = logging.getLogger("DataCommands")


def parse_shape(text: str) -> Tuple[int, ...]:
    """'16' -> (16,), '3,8,8' -> (3, 8, 8)"""
    try:
        shape = tuple(int(part) for part in text.replace("x", ",").split(",") if part.strip())
    except ValueError:
        raise UsageError("--shape must be comma separated integers, got {0!r}".format(text))
    if not shape or any(d < 1 for d in shape):
        raise UsageError("--shape needs positive extents, got {0!r}".format(text))
    return shape


class DataCommands:
    """Commands that create dataset files."""

    def __init__(self, app):
        self.app = app
        self._register_commands()

    def _register_commands(self):
        self.app.command("synth", [
            (("--n",), dict(type=int, default=500, help="number of samples")),
            (("--shape",), dict(default="16", help="sample shape, e.g. 16 or 3,8,8")),
            (("--noise-sd",), dict(type=float, default=0.1, dest="noise_sd", help="score noise std")),
            (("--seed",), dict(type=int, default=0)),
            (("--projection-seed",), dict(type=int, default=0, dest="projection_seed",
                                          help="seed of the latent direction shared across datasets")),
            (("--format",), dict(choices=("auto", "csv", "binary"), default="auto")),
            (("--out",), dict(required=True, help="output file")),
        ])(self.synth)

    def synth(self, args: argparse.Namespace) -> int:
        """Write a seeded synthetic dataset and print a short summary.

        Flat shapes default to CSV, multi-dimensional shapes to the binary format.
        """
        if args.n < 1:
            raise UsageError("--n must be at least 1, got {0}".format(args.n))
        if args.noise_sd < 0:
            raise UsageError("--noise-sd must be non-negative, got {0}".format(args.noise_sd))
        shape = parse_shape(args.shape)
        fmt = args.format
        if fmt == "auto":
            fmt = "csv" if len(shape) == 1 else "binary"
        if fmt == "csv" and len(shape) != 1:
            raise UsageError("CSV holds flat samples only; use --format binary for shape {0}".format(shape))

        dataset = synth_generate(args.n, shape, args.noise_sd, args.seed, args.projection_seed)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            write_csv(out, dataset)
        else:
            write_binary(out, dataset)
        logger.info("Wrote {0} synthetic samples to {1}".format(len(dataset), out))

        counts = histogram(discretize_scores(dataset.scores, DiscretizationSpec()), 5)
        print("wrote {0} ({1})".format(out, fmt))
        print("N = {0}, shape = {1}".format(len(dataset), "x".join(str(d) for d in shape)))
        print("score range = [{0:.4f}, {1:.4f}]".format(float(np.min(dataset.scores)), float(np.max(dataset.scores))))
        print("class histogram (ceil_half, C=5): {0}".format(" ".join(
            "{0}:{1}".format(c + 1, int(k)) for c, k in enumerate(counts))))
        return EXIT_OK
