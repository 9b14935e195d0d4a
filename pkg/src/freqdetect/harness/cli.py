"""``freqdetect`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ArchitectureError, ConfigError, DataError, NumericError
from . import experiments as ex
from .config import ExperimentConfig, format_config, load_config

log = logging.getLogger("freqdetect")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _with_config(run):
    ex.write_config(run)
    return run


COMMANDS = {
    "train-target": lambda run: ex.train_target(_with_config(run)),
    "attack": lambda run: ex.run_attacks(_with_config(run)),
    "features": lambda run: ex.build_features(_with_config(run)),
    "train-detector": lambda run: ex.train_detectors(_with_config(run)),
    "evaluate": lambda run: ex.evaluate(_with_config(run)),
    "pipeline": ex.pipeline,
    "individual": ex.individual,
    "layer-study": ex.layer_study,
    "fig1": ex.fig1,
}


def build_parser():
    p = argparse.ArgumentParser(prog="freqdetect",
                                description="Spectral detection of adversarial perturbations.")
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("--quantize-8bit", action="store_true", help="round images to 8 bits before features")
    p.add_argument("--print-config", action="store_true", help="print every key with its value and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.quantize_8bit:
        cfg.quantize_8bit = True
    return cfg.validate(ex.architecture_for(cfg).layer_names)


def exit_code(exc):
    cause = getattr(exc, "cause", exc)
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, NumericError):
        return EXIT_NUMERIC
    if isinstance(cause, (DataError, ArchitectureError, OSError)):
        return EXIT_DATA
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(format_config(cfg, with_docs=True))
            return EXIT_OK
        if args.command is None:
            build_parser().print_usage(sys.stderr)
            return EXIT_CONFIG
        log.info("running %s into %s", args.command, cfg.out)
        COMMANDS[args.command](ex.Run(cfg))
    except Exception as exc:
        code = exit_code(exc)
        if code is None:
            raise
        print(f"freqdetect: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
