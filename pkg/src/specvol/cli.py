"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 I/O error (missing or corrupt artifacts), 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import core, pipeline
from .config import PipelineConfig, load_config, parse_config
from .errors import (
    ChecksumMismatch,
    ConfigError,
    FormatVersionMismatch,
    MissingArtifacts,
    NumericalError,
    SpecvolError,
)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
SAVED_CONFIG = "config.ini"


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageFailed):
        exc = exc.error
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (MissingArtifacts, ChecksumMismatch, FormatVersionMismatch, OSError)):
        return EXIT_IO
    return EXIT_OTHER


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--out", type=Path, help="results directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the NUFFT")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded transforms and no timing file, for byte-identical output")
    p.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specvol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate a dataset",
        "lowres": "low-resolution mean, covariance and PCA coordinates",
        "embed": "graph Laplacian embedding of the PCA coordinates",
        "reconstruct-spectral": "solve for the spectral volumes",
        "eval": "mean-subtracted FSC against ground truth",
        "reconstruct": "write reconstructions of selected images",
        "pipeline": "run every stage",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "reconstruct":
            p.add_argument("indices", nargs="*", type=int, help="0-based image indices")
            p.add_argument("--r", type=int, default=None, help="basis size (default: largest solved)")
    return parser


def _resolve(args) -> tuple:
    out = args.out
    if args.config is not None:
        cfg = load_config(args.config)
        text = Path(args.config).read_text(encoding="utf-8")
    elif out is not None and (out / SAVED_CONFIG).exists():
        text = (out / SAVED_CONFIG).read_text(encoding="utf-8")
        cfg = parse_config(text)
    elif args.command in ("simulate", "pipeline"):
        raise ConfigError("--config is required")
    else:
        cfg, text = PipelineConfig(), ""
    if args.seed is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=args.seed))
    if args.deterministic:
        cfg = replace(cfg, specvols=replace(cfg.specvols, deterministic=True))
    if out is None:
        out = Path(cfg.output)
    return cfg, text, Path(out)


def _save_config(out: Path, text: str) -> None:
    """Keep the configuration next to the results so later stages can omit --config."""
    out.mkdir(parents=True, exist_ok=True)
    (out / SAVED_CONFIG).write_text(text, encoding="utf-8")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg, text, out = _resolve(args)
        deterministic = args.deterministic or cfg.specvols.deterministic
        if deterministic:
            core.set_threads(1)
        elif args.threads:
            core.set_threads(args.threads)
        if args.command == "pipeline":
            _save_config(out, text)
            pipeline.run_pipeline(cfg, out, deterministic)
        elif args.command == "reconstruct":
            files = pipeline.reconstruct_images(out, args.indices, args.r)
            for f in files:
                print(f)
        else:
            if args.command == "simulate":
                _save_config(out, text)
            result = pipeline.run_stage(args.command, cfg, out)
            if args.command == "simulate":
                print(f"n={result.n_images} N={result.size} sigma2={result.sigma2:.6g} "
                      f"noise_ratio={cfg.dataset.noise_ratio:g}")
    except (SpecvolError, OSError) as exc:
        print(f"specvol: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


def main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
