"""Command-line entry point.

One subcommand per pipeline stage plus `run` (everything) and `simulate`
(planted synthetic cohorts). Options override config-file keys; the
TCNMF_OUTPUT_DIR environment variable overrides the configured output
directory but not an explicit --output-dir flag. Logs go to standard
error; all machine-readable output lands in the artifact directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from tcnmf import pipeline
from tcnmf.config import PipelineConfig, apply_overrides, load_config, validate_config
from tcnmf.errors import ConfigError, DataFormatError, NumericalError

log = logging.getLogger("tcnmf.cli")


def _intlist(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floatlist(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _strlist(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


# config field -> (flag, argparse type, help)
_FLAGS = {
    "events": ("--events", str, "raw events CSV"),
    "metadata": ("--metadata", str, "patient metadata CSV"),
    "vocabulary": ("--vocabulary", str, "disease code list, one per line"),
    "comorbid_pairs": ("--comorbid-pairs", str, "unordered reference pairs CSV"),
    "causal_pairs": ("--causal-pairs", str, "ordered reference pairs CSV"),
    "t_max": ("--t-max", int, "age axis length in years"),
    "min_followup": ("--min-followup", int, "minimum follow-up years"),
    "washout": ("--washout", int, "years after registration to ignore"),
    "washout_mode": ("--washout-mode", str, "record or disease"),
    "strata": ("--strata", _strlist, "comma-separated strata to run separately"),
    "sigma": ("--sigma", float, "smoothing std-dev in years"),
    "boundary": ("--boundary", str, "age-edge handling: zero or renormalize"),
    "q": ("--q", int, "number of clusters"),
    "max_iters": ("--max-iters", int, "iteration cap per fit"),
    "tol": ("--tol", float, "relative objective tolerance"),
    "epsilon": ("--epsilon", float, "numerical floor for factors"),
    "seed": ("--seed", int, "base random seed"),
    "n_runs": ("--n-runs", int, "restarts per fit"),
    "inner_updates": ("--inner-updates", int, "per-factor update sweeps per iteration"),
    "q_list": ("--q-list", _intlist, "comma-separated ranks to scan"),
    "n_restarts": ("--n-restarts", int, "restarts per scanned rank"),
    "fraction": ("--fraction", float, "binarization fraction of peak"),
    "scope": ("--scope", str, "binarization peak scope: global or per_patient"),
    "aggregation": ("--aggregation", str, "pair statistics: per_patient or pooled"),
    "alpha": ("--alpha", float, "pseudo-count for co-activation tables"),
    "top_k_edges": ("--top-k-edges", int, "edges kept in the network"),
    "l_list": ("--l-list", _intlist, "comma-separated leading-set sizes"),
    "n_perms": ("--n-perms", int, "permutation draws"),
    "eval_seed": ("--eval-seed", int, "permutation seed"),
    "sigma_list": ("--sigma-list", _floatlist, "comma-separated sigmas for the grid"),
}

_STAGE_FLAGS = {
    "ingest": ["events", "metadata", "vocabulary", "t_max", "min_followup",
               "washout", "washout_mode"],
    "build-matrix": ["t_max", "sigma", "boundary"],
    "factorize": ["q", "max_iters", "tol", "epsilon", "seed", "n_runs",
                  "inner_updates", "sigma"],
    "rank-scan": ["q_list", "n_restarts", "max_iters", "tol", "epsilon",
                  "seed", "inner_updates"],
    "grid-search": ["events", "metadata", "vocabulary", "comorbid_pairs",
                    "sigma_list", "q_list", "l_list", "n_perms", "eval_seed",
                    "seed", "n_runs", "max_iters", "tol", "epsilon", "inner_updates", "t_max",
                    "min_followup", "washout", "washout_mode", "boundary"],
    "ascendancy": ["fraction", "scope", "aggregation", "alpha", "top_k_edges"],
    "evaluate": ["comorbid_pairs", "causal_pairs", "l_list", "n_perms", "eval_seed"],
    "run": list(_FLAGS),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--output-dir", help="artifact directory")
    parser.add_argument("--threads", type=int, help="parallelism cap for all stages")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def _add_stage_flags(parser: argparse.ArgumentParser, names) -> None:
    for name in names:
        flag, kind, help_text = _FLAGS[name]
        parser.add_argument(flag, dest=name, type=kind, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcnmf",
        description="Temporal disease-cluster pipeline: ingest, factorize, "
        "network mining, and pair-list evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in _STAGE_FLAGS:
        stage = sub.add_parser(command)
        _add_common(stage)
        _add_stage_flags(stage, _STAGE_FLAGS[command])
        if command == "ingest":
            stage.add_argument("--stratum", default=None,
                               help="keep only this stratum value")
    sim = sub.add_parser("simulate")
    _add_common(sim)
    sim.add_argument("--q", type=int, default=5, help="planted clusters")
    sim.add_argument("--c", type=int, default=30, help="disease codes")
    sim.add_argument("--t", type=int, default=60, help="age axis length")
    sim.add_argument("--n-patients", type=int, default=500)
    sim.add_argument("--noise-rate", type=float, default=0.002)
    sim.add_argument("--seed", type=int, default=0)
    return parser


def _merge_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        name: getattr(args, name)
        for name in _FLAGS
        if getattr(args, name, None) is not None
    }
    if args.threads is not None:
        overrides["threads"] = args.threads
    output_dir = args.output_dir or os.environ.get("TCNMF_OUTPUT_DIR") or config.output_dir
    overrides["output_dir"] = output_dir
    return apply_overrides(config, **overrides)


def _outdir(config: PipelineConfig) -> Path:
    if config.output_dir is None:
        raise ConfigError("no output directory: set --output-dir, TCNMF_OUTPUT_DIR, "
                          "or [paths] output_dir")
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "simulate":
        target = args.output_dir or os.environ.get("TCNMF_OUTPUT_DIR")
        if not target:
            raise ConfigError("simulate needs --output-dir or TCNMF_OUTPUT_DIR")
        outdir = Path(target)
        pipeline.simulate(
            q=args.q, c=args.c, t=args.t, n_patients=args.n_patients,
            noise_rate=args.noise_rate, seed=args.seed, outdir=outdir,
        )
        log.info("cohort written to %s", outdir)
        return
    config = _merge_config(args)
    if args.command == "run":
        run_dir = pipeline.run_pipeline(config)
        log.info("artifacts in %s", run_dir)
        return
    validate_config(config)
    if args.command == "grid-search":
        path = pipeline.grid_search(config)
        log.info("grid written to %s", path)
        return
    outdir = _outdir(config)
    if args.command == "ingest":
        pipeline.stage_ingest(config, outdir, stratum=args.stratum)
    elif args.command == "build-matrix":
        pipeline.stage_matrix(config, outdir)
    elif args.command == "factorize":
        pipeline.stage_factorize(config, outdir, n_jobs=config.threads)
    elif args.command == "rank-scan":
        pipeline.stage_rank_scan(config, outdir, n_jobs=config.threads)
    elif args.command == "ascendancy":
        pipeline.stage_ascendancy(config, outdir)
    elif args.command == "evaluate":
        pipeline.stage_evaluate(config, outdir, n_jobs=config.threads)
    else:  # pragma: no cover - argparse enforces the command set
        raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except DataFormatError as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
