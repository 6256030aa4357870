#!/usr/bin/env python3
"""
Run experiments on SDEs with interaction from the command line.

This CLI:
  - integrates an experiment (a JSON file or a bundled recipe) and writes its
    trajectory, moment series, Lyapunov and intermittency summaries, one stage
    per subcommand or all of them with `run`
  - checks the determinant identities behind the Liouville formula
  - computes the gamma distance between two point sets
  - aggregates the summaries of several experiments into one table

Every stage reads the outputs of the previous ones from --out-dir.
"""

import argparse
import logging
import sys
from pathlib import Path

from interaction_flows import experiment
from interaction_flows.config import RECIPES, load_experiment
from interaction_flows.errors import FlowError
from interaction_flows.gamma import optimal_matching
from interaction_flows.tools import read_points_csv

STAGES = ('simulate', 'moments', 'lyapunov', 'intermittency', 'run')


def run_stage(
    stage: str,
    config_source,
    out_dir: Path | None = None,
    seed: int | None = None,
    replicas: int | None = None,
    threads: int = 1,
    plot: bool = False,
) -> int:
    """
    Run one stage (or the whole experiment) and print the files it wrote.

    Returns
    -------
    int
        0 on success, 1 when replicas failed during the simulation.
    """
    config = load_experiment(config_source).with_overrides(seed=seed, replicas=replicas)
    out_dir = experiment.default_out_dir() if out_dir is None else Path(out_dir)

    failures = []
    if stage == 'run':
        manifest = experiment.run_experiment(config, out_dir, threads=threads, plot=plot)
        outputs = {name: entry['path'] for name, entry in manifest.outputs.items()}
        failures = manifest.failures
    elif stage == 'simulate':
        outputs = experiment.simulate_stage(config, out_dir, threads=threads)
        failures = outputs.pop('failures')
        outputs.pop('replicas')
    elif stage == 'moments':
        outputs = experiment.moments_stage(config, out_dir)
    elif stage == 'lyapunov':
        outputs = experiment.lyapunov_stage(config, out_dir, threads=threads)
    else:
        outputs = experiment.intermittency_stage(config, out_dir)
        experiment.summarise(config, out_dir)
        outputs['summary_json'] = experiment.experiment_dir(config, out_dir) / experiment.SUMMARY_JSON

    for name in sorted(outputs):
        print(f"Wrote {outputs[name]}", flush=True)

    for failure in failures:
        print(
            f"Replica {failure['replica']} failed: {failure['error']}: {failure['message']}",
            file=sys.stderr,
            flush=True,
        )
    return 1 if failures else 0


def run_gamma(a_file: Path, b_file: Path) -> float:
    """Print the gamma distance between two point sets and their optimal matching."""
    matching = optimal_matching(read_points_csv(a_file), read_points_csv(b_file))
    print(f"gamma = {matching.distance:.17g}", flush=True)
    for i, (j, cost) in enumerate(zip(matching.pairs, matching.costs, strict=True)):
        print(f"{i} -> {j}  cost = {cost:.17g}", flush=True)
    return matching.distance


def _add_experiment_arguments(parser: argparse.ArgumentParser, plot: bool = False):
    parser.add_argument(
        "-c",
        "--config",
        required=True,
        help=f"Experiment JSON file, or the name of a bundled recipe ({', '.join(RECIPES)}).",
    )
    parser.add_argument(
        "-o",
        "--out-dir",
        type=Path,
        default=None,
        help=f"Output directory (default: ${experiment.OUT_DIR_ENV} or ./out).",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the seed of the experiment.")
    parser.add_argument(
        "--replicas", type=int, default=None, help="Override the number of replicas."
    )
    parser.add_argument(
        "-n",
        "--threads",
        type=int,
        default=1,
        help="Number of replica chunks integrated concurrently. Does not change any output.",
    )
    if plot:
        parser.add_argument("--plot", action='store_true', help="Also write PNG figures.")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interaction-flows",
        description=(
            "Simulate SDEs with interaction together with their flow Jacobian, estimate Lyapunov "
            "and moment Lyapunov exponents of the transported density, and decide intermittency."
        ),
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action='store_true',
        help="Print detailed progress information.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    descriptions = {
        'simulate': "Integrate all replicas and write trajectory.nc, trajectory.csv and trajectory.json.",
        'moments': "Compute ln M_p(t) for every replica and write moments.csv.",
        'lyapunov': "Estimate pointwise Lyapunov exponents and write lyapunov.json.",
        'intermittency': "Fit moment Lyapunov exponents, decide intermittency and write the summary.",
        'run': "Run all stages of an experiment and write its manifest.",
    }
    for stage in STAGES:
        sub = commands.add_parser(stage, help=descriptions[stage], description=descriptions[stage])
        _add_experiment_arguments(sub, plot=stage == 'run')

    identities = commands.add_parser(
        "identities", help="Check the determinant identities on random matrices."
    )
    identities.add_argument("-o", "--out-dir", type=Path, default=None, help="Output directory.")
    identities.add_argument("--pairs", type=int, default=100, help="Matrix pairs per dimension.")
    identities.add_argument("--seed", type=int, default=0, help="Seed of the random matrices.")
    identities.add_argument(
        "--method",
        choices=("fd", "analytic"),
        default="fd",
        help="How the Hessian of det is computed for the second-order identity.",
    )

    gamma = commands.add_parser(
        "gamma", help="Distance gamma between two equal-size point sets (CSV, one point per row)."
    )
    gamma.add_argument("a_file", type=Path, help="First point set.")
    gamma.add_argument("b_file", type=Path, help="Second point set.")

    report = commands.add_parser(
        "report", help="Aggregate the summaries of all experiments in --out-dir into report.csv."
    )
    report.add_argument("-o", "--out-dir", type=Path, default=None, help="Output directory.")
    report.add_argument("--plot", action='store_true', help="Also write a verdict bar chart.")
    return parser


def main(argv=None) -> int:
    '''
    Command line interface entry point.
    '''

    parser = build_arg_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    out_dir = getattr(args, 'out_dir', None)
    if out_dir is None:
        out_dir = experiment.default_out_dir()

    try:
        if args.command in STAGES:
            if args.threads < 1:
                parser.error(f"--threads must be >= 1, got {args.threads}")
            return run_stage(
                args.command,
                args.config,
                out_dir,
                seed=args.seed,
                replicas=args.replicas,
                threads=args.threads,
                plot=getattr(args, 'plot', False),
            )
        if args.command == 'identities':
            path = experiment.identities_stage(
                out_dir, n_pairs=args.pairs, seed=args.seed, method=args.method
            )
            print(f"Wrote {path}", flush=True)
        elif args.command == 'gamma':
            run_gamma(args.a_file, args.b_file)
        elif args.command == 'report':
            path = experiment.report(out_dir, plot=args.plot)
            print(f"Wrote {path}", flush=True)
    except (FlowError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
