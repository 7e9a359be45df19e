"""Command-line entry point: experiment runs, standalone selection planning,
offline parameter estimation, and partition dry runs.

Exit codes: 0 success, 1 invalid input (config, roster, or history), 2 runtime
failure. Per-round progress goes to stderr via logging; artifact paths are
printed to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import ALGORITHM_CHOICES, MECHANISM_CHOICES, load_config
from .errors import ConfigError, ParameterError
from .harness import (
    ComparisonRow,
    HistoryWriter,
    build_problem,
    dispatch_run,
    estimate_from_history,
    history_header,
    read_history,
    settings_from_config,
    write_summary_csv,
)
from .mechanisms import MechanismKind
from .selection import (
    ClientMeta,
    SelectionPlan,
    approximate_plan,
    compute_phi_lambda,
    largest_remainder_round,
    water_fill_continuous,
)

logger = logging.getLogger(__name__)

ROSTER_COLUMNS = ("client_id", "epsilon", "delta", "num_samples")


def _load_run_config(args):
    return load_config(args.config, args.set, seed=args.seed, output_dir=args.out)


def _out_dir(args, config=None) -> str:
    out = args.out or (config.output_dir if config is not None else "runs/out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_run(args) -> int:
    config = _load_run_config(args)
    out = _out_dir(args, config)
    snapshot_path = os.path.join(out, "config.txt")
    with open(snapshot_path, "w") as fh:
        fh.write(config.snapshot_text())
    problem = build_problem(config)
    settings = settings_from_config(config)
    header = history_header(config.algorithm, settings, problem.model,
                            problem.metas, config.seed)
    history_path = os.path.join(out, "history.jsonl")
    writer = HistoryWriter(history_path, header)
    try:
        result = dispatch_run(config.algorithm, problem, settings, config.seed,
                              on_round=writer.write_round)
        writer.write_summary(result)
    finally:
        writer.close()
    metric = (result.final_test_accuracy if problem.model.is_classification
              else result.final_test_loss)
    write_summary_csv(os.path.join(out, "summary.csv"),
                      [ComparisonRow(config.algorithm, config.mechanism,
                                     float(metric), 0.0, 1)])
    print(snapshot_path)
    print(history_path)
    print(os.path.join(out, "summary.csv"))
    return 0


def read_roster(path) -> list:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read roster file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        names = [c.strip() for c in reader.fieldnames or []]
        if names != list(ROSTER_COLUMNS):
            raise ConfigError(
                f"{path}: expected header {','.join(ROSTER_COLUMNS)}, "
                f"got {','.join(names) if names else 'nothing'}")
        metas, bad = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                metas.append(ClientMeta(int(row["client_id"]),
                                        float(row["epsilon"]),
                                        float(row["delta"]),
                                        int(row["num_samples"])))
            except (TypeError, ValueError) as exc:
                bad.append(f"line {lineno}: {exc}")
    if bad:
        raise ConfigError(f"{path}: invalid roster rows:\n  " + "\n  ".join(bad))
    if not metas:
        raise ConfigError(f"{path}: roster has no client rows")
    return metas


def _read_gamma_file(path, expected: int) -> np.ndarray:
    values = []
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read gamma file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: not a number: {text!r}") from None
    if len(values) != expected:
        raise ConfigError(f"{path}: has {len(values)} values, roster has "
                          f"{expected} clients")
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ConfigError(f"{path}: gamma values must be finite and >= 0")
    return arr


def write_plan_csv(path, metas, plan: SelectionPlan) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "T_n", "p_n"])
        for meta, count, prob in zip(metas, plan.counts, plan.probabilities):
            writer.writerow([meta.client_id, int(count), repr(float(prob))])


def cmd_plan(args) -> int:
    metas = read_roster(args.roster)
    mechanism = MechanismKind.parse(args.mechanism)
    _, phi = compute_phi_lambda(mechanism, args.model_dim, args.clip_bound,
                                args.c2, metas)
    z = mechanism.noise_exponent
    total = args.clients_per_round * args.rounds
    if args.gamma_file:
        if args.omega_a is None or args.omega_b is None:
            raise ConfigError("--gamma-file requires --omega-a and --omega-b")
        gamma = _read_gamma_file(args.gamma_file, len(metas))
        t_cont, _ = water_fill_continuous(phi, gamma, args.omega_a, args.omega_b,
                                          total, z)
        counts = largest_remainder_round(t_cont, total)
        plan = SelectionPlan.from_counts(counts, args.rounds, args.clients_per_round)
    else:
        plan = approximate_plan(phi, total, z,
                                per_round_selected=args.clients_per_round)
    out = _out_dir(args)
    plan_path = os.path.join(out, "plan.csv")
    write_plan_csv(plan_path, metas, plan)
    print(plan_path)
    return 0


def cmd_estimate(args) -> int:
    parsed = read_history(args.history)
    params = estimate_from_history(parsed)
    out = _out_dir(args)
    params_path = os.path.join(out, "estimated_params.json")
    with open(params_path, "w") as fh:
        json.dump(params.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(params_path)
    return 0


def cmd_partition(args) -> int:
    config = _load_run_config(args)
    problem = build_problem(config)
    out = _out_dir(args, config)
    counts_path = os.path.join(out, "partition.csv")
    with open(counts_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "num_samples"])
        for client_id, data in enumerate(problem.client_data):
            writer.writerow([client_id, data.num_samples])
    print(counts_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    shared.add_argument("--out", default=None, help="output directory")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable; used by "
                             "config-driven commands)")

    parser = argparse.ArgumentParser(
        prog="dpflsim",
        description="Differentially private federated learning simulator with "
                    "budget-aware client selection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[shared],
                           help="run one experiment from a config file")
    p_run.add_argument("--config", default=None,
                       help="flat key=value config file (defaults apply if omitted)")
    p_run.set_defaults(func=cmd_run)

    p_plan = sub.add_parser("plan", parents=[shared],
                            help="compute a selection plan for a client roster")
    p_plan.add_argument("--roster", required=True,
                        help=f"CSV with header {','.join(ROSTER_COLUMNS)}")
    p_plan.add_argument("--mechanism", choices=list(MECHANISM_CHOICES),
                        default="gaussian")
    p_plan.add_argument("--clients-per-round", type=int, default=20)
    p_plan.add_argument("--rounds", type=int, default=200,
                        help="planning horizon in rounds")
    p_plan.add_argument("--model-dim", type=int, required=True)
    p_plan.add_argument("--clip-bound", type=float, default=1.0)
    p_plan.add_argument("--c2", type=float, default=1.0)
    p_plan.add_argument("--gamma-file", default=None,
                        help="per-client loss-gap file (one value per roster row); "
                             "switches from the budget-only plan to the "
                             "bound-minimizing plan")
    p_plan.add_argument("--omega-a", type=float, default=None)
    p_plan.add_argument("--omega-b", type=float, default=None)
    p_plan.set_defaults(func=cmd_plan)

    p_est = sub.add_parser("estimate", parents=[shared],
                           help="re-estimate problem parameters from a run history")
    p_est.add_argument("--history", required=True, help="history.jsonl from a run")
    p_est.set_defaults(func=cmd_estimate)

    p_part = sub.add_parser("partition", parents=[shared],
                            help="dry-run the client partition and report sizes")
    p_part.add_argument("--config", default=None)
    p_part.set_defaults(func=cmd_partition)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - contract maps any failure to 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
