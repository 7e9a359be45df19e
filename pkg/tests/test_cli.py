"""End-to-end command-line contract: subcommands, artifacts, exit codes."""

import json
import math

import numpy as np
import pytest

from dpflsim.cli import main
from dpflsim.config import ExperimentConfig
from dpflsim.harness import build_problem, read_history
from dpflsim.mechanisms import MechanismKind
from dpflsim.selection import ClientMeta, EstimatedParams, compute_phi_lambda, \
    predicted_loss_bound


def _write_config(path, **kw):
    base = dict(num_clients=6, clients_per_round=2, total_rounds=12,
                num_samples=300, test_samples=60, feature_dim=3,
                algorithm="fedsgd", seed=11)
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return str(path)


def _write_roster(path, rows):
    lines = ["client_id,epsilon,delta,num_samples"]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def _read_plan(path):
    rows = [line.split(",") for line in path.read_text().splitlines()]
    assert rows[0] == ["client_id", "T_n", "p_n"]
    return [(int(r[0]), int(r[1]), float(r[2])) for r in rows[1:]]


# ------------------------------------------------------------------------ run

def test_run_writes_artifacts_and_defaults_estimation_rounds(tmp_path, capsys):
    cfg = _write_config(tmp_path / "exp.cfg")  # estimation_rounds omitted
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    snapshot = (out / "config.txt").read_text()
    assert "estimation_rounds = 10" in snapshot
    assert "seed = 11" in snapshot
    printed = capsys.readouterr().out.splitlines()
    assert str(out / "config.txt") in printed
    assert str(out / "history.jsonl") in printed
    summary_lines = (out / "summary.csv").read_text().splitlines()
    assert summary_lines[0] == ("algorithm,mechanism,mean_final_metric,"
                                "std_final_metric,num_seeds")
    assert summary_lines[1].startswith("fedsgd,")


def test_run_snapshot_alone_reproduces_history(tmp_path):
    cfg = _write_config(tmp_path / "exp.cfg", algorithm="dpfl_bcs",
                        estimation_rounds=3)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    # second run driven only by the recorded snapshot
    assert main(["run", "--config", str(out1 / "config.txt"),
                 "--out", str(out2)]) == 0
    assert (out1 / "history.jsonl").read_bytes() == \
        (out2 / "history.jsonl").read_bytes()


def test_run_rejects_estimation_rounds_at_total(tmp_path, capsys):
    cfg = _write_config(tmp_path / "exp.cfg", estimation_rounds=30,
                        total_rounds=20)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "estimation_rounds" in err and "total_rounds" in err


def test_run_seed_override_changes_history(tmp_path):
    cfg = _write_config(tmp_path / "exp.cfg")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2),
                 "--seed", "999"]) == 0
    assert (out1 / "history.jsonl").read_bytes() != \
        (out2 / "history.jsonl").read_bytes()
    assert "seed = 999" in (out2 / "config.txt").read_text()


def test_run_runtime_failure_exits_two(tmp_path, capsys):
    cfg = _write_config(tmp_path / "exp.cfg")
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("occupied")
    assert main(["run", "--config", cfg, "--out", str(blocker)]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_run_missing_config_file_exits_one(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert "error:" in capsys.readouterr().err


# ----------------------------------------------------------------------- plan

def test_plan_budget_ratio_splits_counts(tmp_path):
    # gaussian phi = ln(1/delta) / (D eps)^2; second client's 3x phi means
    # a third of the first client's participations
    delta = math.exp(-1.0)
    roster = _write_roster(tmp_path / "roster.csv",
                           [(0, 1.0, delta, 100),
                            (1, 1.0 / math.sqrt(3.0), delta, 100)])
    out = tmp_path / "out"
    assert main(["plan", "--roster", roster, "--model-dim", "10",
                 "--clients-per-round", "2", "--rounds", "4",
                 "--out", str(out)]) == 0
    rows = _read_plan(out / "plan.csv")
    assert [(r[0], r[1]) for r in rows] == [(0, 6), (1, 2)]
    assert rows[0][2] == pytest.approx(0.75)
    assert rows[1][2] == pytest.approx(0.25)


def test_plan_identical_clients_uniform(tmp_path):
    roster = _write_roster(tmp_path / "roster.csv",
                           [(n, 2.0, 1e-5, 50) for n in range(4)])
    out = tmp_path / "out"
    assert main(["plan", "--roster", roster, "--model-dim", "8",
                 "--clients-per-round", "2", "--rounds", "6",
                 "--out", str(out)]) == 0
    rows = _read_plan(out / "plan.csv")
    assert [r[1] for r in rows] == [3, 3, 3, 3]
    assert all(r[2] == pytest.approx(0.25) for r in rows)


def test_plan_rejects_zero_epsilon_row(tmp_path, capsys):
    roster = _write_roster(tmp_path / "roster.csv",
                           [(0, 1.0, 1e-5, 100), (1, 0.0, 1e-5, 100)])
    assert main(["plan", "--roster", roster, "--model-dim", "4",
                 "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "epsilon" in err


def test_plan_rejects_wrong_header(tmp_path, capsys):
    bad = tmp_path / "roster.csv"
    bad.write_text("id,eps,delta,n\n0,1.0,1e-5,10\n")
    assert main(["plan", "--roster", str(bad), "--model-dim", "4",
                 "--out", str(tmp_path / "o")]) == 1
    assert "client_id,epsilon,delta,num_samples" in capsys.readouterr().err


def test_plan_gamma_file_requires_omegas(tmp_path, capsys):
    roster = _write_roster(tmp_path / "roster.csv", [(0, 1.0, 1e-5, 100)])
    gamma = tmp_path / "gamma.txt"
    gamma.write_text("0.5\n")
    assert main(["plan", "--roster", roster, "--model-dim", "4",
                 "--gamma-file", str(gamma), "--out", str(tmp_path / "o")]) == 1
    assert "--omega-a" in capsys.readouterr().err


def test_plan_gamma_file_water_fill(tmp_path):
    roster = _write_roster(tmp_path / "roster.csv",
                           [(0, 1.0, 1e-5, 100), (1, 1.0, 1e-5, 100)])
    gamma = tmp_path / "gamma.txt"
    gamma.write_text("# per-client loss gaps\n0.0\n10.0\n")
    out = tmp_path / "out"
    assert main(["plan", "--roster", roster, "--model-dim", "4",
                 "--clients-per-round", "1", "--rounds", "4",
                 "--gamma-file", str(gamma), "--omega-a", "1.0",
                 "--omega-b", "1.0", "--out", str(out)]) == 0
    rows = _read_plan(out / "plan.csv")
    assert sum(r[1] for r in rows) == 4
    # equal budgets, but client 1's dissimilarity penalty shifts rounds to 0
    assert rows[0][1] > rows[1][1]


def test_plan_gamma_file_length_mismatch(tmp_path, capsys):
    roster = _write_roster(tmp_path / "roster.csv",
                           [(0, 1.0, 1e-5, 100), (1, 1.0, 1e-5, 100)])
    gamma = tmp_path / "gamma.txt"
    gamma.write_text("0.5\n")
    assert main(["plan", "--roster", roster, "--model-dim", "4",
                 "--gamma-file", str(gamma), "--omega-a", "1.0",
                 "--omega-b", "1.0", "--out", str(tmp_path / "o")]) == 1
    assert "2 clients" in capsys.readouterr().err


# ------------------------------------------------------------------- estimate

def test_estimate_replays_run_estimates_exactly(tmp_path, capsys):
    cfg = _write_config(tmp_path / "exp.cfg", algorithm="dpfl_bcs",
                        estimation_rounds=4)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    est_out = tmp_path / "est"
    assert main(["estimate", "--history", str(out / "history.jsonl"),
                 "--out", str(est_out)]) == 0
    with open(est_out / "estimated_params.json") as fh:
        replayed = json.load(fh)
    recorded = read_history(out / "history.jsonl").summary["estimated_params"]
    assert replayed == recorded


def test_estimate_truncated_history_names_round(tmp_path, capsys):
    cfg = _write_config(tmp_path / "exp.cfg", algorithm="dpfl_bcs",
                        estimation_rounds=4)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "history.jsonl").read_text().splitlines()
    kept = [ln for ln in lines if json.loads(ln).get("t") != 3]
    trimmed = tmp_path / "trimmed.jsonl"
    trimmed.write_text("\n".join(kept) + "\n")
    assert main(["estimate", "--history", str(trimmed),
                 "--out", str(tmp_path / "e")]) == 1
    assert "round 3" in capsys.readouterr().err


def test_estimate_missing_file_exits_one(tmp_path, capsys):
    assert main(["estimate", "--history", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "e")]) == 1
    assert "error:" in capsys.readouterr().err


def test_estimate_fits_forward_generated_history(tmp_path):
    """A history whose stage-one losses come from the bound itself must be
    fit back with residual <= 1e-6."""
    mech = MechanismKind.GAUSSIAN
    metas = [ClientMeta(0, 1.0, 1e-5, 100), ClientMeta(1, 0.8, 1e-5, 120)]
    lam, phi = compute_phi_lambda(mech, 4, 1.0, 1.0, metas)
    gamma_hat = np.array([0.05, 0.1])
    truth = EstimatedParams(
        gamma_hat_n=gamma_hat, phi_n=phi, rho_min_hat=1.0, Lambda=lam,
        gamma=3.0, L_smooth=2.0, mu_convex=0.8, sigma_sq=0.2,
        init_dist_sq=2.5, omega_a=1.0, omega_b=1.0)
    # both clients selected in every stage-one round: counts [2, 2] after
    # the first T0-1 = 2 rounds
    target = predicted_loss_bound(truth, np.array([2.0, 2.0]),
                                  elapsed_rounds=2, K=2, z=1)
    header = {"kind": "header", "format_version": 1, "algorithm": "dpfl_bcs",
              "mechanism": "gaussian", "num_clients": 2, "clients_per_round": 2,
              "total_rounds": 8, "estimation_rounds": 3, "model_dim": 4,
              "clip_bound": 1.0, "c2": 1.0, "seed": 0,
              "clients": [{"client_id": 0, "epsilon": 1.0, "delta": 1e-5,
                           "num_samples": 100},
                          {"client_id": 1, "epsilon": 0.8, "delta": 1e-5,
                           "num_samples": 120}]}
    rounds = [
        {"kind": "round", "t": 1, "stage": 1, "selected": [0, 1],
         "losses": {"0": [1.0, 0.95], "1": [1.2, 1.1]}},
        {"kind": "round", "t": 2, "stage": 1, "selected": [0, 1],
         "losses": {"0": [1.0, 0.95], "1": [1.2, 1.1]}},
        # round-T0 gaps are huge so gamma_hat keeps the earlier minima,
        # and the reported current losses average to the bound value
        {"kind": "round", "t": 3, "stage": 1, "selected": [0, 1],
         "losses": {"0": [target, target - 5.0], "1": [target, target - 5.0]}},
    ]
    history = tmp_path / "synthetic.jsonl"
    with open(history, "w") as fh:
        for obj in [header, *rounds]:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    out = tmp_path / "est"
    assert main(["estimate", "--history", str(history), "--out", str(out)]) == 0
    with open(out / "estimated_params.json") as fh:
        fitted = json.load(fh)
    assert fitted["fit_residual"] <= 1e-6
    assert fitted["rho_min_hat"] == pytest.approx(1.0)
    assert fitted["gamma_hat_n"] == pytest.approx([0.05, 0.1])


# ------------------------------------------------------------------ partition

def test_partition_matches_problem_builder(tmp_path, capsys):
    cfg_path = _write_config(tmp_path / "exp.cfg", num_clients=5,
                             clients_per_round=2, seed=7)
    out = tmp_path / "out"
    assert main(["partition", "--config", cfg_path, "--out", str(out)]) == 0
    lines = (out / "partition.csv").read_text().splitlines()
    assert lines[0] == "client_id,num_samples"
    sizes = [int(line.split(",")[1]) for line in lines[1:]]
    cfg = ExperimentConfig(num_clients=5, clients_per_round=2, total_rounds=12,
                           num_samples=300, test_samples=60, feature_dim=3,
                           algorithm="fedsgd", seed=7)
    problem = build_problem(cfg)
    assert sizes == [d.num_samples for d in problem.client_data]
    assert sum(sizes) == 300
