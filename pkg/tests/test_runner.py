import csv
import dataclasses
import json
import math

import numpy as np
import pytest

from rescue.causal import CausalGraph
from rescue.runner import (ConfigError, RunConfig, Runner, _aur_within_budget, export_results, run,
                           run_csv_header, run_method_ablation)

FAST = dict(problem="adversarial", problem_params={"delta_scale": 1.0}, budget=160.0, init_budget=30.0,
            n_fantasies=4, n_inner_candidates=32, n_outer=8, hyperopt=False, nsga_population=20,
            nsga_generations=5, oracle_grid=[20, 20], n_observational=100, n_mc=32)
FAST_HC = dict(problem="healthcare", budget=40.0, n_fantasies=4, n_inner_candidates=32, n_outer=6,
               n_fidelity_levels=4, hyperopt=False, nsga_population=20, nsga_generations=5, oracle_grid=[20, 10],
               n_observational=100, n_mc=32)


def fast(**kw):
    return RunConfig.from_dict({**FAST, **kw})


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(method="nope")
    with pytest.raises(ConfigError):
        RunConfig(budget=10, init_budget=20)
    with pytest.raises(ConfigError):
        RunConfig(update_cycle=0)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    assert RunConfig(budget=50).init_budget == 10.0
    assert RunConfig(method="ehvi").method == "ehvi_single_fidelity"
    assert RunConfig().config_hash() == RunConfig(output_dir="elsewhere").config_hash()
    assert RunConfig().config_hash() != RunConfig(seed=1).config_hash()


def test_run_invariants():
    log = run(fast(seed=1))
    costs = [r["cost"] for r in log.rows]
    cum = [r["cumulative_cost"] for r in log.rows]
    assert all(b > a for a, b in zip(cum, cum[1:]))
    assert cum[-1] == math.fsum(costs)
    # every optimization query was issued while the spent cost was within budget
    opt = [k for k, r in enumerate(log.rows) if r["t"] > 0]
    assert opt and all(cum[k - 1] <= log.config.budget for k in opt)
    assert cum[-1] <= log.config.budget + max(costs)
    assert [log.rows[k]["t"] for k in opt] == list(range(1, len(opt) + 1))
    assert log.hv_star > 0 and log.final_inferred_hv is not None and log.aur is not None
    regrets = [r for _, r in log.curve]
    best = np.minimum.accumulate(regrets)
    assert np.all(np.diff(best) <= 0)
    assert sum(log.fidelity_histogram().values()) == log.iterations


def test_degenerate_budget_runs_no_iterations(tmp_path):
    log = run(fast(budget=30.0, init_budget=30.0))
    assert log.iterations == 0 and log.n_init == len(log.rows) > 0
    assert log.final_inferred_hv is not None
    summary = export_results(log, tmp_path)
    assert summary["iterations"] == 0
    with open(tmp_path / "run.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + log.n_init and all(r[0] == "0" for r in rows[1:])


def test_ablation_identity_agnostic_rescue_equals_noncausal():
    for w in (0.0, 0.5):
        a = run(fast(method="rescue", prior="agnostic", w=w, seed=2, max_iterations=4))
        b = run(fast(method="hvkg_noncausal", w=w, seed=2, max_iterations=4))
        assert a.rows == b.rows
        assert a.final_inferred_hv == b.final_inferred_hv


def test_methods_share_initial_design():
    a = run(fast(method="rescue", seed=3, max_iterations=1))
    b = run(fast(method="ehvi_single_fidelity", seed=3, max_iterations=1))
    assert a.rows[: a.n_init] == b.rows[: b.n_init]
    assert all(r["s"] == 1.0 for r in b.rows if r["t"] > 0)


def test_export_schema_and_reexport_identical(tmp_path):
    log = run(RunConfig.from_dict({**FAST_HC, "max_iterations": 2}))
    s1 = export_results(log, tmp_path / "a")
    s2 = export_results(log, tmp_path / "b")
    for name in ("run.csv", "pareto.csv", "plotdata/regret_vs_cost.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    s1.pop("created_at"), s2.pop("created_at")
    assert s1 == s2
    p = log.problem
    header = (tmp_path / "a" / "run.csv").read_text().splitlines()[0].split(",")
    assert header == run_csv_header(p) and len(header) == 8 + p.d + p.M + p.Q
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"aur", "final_log_regret", "config_hash", "seed", "created_at"} <= set(summary)


def test_run_csv_reports_natural_units(tmp_path):
    log = run(RunConfig.from_dict({**FAST_HC, "max_iterations": 1}))
    export_results(log, tmp_path)
    with open(tmp_path / "run.csv") as fh:
        first = next(csv.DictReader(fh))
    x = [float(first["BMI"]), float(first["Aspirin"])]
    y, h = log.problem.evaluate(x, float(first["s"]))
    assert float(first["Statin"]) == pytest.approx(y[0]) and float(first["PSA"]) == pytest.approx(y[1])
    assert float(first["Cancer"]) == pytest.approx(h[0])


def test_seeded_runs_are_identical():
    a = run(fast(seed=4, max_iterations=3))
    b = run(fast(seed=4, max_iterations=3))
    assert a.rows == b.rows and a.summary() == b.summary()


def test_callback_and_max_iterations():
    seen = []
    run(fast(seed=5, max_iterations=2), callback=lambda t, m, c, d: seen.append((t, len(d))))
    assert [t for t, _ in seen] == [1, 2, 3]
    assert seen[1][1] == seen[0][1] + 1


def test_user_supplied_dag(tmp_path):
    runner = Runner(fast())
    p = runner.problem
    g = CausalGraph(p.node_names, [("x1", "f1"), ("x2", "f1"), ("x1", "f2"), ("x2", "f2"), ("s", "f1"),
                                   ("s", "f2")], p.tiers, [p.fidelity_name])
    (tmp_path / "dag.json").write_text(g.to_json())
    log = run(fast(dag=str(tmp_path / "dag.json"), max_iterations=1))
    assert log.iterations == 1


def test_observational_csv_input(tmp_path):
    runner = Runner(fast())
    runner.problem.observational_data(80, seed=9).to_csv(tmp_path / "obs.csv")
    log = run(fast(observational_csv=str(tmp_path / "obs.csv"), max_iterations=1))
    assert log.iterations == 1


def test_aur_truncation():
    assert _aur_within_budget([(0, 2), (10, 2)], 10) == 20.0
    assert _aur_within_budget([(0, 2), (10, 2), (20, 0)], 15) == pytest.approx(20 + 5 * 1.5)
    assert _aur_within_budget([(0, 1)], 5) == 0.0


def test_ablation_table():
    base = fast(max_iterations=1, track_regret=False)
    out = run_method_ablation(base, ["rescue"], [0])
    assert list(out["table"]) == ["rescue"] and len(out["runs"]) == 1
    row = out["table"]["rescue"]
    assert row["median_aur"] is None and row["median_iterations"] == 1.0
    assert sum(row["fidelity_histogram"].values()) == 1


def test_unknown_problem_is_config_error():
    with pytest.raises(ConfigError):
        Runner(dataclasses.replace(RunConfig(), problem="nope"))
