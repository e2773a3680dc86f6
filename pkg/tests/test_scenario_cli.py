import csv
import json

import numpy as np
import pytest

from mv_equilibrium.cli import main
from mv_equilibrium.market import ScenarioError, build_market
from mv_equilibrium.scenario import bundled_scenarios, parse_scenario, scenario_from_dict

MINIMAL = {"grid": {"T": 1, "N": 4}, "coefficients": {"r": 0.02, "b": 0.06, "sigma": 0.2}, "gamma1": 1, "gamma2": 0, "x0": 1}


def write(tmp_path, data, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *argv, data=MINIMAL):
    out = tmp_path / "out"
    code = main([*argv, "--scenario", str(write(tmp_path, data)), "--out", str(out)])
    report = json.loads((out / "report.json").read_text())
    return code, out, report


def test_minimal_scenario_defaults(tmp_path):
    sc = parse_scenario(write(tmp_path, MINIMAL))
    assert sc.mode == "recombining" and sc.spike_steps == 1
    assert sc.tolerances == {"residual": 1e-10, "perturbation": 1e-8, "second_order": 0.05}
    assert sc.name == "sc"


@pytest.mark.parametrize(
    "patch,key,text",
    [
        ({"gamma2": 1}, "gamma1", "gamma1*gamma2 must be 0"),
        ({"coefficients": {"sigma": 0}}, "coefficients.sigma", "sigma^2 >= delta"),
        ({"grid": {"T": 1}}, "grid.N", "required"),
        ({"grid": {"N": 4, "mode": "hex"}}, "grid.mode", "recombining"),
        ({"coefficients": {"r": [0.1, 0.2]}}, "coefficients.r", "length"),
        ({"coefficients": {"r": {"0,0": 0.1}}}, "coefficients.r", "cover"),
        ({"coefficients": {"r": {"1,7": 0.1}}}, "coefficients.r[1,7]", "level"),
        ({"tolerances": {"residual": "tight"}}, "tolerances.residual", "number"),
        ({"colour": "blue"}, "colour", "unknown"),
        ({"grid": {"N": 30, "mode": "full_tree"}}, "grid", "capped"),
    ],
)
def test_parse_errors_cite_key(tmp_path, patch, key, text):
    data = json.loads(json.dumps(MINIMAL))
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(data.get(k), dict):
            data[k] = {**data[k], **v} if k != "grid" else v
        else:
            data[k] = v
    with pytest.raises(ScenarioError) as err:
        parse_scenario(write(tmp_path, data))
    assert err.value.key == key and text in str(err.value)


def test_invalid_json(tmp_path):
    with pytest.raises(ScenarioError, match="invalid JSON"):
        parse_scenario(write(tmp_path, "{not json"))


def test_bundled_scenarios_load():
    scs = bundled_scenarios()
    assert {"constant", "random_rate", "random_market", "state_dependent", "path_dependent"} <= set(scs)
    for sc in scs.values():
        build_market(sc)


def test_to_dict_round_trip():
    for sc in bundled_scenarios().values():
        d = sc.to_dict()
        again = scenario_from_dict(d)
        assert again.to_dict() == d


# -- commands -------------------------------------------------------------------


def test_solve_writes_table(tmp_path):
    code, out, report = run(tmp_path, "solve")
    assert code == 0 and report["solver"]["branch"] == "gamma2_zero"
    rows = read_csv(out / "theta_phi.csv")
    assert list(rows[0]) == ["k", "level_or_path", "Theta", "Phi", "P1", "P2", "P3", "P4", "P5", "L1", "L2", "L3", "L4", "L5"]
    assert len(rows) == sum(k + 1 for k in range(5))
    assert float(rows[0]["Phi"]) == report["solver"]["phi0"]


def test_solve_state_dependent_random_rate_is_solver_error(tmp_path):
    data = {**MINIMAL, "gamma1": 0, "gamma2": 1, "coefficients": {"r": {"base": 0.02, "walk": 0.01}}}
    code, _, report = run(tmp_path, "solve", data=data)
    assert code == 3 and "requires deterministic r" in report["error"]["message"]


def test_solve_zero_aversion(tmp_path):
    code, out, report = run(tmp_path, "solve", data={**MINIMAL, "gamma1": 0})
    assert code == 0 and report["solver"]["max_abs_theta"] <= 1e-12 and report["solver"]["max_abs_phi"] == 0.0


def test_input_errors_exit_2(tmp_path):
    code, _, report = run(tmp_path, "solve", data={**MINIMAL, "gamma2": 1})
    assert code == 2 and report["error"]["kind"] == "input"
    assert main(["solve", "--out", str(tmp_path / "x")]) == 2
    assert main(["frobnicate"]) == 2
    code, _, _ = run(tmp_path, "solve", "--full-tree", "--steps", "25")
    assert code == 2


def test_verify_constant_passes(tmp_path):
    data = {**MINIMAL, "grid": {"T": 1, "N": 64}}
    code, out, report = run(tmp_path, "verify", data=data)
    assert code == 0 and report["certification"]["passed"]
    assert report["tolerances"]["residual"] == 1e-10
    rows = read_csv(out / "residuals.csv")
    assert list(rows[0]) == ["k", "level_or_path", "G1", "G2", "thm32_residual", "min_quotient", "B_measured", "B_predicted"]
    # values re-read from the CSV reproduce the report summary
    g1 = max(abs(float(r["G1"])) for r in rows)
    assert g1 == report["certification"]["summary"]["max_abs_G1"]
    qmin = min(float(r["min_quotient"]) for r in rows)
    assert qmin == report["certification"]["summary"]["min_quotient"]


def test_verify_perturbed_theta_fails(tmp_path):
    code, _, report = run(tmp_path, "verify", "--perturb-theta", "0.1")
    assert code == 1
    assert not report["certification"]["checks"]["operator_residuals"]


def test_verify_full_tree_oracle_section(tmp_path):
    data = {**MINIMAL, "coefficients": {"r": {"base": 0.02, "walk": 0.01}, "b": 0.06, "sigma": {"base": 0.2, "walk": 0.03}}}
    code, out, report = run(tmp_path, "verify", "--full-tree", "--steps", "6", data=data)
    assert code == 0
    assert report["oracle_equivalence"]["max_deviation"] <= 1e-12
    rows = read_csv(out / "residuals.csv")
    assert rows[-1]["level_or_path"] == "uuuuu" and rows[-1]["thm32_residual"] != ""


def test_uniqueness_from_equilibrium(tmp_path):
    code, out, report = run(tmp_path, "uniqueness", "--u0", "equilibrium")
    assert code == 0 and report["uniqueness"]["iterations"] == 1
    assert report["uniqueness"]["final_gap"] <= 1e-12
    rows = read_csv(out / "iterates.csv")
    assert list(rows[0]) == ["iteration", "sup_gap", "sup_Ybar"]


def test_uniqueness_from_zero_and_file(tmp_path):
    code, out, report = run(tmp_path, "uniqueness")
    assert code == 0 and report["uniqueness"]["iterations"] <= 50
    # a spiked strategy read from file is visibly off at iteration 0
    # (random r: with deterministic r the Ybar diagnostic cannot see u at all)
    data = {**MINIMAL, "coefficients": {"r": {"base": 0.02, "walk": 0.01}, "b": 0.06, "sigma": 0.2}}
    _, sol_out, _ = run(tmp_path, "solve", "--full-tree", data=data)
    rows = [r for r in read_csv(sol_out / "theta_phi.csv") if r["Theta"] != ""]
    u = {(r["k"], r["level_or_path"]): float(r["Phi"]) for r in rows}
    u[("2", "ud")] += 0.5
    ufile = tmp_path / "u0.csv"
    with open(ufile, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "level_or_path", "u"])
        for (k, lab), val in u.items():
            w.writerow([k, lab, repr(val)])
    code, out, report = run(tmp_path, "uniqueness", "--u0", str(ufile), data=data)
    assert code == 0 and report["uniqueness"]["diagnostics_at_u0"]["residual"] > 1e-3
    it = read_csv(out / "iterates.csv")
    assert float(it[0]["sup_Ybar"]) > 1e-6 and np.isnan(float(it[0]["sup_gap"]))


def test_uniqueness_bad_file(tmp_path):
    bad = tmp_path / "u0.csv"
    bad.write_text("k,level_or_path,u\n0,-,0.1\n")
    code, _, report = run(tmp_path, "uniqueness", "--u0", str(bad))
    assert code == 2 and "missing node" in report["error"]["message"]


def test_sweep_table(tmp_path):
    data = {**MINIMAL, "grid": {"T": 1, "N": 32}}
    code, out, report = run(tmp_path, "sweep", "--grid", "r_amp=0,0.005,0.01", "--grid", "gamma2=0,1", data={**data, "gamma1": 0})
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 6 and report["sweep"]["cells"] == 6
    by = {(float(r["r_amp"]), float(r["gamma2"])): r for r in rows}
    assert float(by[(0.0, 0.0)]["max_abs_theta"]) <= 1e-12
    assert float(by[(0.01, 0.0)]["max_abs_theta"]) > float(by[(0.005, 0.0)]["max_abs_theta"]) > 0
    assert by[(0.01, 1.0)]["status"] == "error" and "deterministic r" in by[(0.01, 1.0)]["error"]
    assert float(by[(0.0, 1.0)]["max_abs_theta"]) > 0


def test_sweep_beta_zero_column(tmp_path):
    code, out, _ = run(tmp_path, "sweep", "--grid", "beta=0,0.04", "--grid", "gamma2=0.5", data={**MINIMAL, "gamma1": 0})
    rows = read_csv(out / "sweep.csv")
    assert code == 0
    assert float(rows[0]["max_abs_theta"]) == 0.0 and float(rows[1]["max_abs_theta"]) > 0


def test_sweep_bad_range(tmp_path):
    code, _, _ = run(tmp_path, "sweep", "--grid", "colour=1,2")
    assert code == 2
