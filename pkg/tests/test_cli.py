import csv
import io
import json
import subprocess
import sys

import pytest

from metachain.chain import PerturbedChain
from metachain.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, SCHEMA, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def report(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == EXIT_OK, err
    data = json.loads(out)
    assert data["schema"] == SCHEMA
    return data


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def a_json(data_dir):
    return data_dir / "chain-a.json"


@pytest.fixture
def b_json(data_dir):
    return data_dir / "chain-b.json"


@pytest.fixture
def bl_json(data_dir):
    return data_dir / "chain-b-linked.json"


def test_stationary_two_state(capsys, a_json):
    data = report(capsys, "stationary", a_json)
    assert data["results"]["limit"] == {"x": 0.0, "y": 1.0}
    assert data["input"]["sha256"] == PerturbedChain.load(a_json).digest()


def test_stationary_with_eps(capsys, a_json):
    data = report(capsys, "stationary", a_json, "--eps", "0.01")
    assert data["results"]["at_eps"]["values"]["y"] == pytest.approx(0.01 / (0.01 + 1e-4))


def test_decompose_wells(capsys, b_json):
    data = report(capsys, "decompose", b_json)
    assert data["results"]["classes"] == [["x"], ["y"], ["z"]]
    assert data["results"]["transient"] == ["w"]


def test_decompose_representatives(capsys, bl_json):
    data = report(capsys, "decompose", bl_json, "--representatives", "x,y,z")
    assert data["results"]["representatives"] == ["x", "y", "z"]


def test_validate(capsys, b_json):
    data = report(capsys, "validate", b_json)
    assert data["results"]["ok"] and data["results"]["tight_rows"] == ["w"]


def test_committor_report(capsys, b_json):
    data = report(capsys, "committor", b_json, "--target", "z", "--avoid", "x", "--eps", "1e-3")
    res = data["results"]
    assert res["asymptotic"]["w"] == {"coeff": 1.0, "exp": [1, 1]}
    assert res["numeric"]["values"]["w"] == pytest.approx(1e-3, rel=1e-12)
    assert res["method"] == "lifted"


def test_committor_solvers_consistent(capsys, bl_json):
    values = []
    for solver in ("direct", "newton", "elimination"):
        data = report(capsys, "committor", bl_json, "--target", "x", "--avoid", "y,z", "--eps", "1e-3", "--solver", solver)
        assert data["results"]["numeric"]["solver"] == solver
        values.append(data["results"]["numeric"]["values"])
    for other in values[1:]:
        for k, v in values[0].items():
            assert other[k] == pytest.approx(v, abs=1e-12)


def test_newton_with_traps_exits_numeric(capsys, b_json):
    code, _, err = run(capsys, "committor", b_json, "--target", "x", "--avoid", "z", "--eps", "1e-3", "--solver", "newton")
    assert code == EXIT_NUMERIC
    assert json.loads(err)["exit_code"] == EXIT_NUMERIC


def test_hierarchy(capsys, b_json):
    data = report(capsys, "hierarchy", b_json)
    assert len(data["results"]["levels"]) == 2
    assert sorted(map(sorted, data["results"]["final_classes"])) == [["x", "y", "z"]]


def test_verify_identities(capsys, b_json):
    data = report(capsys, "verify", "--suite", "identities", "--eps-ladder", "1e-2,1e-3", b_json)
    assert data["results"]["passed"]
    assert data["results"]["n_failed"] == 0


def test_verify_all(capsys, bl_json):
    data = report(capsys, "verify", bl_json)
    assert data["results"]["passed"] and data["results"]["n_checks"] > 0


def test_metastable(capsys, b_json):
    assert report(capsys, "metastable", b_json, "--set", "x,y,z")["results"]["holds"]
    data = report(capsys, "metastable", b_json, "--set", "x,y,z,w")
    assert not data["results"]["holds"] and data["results"]["witness"][0] == "w"


# sweeps -----------------------------------------------------------------------------------------


def test_sweep_q_hat_ratio_tends_to_one(capsys, b_json):
    code, out, _ = run(capsys, "sweep", b_json, "--quantity", "q-hat", "--from", "z", "--to", "y")
    assert code == EXIT_OK
    table = rows(out)
    assert list(table[0]) == ["eps", "quantity", "value", "predicted"]
    gaps = [abs(float(r["value"]) / float(r["predicted"]) - 1) for r in table]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_sweep_q_hat_x_to_y(capsys, b_json):
    _, out, _ = run(capsys, "sweep", b_json, "--quantity", "q-hat", "--from", "x", "--to", "y")
    ratios = [float(r["value"]) / float(r["predicted"]) for r in rows(out)]
    assert ratios == pytest.approx([1.0] * len(ratios), rel=1e-12)


def test_sweep_unreachable_is_zero(capsys, b_json):
    _, out, _ = run(capsys, "sweep", b_json, "--quantity", "committor", "--target", "z", "--avoid", "x", "--start", "y")
    table = rows(out)
    assert all(float(r["value"]) == 0.0 and float(r["predicted"]) == 0.0 for r in table)


def test_sweep_constant_quantity(capsys, tmp_path):
    path = tmp_path / "ergodic.json"
    path.write_text(PerturbedChain.from_edges(["a", "b"], [("a", "b", 0.5, 0), ("b", "a", 0.5, 0)]).dumps())
    _, out, _ = run(capsys, "sweep", path, "--quantity", "class-mass", "--state", "a")
    for r in rows(out):
        assert float(r["value"]) == pytest.approx(float(r["predicted"]), abs=1e-15)


def test_sweep_missing_options_is_usage_error(capsys, b_json):
    code, _, _ = run(capsys, "sweep", b_json, "--quantity", "q-hat")
    assert code == EXIT_USAGE


# exit codes and plumbing -------------------------------------------------------------------------------


def test_unknown_flag(capsys, b_json):
    assert run(capsys, "stationary", b_json, "--bogus")[0] == EXIT_USAGE


def test_unknown_command(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE


def test_missing_file(capsys, tmp_path):
    assert run(capsys, "validate", tmp_path / "nope.json")[0] == EXIT_INVALID


def test_malformed_json(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run(capsys, "decompose", path)[0] == EXIT_INVALID


def test_reducible_chain_is_invalid(capsys, tmp_path):
    path = tmp_path / "red.json"
    path.write_text(PerturbedChain.from_edges(["a", "b"], [("a", "b", 1.0, 1)]).dumps())
    assert run(capsys, "stationary", path)[0] == EXIT_INVALID
    code, out, _ = run(capsys, "validate", path)
    assert code == EXIT_INVALID


def test_unknown_state(capsys, b_json):
    assert run(capsys, "committor", b_json, "--target", "q", "--avoid", "x")[0] == EXIT_INVALID


def test_report_is_deterministic(capsys, bl_json, monkeypatch):
    def strip(d):
        d.pop("timings")
        d["diagnostics"].pop("threads")
        return d

    first = strip(report(capsys, "hierarchy", bl_json))
    monkeypatch.setenv("METACHAIN_THREADS", "4")
    second = strip(report(capsys, "hierarchy", bl_json))
    assert first == second


def test_stdin_input(capsys, monkeypatch, a_json):
    monkeypatch.setattr(sys, "stdin", io.StringIO(a_json.read_text()))
    assert report(capsys, "stationary", "-")["results"]["limit"]["y"] == 1.0


def test_module_entry_point(a_json):
    proc = subprocess.run([sys.executable, "-m", "metachain", "stationary", str(a_json)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"]["limit"] == {"x": 0.0, "y": 1.0}
