"""Command-line behaviour: exit codes, CSV outputs and the distance command."""

import json

import numpy as np
import pytest

from conftest import rc_netlist
from ddmor.cli import main
from ddmor.pod import PodBasis, write_basis
from ddmor.study import read_csv


def _basis(tmp_path, name, U):
    p = tmp_path / name
    write_basis(p, PodBasis("psi", np.asarray(U, float), np.ones(U.shape[1]), U.shape[1], "L"))
    return str(p)


def test_distance_same_file(tmp_path, capsys):
    a = _basis(tmp_path, "a.csv", np.linalg.qr(np.random.default_rng(0).standard_normal((7, 3)))[0])
    assert main(["distance", a, a]) == 0
    assert capsys.readouterr().out.strip() == "0.000000"


def test_distance_orthogonal(tmp_path, capsys):
    E = np.eye(5)
    assert main(["distance", _basis(tmp_path, "a.csv", E[:, :2]), _basis(tmp_path, "b.csv", E[:, 2:4])]) == 0
    assert capsys.readouterr().out.strip() == "1.414214"


def test_distance_dimension_mismatch(tmp_path, capsys):
    rc = main(["distance", _basis(tmp_path, "a.csv", np.eye(5)[:, :1]), _basis(tmp_path, "b.csv", np.eye(4)[:, :1])])
    assert rc == 2
    assert "dimension" in capsys.readouterr().err


def test_distance_missing_file(tmp_path):
    assert main(["distance", str(tmp_path / "nope.csv"), str(tmp_path / "nope.csv")]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": ["1"], "branches": [{"name": "R", "type": "R", "nodes": ["1", "7"], "value": 1}]}))
    assert main(["simulate", "--netlist", str(bad), "--freq", "1e6", "--out", str(tmp_path)]) == 2
    assert "branches[0]" in capsys.readouterr().err
    assert main(["simulate", "--netlist", str(tmp_path / "missing.json"), "--freq", "1e6", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--netlist", "fig1_basic.json", "--freq", "-1", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--netlist", "fig1_basic.json", "--freq", "1e9", "--elements", "7",
                 "--out", str(tmp_path)]) == 2
    assert main(["sample", "--netlist", "fig1_basic.json", "--pspace", "1e12", "1e8", "--ntest", "3",
                 "--delta", "1e-3", "--tol", "1"]) == 2


def test_solver_failure_exit_3(tmp_path, capsys):
    # six elements cannot resolve the junction, so no stationary point is found
    rc = main(["simulate", "--netlist", "fig1_basic.json", "--freq", "1e9", "--elements", "6", "--out", str(tmp_path)])
    assert rc == 3
    assert "t = " in capsys.readouterr().err


def test_simulate_rc_writes_schema_csv(tmp_path):
    net = tmp_path / "rc.json"
    net.write_text(json.dumps(rc_netlist()))
    assert main(["simulate", "--netlist", str(net), "--freq", "1e5", "--out", str(tmp_path / "o")]) == 0
    schema, header, rows = read_csv(tmp_path / "o" / "trajectory.csv")
    assert schema == "ddmor-trajectory/1"
    assert header == ["t", "e_in", "e_out", "j_V_V1"]
    t = np.array([r[0] for r in rows])
    assert t[0] == 0.0 and t[-1] == pytest.approx(3e-5) and np.all(np.diff(t) > 0)


def test_zero_amplitude_keeps_equilibrium(tmp_path, fig1_dict):
    fig1_dict["branches"][0]["amplitude"] = 0.0
    net = tmp_path / "z.json"
    net.write_text(json.dumps(fig1_dict))
    assert main(["simulate", "--netlist", str(net), "--freq", "1e9", "--elements", "200", "--out", str(tmp_path)]) == 0
    _, header, rows = read_csv(tmp_path / "trajectory.csv")
    data = np.array(rows)
    cur = [i for i, h in enumerate(header) if h.startswith("j_")]
    assert np.abs(data[:, cur]).max() <= 1e-9


def test_pod_study_single_delta(tmp_path):
    out = tmp_path / "s"
    rc = main(["pod-study", "--netlist", "fig1_basic.json", "--ref-freq", "1e11", "--elements", "200",
               "--delta", "1e-3", "--out", str(out)])
    assert rc == 0
    schema, header, rows = read_csv(out / "pod_study.csv")
    assert schema == "ddmor-pod-study/1"
    assert len(rows) == 1
    assert header[0] == "delta" and "s_total" in header and "aggregate" in header


def test_sample_infinite_tol(tmp_path):
    out = tmp_path / "c"
    rc = main(["sample", "--netlist", "fig1_basic.json", "--elements", "200", "--pspace", "1e10", "1e11",
               "--ntest", "2", "--delta", "1e-3", "--tol", "inf", "--out", str(out)])
    assert rc == 0
    schema, header, rows = read_csv(out / "summary.csv")
    assert schema == "ddmor-campaign/1"
    assert len(rows) == 1
    assert header == ["step", "references", "max_residual", "argmax"]
    assert len(list((out / "bases").glob("*.csv"))) == 6
    _, sh, srows = read_csv(out / "sweep.csv")
    assert len(srows) == 2


def test_sample_true_error_adds_columns(tmp_path):
    out = tmp_path / "c"
    rc = main(["sample", "--netlist", "fig1_basic.json", "--elements", "200", "--pspace", "1e10", "1e11",
               "--ntest", "2", "--delta", "1e-3", "--tol", "inf", "--true-error", "--out", str(out)])
    assert rc == 0
    _, header, rows = read_csv(out / "summary.csv")
    assert header == ["step", "references", "max_residual", "argmax", "max_error", "error_argmax"]
    assert len(rows[0]) == 6
