import json
import os

import numpy as np
import pytest
import yaml

from marssfit.cli import main
from marssfit.specfile import (
    free_params_from_values,
    load_spec,
    parse_document,
    read_data_csv,
    write_data_csv,
)

RW_SPEC = {
    "n": 1, "m": 1, "t0": 0,
    "B": {"kind": "identity"},
    "U": {"symbolic": [["u"]]},
    "Q": {"symbolic": [["q"]]},
    "Z": {"fixed": [[1.0]]},
    "A": {"fixed": [[0.0]]},
    "R": {"symbolic": [["r"]]},
    "Xi": {"symbolic": [["p1"]]},
    "Lambda": {"fixed": [[1.0]]},
    "values": {"U": {"u": 0.2}, "Q": {"q": 0.5}, "R": {"r": 0.3},
               "Xi": {"p1": 0.0}},
}


def _write_yaml(path, doc):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh)


@pytest.fixture
def rw_files(tmp_path):
    spec_path = tmp_path / "model.yaml"
    doc = dict(RW_SPEC)
    doc["T"] = 40
    _write_yaml(spec_path, doc)
    out = tmp_path / "sim"
    assert main(["simulate", "--spec", str(spec_path), "--out", str(out),
                 "--seed", "3", "--quiet"]) == 0
    return spec_path, out / "observations.csv", tmp_path


def test_parse_document_roundtrip():
    spec, values = parse_document(dict(RW_SPEC), T=10)
    assert spec.n == spec.m == 1
    assert spec.T == 10
    assert spec.design("U").free_names == ("u",)
    params = free_params_from_values(spec, values)
    assert params.upsilon[0] == 0.2


def test_parse_document_defaults():
    spec, _ = parse_document({"n": 2, "m": 1, "T": 5}, T=5)
    assert spec.design("B").s == 0
    assert spec.design("Xi").s == 1
    np.testing.assert_array_equal(spec.design("Z").f_by_time[0], [1.0, 0.0])


def test_parse_document_symbolic_expressions_and_per_time():
    doc = {
        "n": 1, "m": 2, "T": 3, "t0": 0,
        "B": {"symbolic": [["2+a+2*c", 0.0], [0.0, "a"]]},
        "Z": {"fixed": [[1.0, 0.0]]},
        "U": {"f_by_time": [[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]],
              "D_by_time": [[[1.0], [0.0]]] * 3, "names": ["u"]},
    }
    spec, _ = parse_document(doc, T=3)
    assert spec.design("B").free_names == ("a", "c")
    design_u = spec.design("U")
    assert design_u.time_varying
    np.testing.assert_array_equal(design_u.f(2), [0.2, 0.0])


def test_data_csv_roundtrip(tmp_path):
    y = np.array([[1.25, -2.5, 3.0], [0.1, 0.2, 0.3]])
    observed = np.array([[True, False, True], [True, True, False]])
    path = tmp_path / "data.csv"
    write_data_csv(path, y, observed)
    data = read_data_csv(path)
    np.testing.assert_array_equal(data.observed, observed)
    np.testing.assert_array_equal(data.y[observed], y[observed])
    assert data.y[0, 1] == 0.0


def test_simulate_deterministic_outputs(rw_files, tmp_path):
    spec_path, _, base = rw_files
    out2 = base / "sim2"
    assert main(["simulate", "--spec", str(spec_path), "--out", str(out2),
                 "--seed", "3", "--quiet"]) == 0
    a = (base / "sim" / "observations.csv").read_bytes()
    b = (out2 / "observations.csv").read_bytes()
    assert a == b


def test_simulate_missing_fraction(rw_files):
    spec_path, _, base = rw_files
    out = base / "sim_missing"
    assert main(["simulate", "--spec", str(spec_path), "--out", str(out),
                 "--seed", "3", "--missing-frac", "0.4", "--quiet"]) == 0
    data = read_data_csv(out / "observations.csv")
    frac = 1.0 - data.observed.mean()
    assert 0.1 < frac < 0.7


def test_bundled_example_golden_run(tmp_path):
    # the example shipped in the repository fits reproducibly
    root = os.path.join(os.path.dirname(__file__), "..", "example")
    spec_path = os.path.join(root, "model.yaml")
    data_path = os.path.join(root, "observations.csv")
    outs = []
    for tag in ("g1", "g2"):
        out = tmp_path / tag
        code = main(["fit", "--spec", spec_path, "--data", data_path,
                     "--out", str(out), "--seed", "1", "--quiet"])
        assert code == 0
        outs.append(out)
    for name in sorted(p.name for p in outs[0].iterdir()):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_fit_runs_and_is_byte_identical(rw_files):
    spec_path, data_path, base = rw_files
    outs = []
    for tag in ("fit1", "fit2"):
        out = base / tag
        code = main(["fit", "--spec", str(spec_path), "--data", str(data_path),
                     "--out", str(out), "--seed", "7", "--quiet"])
        assert code == 0
        outs.append(out)
    for fname in ("free_values.csv", "loglik_trace.csv", "summary.json",
                  "B.csv", "U.csv", "Q.csv", "R.csv", "Xi.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert summary["converged"] is True
    trace = np.loadtxt(outs[0] / "loglik_trace.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(np.atleast_2d(trace)[:, 1]) >= -1e-8)


def test_fit_without_values_uses_random_inits(rw_files, tmp_path):
    spec_path, data_path, base = rw_files
    doc = yaml.safe_load(spec_path.read_text())
    del doc["values"]
    nospec = tmp_path / "novalues.yaml"
    _write_yaml(nospec, doc)
    out = base / "fit_mc"
    code = main(["fit", "--spec", str(nospec), "--data", str(data_path),
                 "--out", str(out), "--seed", "7", "--mc-inits", "3", "--quiet"])
    assert code == 0


def test_fit_exit_two_when_not_converged(rw_files):
    spec_path, data_path, base = rw_files
    out = base / "fit_short"
    code = main(["fit", "--spec", str(spec_path), "--data", str(data_path),
                 "--out", str(out), "--seed", "7", "--max-iter", "2",
                 "--abstol", "1e-15", "--quiet"])
    assert code == 2


def test_fit_accepts_missing_cells(rw_files):
    spec_path, _, base = rw_files
    sim_out = base / "sim_na"
    assert main(["simulate", "--spec", str(spec_path), "--out", str(sim_out),
                 "--seed", "5", "--missing-frac", "0.3", "--quiet"]) == 0
    raw = (sim_out / "observations.csv").read_text()
    assert "NA" in raw
    out = base / "fit_na"
    code = main(["fit", "--spec", str(spec_path), "--data",
                 str(sim_out / "observations.csv"), "--out", str(out),
                 "--seed", "5", "--quiet"])
    assert code in (0, 2)


def test_check_clean_spec(rw_files):
    spec_path, data_path, _ = rw_files
    assert main(["check", "--spec", str(spec_path), "--data", str(data_path),
                 "--quiet"]) == 0


def test_check_flags_overdetermined_Z(tmp_path, capsys):
    doc = {
        "n": 4, "m": 3, "T": 6, "t0": 0,
        "H": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
        "R": {"kind": "diagonal-unequal"},
        "Z": {"fixed": [[0.5, 0.3, 0.0], [0.2, 0.3, 0.4],
                        [0.1, 0.1, 0.1], [0.5, 0.3, 0.0]]},
        "Q": {"kind": "diagonal-unequal"},
        "B": {"kind": "identity"},
        "Lambda": {"kind": "diagonal-unequal"},
    }
    path = tmp_path / "bad.yaml"
    _write_yaml(path, doc)
    assert main(["check", "--spec", str(path)]) == 1
    out = capsys.readouterr().out
    assert "[i]" in out


def test_check_flags_estimated_Z_on_zero_variance_row(tmp_path, capsys):
    doc = {
        "n": 2, "m": 1, "T": 6, "t0": 0,
        "H": [[0.0], [1.0]],
        "R": {"symbolic": [["r"]]},
        "Z": {"symbolic": [["z1"], ["z2"]]},
    }
    path = tmp_path / "bad_z.yaml"
    _write_yaml(path, doc)
    assert main(["check", "--spec", str(path)]) == 1
    out = capsys.readouterr().out
    assert "[c]" in out


def test_check_flags_confounded_design(tmp_path, capsys):
    doc = {
        "n": 1, "m": 2, "T": 6, "t0": 0,
        "U": {"f": [0.0, 0.0], "D": [[1.0, 1.0], [1.0, 1.0]],
              "names": ["u1", "u2"]},
        "Z": {"fixed": [[1.0, 0.0]]},
    }
    path = tmp_path / "conf.yaml"
    _write_yaml(path, doc)
    assert main(["check", "--spec", str(path)]) == 1
    out = capsys.readouterr().out
    assert "rank" in out


def test_loglik_command(rw_files, capsys):
    spec_path, data_path, base = rw_files
    assert main(["loglik", "--spec", str(spec_path), "--data", str(data_path),
                 "--out", str(base / "ll")]) == 0
    printed = capsys.readouterr().out.strip()
    stored = json.loads((base / "ll" / "loglik.json").read_text())
    assert float(printed) == pytest.approx(stored["loglik"], abs=1e-12)


def test_fit_error_exit_code(tmp_path):
    path = tmp_path / "missing.yaml"
    assert main(["fit", "--spec", str(path), "--data", str(path),
                 "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_simulate_rejects_incomplete_values(tmp_path, capsys):
    doc = dict(RW_SPEC)
    doc["T"] = 10
    doc["values"] = {"U": {"u": 0.2}}  # q, r, p1 missing
    path = tmp_path / "model.yaml"
    _write_yaml(path, doc)
    assert main(["simulate", "--spec", str(path),
                 "--out", str(tmp_path / "o")]) == 1
    assert "missing values" in capsys.readouterr().err


def test_fit_names_violated_rule(tmp_path, capsys):
    # estimated observation-matrix row on a zero-variance observation row
    doc = {
        "n": 2, "m": 1, "t0": 0,
        "H": [[0.0], [1.0]],
        "R": {"symbolic": [["r"]], "values": {"r": 0.4}},
        "Z": {"symbolic": [["z1"], ["z2"]], "values": {"z1": 1.0, "z2": 1.0}},
        "Q": {"symbolic": [["q"]], "values": {"q": 0.5}},
        "Xi": {"symbolic": [["p1"]], "values": {"p1": 0.0}},
    }
    spec_path = tmp_path / "bad.yaml"
    _write_yaml(spec_path, doc)
    data_path = tmp_path / "data.csv"
    write_data_csv(data_path, np.ones((2, 6)))
    code = main(["fit", "--spec", str(spec_path), "--data", str(data_path),
                 "--out", str(tmp_path / "o"), "--quiet"])
    assert code == 1
    assert "[c]" in capsys.readouterr().err


def test_fit_outputs_reparse_to_exact_values(rw_files):
    # full-precision round trip: rerunning the fit in process must reproduce
    # the emitted free values bit for bit
    from marssfit.driver import EMConfig, em_fit

    spec_path, data_path, base = rw_files
    out = base / "fit_roundtrip"
    assert main(["fit", "--spec", str(spec_path), "--data", str(data_path),
                 "--out", str(out), "--seed", "7", "--quiet"]) == 0
    data = read_data_csv(data_path)
    spec, values = load_spec(spec_path, T=data.T)
    init = free_params_from_values(spec, values)
    result = em_fit(spec, init, data, EMConfig())
    rows = (out / "free_values.csv").read_text().splitlines()[1:]
    parsed = {(r.split(",")[0], r.split(",")[1]): float(r.split(",")[2])
              for r in rows}
    for name in ("B", "U", "Q", "R", "Xi"):
        design = spec.design(name)
        for free_name, value in zip(design.free_names,
                                    result.params.by_name(name)):
            assert parsed[(name, free_name)] == value


def test_simulate_then_fit_recovers_drift(tmp_path):
    # sampling-distribution check over seeded replicates; observation noise
    # held fixed so only drift, state variance, and initial state are fitted
    doc = dict(RW_SPEC)
    doc["T"] = 80
    doc["R"] = {"fixed": [[0.3]]}
    doc["values"] = {"U": {"u": 0.2}, "Q": {"q": 0.5}, "Xi": {"p1": 0.0}}
    spec_path = tmp_path / "model.yaml"
    _write_yaml(spec_path, doc)
    drifts = []
    for seed in range(20):
        sim_out = tmp_path / f"sim{seed}"
        assert main(["simulate", "--spec", str(spec_path), "--out", str(sim_out),
                     "--seed", str(seed), "--quiet"]) == 0
        fit_out = tmp_path / f"fit{seed}"
        code = main(["fit", "--spec", str(spec_path), "--data",
                     str(sim_out / "observations.csv"), "--out", str(fit_out),
                     "--seed", str(seed), "--max-iter", "200", "--quiet"])
        assert code in (0, 2)
        rows = (fit_out / "free_values.csv").read_text().splitlines()[1:]
        values = {(r.split(",")[0], r.split(",")[1]): float(r.split(",")[2])
                  for r in rows}
        drifts.append(values[("U", "u")])
    drifts = np.array(drifts)
    se = drifts.std(ddof=1) / np.sqrt(drifts.size)
    assert abs(drifts.mean() - 0.2) < 3 * se
