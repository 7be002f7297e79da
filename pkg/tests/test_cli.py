from __future__ import annotations

import io
import json
import subprocess
import sys

import numpy as np
import pytest

import wahkit
from wahkit import cli
from wahkit.errors import BarrierError, ConfigurationError, ExpansionCapError, NumericalError

SPEC_OPERATIONS = {
    "geometry": ["make_collar_chart", "mobius_param", "boundary_mobius_param", "catalog_metric"],
    "curvature": ["kn_product", "riemann_direct", "riem_via_identity", "ricci_via_identity", "scalar_via_identity",
                  "riem_deviation_decomposition", "little_f", "taylor_defect", "decay_exponent",
                  "wah_equivalence_report"],
    "norms": ["weighted_holder_norm", "weighted_sobolev_norm", "script_c_norm", "classify_regularity"],
    "mollify": ["group_mul", "make_kernel", "convolve", "convolve_commutation_check", "regularize"],
    "htensor": ["conformal_killing", "a_coeff", "h_tensor", "h_invariance_suite", "boundary_obstruction_check"],
    "indicial": ["laplacian_ud", "indicial_map", "characteristic_exponents", "indicial_radius", "fredholm_window"],
    "phg": ["phg_add", "phg_mul", "apply_indicial", "solve_indicial_ode", "expansion_match",
            "lichnerowicz_expansion"],
    "yamabe": ["linear_solve", "negative_gauge", "gauge_fix_scalar", "barriers", "choose_lambda",
               "monotone_iterate", "solve_lichnerowicz", "solve_yamabe"],
    "cli": ["parse_config", "run"],
}

AUDIT_RUNS = [
    ["curvature-report", "--metric", "log_oscillation", "--field", "rho + rho**2*sin(log(rho))"],
    ["classify", "--field", "rho_sin_log", "--exponent", "1"],
    ["regularize", "--field", "rho_sin_log"],
    ["htensor-check", "--metric", "poly_perturbed", "--params", '{"a": [0, 0], "b": [1, 0]}'],
    ["indicial", "--n", "3"],
    ["phg-solve", "--source", "3,0,1", "--c-shift", "3"],
    ["yamabe", "--metric", "poly_perturbed", "--params", '{"a": 1}', "--points", "256"],
    ["yamabe", "--metric", "hyperbolic", "--points", "256", "--force-negative-gauge", "--A", "rho**3"],
]


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_indicial_exponents(capsys):
    code, out, _ = run_cli(["indicial", "--n", "3"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["schema"] == 1
    assert sorted(e["re"] for e in rep["exponents"]) == pytest.approx([0.0, 3.0])
    assert rep["radius"] == pytest.approx(1.5)


def test_yamabe_requires_metric(capsys):
    code, _, err = run_cli(["yamabe"], capsys)
    assert code == 2 and "--metric" in err


def test_yamabe_hyperbolic(capsys, tmp_path):
    csv = tmp_path / "y.csv"
    code, out, _ = run_cli(["yamabe", "--metric", "hyperbolic", "--csv", str(csv)], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["final_residual"] <= 1e-10
    lines = csv.read_text().splitlines()
    assert lines[0] == "rho,u,residual"
    assert len(lines) == 1025


def test_phg_solve_resonant_log(capsys):
    code, out, _ = run_cli(["phg-solve", "--source", "3,0,1", "--c-shift", "3"], capsys)
    assert code == 0
    terms = json.loads(out)["expansion"]
    logs = [t for t in terms if t["p"] == 1]
    assert len(logs) == 1 and logs[0]["re_s"] == pytest.approx(3.0)
    assert logs[0]["coeff"][0] == pytest.approx(0.25)


def test_classify_booleans(capsys):
    code, out, _ = run_cli(["classify", "--field", "rho_sin_log"], capsys)
    rep = json.loads(out)["memberships"]
    assert code == 0
    assert rep["script_C^{2,0.5;1}"] is True and rep["C1(Mbar)"] is False


def test_config_round_trip(tmp_path):
    cfg = cli.parse_config(["curvature-report", "--metric", "poly_perturbed", "--params", '{"a": 0.5}',
                            "--tolerance", "wah=1e-3"])
    assert cli.config_from_mapping(cfg.to_dict()) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert cli.parse_config(str(path)) == cfg
    assert cli.parse_config(["--config", str(path)]) == cfg


def test_unknown_keys_list_valid_keys():
    with pytest.raises(ConfigurationError) as exc:
        cli.config_from_mapping({"command": "indicial", "colour": 1})
    for key in cli.TOP_KEYS:
        assert key in str(exc.value)
    with pytest.raises(ConfigurationError):
        cli.config_from_mapping({"command": "indicial", "options": {"bogus": 1}})
    with pytest.raises(ConfigurationError):
        cli.config_from_mapping({"command": "nope"})


def test_unknown_catalog_metric_exit_code(capsys):
    code, _, err = run_cli(["curvature-report", "--metric", "banana"], capsys)
    assert code == 2 and "banana" in err


def test_config_with_subcommand_rejected(capsys, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(cli.parse_config(["indicial"]).to_json())
    code, _, _ = run_cli(["--config", str(path), "indicial"], capsys)
    assert code == 2


@pytest.mark.parametrize("exc,code", [(ConfigurationError, 2), (NumericalError, 3), (BarrierError, 4),
                                      (ExpansionCapError, 5)])
def test_exit_codes(monkeypatch, capsys, exc, code):
    def boom(cfg):
        raise exc("synthetic failure")

    monkeypatch.setitem(cli.HANDLERS, "indicial", boom)
    got, _, err = run_cli(["indicial"], capsys)
    assert got == code and "synthetic failure" in err


def test_expansion_cap_from_real_run(capsys):
    argv = ["phg-solve", "--c-shift", "3"]
    for k in range(70):
        argv += ["--source", f"{0.1 + 0.013 * k},0,1"]
    code, _, _ = run_cli(argv, capsys)
    assert code == 5


def test_deterministic_json(capsys):
    argv = ["curvature-report", "--metric", "angle_dependent"]
    _, first, _ = run_cli(argv, capsys)
    _, second, _ = run_cli(argv, capsys)
    assert first == second


def test_csv_format(tmp_path, capsys):
    path = tmp_path / "c.csv"
    code, _, _ = run_cli(["curvature-report", "--csv", str(path)], capsys)
    assert code == 0
    header, *rows = path.read_text().splitlines()
    assert header == "rho,dev_riem,dev_ric,dev_scalar,little_f"
    first = rows[0].split(",")
    assert all("e" in v and len(v.split("e")[0].replace("-", "").replace(".", "")) == 17 for v in first)
    assert np.isfinite(np.array(first, dtype=float)).all()


def test_format_csv_and_plain():
    text = cli.format_csv(("a", "b"), np.array([[1.0, -0.5]]))
    assert text == "a,b\n1.0000000000000000e+00,-5.0000000000000000e-01\n"
    doc = json.loads(cli.dumps_report({"x": float("nan"), "z": 1 + 2j}))
    assert doc == {"schema": 1, "x": None, "z": {"re": 1.0, "im": 2.0}}


def test_thread_cap_validation(monkeypatch, capsys):
    monkeypatch.setenv("WAHKIT_THREADS", "zero")
    code, _, err = run_cli(["indicial"], capsys)
    assert code == 2 and "WAHKIT_THREADS" in err
    monkeypatch.setenv("WAHKIT_THREADS", "2")
    assert cli.thread_cap() == 2


def test_dump_config(capsys):
    code, out, _ = run_cli(["indicial", "--c-shift", "5", "--dump-config"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["command"] == "indicial" and doc["options"]["c_shift"] == 5.0


def test_json_output_file(tmp_path):
    path = tmp_path / "out.json"
    cfg = cli.parse_config(["indicial", "--json", str(path)])
    sink = io.StringIO()
    assert cli.run(cfg, sink) == 0
    assert sink.getvalue() == ""
    assert json.loads(path.read_text())["schema"] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "wahkit", "indicial", "--c-shift", "5"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["radius"] == pytest.approx(6**0.5)


def test_every_operation_reachable_from_a_subcommand(capsys):
    reached: set[tuple[str, str]] = set()

    def profiler(frame, event, arg):
        if event == "call":
            mod = frame.f_globals.get("__name__", "")
            if mod.startswith("wahkit."):
                reached.add((mod.split(".", 1)[1], frame.f_code.co_name))

    sys.setprofile(profiler)
    try:
        for argv in AUDIT_RUNS:
            code = cli.main(argv)
            assert code == 0, argv
    finally:
        sys.setprofile(None)
    capsys.readouterr()
    missing = [f"{m}.{f}" for m, names in SPEC_OPERATIONS.items() for f in names if (m, f) not in reached]
    assert not missing, missing


def test_package_exports():
    assert wahkit.__version__
    assert issubclass(wahkit.BarrierError, wahkit.WahkitError)
