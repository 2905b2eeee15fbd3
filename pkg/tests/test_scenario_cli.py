import csv
import json

import pytest

from localpower import cli
from localpower.scenario import DEFAULTS, ScenarioError, parse_scenario

MINIMAL = """
id = "tiny"

[grid]
particles = 1
points = 64
length = 20.0

[initial]
kind = "gaussian"
[[initial.packets]]
center = 0.0
width = 1.0
momentum = 0.5

[time]
t_end = 0.1
dt = 0.01
sample_stride = 2

[[omega]]
label = "right"
bounds = [0.0, 5.0]
"""

SHIPPED = ["box_eigenstate", "driven_pair", "driven_single", "free_gaussian",
           "harmonic_ground", "plane_wave", "symmetric_pair"]


def _write(tmp_path, text, name="s.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _errors(text):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text)
    return exc.value.errors


def test_minimal_scenario_parses():
    s = parse_scenario(MINIMAL)
    assert s.scenario_id == "tiny"
    assert s.omegas[0].snap_distance < s.grid.spacing / 2
    assert round(s.t_end / s.dt) == 10


def test_resolved_config_echoes_every_default():
    resolved = parse_scenario(MINIMAL).resolved()
    for section, values in DEFAULTS.items():
        for key in values:
            assert key in resolved[section], (section, key)
    assert resolved["verify"]["node_epsilon"] == 1e-8
    assert resolved["time"]["norm_abort"] == 1e-6
    assert resolved["potentials"]["envelope_params"] == {"value": 1.0}


def test_omega_outside_box_names_field():
    errors = _errors(MINIMAL.replace("bounds = [0.0, 5.0]", "bounds = [0.0, 15.0]"))
    assert any(e.startswith("omega[0].bounds") for e in errors)


def test_unknown_potential_lists_available():
    errors = _errors(MINIMAL + '\n[potentials]\nprofile = "coulomb3d"\n')
    assert len(errors) == 1
    for name in ("barrier", "flat", "harmonic", "uniform_field", "well"):
        assert name in errors[0]


def test_all_errors_reported_together():
    broken = (
        MINIMAL.replace("points = 64", 'points = "many"')
        .replace("dt = 0.01", "dt = -0.01")
        .replace('id = "tiny"', 'id = "tiny"\ncolour = "blue"')
    )
    broken += '\n[observers]\nnames = ["energy", "entropy"]\n'
    errors = _errors(broken)
    assert len(errors) >= 4
    joined = "\n".join(errors)
    for fragment in ("grid.points", "time.dt", "colour", "entropy"):
        assert fragment in joined


def test_missing_required_blocks():
    errors = _errors('id = "x"\n')
    assert {"missing required section [grid]", "missing required section [initial]",
            "missing required section [time]"} <= set(errors)


def test_syntax_error_is_a_scenario_error():
    errors = _errors("[grid\n")
    assert errors[0].startswith("syntax")


@pytest.mark.parametrize(
    "edit,fragment",
    [
        (("t_end = 0.1", "t_end = 0.105"), "whole number"),
        (("sample_stride = 2", "sample_stride = 0"), "sample_stride"),
        (('kind = "gaussian"', 'kind = "plane_wave"\nmomentum = 0.3'), "grid wavenumber"),
        (('id = "tiny"', 'id = "tiny"\nsymmetry = "symmetric"'), "two particles"),
        (("length = 20.0", "length = 20.0\nshape = 3"), "unknown key 'shape'"),
    ],
)
def test_validation_messages(edit, fragment):
    errors = _errors(MINIMAL.replace(*edit))
    assert any(fragment in e for e in errors), errors


def test_unresolved_wall_softness_rejected():
    text = MINIMAL + '\n[potentials]\nprofile = "barrier"\nprofile_params = { softness = 0.01 }\n'
    assert any("softness" in e for e in _errors(text))


def test_order_checks_need_refinement():
    text = MINIMAL + "\n[checks]\nbalance_order = [1.7, 2.3]\n"
    assert any("refine_dt" in e for e in _errors(text))


def test_shipped_corpus():
    assert cli.shipped_scenario_names() == SHIPPED
    for name in SHIPPED:
        s = cli.load_shipped(name)
        assert s.scenario_id == name
        assert all(o.snap_distance < s.grid.spacing / 2 for o in s.omegas)
    with pytest.raises(ScenarioError, match="available"):
        cli.shipped_scenario_text("nope")


def test_run_writes_artifacts(tmp_path):
    code = cli.main(["run", _write(tmp_path, MINIMAL), "--out", str(tmp_path / "out"), "--quiet"])
    assert code == cli.EXIT_PASS
    d = tmp_path / "out" / "tiny"
    expected = {"energy_right.csv", "power_right.csv", "presence_right.csv", "current_right.csv",
                "norm.csv", "continuity.csv", "closed.csv", "total_energy.csv", "report.json", "manifest.json"}
    assert expected == {p.name for p in d.iterdir()}
    with open(d / "power_right.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "time"
    assert rows[0][1:] == ["drive", "env_coulomb", "quantum_work", "surface_flux", "qpot_time",
                           "qpot_advect", "total", "energy_rate", "balance_residual"]
    assert len(rows) == 1 + 4
    mantissa = rows[1][1].split("e")[0].lstrip("-")
    assert len(mantissa.replace(".", "")) == 17
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and manifest["abort_step"] is None
    assert "wall_clock" in manifest
    assert manifest["config"]["verify"]["refine_dt"] is False


def test_rerun_is_byte_identical(tmp_path):
    path = _write(tmp_path, MINIMAL)
    for run in ("a", "b"):
        assert cli.main(["run", path, "--out", str(tmp_path / run), "--quiet"]) == 0
    a, b = tmp_path / "a" / "tiny", tmp_path / "b" / "tiny"
    for f in a.iterdir():
        if f.name == "manifest.json":
            ma, mb = (json.loads(p.read_text()) for p in (f, b / f.name))
            ma.pop("wall_clock"), mb.pop("wall_clock")
            assert ma == mb
        else:
            assert f.read_bytes() == (b / f.name).read_bytes()


def test_failed_bound_exit_code(tmp_path):
    text = MINIMAL + "\n[checks]\nbalance_absolute = 1e-30\n"
    code = cli.main(["--quiet", "run", _write(tmp_path, text), "--out", str(tmp_path)])
    assert code == cli.EXIT_FAIL
    manifest = json.loads((tmp_path / "tiny" / "manifest.json").read_text())
    assert manifest["failures"] == ["balance_absolute[right]"]


def test_norm_drift_aborts_with_step(tmp_path):
    text = MINIMAL.replace("sample_stride = 2", "sample_stride = 2\nnorm_abort = 1e-30")
    code = cli.main(["run", _write(tmp_path, text), "--out", str(tmp_path), "--quiet"])
    assert code == cli.EXIT_ABORT
    manifest = json.loads((tmp_path / "tiny" / "manifest.json").read_text())
    assert manifest["abort"].startswith("PropagationError")
    assert isinstance(manifest["abort_step"], int) and manifest["abort_step"] >= 1


def test_output_root_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env_root"))
    assert cli.main(["run", _write(tmp_path, MINIMAL), "--quiet"]) == 0
    assert (tmp_path / "env_root" / "tiny" / "manifest.json").exists()
    assert cli.output_root(str(tmp_path / "flag")) == tmp_path / "flag"


def test_options_before_subcommand(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path / "o"), "--quiet", "run", _write(tmp_path, MINIMAL)]) == 0
    assert (tmp_path / "o" / "tiny").is_dir()
    assert capsys.readouterr().out == ""


def test_check_command(tmp_path, capsys):
    assert cli.main(["check", _write(tmp_path, MINIMAL)]) == cli.EXIT_PASS
    assert "tiny: ok" in capsys.readouterr().out
    assert cli.main(["check", "plane_wave"]) == cli.EXIT_PASS
    bad = _write(tmp_path, MINIMAL.replace("bounds = [0.0, 5.0]", "bounds = [5.0, 0.0]"), "bad.toml")
    assert cli.main(["check", bad]) == cli.EXIT_USAGE
    assert "omega[0].bounds" in capsys.readouterr().err


def test_usage_errors():
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["explode"]) == cli.EXIT_USAGE
    assert cli.main(["check", "/nonexistent/file.toml"]) == cli.EXIT_USAGE


def test_relax_and_noise_initial_state(tmp_path):
    text = MINIMAL.replace('kind = "gaussian"', 'kind = "relax"\ndtau = 1e-2\ntol = 1e-10\nnoise = 1e-3')
    text = text.replace('id = "tiny"', 'id = "tiny"\nseed = 7') + '\n[potentials]\nprofile = "harmonic"\n'
    s = parse_scenario(text)
    from localpower.scenario import build_potentials, prepare_state

    pot = build_potentials(s)
    a, b = prepare_state(s, pot), prepare_state(s, pot)
    assert a.amplitudes.tobytes() == b.amplitudes.tobytes()
    assert abs(a.norm() - 1) < 1e-12
