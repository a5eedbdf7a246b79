import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from fpflow import cli
from fpflow.cli import RunConfig, main, resolve_config
from fpflow.exceptions import ConfigurationError
from fpflow.geometry import fibonacci_sphere
from fpflow.io import load_cloud, load_field, save_cloud


def _json(path):
    return json.loads(path.read_text())


def test_gen_surface(tmp_path, capsys):
    out = tmp_path / "cloud.csv"
    assert main(["gen-surface", "--surface", "torus", "--resolution", "64", "--output", str(out),
                 "--out", str(tmp_path / "o")]) == 0
    assert load_cloud(out).n_points == 64
    assert "wrote 64 points" in capsys.readouterr().out
    assert (tmp_path / "o" / "config.yaml").is_file()


def test_evolve_outputs(tmp_path):
    out = tmp_path / "ev"
    code = main(["evolve", "--surface", "shifted_sphere", "--resolution", "300", "--tau", "0.05",
                 "--T", "0.2", "--snapshot-stride", "2", "--out", str(out)])
    assert code == 0
    for name in ("final.ply", "final.s.csv", "trace.csv", "histogram.csv", "summary.json",
                 "config.yaml"):
        assert (out / name).is_file(), name
    snaps = sorted(p.name for p in (out / "snapshots").iterdir())
    assert snaps == ["step_000000.ply", "step_000000.s.csv", "step_000002.ply",
                     "step_000002.s.csv", "step_000004.ply", "step_000004.s.csv"]
    summary = _json(out / "summary.json")
    assert summary["steps"] == 4 and summary["t"] == pytest.approx(0.2)
    X = load_cloud(out / "final.ply").positions
    assert X.shape == (summary["n_points"], 3)
    assert load_field(out / "final.s.csv").shape == (X.shape[0],)
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]


def test_evolve_from_input_file(tmp_path):
    src = tmp_path / "in.ply"
    main(["gen-surface", "--resolution", "200", "--output", str(src), "--out", str(tmp_path / "g")])
    out = tmp_path / "ev"
    assert main(["evolve", "--input", str(src), "--tau", "0.1", "--T", "0.1", "--eta", "0",
                 "--out", str(out)]) == 0
    assert _json(out / "summary.json")["n_points"] == load_cloud(src).n_points


def test_redistribute_and_match_target(tmp_path):
    src = tmp_path / "in.csv"
    A = np.vstack([p for p in fibonacci_sphere(400) if p[2] > 0] +
                  [p for p in fibonacci_sphere(120) if p[2] <= 0])
    save_cloud(A, src)
    out = tmp_path / "red"
    assert main(["redistribute", "--input", str(src), "--eps0", "1e-3", "--out", str(out)]) == 0
    s = _json(out / "summary.json")
    assert s["converged"] and s["cv_after"] < s["cv_before"]
    for name in ("input.ply", "final.ply", "final.s.csv", "trace.csv", "histogram_before.csv",
                 "histogram_after.csv"):
        assert (out / name).is_file(), name

    out = tmp_path / "mt"
    assert main(["match-target", "--resolution", "300", "--theta", "2", "--eps0", "1e-2",
                 "--out", str(out)]) == 0
    s = _json(out / "summary.json")
    assert s["target"] == {"name": "ellipsoid_band", "theta": 2.0}
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["surface"] == "ellipsoid"
    assert echoed["surface_params"]["z_center"] == pytest.approx(-np.pi / 2)


def test_mcf_subcommand(tmp_path):
    out = tmp_path / "mcf"
    assert main(["mcf", "--resolution", "400", "--max-steps", "3", "--out", str(out)]) == 0
    s = _json(out / "summary.json")
    assert s["status"] == "max_steps" and s["steps"] == 3
    rows = list(csv.DictReader(open(out / "trajectory.csv")))
    assert len(rows) == 4 and "E_h" in rows[0]


def test_converge_subcommands_and_config_replay(tmp_path):
    out = tmp_path / "ct"
    args = ["converge-time", "--resolution", "200", "--orders", "1,2", "--inv-taus", "4,8,16",
            "--T", "0.25"]
    assert main(args + ["--out", str(out)]) == 0
    rep = _json(out / "report.json")
    assert [r["inv_tau"] for r in rep["rows"]] == [8, 16, 8, 16]

    # the echoed config reproduces the report; only the wall time may differ
    again = tmp_path / "ct2"
    assert main(["converge-time", "--config", str(out / "config.yaml"), "--out", str(again)]) == 0
    assert (again / "report.csv").read_bytes() == (out / "report.csv").read_bytes()
    a, b = _json(out / "report.json"), _json(again / "report.json")
    a["metadata"].pop("runtime_s")
    b["metadata"].pop("runtime_s")
    assert a == b

    out = tmp_path / "cs"
    assert main(["converge-space", "--sizes", "64,256", "--etas", "10", "--out", str(out)]) == 0
    assert [r["N"] for r in _json(out / "report.json")["rows"]] == [64]


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("eta: 5.0\ntau: 0.5\nT: 1.0\nresolution: 300\n")
    cfg = resolve_config("evolve", cli.load_config_file(cfg_file), {"tau": 0.25})
    assert cfg.eta == 5.0 and cfg.tau == 0.25 and cfg.resolution == 300
    json_file = tmp_path / "c.json"
    json_file.write_text(json.dumps({"orders": [1, 3], "surface_params": {"radius": 2}}))
    cfg = resolve_config("converge-time", cli.load_config_file(json_file), {"orders": "2"})
    assert cfg.orders == [2] and cfg.surface_params == {"radius": 2}


def test_presets_and_full_scale():
    assert resolve_config("mcf").surface == "mcf_benchmark"
    assert resolve_config("redistribute").T == 0.6
    assert resolve_config("converge-time", overrides={"full": True}).resolution == 30054
    cfg = resolve_config("converge-time", overrides={"full": True, "resolution": 500})
    assert cfg.resolution == 500
    cfg = resolve_config("match-target", overrides={"target": "dumbbell_band"})
    assert cfg.surface == "dumbbell" and cfg.surface_params == {"t": 0.0}


@pytest.mark.parametrize(
    "overrides,field",
    [({"tau": -1}, "tau"), ({"order": 4}, "order"), ({"velocity": "warp"}, "velocity"),
     ({"k": 3}, "k"), ({"resolution": "many"}, "resolution"), ({"bogus": 1}, "bogus"),
     ({"surface_params": "[1]"}, "surface_params"), ({"input": "/nonexistent.ply"}, "input")],
)
def test_config_errors_name_the_field(overrides, field):
    with pytest.raises(ConfigurationError) as exc:
        resolve_config("evolve", overrides=overrides)
    assert str(exc.value).startswith(field)


@pytest.mark.parametrize(
    "argv",
    [["evolve", "--tau", "-1"], ["evolve", "--frobnicate"], ["nosuchcommand"],
     ["evolve", "--input", "/nonexistent.ply"]],
)
def test_exit_code_config_error(tmp_path, argv):
    if argv[0] in cli.SUBCOMMANDS:
        argv = argv + ["--out", str(tmp_path)]
    assert main(argv) == 2


def test_exit_code_bad_config_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("eta: [unclosed\n")
    assert main(["evolve", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("- a\n- b\n")
    assert main(["evolve", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("wat: 1\n")
    assert main(["evolve", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_exit_code_malformed_input(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 3\nend_header\n")
    assert main(["evolve", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_numerical_failure(tmp_path, capsys):
    src = tmp_path / "in.csv"
    A = fibonacci_sphere(400)
    save_cloud(np.vstack([A[A[:, 2] > 0], fibonacci_sphere(100)[::2]]), src)
    code = main(["redistribute", "--input", str(src), "--max-iter", "2", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err
    # partial outputs are still written
    assert (tmp_path / "o" / "summary.json").is_file()


def test_thread_limit_env(tmp_path, monkeypatch):
    seen = {}

    def probe(cfg, out):
        from threadpoolctl import threadpool_info

        seen["threads"] = {p["internal_api"]: p["num_threads"] for p in threadpool_info()}
        return 0

    monkeypatch.setitem(cli.COMMANDS, "gen-surface", probe)
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert main(["gen-surface", "--out", str(tmp_path)]) == 0
    assert all(n == 1 for n in seen["threads"].values())
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert main(["gen-surface", "--out", str(tmp_path)]) == 2


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    assert "fpflow 0.1.0" in capsys.readouterr().out
    assert main([]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fpflow.cli", "gen-surface", "--resolution", "50",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "unit_sphere.ply").is_file()


def test_runconfig_defaults_validate():
    assert RunConfig().validate().eps0 == 5e-5
