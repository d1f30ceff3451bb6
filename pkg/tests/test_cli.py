"""Config parsing, run harness, output files, exit codes."""

import csv
import json

import numpy as np
import pytest

from hfc4 import cli
from hfc4.cli import (EXIT_DRIFT, EXIT_OK, EXIT_VALIDATION, ConfigError,
                      load_config, run)

BASE_CONFIG = """
[model]
d = 2
n_components = 1
p = 3
gamma1 = 1
gamma2 = 1
sigma1 = 1
sigma2 = 0
b = 1
b_jk = 1

[grid]
n = 16
l = 12

[integrator]
dt = 0.01
t = 0.1
diagnostics_stride = 5

[initial]
kind = gaussian
width = 1.5
amplitude = 0.8

[diagnostics]
norms = 2, inf
snapshot_times = 0.05
"""


def write_config(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_load_config_roundtrip(tmp_path):
    cfg = load_config(write_config(tmp_path, BASE_CONFIG))
    assert cfg["model"]["p"] == "3"
    assert cfg["grid"]["n"] == "16"


def test_unknown_key_rejected(tmp_path):
    bad = BASE_CONFIG + "\n[model]\nwhatever = 1\n"
    # configparser merges duplicate sections; inject into an existing one
    bad = BASE_CONFIG.replace("b_jk = 1", "b_jk = 1\nwhatever = 1")
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, bad))


def test_unknown_section_rejected(tmp_path):
    bad = BASE_CONFIG + "\n[mystery]\nx = 1\n"
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, bad))


def test_missing_required_section(tmp_path):
    bad = BASE_CONFIG.replace("[integrator]", "[diagnostics]")
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, bad))


def test_number_parsing():
    assert cli._number("10/3") == pytest.approx(10 / 3)
    assert cli._number("inf") == float("inf")
    assert cli._number("2h", h=0.5) == 1.0
    assert cli._number("5e-3") == 0.005


def test_validate_subcommand(tmp_path, capsys):
    code = run(["validate", write_config(tmp_path, BASE_CONFIG)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "decay_case" in out and "pair1" in out


def test_simulate_produces_artifacts(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    outdir = tmp_path / "out"
    code = run(["simulate", cfg, "-o", str(outdir)])
    assert code == EXIT_OK
    assert (outdir / "run.csv").exists()
    assert (outdir / "metadata.json").exists()
    snaps = list((outdir / "snapshots").glob("snapshot_t*.bin"))
    assert len(snaps) == 3  # 0, 0.05, 0.1
    meta = json.loads((outdir / "metadata.json").read_text())
    assert "admissibility" in meta and "config" in meta

    with open(outdir / "run.csv") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    assert header[:4] == ["t", "j", "mass_j", "E_total"]
    assert "Lr_2_j" in header and "Lr_inf_j" in header
    assert header[-1] == "scattering_residual"
    # records every 5 steps of 10
    assert len(rows) - 1 == 2


def test_csv_byte_determinism(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    outs = []
    for tag in ("a", "b"):
        outdir = tmp_path / tag
        assert run(["simulate", cfg, "-o", str(outdir)]) == EXIT_OK
        outs.append((outdir / "run.csv").read_bytes())
    assert outs[0] == outs[1]


def test_simulate_rejects_inadmissible_kernel(tmp_path):
    bad = BASE_CONFIG.replace("gamma1 = 1", "gamma1 = 2")  # gamma = d
    cfg = write_config(tmp_path, bad)
    outdir = tmp_path / "out"
    code = run(["simulate", cfg, "-o", str(outdir)])
    assert code == EXIT_VALIDATION
    assert not (outdir / "run.csv").exists()


def test_drift_guard_exit_code(tmp_path):
    blow = BASE_CONFIG.replace("dt = 0.01", "dt = 0.2") \
                      .replace("t = 0.1", "t = 2") \
                      .replace("amplitude = 0.8", "amplitude = 6") \
                      .replace("diagnostics_stride = 5",
                               "diagnostics_stride = 1\ndrift_guard = 1e-10")
    cfg = write_config(tmp_path, blow)
    code = run(["simulate", cfg, "-o", str(tmp_path / "out")])
    assert code == EXIT_DRIFT


def test_decay_experiment_reports_slopes(tmp_path, capsys):
    text = BASE_CONFIG.replace("t = 0.1", "t = 0.5") \
                      .replace("snapshot_times = 0.05",
                               "snapshot_times = 0.25\nfit_window = 0.1, 0.5")
    cfg = write_config(tmp_path, text)
    code = run(["decay-experiment", cfg, "-o", str(tmp_path / "out")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "decay slope" in out
    meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
    assert "decay_slopes" in meta


def test_scattering_experiment(tmp_path, capsys):
    text = BASE_CONFIG.replace("snapshot_times = 0.05",
                               "snapshot_times = 0.04, 0.08")
    cfg = write_config(tmp_path, text)
    code = run(["scattering-experiment", cfg, "-o", str(tmp_path / "out")])
    assert code == EXIT_OK
    assert "residual [" in capsys.readouterr().out


def test_scattering_refuses_potential(tmp_path):
    text = BASE_CONFIG.replace("sigma2 = 0", "sigma2 = 1") + \
        "\n[potential]\nfamily = gaussian-bump\nv0 = 1\ns = 2\n"
    cfg = write_config(tmp_path, text)
    code = run(["scattering-experiment", cfg, "-o", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION


def test_check_identities(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE_CONFIG)
    code = run(["check-identities", cfg])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "FAIL" not in out


def test_replay_recomputes_from_snapshots(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    outdir = tmp_path / "out"
    assert run(["simulate", cfg, "-o", str(outdir)]) == EXIT_OK
    assert run(["replay", str(outdir)]) == EXIT_OK
    replay = (outdir / "replay.csv").read_text().splitlines()
    original = (outdir / "run.csv").read_text().splitlines()
    assert replay[0] == original[0]  # same schema
    # replayed rows cover the snapshot times
    times = {row.split(",")[0] for row in replay[1:]}
    assert len(times) == 3


def test_band_limited_initial_kind(tmp_path):
    text = BASE_CONFIG.replace(
        "kind = gaussian\nwidth = 1.5\namplitude = 0.8",
        "kind = band-limited\ncutoff = 1.0\nsharpness = 8")
    cfg = write_config(tmp_path, text)
    assert run(["simulate", cfg, "-o", str(tmp_path / "out")]) == EXIT_OK


def test_random_smooth_initial_kind(tmp_path):
    text = BASE_CONFIG.replace(
        "kind = gaussian\nwidth = 1.5\namplitude = 0.8",
        "kind = random-smooth\nkmax = 2\nwidth = 2\namplitude = 0.5")
    cfg = write_config(tmp_path, text)
    assert run(["simulate", cfg, "-o", str(tmp_path / "out")]) == EXIT_OK
