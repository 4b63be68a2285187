"""CLI driver: configs, exit codes, CSV output."""

import csv
import json
import shutil
import subprocess

import pytest
import yaml

from quasitrans.harness import (
    EXIT_AUDIT, EXIT_CONFIG, EXIT_NO_MODE, EXIT_OK, RunConfig, load_config, main,
)
from quasitrans.errors import ConfigurationError

# a cheaper mode grid keeps CLI tests quick
FAST = {"profile": "fig1", "omega0": 3.0, "mode_half_width": 20, "mode_h": 2e-3}


def _write(tmp_path, name="run.yaml", **cfg):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("cfg", [
    {"experiment": "residual-trace", "tol": 0.0},
    {"experiment": "residual-trace", "tol": -1e-8},
    {"experiment": "bogus"},
    {"experiment": "residual-trace", "surprise": 1},
    {"experiment": "h-sweep", "h": [0.2, 0.1]},
    {"experiment": "eps-sweep", "eps": [1.5]},
    {"experiment": "residual-trace", "profile": "nope"},
    {"experiment": "residual-trace", "envelope": {"kind": "square"}},
    {"eps": [1e-3]},
])
def test_bad_config_exits_2(tmp_path, cfg):
    assert main([str(_write(tmp_path, **cfg)), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unreadable_and_malformed_config(tmp_path):
    assert main([str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: [unclosed\n")
    assert main([str(bad)]) == EXIT_CONFIG


def test_load_config_normalizes_scalars(tmp_path):
    cfg = load_config(_write(tmp_path, experiment="h-sweep", eps=3e-4, h=[0.2, 0.1, 0.05], **FAST))
    assert isinstance(cfg, RunConfig)
    assert cfg.eps == [3e-4] and cfg.omega0 == [3.0] and cfg.profile == {"builtin": "fig1"}
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(["not", "a", "mapping"])


def test_dispersion_run(tmp_path, capsys):
    out = tmp_path / "disp"
    assert main([str(_write(tmp_path, experiment="dispersion", **FAST)), "--out", str(out)]) == EXIT_OK
    assert "k0 = 3.438" in capsys.readouterr().out
    rows = _rows(out / "dispersion.csv")
    assert rows[0] == ["omega", "k0", "boundary_ratio", "residual_L"]
    mode = _rows(out / "mode.csv")
    assert mode[0] == ["x1", "eps1_w1", "w2_imag", "w3"] and len(mode) == 1 + 20001
    assert (out / "mode.svg").read_text().lstrip().startswith("<?xml")
    rec = json.loads((out / "record.json").read_text())
    assert rec["exit_code"] == 0 and abs(rec["scalars"]["k0"] - 3.4352) < 0.01
    assert json.loads((out / "inputs.json").read_text())["experiment"] == "dispersion"


def test_no_mode_exits_3(tmp_path, capsys):
    cfg = dict(FAST, profile="step")
    code = main([str(_write(tmp_path, experiment="dispersion", **cfg)), "--out", str(tmp_path / "o")])
    assert code == EXIT_NO_MODE
    assert "no localized mode" in capsys.readouterr().err


def test_zero_data_trace(tmp_path):
    out = tmp_path / "zero"
    cfg = dict(FAST, experiment="residual-trace", envelope={"kind": "zero"}, eps=3e-4, h=0.5)
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    assert _rows(out / "residual_trace.csv") == [["n", "residual"], ["1", "0.0"]]
    final = json.loads((out / "logs" / "solve_trace.jsonl").read_text().splitlines()[-1])
    assert all(v == 0.0 for v in final.values())


def test_trace_length_bounded_by_max_iter(tmp_path):
    out = tmp_path / "t"
    cfg = dict(FAST, experiment="residual-trace", eps=3e-4, h=0.5, max_iter=3, min_iter=3, tol=1e-30)
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "residual_trace.csv")
    assert len(rows) == 1 + 3
    vals = [float(r[1]) for r in rows[1:]]
    assert vals == sorted(vals, reverse=True)


def test_single_eps_sweep_has_no_slope(tmp_path):
    out = tmp_path / "s"
    cfg = dict(FAST, experiment="eps-sweep", eps=[3e-4], h=0.5)
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "eps_sweep.csv")
    assert rows[0] == ["eps", "norm_grad_phi_L2"] and len(rows) == 2
    assert not json.loads((out / "record.json").read_text())["slopes"]


def test_sweep_is_deterministic_and_has_slope_footer(tmp_path):
    cfg = dict(FAST, experiment="eps-sweep", eps=[1e-3, 5e-4, 3e-4, 2e-4], h=0.5)
    path = _write(tmp_path, **cfg)
    assert main([str(path), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([str(path), "--out", str(tmp_path / "b")]) == EXIT_OK
    a = _rows(tmp_path / "a" / "eps_sweep.csv")
    assert a == _rows(tmp_path / "b" / "eps_sweep.csv")
    assert a[-1][0] == "slope" and float(a[-1][1]) > 0


def test_h_sweep_reports_monotone_flag(tmp_path):
    out = tmp_path / "h"
    cfg = dict(FAST, experiment="h-sweep", eps=3e-4, h=[1.0, 0.5, 0.25])
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "h_sweep.csv")
    assert rows[0] == ["h", "div_D_norm"] and rows[-1][0] == "monotone"
    assert rows[-1][1] in ("true", "false")


def test_audit_failure_exits_5(tmp_path):
    # an impossible bound on the estimate ratio must fail the audit
    cfg = dict(FAST, experiment="audit", eps=[3e-4], h=0.5, ratio_bound=1e-12,
               norm_eps=[5e-5, 1e-4])
    out = tmp_path / "audit"
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_AUDIT
    report = json.loads((out / "audit.json").read_text())
    assert not report["checks"]["estimate_ratio_bounded"]["pass"]
    assert report["checks"]["linear_limit"]["pass"]


def test_dump_matrices(tmp_path):
    out = tmp_path / "d"
    cfg = dict(FAST, experiment="residual-trace", eps=3e-4, h=1.0, dump_matrices=True)
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    lines = (out / "logs" / "matrix_trace.txt").read_text().splitlines()
    assert lines and len(lines[0].split()) == 3


def test_console_script(tmp_path):
    exe = shutil.which("quasitrans")
    if exe is None:
        pytest.skip("console script not on PATH")
    res = subprocess.run([exe, str(_write(tmp_path, experiment="nope"))], capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG and "configuration error" in res.stderr


def test_thread_limit_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("QUASITRANS_THREADS", "zero")
    assert main([str(_write(tmp_path, experiment="dispersion", **FAST))]) == EXIT_CONFIG


def _slope_and_error(csv_path):
    import numpy as np
    rows = _rows(csv_path)
    data = np.array([[float(a), float(b)] for a, b in rows[1:] if a != "slope"])
    p, cov = np.polyfit(np.log(data[:, 0]), np.log(data[:, 1]), 1, cov=True)
    assert float(rows[-1][1]) == pytest.approx(p[0], rel=1e-12)
    return p[0], np.sqrt(cov[0, 0])


def test_sweep_slope_survives_rescaling(tmp_path):
    # doubling every eps shifts the log data; the slopes must agree within
    # two combined standard errors of the fits
    base = [1e-3, 7e-4, 5e-4, 3e-4, 2e-4, 1e-4]
    fits = []
    for tag, eps in (("a", base), ("b", [2 * e for e in base])):
        path = _write(tmp_path, f"{tag}.yaml", experiment="eps-sweep", eps=eps, h=0.1, **FAST)
        assert main([str(path), "--out", str(tmp_path / tag)]) == EXIT_OK
        fits.append(_slope_and_error(tmp_path / tag / "eps_sweep.csv"))
    (s1, e1), (s2, e2) = fits
    assert abs(s1 - s2) <= 2 * (e1**2 + e2**2) ** 0.5


def test_repeated_h_gives_identical_rows(tmp_path):
    out = tmp_path / "rep"
    cfg = dict(FAST, experiment="h-sweep", eps=3e-4, h=[0.5, 0.5, 0.5])
    assert main([str(_write(tmp_path, **cfg)), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "h_sweep.csv")[1:4]
    assert rows[0] == rows[1] == rows[2]
