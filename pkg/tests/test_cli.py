import json
import subprocess
import sys

import pytest

from relurecover.harness.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from relurecover.errors import StageError
from relurecover.harness.config import DEFAULTS, stage_seeds, validate
from relurecover.harness.pipeline import run_pipeline

SMALL = {"version": 1, "seed": 3, "network": {"d": 4, "m": 2}, "N": 100_000,
         "regression": {"n_eval": 100_000}}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(*argv):
    return main([str(a) for a in argv])


def run_fresh(*argv):
    # a separate interpreter per run, as a user rerunning the command would
    proc = subprocess.run([sys.executable, "-m", "relurecover.harness.cli", *map(str, argv)],
                          capture_output=True, text=True)
    return proc.returncode


@pytest.fixture(scope="module")
def piped(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(base, SMALL)
    assert run_fresh("pipeline", "--config", cfg, "--out", base / "a") == EXIT_OK
    first = {p.name: p.read_bytes() for p in (base / "a").iterdir()}
    assert run_fresh("pipeline", "--config", cfg, "--out", base / "a") == EXIT_OK
    (base / "first").mkdir()
    for name, raw in first.items():
        (base / "first" / name).write_bytes(raw)
    return base


def test_pipeline_writes_artifacts(piped):
    out = piped / "a"
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "ok"
    for name in report["artifacts"]:
        assert (out / name).exists(), name
    for name in ("network.json", "recovered.json", "final_network.json", "match.json", "regress.json",
                 "summary.csv", "estimates.csv", "timings.json", "T_4.htnsr", "spectra.png"):
        assert (out / name).exists(), name


def test_pipeline_small_instance_quality(piped):
    report = json.loads((piped / "a" / "report.json").read_text())
    assert report["match"]["total_cost"] <= 0.1
    assert report["regression"]["passes_eps"] is True
    assert report["regression"]["units"] <= 2 + 2
    assert report["match"]["good_set_unmatched"] == []


def test_rerun_byte_identical(piped):
    for name in ("report.json", "recovered.json", "final_network.json", "match.json", "summary.csv",
                 "T_3.htnsr", "spectra.png"):
        assert (piped / "a" / name).read_bytes() == (piped / "first" / name).read_bytes(), name


def test_report_lists_every_threshold_and_seed(piped):
    report = json.loads((piped / "a" / "report.json").read_text())
    cfg = report["config"]
    for section in ("network", "recovery", "regression", "artifacts"):
        assert set(cfg[section]) == set(DEFAULTS[section])
    assert report["seeds"] == {k: v for k, v in stage_seeds(3).items()}
    rec = report["recovery"]["config"]
    for key in ("eta0", "eta2", "eta3", "ell"):
        assert key in rec
    for key in ("tau", "radius", "gap"):
        assert key in report["regression"]


def test_stage_by_stage_matches_pipeline(tmp_path, piped):
    cfg = dict(SMALL, artifacts={"figures": False})
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "stages"
    for cmd in ("generate", "sample", "estimate", "recover", "regress", "evaluate"):
        assert run_cli(cmd, "--config", path, "--out", out) == EXIT_OK, cmd
    for name in ("network.json", "estimate.json", "T_0.htnsr", "T_4.htnsr", "recovered.json",
                 "final_network.json", "regress.json", "match.json"):
        assert (out / name).read_bytes() == (piped / "a" / name).read_bytes(), name
    assert (out / "dataset.hdata").read_bytes()[:6] == b"HDATA1"
    assert not (out / "spectra.png").exists()


def test_seed_flag_overrides(tmp_path, capsys):
    path = write_cfg(tmp_path, SMALL)
    assert run_cli("generate", "--config", path, "--out", tmp_path / "x", "--seed", "0x10") == EXIT_OK
    assert run_cli("generate", "--config", path, "--out", tmp_path / "y", "--seed", "3") == EXIT_OK
    assert (tmp_path / "x" / "network.json").read_bytes() != (tmp_path / "y" / "network.json").read_bytes()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary == {"d": 4, "m": 2}


def test_exit_code_config_errors(tmp_path, capsys):
    bad = write_cfg(tmp_path, {"version": 1, "recovery": {"eta9": 1.0}})
    assert run_cli("pipeline", "--config", bad, "--out", tmp_path / "o") == EXIT_CONFIG
    assert "eta9" in capsys.readouterr().err
    assert run_cli("generate") == EXIT_CONFIG
    assert run_cli("generate", "--config", tmp_path / "nope.json", "--out", tmp_path) == EXIT_CONFIG


def test_argument_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["generate", "--seed", "-1"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_exit_code_missing_input(tmp_path, capsys):
    assert run_cli("recover", "--out", tmp_path) == EXIT_STAGE
    assert "recover" in capsys.readouterr().err


def test_failed_stage_recorded_with_partial_artifacts(tmp_path):
    cfg = dict(SMALL, network={"path": str(tmp_path / "absent.json")})
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "run"
    assert run_cli("pipeline", "--config", path, "--out", out) == EXIT_STAGE
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "error"
    assert report["error"]["stage"] == "generate"


def test_failure_after_early_stages_keeps_their_outputs(tmp_path):
    # one PGD step cannot meet the certified optimality gap, so the regression stage fails
    cfg = validate(dict(SMALL, output_dir=str(tmp_path / "r"),
                        regression={"steps": 1, "n_eval": 1000}))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, figures=False)
    assert info.value.stage == "regress"
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["error"]["stage"] == "regress"
    assert "recovered.json" in report["artifacts"]
    assert (tmp_path / "r" / "recovered.json").exists()


def test_overcomplete_config_completes(tmp_path):
    cfg = {"version": 1, "seed": 1, "ell": 2, "coefficients": "exact",
           "network": {"d": 5, "m": 8}, "regression": {"enabled": False}}
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "l2"
    assert run_cli("pipeline", "--config", path, "--out", out, "--no-figures") == EXIT_OK
    match = json.loads((out / "match.json").read_text())
    assert len(match["pairs"]) == 8
    assert max(match["w_err"]) <= 1e-5


def test_verify_lemmas_command(tmp_path, capsys):
    assert run_cli("verify-lemmas", "--out", tmp_path) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["checks"]["cramer"] and summary["checks"]["turan"] and summary["checks"]["khatri_rao"]
    assert summary["checks"]["root_separation"] is False
    assert (tmp_path / "lemmas.json").exists() and (tmp_path / "lemma_margins.png").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "relurecover.harness.cli", "generate", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout) == {"d": 6, "m": 3}
