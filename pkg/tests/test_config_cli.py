import re
import time
from pathlib import Path

import pytest

import sllb.cli as cli
from sllb.config import ConfigError, build_config, load_config, parse_text
from sllb.scheme import StepFailure

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """\
# deterministic 1D run
model.dimension = 1
noise.modes = 0
discretisation.n_cells = 8
discretisation.N = 10
"""


def write(tmp_path, text, name="c.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_comments_and_blank_lines():
    raw = parse_text("# c\n\nmodel.T = 2.0  # trailing\n")
    assert raw == {"model.T": "2.0"}


def test_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="model.tee"):
        parse_text("model.tee = 1\n")
    with pytest.raises(ConfigError, match="given twice"):
        parse_text("model.T = 1\nmodel.T = 2\n")
    with pytest.raises(ConfigError):
        parse_text("model.T 1\n")


def test_defaults_and_overrides():
    cfg = build_config({}, {"noise.seed": 11})
    assert cfg.seed == 11
    assert cfg["model.lengths"] == (1.0,)
    assert cfg["experiment.levels"] == ((16, 32), (32, 64), (64, 128))


@pytest.mark.parametrize("text,key", [
    ("model.epsilon = 0.1\n", "model.epsilon"),
    ("model.T = -1\n", "model.T"),
    ("noise.decay = 3\n", "noise.decay"),
    ("stopping.mode = sometimes\n", "stopping.mode"),
    ("experiment.levels = 8:16, 12:64\n", "experiment"),
    ("model.dimension = 2\nmodel.epsilon = 0\n", "model.epsilon"),
    ("discretisation.N = ten\n", "discretisation.N"),
])
def test_field_precise_errors(text, key):
    with pytest.raises(ConfigError) as info:
        cfg = load_config(None, None) if not text else build_config(parse_text(text))
        cfg.plan()
    assert key in str(info.value)


def test_digest_ignores_output_dir():
    a = build_config(parse_text("output.dir = a\n"))
    b = build_config(parse_text("output.dir = b\n"))
    c = build_config(parse_text("model.T = 2\n"))
    assert a.digest() == b.digest() != c.digest()
    assert re.fullmatch(r"# sllb 0\.1\.0 config=[0-9a-f]{16} seed=0 c_star=1", a.header("0.1.0"))


def test_run_minimal(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "trajectory.csv").read_text().splitlines()
    assert lines[0].startswith("# sllb ")
    assert lines[1] == "step,t,delta_tau,h1_norm,energy_residual"
    assert len(lines) == 2 + 11
    assert "energy-identity violations=0" in capsys.readouterr().out


def test_run_is_bitwise_deterministic(tmp_path):
    cfg = write(tmp_path, MINIMAL.replace("noise.modes = 0", "noise.modes = 3"))
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert b"\r" not in a and b"seed=4" in a


def test_run_2d_writes_fields(tmp_path):
    out = tmp_path / "2d"
    assert cli.main(["run", "--config", str(CONFIGS / "run_2d.cfg"), "--out", str(out)]) == 0
    files = sorted((out / "fields").iterdir())
    assert files[0].name == "step_000000.txt"
    assert files[0].read_text().startswith("llb-field dim=2 degree=2")


def test_epsilon_in_1d_exits_2(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL + "model.epsilon = 0.1\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "model.epsilon" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_bad_threads_exits_2(tmp_path):
    assert cli.main(["convergence", "--config", str(write(tmp_path, MINIMAL)), "--threads", "0"]) == 2


def test_numeric_abort_exits_3(tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise StepFailure(1, RuntimeError("forced"))

    monkeypatch.setattr(cli, "run_trajectory", broken)
    assert cli.main(["run", "--config", str(write(tmp_path, MINIMAL)), "--out", str(tmp_path)]) == 3
    assert "numerical abort" in capsys.readouterr().err


def test_convergence_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    out = tmp_path / "c"
    assert cli.main(["convergence", "--config", str(CONFIGS / "smoke_1d.cfg"), "--out", str(out)]) == 0
    assert time.perf_counter() - t0 < 60
    agg = (out / "report_aggregate.csv").read_text().splitlines()
    assert re.fullmatch(r"# sllb \S+ config=[0-9a-f]{16} seed=7 c_star=1 paths=4 aborted=0", agg[0])
    assert agg[1] == "level,h,dt,mean_e_max_sq,mean_e_grad_sq,ci_lo,ci_hi,exceed_freq"
    assert len(agg) == 2 + 3
    paths = (out / "report_paths.csv").read_text().splitlines()
    assert paths[1] == "level,h,dt,path,e_max_sq,e_grad_sq,stopped_at"
    assert len(paths) == 2 + 4 * 3
    assert "slope vs" in capsys.readouterr().out
    again = tmp_path / "d"
    assert cli.main(["convergence", "--config", str(CONFIGS / "smoke_1d.cfg"), "--out", str(again)]) == 0
    for name in ("report_aggregate.csv", "report_paths.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_epsilon_study_cli(tmp_path):
    cfg = write(tmp_path, "noise.modes = 2\nepsilon_study.eps = 0.1, 0.05\nepsilon_study.n_modes = 8\n"
                          "epsilon_study.N = 16\nepsilon_study.paths = 2\n")
    assert cli.main(["epsilon-study", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "epsilon_study.csv").read_text().splitlines()
    assert lines[1].startswith("epsilon,mean_sup_l2_sq")
    assert len(lines) == 4


def test_validate_passes(capsys):
    assert cli.main(["validate"]) == 0
    assert "9/9 checks passed" in capsys.readouterr().out


def test_validate_detects_injected_fault(capsys):
    assert cli.main(["validate", "--inject-fault", "stratonovich-sign"]) == 1
    out = capsys.readouterr().out
    assert re.search(r"^FAIL\s+energy_identity", out, re.M)
    # the fault is confined to the context: a clean rerun passes again
    assert cli.main(["validate"]) == 0
