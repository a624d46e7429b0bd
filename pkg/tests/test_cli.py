import json
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from ptcontrol import process_tensor as ptmod
from ptcontrol.cli import main
from ptcontrol.config import CACHE_ENV, RunConfig
from ptcontrol.errors import ConfigError

FREE = """
seed = 3
[bath]
alpha = 0.0
[discretization]
dt = 0.01
n_steps = 200
memory_time = 0.5
[pulse]
tau = 0.1
theta = {theta}
t_center = 1.0
[paths]
pt_cache = "cache"
output_dir = "out"
"""

COUPLED_OPT = """
seed = 11
[discretization]
dt = 0.01
n_steps = 200
memory_time = 0.3
{extra}
[pulse]
tau = 0.1
theta = 1.5707963267948966
t_center = 1.0
[ensemble]
detunings = [-10.0, -5.0, 0.0, 5.0, 10.0]
[objective]
kind = "rms_equator"
[optimizer]
parameters = ["tau", "delta", "theta"]
lower = [0.05, -10.0, 0.0]
upper = [0.2, 10.0, 6.0]
pop_per_dim = 4
max_generations = {generations}
[landscape]
parameters = ["delta", "phi"]
lower = [-10.0, -3.14159]
upper = [10.0, 3.14159]
shape = [3, 3]
[mask]
coefficients = [0.0, 0.0, -100.0]
[paths]
pt_cache = "cache"
output_dir = "out"
"""


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def final_sz(csv_path):
    rows = [r for r in open(csv_path).read().splitlines() if not r.startswith("#")]
    header = rows[0].split(",")
    return float(rows[-1].split(",")[header.index("sz")])


@pytest.fixture(autouse=True)
def no_cache_env(monkeypatch):
    monkeypatch.delenv(CACHE_ENV, raising=False)


def test_unknown_key_exits_with_config_error(tmp_path, capsys):
    cfg = write(tmp_path, "[bath]\nalpah = 0.1\n")
    assert main(["build-pt", "--config", cfg]) == 2
    assert "bath.alpah" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"pulse": {"tau": "fast"}})
    assert main(["build-pt"]) == 2


def test_build_without_coupling_and_rebuild_is_identical(tmp_path, capsys):
    cfg = write(tmp_path, FREE.format(theta=0.0))
    assert main(["build-pt", "--config", cfg]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["diagnostics"]["max_bond"] == 1
    first = ptmod.load(report["pt_path"]).digest()
    assert main(["build-pt", "--config", cfg]) == 0
    assert "up to date" in capsys.readouterr().out
    assert main(["build-pt", "--config", cfg, "--force"]) == 0
    assert json.loads(capsys.readouterr().out)["pt_hash"] == first == report["pt_hash"]
    assert main(["pt-info", "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["matches_config"] is True


def test_propagate_without_and_with_a_pi_pulse(tmp_path, capsys):
    cfg0 = write(tmp_path, FREE.format(theta=0.0), "zero.toml")
    cfg1 = write(tmp_path, FREE.format(theta=np.pi), "pi.toml")
    assert main(["build-pt", "--config", cfg0]) == 0
    assert main(["propagate", "--config", cfg0, "--out", str(tmp_path / "a.csv")]) == 0
    assert final_sz(tmp_path / "a.csv") == pytest.approx(-1.0, abs=1e-12)
    # the pulse does not enter the tensor's configuration hash
    assert main(["propagate", "--config", cfg1, "--out", str(tmp_path / "b.csv")]) == 0
    assert final_sz(tmp_path / "b.csv") == pytest.approx(1.0, abs=1e-6)
    header = open(tmp_path / "b.csv").readline()
    assert header.startswith("# config_hash=")


def test_provenance_mismatch_and_force(tmp_path, capsys):
    free = write(tmp_path, FREE.format(theta=0.0), "free.toml")
    coupled = write(tmp_path, FREE.format(theta=0.0).replace("alpha = 0.0", "alpha = 0.05"),
                    "coupled.toml")
    assert main(["build-pt", "--config", free]) == 0
    pt_path = json.loads(capsys.readouterr().out)["pt_path"]
    out = str(tmp_path / "p.csv")
    assert main(["propagate", "--config", coupled, "--pt", pt_path, "--out", out]) == 3
    assert "--force" in capsys.readouterr().err
    assert main(["propagate", "--config", coupled, "--pt", pt_path, "--out", out, "--force"]) == 0


def test_capacity_exceeded_exit_code(tmp_path, capsys):
    text = FREE.format(theta=0.0).replace("alpha = 0.0", "alpha = 0.126")
    text = text.replace("memory_time = 0.5", "memory_time = 0.5\nmax_bond_capacity = 1")
    cfg = write(tmp_path, text)
    assert main(["build-pt", "--config", cfg]) == 4


def test_corrupted_tensor_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, FREE.format(theta=0.0))
    assert main(["build-pt", "--config", cfg]) == 0
    pt_path = json.loads(capsys.readouterr().out)["pt_path"]
    data = bytearray(open(pt_path, "rb").read())
    data[-40] ^= 0x01
    open(pt_path, "wb").write(bytes(data))
    assert main(["pt-info", "--pt", pt_path]) == 8


def test_cache_directory_from_environment(tmp_path, monkeypatch, capsys):
    cfg = write(tmp_path, FREE.format(theta=0.0))
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "elsewhere"))
    assert main(["build-pt", "--config", cfg]) == 0
    pt_path = json.loads(capsys.readouterr().out)["pt_path"]
    assert pt_path.startswith(str(tmp_path / "elsewhere"))
    assert os.path.isfile(pt_path)


def test_landscape_writes_one_row_per_grid_point(tmp_path, capsys):
    cfg = write(tmp_path, COUPLED_OPT.format(extra="", generations=2))
    assert main(["build-pt", "--config", cfg]) == 0
    out = tmp_path / "land.csv"
    assert main(["landscape", "--config", cfg, "--out", str(out), "--threads", "1"]) == 0
    rows = [r for r in out.read_text().splitlines() if not r.startswith("#")]
    assert rows[0] == "delta,phi,objective" and len(rows) == 10
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["shape"] == [3, 3] and side["failures"] == []


def run_cli(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "ptcontrol.cli", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, **kw)


def test_killed_optimisation_resumes_to_the_same_result(tmp_path, capsys):
    cfg = write(tmp_path, COUPLED_OPT.format(extra="", generations=20))
    assert main(["build-pt", "--config", cfg]) == 0
    capsys.readouterr()
    ref = tmp_path / "ref.json"
    assert main(["optimize", "--config", cfg, "--out", str(ref), "--threads", "1"]) == 0

    out = tmp_path / "run.json"
    ckpt = tmp_path / "run.checkpoint.json"
    proc = run_cli("optimize", "--config", cfg, "--out", str(out), "--threads", "1")
    deadline = time.monotonic() + 300
    generation = -1
    while time.monotonic() < deadline and proc.poll() is None:
        if ckpt.exists():
            try:
                generation = json.loads(ckpt.read_text())["state"]["generation"]
            except (json.JSONDecodeError, KeyError):
                generation = -1
            if generation >= 2:
                break
        time.sleep(0.02)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    assert proc.returncode == -signal.SIGKILL, "run finished before it could be interrupted"
    assert 2 <= generation < 20
    assert not out.exists()

    assert main(["optimize", "--config", cfg, "--out", str(out), "--threads", "1", "--resume"]) == 0
    a = json.loads(ref.with_suffix(".history.json").read_text())
    b = json.loads(out.with_suffix(".history.json").read_text())
    assert a["history"] == b["history"]
    assert json.loads(ref.read_text())["best_value"] == json.loads(out.read_text())["best_value"]

    # a checkpoint from another seed is refused
    assert main(["optimize", "--config", cfg, "--out", str(out), "--threads", "1", "--resume",
                 "--seed", "99", "--checkpoint", str(ckpt)]) == 3
