import configparser
import csv
import subprocess
import sys

import pytest

from spdfield import cli

TINY = """
[run]
seed = 7

[mesh]
elements = 16

[apm]
n_model = 60
maxiter = 60
mean = 0.2
std = 0.4

[observe]
n_exp = 30

[kl]
count = 300

[map]
degree = 3
points = 5
z_scale = 0.3
validation = 10

[lowrank]
r_max = 4

[identify]
n_model = 100
iterations = 200
burn = 100
audit_count = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def manifest(out):
    man = configparser.ConfigParser(interpolation=None)
    man.optionxform = str
    man.read(out / cli.MANIFEST)
    return man


def csv_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    (root / "tiny.ini").write_text(TINY)
    assert cli.main(["all", "--config", str(root / "tiny.ini"), "--out", str(root / "run")]) == 0
    return root


def test_synth_then_fit_records_w_opt(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
    assert cli.main(["--stage", "fit-apm", "--config", str(tiny), "--out", str(out)]) == 0
    man = manifest(out)
    assert float(man["results"]["w_opt.std"]) > 0
    assert "w_opt.mean" in man["results"]
    assert man["run"]["config_hash"] and man["run"]["seed"] == "7"
    # every key is recorded, defaults included
    assert man["config.identify"]["prior_scale"] == "0.5"
    assert "version.numpy" in man["run"]


def test_invalid_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[mesh]\nelemnts = 4\n")
    assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "elemnts" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["--out", str(tmp_path)]) == 2
    assert cli.main(["synth", "--stage", "solve"]) == 2


def test_mismatched_dimension_exits_2(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[field]\nn = 2\n")
    assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_missing_upstream_names_producer(tiny, tmp_path, capsys):
    assert cli.main(["build-map", "--config", str(tiny), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "w_opt.csv" in err and "'fit-apm'" in err


def test_same_config_and_seed_give_identical_csv(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
        assert cli.main(["fit-apm", "--config", str(tiny), "--out", str(out)]) == 0
    assert csv_bytes(a) == csv_bytes(b)
    assert cli.main(["synth", "--config", str(tiny), "--out", str(tmp_path / "c"),
                     "--seed", "8"]) == 0
    assert (tmp_path / "c" / "exp_data.csv").read_bytes() != (a / "exp_data.csv").read_bytes()


def test_checksum_skip(tiny, tmp_path, caplog):
    out = tmp_path / "run"
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
    stamp = (out / "exp_data.csv").stat().st_mtime_ns
    caplog.set_level("INFO", logger="spdfield.cli")
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
    assert "up to date" in caplog.text
    assert (out / "exp_data.csv").stat().st_mtime_ns == stamp
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out), "--force"]) == 0
    assert (out / "exp_data.csv").stat().st_mtime_ns != stamp


def test_edited_output_is_rebuilt(tiny, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
    good = (out / "exp_data.csv").read_bytes()
    (out / "exp_data.csv").write_text("tampered\n")
    assert cli.main(["synth", "--config", str(tiny), "--out", str(out)]) == 0
    assert (out / "exp_data.csv").read_bytes() == good


def test_report_on_empty_dir(tmp_path):
    index = cli.write_report(tmp_path)
    assert all(status == "missing" for _, status, _ in index)
    rows = list(csv.reader(open(tmp_path / "report_index.csv")))
    assert rows[0] == ["section", "status", "sources"]
    assert {r[0] for r in rows[1:]} == {s for s, _ in cli.REPORT_SECTIONS}
    assert sorted(p.name for p in tmp_path.iterdir()) == ["report_index.csv"]


def test_full_pipeline_report(full_run):
    out = full_run / "run"
    rows = list(csv.reader(open(out / "report_index.csv")))[1:]
    assert all(r[1] == "present" for r in rows), rows
    spec = list(csv.reader(open(out / "report_spectrum.csv")))[1:]
    values = [float(r[1]) for r in spec]
    assert values == sorted(values, reverse=True) and values[-1] > 0
    man = manifest(out)
    assert man["results"]["audit.ok"] == "True"
    for stage in cli.STAGE_NAMES:
        assert man.has_section(f"stage.{stage}")


def test_full_pipeline_norm_chain(full_run):
    rows = list(csv.reader(open(full_run / "run" / "norm_chain.csv")))
    head, body = rows[0], rows[1:]
    assert body
    holds = head.index("holds")
    assert all(r[holds] == "1" for r in body)
    assert all(float(r[1]) <= float(r[2]) for r in body)


def test_thread_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.main(["synth", "--config", str(tiny), "--out", str(tmp_path / "o")]) == 0
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.main(["synth", "--config", str(tiny), "--out", str(tmp_path / "o")]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spdfield.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "--config" in proc.stdout
