import json
import subprocess
import sys
from pathlib import Path

import pytest

from wgmlab.cli import config_digest, main
from wgmlab.config import ConfigError, load_config, parse_config

ORACLE_FILE = """\
name = "tri"
alphabet_size = 3
images = [[0, 1], [0, 1, 2], [0, 1]]
return_time = [1, 2, 3]
element_mass = [0.5, 0.25, 0.25]
beta = 0.5
"""

PERIODIC_FILE = """\
alphabet_size = 2
images = [[0, 1], [0, 1]]
return_time = [2, 4]
element_mass = [0.5, 0.5]
"""


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path / "out")])


# -- config loader ----------------------------------------------------------------------


def test_parse_config_values():
    v, lines = parse_config('# comment\nmodel = oracle-o1\nseed = 3\nfixtures = [["V4", 2],\n  ["V4", 4]]\n')
    assert v == {"model": "oracle-o1", "seed": 3, "fixtures": [["V4", 2], ["V4", 4]]}
    assert lines == {"model": 2, "seed": 3, "fixtures": 4}


@pytest.mark.parametrize("text,line", [
    ("seed = 1\nnot a pair\n", 2),
    ("seed = 1\nseed = 2\n", 2),
    ("a = 1\nb = {oops\n", 2),
    ("a = 1\n\nb = [1, 2\n", 3),
])
def test_parse_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "x.cfg")
    assert exc.value.line == line and f"x.cfg:{line}:" in str(exc.value)


def test_model_file_errors_carry_line(tmp_path):
    from wgmlab.config import load_model

    p = tmp_path / "bad.cfg"
    p.write_text(ORACLE_FILE.replace("[1, 2, 3]", "[1, 0, 3]"))
    with pytest.raises(ConfigError) as exc:
        load_model(p)
    assert exc.value.line == 4 and "return_time[1]" in str(exc.value)
    p.write_text(ORACLE_FILE.replace("[0, 1, 2]", "[0, 1, 7]"))
    with pytest.raises(ConfigError) as exc:
        load_model(p)
    assert exc.value.line == 3


def test_model_file_round_trip(tmp_path):
    from wgmlab.config import dump_model, load_model

    p = tmp_path / "tri.cfg"
    p.write_text(ORACLE_FILE)
    m = load_model(p)
    q = tmp_path / "again.cfg"
    q.write_text(dump_model(m))
    m2 = load_model(q)
    assert m2.images == m.images and (m2.return_time == m.return_time).all()


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


# -- exit codes ---------------------------------------------------------------------------


def test_missing_model_file_exit_2(tmp_path, capsys):
    code = _run(tmp_path, "check-wgm", "--model", str(tmp_path / "nope.cfg"), "--seed", "0")
    assert code == 2
    assert str(tmp_path / "nope.cfg") in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path, capsys):
    assert _run(tmp_path, "check-wgm", "--model", "oracle-o1") == 2
    assert "seed" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main(["no-such-command"]) == 2
    assert _run(tmp_path, "tails", "--model", "oracle-o1", "--seed", "0", "--samples", "0") == 2
    assert _run(tmp_path, "tails", "--model", "nope", "--seed", "0") == 2
    assert _run(tmp_path, "coupling-sim", "--model", "oracle-o1", "--seed", "0",
                "--delta-bar", "3") == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model = oracle-o1\nseed = 1\nensembel = 5\n")
    assert _run(tmp_path, "tails", "--config", str(cfg)) == 2


def test_hypothesis_failure_exit_3(tmp_path):
    p = tmp_path / "periodic.cfg"
    p.write_text(PERIODIC_FILE)
    assert _run(tmp_path, "check-wgm", "--model", str(p), "--seed", "0") == 3


def test_interval_model_refuses_coupling(tmp_path):
    assert _run(tmp_path, "coupling-sim", "--model", "pm-const-0.5", "--seed", "0") == 2


# -- outputs -----------------------------------------------------------------------------


def _header(path):
    return Path(path).read_text().splitlines()[0]


def test_build_tower_from_file(tmp_path):
    p = tmp_path / "tri.cfg"
    p.write_text(ORACLE_FILE)
    assert _run(tmp_path, "build-tower", "--model", str(p), "--seed", "0") == 0
    out = tmp_path / "out"
    assert {"tower.csv", "density.csv", "tower.json"} <= {f.name for f in out.iterdir()}
    for f in out.iterdir():
        assert _header(f).startswith("# wgmlab ") and "command=build-tower" in _header(f)
        assert "config_sha256=" in _header(f)


def test_config_digest_ignores_out():
    a = {"model": "oracle-o1", "seed": 1, "out": "a"}
    assert config_digest(a) == config_digest({**a, "out": "b"})
    assert config_digest(a) != config_digest({**a, "seed": 2})


@pytest.mark.parametrize("cmd,extra", [
    ("tails", ["--samples", "2000"]),
    ("correlations", ["--ensemble", "2000", "--n-max", "10"]),
    ("fit-rate", ["--ensemble", "2000"]),
    ("clt", ["--ensemble", "200"]),
    ("ld", ["--ensemble", "500"]),
    ("check-wgm", []),
])
def test_oracle_subcommands_succeed(tmp_path, cmd, extra):
    assert _run(tmp_path, cmd, "--model", "oracle-o1", "--seed", "4", *extra) == 0
    files = list((tmp_path / "out").iterdir())
    assert files and all(_header(f).startswith("# wgmlab") for f in files)


def test_coupling_sim_bound_holds(tmp_path):
    code = _run(tmp_path, "coupling-sim", "--model", "oracle-o1", "--seed", "0",
                "--samples", "20000")
    assert code == 0
    d = json.loads("\n".join((tmp_path / "out" / "coupling.json").read_text().splitlines()[1:]))
    assert d["bound_holds"] and d["monotone"] and d["n0"] == 1


def test_verify_theorem_a_oracle_all_pass(tmp_path, capsys):
    assert _run(tmp_path, "verify-theorem-a", "--model", "oracle-o1", "--seed", "0") == 0
    text = (tmp_path / "out" / "verdicts.csv").read_text().splitlines()
    rows = [r.split(",") for r in text[2:]]
    assert rows and all(r[-1] == "PASS" for r in rows)
    assert "PASS" in capsys.readouterr().out


def test_verify_theorem_a_deterministic(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model = oracle-o1\nseed = 7\nensemble = 5000\n")
    for d in ("a", "b"):
        assert main(["verify-theorem-a", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert names == sorted(f.name for f in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "wgmlab.cli", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.startswith("wgmlab ")
