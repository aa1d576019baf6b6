import json

import pytest
import tomli

from randgreen.acceptance import DETERMINISM_CONFIG
from randgreen.cli import main, run
from randgreen.config import ConfigError, parse_complex, parse_config
from randgreen.ensemble import CoefficientBall, FiniteMixture

GOOD = """
seed = 3

[ensemble]
type = "mixture"
maps = ["z^2", "z^2-0.1"]

[clt-markov]
observable = "abs_x2"
n = 20
chains = 100
J = 3
burn_in = 10
sigma2 = 0.01
"""


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("text,value", [("2", 2), ("-i", -1j), ("0.5i", 0.5j),
                                        ("1-2.5i", 1 - 2.5j), (3.0, 3)])
def test_parse_complex(text, value):
    assert parse_complex(text) == value


def test_config_round_trip():
    cfg = parse_config(GOOD)
    again = parse_config(cfg.canonical())
    assert again.data == cfg.data and again.hash == cfg.hash
    assert tomli.loads(cfg.canonical())["seed"] == 3
    assert isinstance(cfg.ensemble(), FiniteMixture)


def test_config_seed_override_changes_hash():
    cfg = parse_config(GOOD)
    assert cfg.with_seed(4).hash != cfg.hash
    assert cfg.with_seed(None) is cfg


def test_ball_ensemble():
    cfg = parse_config('seed = 1\n[ensemble]\ntype = "ball"\nbase = "z^2"\nradius = 0.05\n')
    assert isinstance(cfg.ensemble(), CoefficientBall)


@pytest.mark.parametrize("text,line", [
    ('seed = 1\n[ensemble]\ntype = "mixture"\nmaps = ["z^2", "z^2-1"]\nweights = [0.2, 0.7]\n',
     5),
    ('seed = 1\n[ensemble]\ntype = "blob"\n', 3),
    ('seed = 1\n[ensemble]\ntype = "dirac"\nmap = "z^2"\n[tail-check]\nepsilon = -1\n', 6),
    ('seed = 1\n[ensemble]\ntype = "dirac"\nmap = "z^2"\n[decay]\nobservable = "nope"\n', 6),
])
def test_config_errors_carry_lines(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError):
        parse_config('seed = 1\n[ensemble]\ntype = "dirac"\nmap = "z^2"\n[bogus]\nx = 1\n')


def test_toml_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("seed = = 1")


def test_cli_happy_path(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["clt-markov", "--config", str(write(tmp_path, GOOD)), "--out", str(out)])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"manifest.json", "sums.csv", "histogram.csv", "qq.csv"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["digest"] == capsys.readouterr().out.strip()
    assert manifest["command"] == "clt-markov"
    assert {f["path"] for f in manifest["outputs"]} == names - {"manifest.json"}


def test_cli_config_error_writes_nothing(tmp_path, capsys):
    bad = GOOD.replace('type = "mixture"', 'type = "mixture"\nweights = [0.5]')
    out = tmp_path / "out"
    code = main(["clt-markov", "--config", str(write(tmp_path, bad)), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and err["exit_code"] == 2 and "line" in err


def test_cli_missing_config(tmp_path):
    assert main(["tail-check", "--out", str(tmp_path / "o")]) == 2
    assert main(["tail-check", "--config", str(tmp_path / "missing.toml")]) == 2


def test_cli_computational_error(tmp_path, capsys):
    text = GOOD.replace("abs_x2", "const(0)").replace("sigma2 = 0.01\n", "")
    code = main(["clt-markov", "--config", str(write(tmp_path, text)),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "VarianceZero" and err["report"]["degenerate"]


def test_cli_seed_override(tmp_path, capsys):
    cfg = str(write(tmp_path, GOOD))
    main(["clt-markov", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["clt-markov", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4"])
    a, b = capsys.readouterr().out.split()
    assert a != b


def test_determinism_across_workers(tmp_path):
    cfg = parse_config(DETERMINISM_CONFIG)
    for cmd in ("tail-check", "markov-sample", "correlation"):
        one = run(cmd, cfg, tmp_path / f"{cmd}-1", workers=1)
        two = run(cmd, cfg, tmp_path / f"{cmd}-2", workers=2)
        assert one["digest"] == two["digest"], cmd
        assert one["config_hash"] == two["config_hash"]


def test_rerun_overwrites_in_place(tmp_path):
    cfg = parse_config(DETERMINISM_CONFIG)
    a = run("tail-check", cfg, tmp_path / "o")
    b = run("tail-check", cfg, tmp_path / "o")
    assert a["digest"] == b["digest"]
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".stage-")]
