import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpqkd.cli import main, run
from mpqkd.decoy import CountTable
from mpqkd.io import (
    ConfigError,
    config_from_dict,
    format_count_table,
    format_report,
    load_config,
    load_count_table,
    parse_count_table,
)
from mpqkd.sifting import CLASSES

from conftest import DISTANCES, config_path, counts_path


def _cfg_dict(km=101):
    return json.loads(config_path(km).read_text())


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


@pytest.mark.parametrize("km", DISTANCES)
def test_bundled_configs_load(km):
    cfg = load_config(config_path(km))
    assert cfg.problems() == []
    assert cfg.protocol.l_min == 63


def test_km101_values(km101):
    p = km101.protocol
    assert (p.mu, p.nu, p.l_max, p.epsilon, p.f) == (0.309, 0.032, 500, 1e-10, 1.1)
    assert (p.p_mu, p.p_nu) == (0.22, 0.18)


def test_intensity_order_error(tmp_path):
    d = _cfg_dict()
    d["protocol"]["nu"] = 0.5
    with pytest.raises(ConfigError, match="0 < nu < mu < 1"):
        load_config(_write(tmp_path, d))


def test_odd_d_error(tmp_path):
    d = _cfg_dict()
    d["protocol"]["D"] = 15
    with pytest.raises(ConfigError, match="even"):
        load_config(_write(tmp_path, d))


def test_errors_are_aggregated():
    d = _cfg_dict()
    d["bogus"] = 1
    d["channel"]["colour"] = "red"
    d["protocol"]["D"] = 3
    d["channel"]["eta_d"] = 2.0
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    msg = str(exc.value)
    for word in ("bogus", "colour", "even", "eta_d"):
        assert word in msg


def test_search_wider_than_alias_period_rejected():
    d = _cfg_dict()
    d["analysis"]["search"] = [0.0, 2 * math.pi / 1.6e-9]
    with pytest.raises(ConfigError, match="alias"):
        config_from_dict(d)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="parse"):
        load_config(bad)


def test_fixture_table_loads(table101):
    assert table101.total("Z_AmuBmu") == 207389568
    assert table101.n_rounds == 5.07e11


def test_round_trip(table101):
    text = format_count_table(table101)
    back = parse_count_table(text)
    assert back.rows == table101.rows and back.n_rounds == table101.n_rounds
    assert format_count_table(back) == text


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(0, 1e15), st.integers(0, 10**12), st.integers(0, 10**12)),
                min_size=len(CLASSES), max_size=len(CLASSES)),
       st.floats(1, 1e15))
def test_round_trip_random(rows, n):
    data = {}
    for c, (sent, a, b) in zip(CLASSES, rows):
        total, err = max(a, b), min(a, b)
        data[c] = (max(sent, float(total)), total, err)
    t = CountTable(data, n)
    back = parse_count_table(format_count_table(t))
    assert back.rows == t.rows and back.n_rounds == t.n_rounds


@pytest.mark.parametrize("text, word", [
    ("", "empty"),
    ("# n_rounds=10\n", "empty"),
    ("cls,sent,total,error\n", "header"),
    ("class,sent,total,error\nZ_A0B0,1,2\n", "4 fields"),
    ("class,sent,total,error\nZ_A0B0,1,x,0\n", "non-numeric"),
    ("class,sent,total,error\nZ_A0B0,10,1,0\nZ_A0B0,10,1,0\n", "duplicate"),
])
def test_malformed_tables(text, word):
    with pytest.raises(ConfigError, match=word):
        parse_count_table(text, n_rounds=10)


def test_table_semantic_errors(table101):
    text = format_count_table(table101)
    with pytest.raises(ConfigError, match="error count exceeds total"):
        parse_count_table(text.replace("Z_A0B0,32853600000.0,395,395", "Z_A0B0,32853600000.0,395,396"))
    with pytest.raises(ConfigError, match="missing"):
        parse_count_table("\n".join(l for l in text.splitlines() if not l.startswith("X_A0B2nu")))
    with pytest.raises(ConfigError, match="n_rounds"):
        parse_count_table("\n".join(l for l in text.splitlines() if not l.startswith("#")))


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ConfigError):
        load_count_table(p)


def test_report_format_stable():
    text = format_report({"b": float("nan"), "a": np.float64(1.5), "c": np.arange(2)})
    assert text == '{\n  "a": 1.5,\n  "b": null,\n  "c": [\n    0,\n    1\n  ]\n}\n'


def _run_cli(tmp_path, argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_cli_direct_keyrate(tmp_path, capsys):
    code, out, _ = _run_cli(tmp_path, ["direct-keyrate", "--config", str(config_path(101))], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["result"]["key_rate"]["R"] == pytest.approx(7.75e-5, rel=0.02)
    assert rep["seed"] == 1 and rep["mode"] == "direct-keyrate"
    assert rep["config"]["protocol"]["mu"] == 0.309


def test_cli_pairing_rate(tmp_path, capsys):
    out_path = tmp_path / "rep.json"
    code, _, _ = _run_cli(tmp_path, ["pairing-rate", "--config", str(config_path(101)),
                                     "--out", str(out_path)], capsys)
    assert code == 0
    pts = json.loads(out_path.read_text())["result"]["points"]
    got = [p["r_p"] for p in pts]
    assert got == pytest.approx([2.46e-3, 4.29e-4, 4.42e-5, 4.21e-6], rel=0.01)


def test_cli_analyze(tmp_path, capsys):
    code, out, _ = _run_cli(tmp_path, ["analyze", "--config", str(config_path(101)),
                                       "--counts", str(counts_path(101))], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["counts_file"] == "km101.csv"
    assert rep["result"]["key_rate"]["m_mumu"] == 207389568


def test_cli_sweep_writes_curve(tmp_path, capsys):
    d = _cfg_dict()
    d["sweep"]["distances_km"] = [0, 100, 200]
    d["sweep"]["n_rounds"] = 1e12
    cfg = _write(tmp_path, d)
    out = tmp_path / "sweep.json"
    code, _, _ = _run_cli(tmp_path, ["sweep", "--config", str(cfg), "--out", str(out)], capsys)
    assert code == 0
    lines = (tmp_path / "sweep.curve.csv").read_text().splitlines()
    assert lines[0] == "distance_km,eta,R,X_error,n_pairs"
    rows = [[float(x) for x in l.split(",")] for l in lines[1:]]
    assert len(rows) == 3
    eta = [r[1] for r in rows]
    rates = [r[2] for r in rows]
    assert eta[0] > eta[1] > eta[2]
    # at 0 km almost every round clicks and few gaps reach l_min
    assert rates[1] > rates[2] > 0 and rates[1] > rates[0]


def test_cli_simulate_deterministic(tmp_path, capsys):
    d = _cfg_dict()
    d["n_cycles"] = 20
    d["analysis"]["compensation"] = "truth"
    d["outputs"] = {"counts": str(tmp_path / "counts.csv")}
    cfg = _write(tmp_path, d)
    outs = []
    for k in range(2):
        p = tmp_path / f"r{k}.json"
        assert main(["run", "--config", str(cfg), "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads(outs[0])
    assert rep["config"]["n_cycles"] == 20
    table = load_count_table(tmp_path / "counts.csv")
    assert table.n_rounds == 20 * 44483
    # seed override changes the outcome
    p = tmp_path / "r_seed.json"
    assert main(["run", "--config", str(cfg), "--seed", "2", "--out", str(p)]) == 0
    assert json.loads(p.read_text())["seed"] == 2
    assert p.read_bytes() != outs[0]


def test_cli_exit_codes(tmp_path, capsys):
    d = _cfg_dict()
    d["protocol"]["nu"] = 0.9
    code, _, err = _run_cli(tmp_path, ["run", "--config", str(_write(tmp_path, d, "bad.json"))], capsys)
    assert code == 1 and "nu < mu" in err
    code, _, err = _run_cli(tmp_path, ["run", "--config", str(config_path(101)), "--threads", "0"], capsys)
    assert code == 1
    code, _, err = _run_cli(tmp_path, ["analyze", "--config", str(config_path(101))], capsys)
    assert code == 1 and "--counts" in err
    # runtime failure: no reference clicks to estimate the frequency from
    d = _cfg_dict()
    d["n_cycles"] = 1
    d["protocol"]["frame"] = [0, 0, 1000]
    code, _, err = _run_cli(tmp_path, ["phase-estimate", "--config",
                                       str(_write(tmp_path, d, "noref.json"))], capsys)
    assert code == 2 and "runtime error" in err


def test_run_function_returns_parts(km101):
    report, curve, counts = run(km101.__class__(**{**km101.__dict__, "mode": "direct-keyrate"}))
    assert curve is None and counts is None
    assert report["result"]["key_rate"]["K"] > 0
