import importlib.metadata
import json

import pytest

from actplan import __version__
from actplan.bilevel import expand_plan, plan_model
from actplan.cli import (EXIT_HOST_OOM, EXIT_INFEASIBLE, EXIT_MISSING, EXIT_PARSE,
                         EXIT_USAGE, main)
from actplan.config import HardwareConfig, config_to_dict, model_preset, toy_model
from actplan.dsa import verify_plan
from actplan.swap import skeletal_sizes
from actplan.trace import Phase, TensorClass, extract_lifespans, parse_trace


def write_config(path, model, hw=None):
    path.write_text(json.dumps(config_to_dict(model, hw or HardwareConfig())))
    return str(path)


@pytest.fixture
def toy_cfg(tmp_path):
    return write_config(tmp_path / "toy.json", toy_model())


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


def test_synth_toy(tmp_path, toy_cfg):
    out = tmp_path / "t.trace"
    assert run("synth", "--config", toy_cfg, "--out", out) == 0
    assert len(parse_trace(out.read_text()).segments) == 8


def test_synth_7b_skeletal_bytes(tmp_path):
    cfg = model_preset("7b", seq_len=16384)
    out = tmp_path / "t.trace"
    assert run("synth", "--config", write_config(tmp_path / "c.json", cfg), "--out", out) == 0
    trace = parse_trace(out.read_text())
    spans, _ = extract_lifespans(trace)
    layer_skel = sum(s.size for s in spans if s.cls is TensorClass.SKELETAL
                     and trace.segments[s.alloc_segment].phase is Phase.LAYER_FWD)
    assert layer_skel == skeletal_sizes(cfg).total * cfg.n_layers


def test_synth_random_is_seeded(tmp_path, capsys):
    assert run("synth", "--seed", 4, "--layers", 3) == 0
    a = capsys.readouterr().out
    assert run("synth", "--seed", 4, "--layers", 3) == 0
    assert capsys.readouterr().out == a and "# segment layer_fwd 2" in a


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"model": {"n_layers": -1}}))
    assert run("synth", "--config", p) == EXIT_USAGE
    assert "n_layers" in capsys.readouterr().err


def test_plan_nested_pair(tmp_path):
    t = tmp_path / "p.trace"
    t.write_text("malloc 1 6\nmalloc 2 4\nfree 2 4\nfree 1 6\n")
    out = tmp_path / "plan.json"
    assert run("plan", "--trace", t, "--alignment", 1, "--out", out) == 0
    assert read_json(out)["total_peak"] == 10


def test_plan_toy_verifies(tmp_path, toy_cfg):
    t, out = tmp_path / "t.trace", tmp_path / "plan.json"
    run("synth", "--config", toy_cfg, "--out", t)
    assert run("plan", "--trace", t, "--out", out) == 0
    trace = parse_trace(t.read_text())
    data = read_json(out)
    gp = plan_model(trace)
    assert data == json.loads(gp.dumps())
    inst, flat = expand_plan(trace, gp)
    addrs = {row["tensor"]: row["offset"] for row in data["absolute"]}
    assert addrs == dict(flat.addresses)
    assert verify_plan(flat, inst) is None


def test_plan_is_byte_identical(tmp_path, toy_cfg):
    t = tmp_path / "t.trace"
    run("synth", "--config", toy_cfg, "--out", t)
    run("plan", "--trace", t, "--out", tmp_path / "a.json")
    run("plan", "--trace", t, "--out", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_plan_cap_infeasible(tmp_path):
    t = tmp_path / "p.trace"
    t.write_text("malloc 1 6\nmalloc 2 4\nfree 2 4\nfree 1 6\n")
    assert run("plan", "--trace", t, "--alignment", 1, "--cap", 9) == EXIT_INFEASIBLE


def test_plan_parse_error(tmp_path, capsys):
    t = tmp_path / "p.trace"
    t.write_text("malloc 1 6\nfree 1 6\nfree 1 6\n")
    assert run("plan", "--trace", t) == EXIT_PARSE
    assert "line 3" in capsys.readouterr().err


def test_alpha_slack(tmp_path, toy_cfg):
    out = tmp_path / "a.json"
    assert run("alpha", "--config", toy_cfg, "--t-layer", 100, "--out", out) == 0
    assert read_json(out)["alpha"] == 1.0


def test_alpha_worked_example(tmp_path):
    cfg = toy_model(n_layers=8)
    u = cfg.unit_bytes
    path = write_config(tmp_path / "c.json", cfg, HardwareConfig(pcie_bandwidth=u, cpu_mem=1e18))
    out = tmp_path / "a.json"
    assert run("alpha", "--config", path, "--t-layer", 8, "--out", out) == 0
    assert abs(read_json(out)["alpha"] - 5 / 13) < 1e-12


def test_alpha_out_of_host_memory(tmp_path, capsys):
    cfg = model_preset("7b", seq_len=1 << 20)
    path = write_config(tmp_path / "c.json", cfg, HardwareConfig(cpu_mem=1e9))
    assert run("alpha", "--config", path) == EXIT_HOST_OOM
    assert "host memory" in capsys.readouterr().err


def test_alpha_sweep_csv(tmp_path):
    path = write_config(tmp_path / "c.json", model_preset("7b", seq_len=196608))
    sweep = tmp_path / "s.csv"
    assert run("alpha", "--config", path, "--sweep", sweep, "--out", tmp_path / "a.json") == 0
    rows = sweep.read_text().splitlines()
    assert rows[0].startswith("alpha,mfu") and len(rows) >= 22


def test_simulate_outputs(tmp_path, toy_cfg):
    out, tl = tmp_path / "s.json", tmp_path / "tl.csv"
    assert run("simulate", "--config", toy_cfg, "--alpha", 0.5, "--out", out,
               "--timeline", tl) == 0
    rep = read_json(out)
    assert rep["alpha"] == 0.5 and rep["iteration_time"] > 0
    assert tl.read_text().startswith("stream,kind,layer,start,end\n")


def test_simulate_from_swap_file(tmp_path):
    path = write_config(tmp_path / "c.json", model_preset("7b", seq_len=65536))
    a, s1, s2 = tmp_path / "a.json", tmp_path / "s1.json", tmp_path / "s2.json"
    run("alpha", "--config", path, "--out", a)
    assert run("simulate", "--config", path, "--swap", a, "--out", s1) == 0
    assert run("simulate", "--config", path, "--out", s2) == 0
    assert s1.read_bytes() == s2.read_bytes()


def test_frag(tmp_path, toy_cfg):
    t, out, tl = tmp_path / "t.trace", tmp_path / "f.json", tmp_path / "f.csv"
    run("synth", "--config", toy_cfg, "--out", t)
    assert run("frag", "--trace", t, "--out", out, "--timeline", tl) == 0
    d = read_json(out)
    assert d["planned"]["reorganizations"] == 0
    assert d["compare"]["peak_reserved"]["delta"] == \
        d["planned"]["peak_reserved"] - d["caching"]["peak_reserved"]
    assert tl.read_text().splitlines()[0].startswith("event,caching_reserved")


def test_report_matches_standalone_simulate(tmp_path, toy_cfg):
    r, s = tmp_path / "r.json", tmp_path / "s.json"
    assert run("report", "--config", toy_cfg, "--deterministic-timestamps", "--out", r) == 0
    assert run("simulate", "--config", toy_cfg, "--out", s) == 0
    m = read_json(r)
    assert m["sim"] == read_json(s)
    assert m["version"] == __version__ == importlib.metadata.version("actplan")
    assert m["created"] == "1970-01-01T00:00:00Z"
    assert len(m["inputs"]["config"]) == 64


def test_report_is_byte_identical(tmp_path, toy_cfg):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run("report", "--config", toy_cfg, "--deterministic-timestamps", "--out", a)
    run("report", "--config", toy_cfg, "--deterministic-timestamps", "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_missing_input(tmp_path, capsys):
    assert run("report", "--config", tmp_path / "nope.json") == EXIT_MISSING
    assert run("plan", "--trace", tmp_path / "nope.trace") == EXIT_MISSING
    assert "not found" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as ei:
        main(["plan"])
    assert ei.value.code == 2
