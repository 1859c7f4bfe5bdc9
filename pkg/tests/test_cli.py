import json
from dataclasses import replace
from pathlib import Path

from click.testing import CliRunner

from duality_lab import cli
from duality_lab.experiments import REGISTRY


def write_cfg(tmp_path: Path, body: str, name="cfg.toml") -> Path:
    p = tmp_path / name
    p.write_text(body)
    return p


VOTER = """
experiment = "check_voter_duality"
seed = 7
replicates = 400
output_dir = "out"

[params]
L = 8
A = [0, 3]
t = 1.0
"""


def invoke(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args])


def test_missing_param_names_key(tmp_path):
    cfg = write_cfg(tmp_path, 'experiment = "clustering_curve"\nreplicates = 10\n')
    r = invoke("run", cfg)
    assert r.exit_code == 1
    assert "t_grid" in r.output


def test_unknown_experiment_and_keys(tmp_path):
    assert invoke("run", write_cfg(tmp_path, 'experiment = "nope"\n')).exit_code == 1
    r = invoke("run", write_cfg(tmp_path, 'experiment = "check_voter_duality"\ncolour = 1\n'))
    assert r.exit_code == 1 and "colour" in r.output
    r = invoke("run", write_cfg(tmp_path, 'experiment = "check_voter_duality"\n[params]\nL = "x"\n'))
    assert r.exit_code == 1 and "L" in r.output
    assert invoke("run", tmp_path / "absent.toml").exit_code == 1


def test_same_config_twice_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, VOTER)
    assert invoke("run", cfg).exit_code == 0
    first = (tmp_path / "out" / "results.csv").read_bytes()
    assert invoke("run", cfg).exit_code == 0
    assert (tmp_path / "out" / "results.csv").read_bytes() == first
    head = first.decode().splitlines()[0]
    assert head == "metric_name,value,stderr,ci_low,ci_high,n_samples"


def test_worker_count_does_not_change_results(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, VOTER)
    monkeypatch.setenv("DUALITY_LAB_THREADS", "1")
    invoke("run", cfg)
    one = (tmp_path / "out" / "results.csv").read_bytes()
    monkeypatch.setenv("DUALITY_LAB_THREADS", "4")
    invoke("run", cfg)
    assert (tmp_path / "out" / "results.csv").read_bytes() == one


def test_results_json_metadata(tmp_path):
    cfg = write_cfg(tmp_path, VOTER)
    invoke("run", cfg)
    doc = json.loads((tmp_path / "out" / "results.json").read_text())
    assert doc["metadata"]["operation"] == "voter.check_voter_duality"
    assert doc["metadata"]["config_hash"] == cli.config_hash(cli.load_config(cfg))
    assert all(doc["invariants"].values())


def test_seed_override_changes_hash(tmp_path):
    cfg = write_cfg(tmp_path, VOTER)
    a = cli.config_hash(cli.load_config(cfg))
    assert a == cli.config_hash(cli.load_config(cfg))
    assert cli.config_hash(cli.load_config(cfg, seed_override=8)) != a
    moved = write_cfg(tmp_path, VOTER.replace('"out"', '"elsewhere"'), "moved.toml")
    assert cli.config_hash(cli.load_config(moved)) == a
    changed = write_cfg(tmp_path, VOTER.replace("t = 1.0", "t = 2.0"), "changed.toml")
    assert cli.config_hash(cli.load_config(changed)) != a


def test_list_names_and_operations():
    r = invoke("list")
    assert r.exit_code == 0 and "check_voter_duality" in r.output
    doc = json.loads(invoke("list", "--json").output)
    assert set(doc) == set(REGISTRY)
    for name, entry in doc.items():
        module, _, op = entry["operation"].partition(".")
        assert module and op


def test_schema_round_trips():
    for name, exp in REGISTRY.items():
        params = {k: d["default"] for k, d in exp.schema().items() if "default" in d}
        for k, d in exp.schema().items():
            if "default" not in d:
                params[k] = [0.5, 1.0] if d["type"] == "floats" else None
        cfg = cli.validate_config({"experiment": name, "params": params})
        assert cfg["params"] == exp.validate(params)


def test_invariant_failure_exit_code(tmp_path, monkeypatch):
    from duality_lab import experiments

    bad = lambda *a: experiments.Outcome([experiments.Metric.exact("x", 1.0)], invariants={"broken": False})
    monkeypatch.setitem(REGISTRY, "check_voter_duality", replace(REGISTRY["check_voter_duality"], runner=bad))
    r = invoke("run", write_cfg(tmp_path, VOTER))
    assert r.exit_code == 2 and "broken" in r.output


def test_plot_empty_result_fails(tmp_path):
    (tmp_path / "results.json").write_text("")
    assert invoke("plot", tmp_path, "--kind", "curve").exit_code == 1
    (tmp_path / "results.json").write_text(json.dumps({"rows": [], "series": {}}))
    assert invoke("plot", tmp_path, "--kind", "histogram").exit_code == 1


def test_plot_incompatible_kind(tmp_path):
    cfg = write_cfg(tmp_path, VOTER)
    invoke("run", cfg)
    assert invoke("plot", tmp_path / "out", "--kind", "fan").exit_code == 1


def test_fan_plot_one_polyline_per_particle(tmp_path):
    cfg = write_cfg(tmp_path, 'experiment = "record_trajectories"\nseed = 3\noutput_dir = "fan"\n')
    r = invoke("run", cfg, "--plot", "fan")
    assert r.exit_code == 0, r.output
    svg = (tmp_path / "fan" / "plots" / "fan.svg").read_text()
    assert svg.count("<polyline") == 20
    rows = (tmp_path / "fan" / "particles.csv").read_text().splitlines()
    assert rows[0] == "time,particle_id,position,alive"


def test_curve_plot_has_ci_band(tmp_path):
    cfg = write_cfg(tmp_path, """
experiment = "clustering_curve"
seed = 1
replicates = 200
output_dir = "clu"

[params]
t_grid = [0.0, 1.0, 4.0]
""")
    assert invoke("run", cfg).exit_code == 0
    out = tmp_path / "curve.svg"
    assert invoke("plot", tmp_path / "clu", "--kind", "curve", "-o", out).exit_code == 0
    assert 'class="ci-band"' in out.read_text()


def test_histogram_plot(tmp_path):
    cfg = write_cfg(tmp_path, 'experiment = "simulate_interface_sde"\nreplicates = 200\noutput_dir = "sde"\n'
                              '[params]\ndt = 0.05\n')
    assert invoke("run", cfg, "--plot", "histogram").exit_code == 0
    assert 'class="bar"' in (tmp_path / "sde" / "plots" / "histogram.svg").read_text()


def test_acceptance_suite_config(tmp_path):
    cfg = write_cfg(tmp_path, """
experiment = "acceptance_suite"
output_dir = "acc"

[params]
criteria = [7, 11]
""")
    r = invoke("run", cfg)
    assert r.exit_code == 0, r.output
    table = (tmp_path / "acc" / "acceptance.csv").read_text().splitlines()
    assert table[0].startswith("criterion,title,status")
    assert len(table) == 3 and all(",PASS," in line for line in table[1:])


def test_accept_command_subset():
    r = invoke("accept", "-c", 3, "--scale", "0.2")
    assert "[PASS]  3." in r.output
    assert r.exit_code == 0
