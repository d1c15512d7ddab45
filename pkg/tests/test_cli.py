import csv
import json

import numpy as np
import pytest

from ridesim import cli
from ridesim.config import ConfigError, build, config_hash, resolve, snap_orders
from ridesim.engine import read_metrics, run
from ridesim.market import load_order_pool
from ridesim.synthetic import grid_city, poisson_pool
from ridesim.theory import activity_trace, write_trace

TINY = """
[simulation]
end_time = 1200.0
seed = 3

[network]
synthetic = { rows = 8, cols = 8, seed = 1 }

[demand]
rate = 0.05

[fleet]
size = 10

[matching]
interval = 6
radius = 1500.0

[rl]
train_seeds = [0]
test_seeds = [50, 51]

[sweep]
seeds = [0]
calibration_seeds = [9, 10]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def main(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_four_files(tiny, tmp_path):
    out = tmp_path / "run"
    assert main("simulate", "--config", tiny, "--out", out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["events.csv", "manifest.json", "metrics.csv", "timeseries.csv"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 3 and m["command"] == "simulate" and len(m["outputs"]) == 3
    assert set(m) >= {"config_hash", "artifact_version", "inputs", "duration_s"}
    assert read_metrics(out / "metrics.csv")["produced"] > 0


def test_simulate_is_byte_identical(tiny, tmp_path):
    for name in ("a", "b"):
        assert main("simulate", "--config", tiny, "--out", tmp_path / name) == 0
    for f in ("metrics.csv", "timeseries.csv", "events.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
    assert ha == hb


def test_seed_flag_changes_run_and_hash(tiny, tmp_path):
    main("simulate", "--config", tiny, "--out", tmp_path / "a")
    main("simulate", "--config", tiny, "--out", tmp_path / "b", "--seed", 4)
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert mb["seed"] == 4 and ma["config_hash"] != mb["config_hash"]


def test_missing_network_file(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[network]\nnodes = "nowhere_nodes.csv"\nedges = "nowhere_edges.csv"\n[demand]\nrate = 0.1\n')
    assert main("simulate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "nowhere_nodes.csv" in capsys.readouterr().err


@pytest.mark.parametrize("body,needle", [
    ("[fleet]\nsiz = 3\n", "siz"),
    ("[flet]\nsize = 3\n", "flet"),
    ("[network]\nsynthetic = { rows = 4, cols = 4, colour = 1 }\n", "colour"),
    ("[behavior]\nmax_wait = -1.0\n[network]\nsynthetic = { rows = 4, cols = 4 }\n[demand]\nrate = 0.1\n",
     "max_wait"),
    ("[network\n", "tiny"),
])
def test_config_errors_exit_1(tmp_path, capsys, body, needle):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(body)
    assert main("simulate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert needle in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main("simulate", "--config", tmp_path / "none.toml", "--out", tmp_path / "o") == 1


def test_runtime_error_exit_2_names_phase(tiny, tmp_path, capsys, monkeypatch):
    from ridesim.engine import Simulation

    def broken(self):
        raise ZeroDivisionError("injected")

    monkeypatch.setattr(Simulation, "_phase_matching", broken)
    assert main("simulate", "--config", tiny, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "matching" in err and "tick" in err


def test_lock_file_blocks_concurrent_use(tiny, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123")
    assert main("simulate", "--config", tiny, "--out", out) == 2
    assert not (out / "metrics.csv").exists()
    (out / cli.LOCK_NAME).unlink()
    assert main("simulate", "--config", tiny, "--out", out) == 0
    assert not (out / cli.LOCK_NAME).exists()


def test_sweep_two_by_two(tiny, tmp_path):
    out = tmp_path / "s"
    assert main("sweep", "--config", tiny, "--out", out, "--grid-q", "0.01,0.02", "--grid-n", "5,10") == 0
    got = rows(out / "sweep.csv")
    assert {(r["Q"], r["N"]) for r in got} == {("0.01", "5"), ("0.01", "10"), ("0.02", "5"), ("0.02", "10")}
    best = rows(out / "best_fit.csv")
    assert len(best) == 4 * 4
    assert json.loads((out / "manifest.json").read_text())["scenarios"] == 4


def test_sweep_ten_by_five(tmp_path):
    cfg = tmp_path / "g.toml"
    cfg.write_text(TINY.replace("end_time = 1200.0", "end_time = 300.0").replace("rate = 0.05", "rate = 0.2"))
    qs = ",".join(str(0.01 * (k + 1)) for k in range(10))
    out = tmp_path / "s"
    assert main("sweep", "--config", cfg, "--out", out, "--grid-q", qs, "--grid-n", "4,6,8,10,12") == 0
    assert json.loads((out / "manifest.json").read_text())["scenarios"] == 50
    assert len({(r["Q"], r["N"]) for r in rows(out / "sweep.csv")}) == 50


@pytest.mark.parametrize("q,n", [("0", "5"), ("-0.1", "5"), ("0.01", "0"), ("0.01", "2.5"), ("abc", "5"),
                                 ("9.0", "5")])
def test_sweep_validation(tiny, tmp_path, q, n):
    assert main("sweep", "--config", tiny, "--out", tmp_path / "s", "--grid-q", q, "--grid-n", n) == 1


def test_train_zero_episodes_is_baseline_only(tiny, tmp_path):
    out = tmp_path / "t"
    assert main("train", "--config", tiny, "--out", out, "--episodes", 0) == 0
    assert [r["method"] for r in rows(out / "comparison.csv")] == ["Myopic", "PDB"]
    assert rows(out / "learning_curve.csv") == []


def test_train_matching_table(tiny, tmp_path):
    out = tmp_path / "t"
    assert main("train", "--config", tiny, "--out", out, "--episodes", 3, "--task", "matching") == 0
    table = rows(out / "comparison.csv")
    assert [r["method"] for r in table] == ["Myopic", "PDB", "RL"]
    assert list(table[0]) == cli.COMPARISON_HEADER
    assert len(rows(out / "learning_curve.csv")) == 3
    # the trained table drives a later simulate run
    cfg = tmp_path / "use.toml"
    cfg.write_text(TINY.replace("radius = 1500.0", f"radius = 1500.0\npolicy = \"value_table\"\n"
                                                   f"table = \"{out / 'table.csv'}\""))
    assert main("simulate", "--config", cfg, "--out", tmp_path / "u") == 0


def test_train_repositioning(tiny, tmp_path):
    out = tmp_path / "t"
    assert main("train", "--config", tiny, "--out", out, "--episodes", 2, "--task", "repositioning") == 0
    assert [r["method"] for r in rows(out / "comparison.csv")] == ["Random", "RL"]
    cfg = tmp_path / "use.toml"
    cfg.write_text(TINY + f'\n[repositioning]\npolicy = "a2c"\ntable = "{out / "table.csv"}"\n')
    assert main("simulate", "--config", cfg, "--out", tmp_path / "u") == 0


def test_calibrate_identity(tiny, tmp_path):
    setup = build(resolve(tiny))
    _, sim = run(setup.cfg, setup.network, setup.pool(), cache=setup.cache)
    write_trace(activity_trace(sim.log), tmp_path / "same.csv")
    out = tmp_path / "c"
    assert main("calibrate", "--config", tiny, "--trace", tmp_path / "same.csv", "--out", out) == 0
    assert json.loads((out / "manifest.json").read_text())["error"] == 0.0
    assert rows(out / "utilization.csv")[0].keys() == {"bin_start_s", "U_r", "U_s"}


def test_calibrate_bad_trace(tiny, tmp_path):
    (tmp_path / "t.csv").write_text("driver,start\n")
    assert main("calibrate", "--config", tiny, "--trace", tmp_path / "t.csv", "--out", tmp_path / "c") == 1
    assert main("calibrate", "--config", tiny, "--trace", tmp_path / "missing.csv", "--out", tmp_path / "c") == 1


# file-based inputs

@pytest.fixture
def city_files(tmp_path):
    net = grid_city(6, 6, seed=4)
    nodes = tmp_path / "nodes.csv"
    edges = tmp_path / "edges.csv"
    with open(nodes, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lon", "lat"])
        for i, n in enumerate(net.node_ids.tolist()):
            w.writerow([n, repr(float(net.lon[i])), repr(float(net.lat[i]))])
    with open(edges, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "length_m"])
        for s, d, l in zip(net.edge_src, net.edge_dst, net.edge_len):
            w.writerow([int(net.node_ids[s]), int(net.node_ids[d]), repr(float(l))])
    return net, nodes, edges


def test_lonlat_trips_snap_to_nearest_nodes(city_files, tmp_path):
    net, nodes, edges = city_files
    rng = np.random.default_rng(0)
    pool = poisson_pool(net, 0.05, 0, 900, rng)
    trips = tmp_path / "trips.csv"
    with open(trips, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["request_time_s", "origin_lon", "origin_lat", "destination_lon", "destination_lat"])
        for t, o, d in zip(pool.request_time, pool.origin, pool.destination):
            (ox, oy), (dx, dy) = net.coords(o), net.coords(d)
            # a couple of meters of GPS noise
            w.writerow([repr(float(t)), ox + 1e-5, oy - 1e-5, dx - 1e-5, dy + 1e-5])
    snapped, dist = snap_orders(trips, net)
    np.testing.assert_array_equal(snapped.origin, pool.origin)
    np.testing.assert_array_equal(snapped.destination, pool.destination)
    assert dist.max() < 5.0

    cfg = tmp_path / "f.toml"
    cfg.write_text(f'[simulation]\nend_time = 900.0\n[network]\nnodes = "nodes.csv"\nedges = "edges.csv"\n'
                   f'[demand]\norders = "trips.csv"\n[fleet]\nsize = 5\n')
    out = tmp_path / "o"
    assert main("simulate", "--config", cfg, "--out", out, "--eager-cache") == 0
    again = load_order_pool(out / "orders_snapped.csv")
    np.testing.assert_array_equal(again.origin, pool.origin)
    np.testing.assert_array_equal(again.request_time, pool.request_time)
    assert len(json.loads((out / "manifest.json").read_text())["inputs"]) == 3


def test_order_nodes_must_exist(city_files, tmp_path):
    net, nodes, edges = city_files
    (tmp_path / "orders.csv").write_text("request_time_s,origin_node,destination_node\n1.0,99999,0\n")
    cfg = tmp_path / "f.toml"
    cfg.write_text('[network]\nnodes = "nodes.csv"\nedges = "edges.csv"\n[demand]\norders = "orders.csv"\n')
    assert main("simulate", "--config", cfg, "--out", tmp_path / "o") == 1


def test_undirected_flag_and_hash(city_files, tmp_path):
    _, nodes, edges = city_files
    cfg = tmp_path / "f.toml"
    cfg.write_text('[network]\nnodes = "nodes.csv"\nedges = "edges.csv"\n[demand]\nrate = 0.01\n')
    a = build(resolve(cfg))
    b = build(resolve(cfg, {"network": {"undirected": True}}))
    assert b.network.n_edges >= a.network.n_edges
    assert config_hash(a.resolved) != config_hash(b.resolved)
    assert config_hash(a.resolved) == config_hash(build(resolve(cfg)).resolved)


def test_bench_config_overrides(tmp_path):
    cfg = tmp_path / "b.toml"
    cfg.write_text('[network]\nbench = "stranding"\n[fleet]\nsize = 7\n')
    s = build(resolve(cfg))
    assert s.cfg.fleet_size == 7 and s.cfg.radius == 1000.0
    assert len(s.pool(1)) > 0
    with pytest.raises(ConfigError):
        build(resolve(None, {"network": {"bench": "nope"}}))


def test_defaults_need_demand():
    with pytest.raises(ConfigError, match="network"):
        build(resolve(None))
