"""Command line: simulate, sweep, train and calibrate.

Exit codes: 0 success, 1 configuration or input error, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build, config_hash, file_digest, resolve
from .engine import Simulation, write_event_log, write_metrics, write_series
from .market import write_order_pool
from .rl import (
    PDB, A2CReposition, Myopic, RandomReposition, ValueTableMatching, read_table, rollout, train,
    write_actor_critic, write_learning_curve, write_value_table,
)

log = logging.getLogger("ridesim")

LOCK_NAME = ".ridesim.lock"


class RunError(RuntimeError):
    pass


@contextmanager
def locked(out):
    """Claim an output directory for this process."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"output directory {out} is in use (remove {lock} if no run is active)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(out, command, setup, outputs, started, extra=None):
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "config_hash": config_hash(setup.resolved),
        "seed": setup.cfg.seed,
        "inputs": {p: d for p, d in sorted(setup.inputs.items())},
        "outputs": sorted(str(p) for p in outputs),
        "duration_s": round(time.perf_counter() - started, 6),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _overrides(args):
    over = {}
    if getattr(args, "seed", None) is not None:
        over.setdefault("simulation", {})["seed"] = args.seed
    if getattr(args, "undirected", False):
        over.setdefault("network", {})["undirected"] = True
    if getattr(args, "cache", None):
        over.setdefault("network", {})["cache"] = args.cache
    if getattr(args, "episodes", None) is not None:
        over.setdefault("rl", {})["episodes"] = args.episodes
    return over


def _floats(text, name):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers") from None


# matching and repositioning policies named in the config

def _policy(setup, task):
    r = setup.resolved
    if task == "matching":
        name, table = r["matching"]["policy"], r["matching"]["table"]
        if name == "myopic":
            return Myopic()
        if name == "pdb":
            return PDB()
        if name == "value_table":
            if table is None:
                raise ConfigError("[matching] policy 'value_table' needs a table file")
            return ValueTableMatching(_read_table(table, setup), setup.learner.gamma)
        raise ConfigError(f"unknown matching policy {name!r}")
    name, table = r["repositioning"]["policy"], r["repositioning"]["table"]
    if name == "default":
        return None
    if name == "random":
        return RandomReposition()
    if name == "a2c":
        if table is None:
            raise ConfigError("[repositioning] policy 'a2c' needs a table file")
        return A2CReposition(_read_table(table, setup), setup.learner.temperature,
                             greedy=bool(r["repositioning"]["greedy"]))
    raise ConfigError(f"unknown repositioning policy {name!r}")


def _read_table(path, setup):
    if not Path(path).is_file():
        raise ConfigError(f"table file not found: {path}")
    setup.inputs[path] = file_digest(path)
    try:
        return read_table(path, setup.overlay)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args, setup, out, started):
    cfg = setup.cfg
    kw = {}
    for task in ("matching", "repositioning"):
        pol = _policy(setup, task)
        if pol is not None:
            kw.update(pol.configure(cfg, setup.overlay))
    sim = Simulation(cfg, setup.network, setup.pool(), cache=setup.cache, overlay=setup.overlay,
                     value_fn=kw.get("value_fn"), reposition=kw.get("reposition"))
    report = sim.run()
    outputs = [out / "metrics.csv", out / "timeseries.csv", out / "events.csv"]
    write_metrics(report, outputs[0])
    write_series(report, outputs[1])
    write_event_log(sim.log, outputs[2])
    if setup.snapped is not None:
        outputs.append(out / "orders_snapped.csv")
        write_order_pool(setup.snapped, outputs[-1])
    print(f"matched {report.matched}/{report.produced} orders, revenue {report.platform_revenue:.2f}")
    return outputs, {}


def cmd_sweep(args, setup, out, started):
    from .theory import Calibration, SweepSpec, pool_rate, sweep

    sw = setup.resolved["sweep"]
    qs = _floats(args.grid_q, "--grid-q") if args.grid_q else [float(x) for x in sw["q"]]
    ns = _floats(args.grid_n, "--grid-n") if args.grid_n else [float(x) for x in sw["n"]]
    if not qs or not ns:
        raise ConfigError("sweep needs arrival rates (--grid-q) and fleet sizes (--grid-n)")
    if any(q <= 0 for q in qs):
        raise ConfigError("sweep arrival rates must be > 0")
    if any(n < 1 or n != int(n) for n in ns):
        raise ConfigError("sweep fleet sizes must be integers >= 1")
    cfg = setup.cfg
    pool = setup.pool()
    rate = pool_rate(pool, cfg.start_time, cfg.end_time)
    if max(qs) > rate:
        raise ConfigError(f"arrival rate {max(qs)} exceeds the demand pool's rate {rate:.4g}/s")
    cal = None
    if sw["cd_A"] is not None or sw["batch_interval"] is not None:
        cal = Calibration(cd_A=sw["cd_A"], cd_alpha=sw["cd_alpha"], cd_beta=sw["cd_beta"],
                          batch_interval=sw["batch_interval"], k=sw["k"], queue=sw["queue"])
        if sw["pickup_constant"] is not None:
            cal.pickup_constant = float(sw["pickup_constant"])
    spec = SweepSpec(cfg, setup.network, pool, Q=qs, N=[int(n) for n in ns], seeds=tuple(sw["seeds"]),
                     warmup=float(sw["warmup"]), calibration_seeds=tuple(sw["calibration_seeds"]), calibration=cal)
    report = sweep(spec, setup.cache)
    if cal is None:
        report.calibration.queue = sw["queue"]
        report.calibration.k = sw["k"]
    outputs = [out / "sweep.csv", out / "best_fit.csv"]
    report.write_csv(outputs[0])
    report.write_best_fit_csv(outputs[1])
    n_sc = len(report.scenarios())
    print(f"{n_sc} scenarios evaluated, {len(report.failed)} failed")
    for q, n, msg in report.failed:
        print(f"scenario Q={q} N={n} failed: {msg}", file=sys.stderr)
    c = report.calibration
    return outputs, {"scenarios": n_sc, "failed": [[q, n, m] for q, n, m in report.failed],
                     "calibration": {"cd_A": c.cd_A, "cd_alpha": c.cd_alpha, "cd_beta": c.cd_beta,
                                     "batch_interval": c.batch_interval, "pickup_constant": c.pickup_constant}}


COMPARISON_HEADER = ["method", "revenue", "frao", "occupancy", "matching_time", "pickup_time"]


def evaluate(policy, scenarios):
    rows = []
    for sc in scenarios:
        report, _, _ = rollout(policy, sc)
        rows.append([report.platform_revenue, report.frao, report.occupancy_rate, report.avg_matching_time,
                     report.avg_pickup_time])
    return np.mean(np.array(rows, dtype=float), axis=0).tolist()


def cmd_train(args, setup, out, started):
    task = args.task
    r = setup.resolved["rl"]
    learner = setup.learner
    train_sc = setup.scenarios(r["train_seeds"])
    test_sc = setup.scenarios(r["test_seeds"])
    result = train(task, train_sc, learner)
    outputs = [out / "comparison.csv", out / "learning_curve.csv", out / "table.csv"]
    if task == "matching":
        methods = [("Myopic", Myopic()), ("PDB", PDB())]
        rl = ValueTableMatching(result.tables, learner.gamma)
        write_value_table(result.tables, outputs[2])
    else:
        methods = [("Random", RandomReposition())]
        greedy = bool(setup.resolved["repositioning"]["greedy"])
        rl = A2CReposition(result.tables, learner.temperature, greedy=greedy)
        write_actor_critic(result.tables, outputs[2])
    if learner.episodes > 0:
        methods.append(("RL", rl))
    with open(outputs[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_HEADER)
        for name, pol in methods:
            vals = evaluate(pol, test_sc)
            w.writerow([name] + [repr(float(v)) for v in vals])
            print(f"{name:8s} revenue {vals[0]:10.2f}  frao {vals[1]:.3f}  occupancy {vals[2]:.3f}")
    write_learning_curve(result.curve, outputs[1])
    return outputs, {"task": task, "episodes": learner.episodes}


def cmd_calibrate(args, setup, out, started):
    from .theory import calibrate_utilization, load_trace

    path = args.trace
    if not Path(path).is_file():
        raise ConfigError(f"trace file not found: {path}")
    try:
        trace = load_trace(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    setup.inputs[str(Path(path).resolve())] = file_digest(path)
    sim = Simulation(setup.cfg, setup.network, setup.pool(), cache=setup.cache, overlay=setup.overlay)
    sim.run()
    rep = calibrate_utilization(trace, sim.log, bin_s=args.bin_s)
    outputs = [out / "utilization.csv"]
    with open(outputs[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_s", "U_r", "U_s"])
        for t, a, b in zip(rep.bins, rep.U_r, rep.U_s):
            w.writerow([repr(float(t)), "" if np.isnan(a) else repr(float(a)), "" if np.isnan(b) else repr(float(b))])
    print(f"utilization error {rep.error:.4f}")
    return outputs, {"error": rep.error}


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "train": cmd_train, "calibrate": cmd_calibrate}


def parser():
    p = argparse.ArgumentParser(prog="ridesim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ridesim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML experiment file (defaults apply without one)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--undirected", action="store_true", help="treat every network edge as two-way")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--eager-cache", dest="cache", action="store_const", const="eager")
        g.add_argument("--lazy-cache", dest="cache", action="store_const", const="lazy")
        return sp

    common(sub.add_parser("simulate", help="run one simulation"))
    sw = common(sub.add_parser("sweep", help="score the analytical models over a (Q, N) grid"))
    sw.add_argument("--grid-q", help="arrival rates per second, comma separated")
    sw.add_argument("--grid-n", help="fleet sizes, comma separated")
    tr = common(sub.add_parser("train", help="train a dispatch or repositioning policy"))
    tr.add_argument("--task", choices=["matching", "repositioning"], default="matching")
    tr.add_argument("--episodes", type=int)
    ca = common(sub.add_parser("calibrate", help="compare simulated utilization with a driver trace"))
    ca.add_argument("--trace", required=True)
    ca.add_argument("--bin-s", type=float, default=3600.0)
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        resolved = resolve(args.config, _overrides(args))
        setup = build(resolved)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        with locked(out):
            outputs, extra = COMMANDS[args.command](args, setup, out, started)
            outputs.append(write_manifest(out, args.command, setup, outputs, started, extra))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  reported, not raised, so scripts get an exit code
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
