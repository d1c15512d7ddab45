"""Analytical matching models, the (Q, N) sweep that scores them, and utilization calibration.

Every model maps a market (arrival rate Q per second, fleet N, mean trip
time t_bar) to a steady-state estimate of match throughput, matching time
and pickup time.  Models that assume an infinite queue report themselves
infeasible once the queue is unstable.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .agents import DriverStatus
from .engine import SimulationConfig, compute_metrics, driver_intervals, run

log = logging.getLogger(__name__)

# mean nearest-neighbour distance in a planar Poisson field is 0.5 / sqrt(density);
# 4/pi converts straight-line to grid-street distance
DEFAULT_PICKUP_CONSTANT = 0.5 * 4.0 / math.pi


class Model(enum.Enum):
    PERFECT = "PerfectMatching"
    FCFS = "FCFS"
    COBB_DOUGLAS = "CobbDouglas"
    MM1 = "MM1"
    MM1K = "MM1k"
    BATCH = "BatchMatching"


MODEL_ORDER = list(Model)
TIE_RTOL = 1e-12
METRICS = ("matching_rate", "matching_time", "pickup_time", "total_wait")


class CalibrationMissing(ValueError):
    pass


@dataclass(frozen=True)
class MarketScenario:
    Q: float  # passengers per second
    N: int
    t_bar: float  # mean in-trip time, seconds
    speed: float = 6.33
    area: float = 1e7  # square meters
    max_wait: float = 300.0

    def __post_init__(self):
        if not self.Q > 0:
            raise ValueError("arrival rate Q must be > 0")
        if self.N < 1:
            raise ValueError("fleet size N must be >= 1")
        if not self.t_bar > 0:
            raise ValueError("mean trip time must be > 0")

    @property
    def capacity(self):
        """Service capacity N / t_bar in trips per second."""
        return self.N / self.t_bar


@dataclass
class Calibration:
    """Model parameters; None means not calibrated."""

    cd_A: Optional[float] = None
    cd_alpha: Optional[float] = None
    cd_beta: Optional[float] = None
    batch_interval: Optional[float] = None
    k: Optional[int] = None  # M/M/1/k capacity; derived from max_wait when unset
    pickup_constant: float = DEFAULT_PICKUP_CONSTANT
    queue: str = "mm1"  # or "mmn" for the multi-server variant

    def need(self, *names):
        for n in names:
            if getattr(self, n) is None:
                raise CalibrationMissing(f"missing calibration parameter {n!r}")


@dataclass
class ModelEstimate:
    model: Model
    feasible: bool
    matching_rate: Optional[float] = None  # matches per second
    matching_time: Optional[float] = None
    pickup_time: Optional[float] = None
    reason: str = ""
    variant: str = ""

    @property
    def total_wait(self):
        if self.matching_time is None or self.pickup_time is None:
            return None
        return self.matching_time + self.pickup_time

    def value(self, metric):
        return getattr(self, metric)

    @classmethod
    def infeasible(cls, model, reason, variant=""):
        return cls(model, False, reason=reason, variant=variant)


def nearest_pickup_time(n_idle, sc: MarketScenario, c):
    return c * math.sqrt(sc.area / n_idle) / sc.speed


def _idle_fixed_point(sc: MarketScenario, throughput, pickup):
    """Largest N_v in (0, N] with N_v = N - m(N_v) * (t_bar + pickup(N_v)), or None."""
    def g(nv):
        return nv - sc.N + throughput(nv) * (sc.t_bar + pickup(nv))

    hi = float(sc.N)
    if g(hi) <= 0:
        return hi
    # g is large near 0 when throughput stays Q; look for the minimum and the upper root
    grid = np.geomspace(1e-9 * hi, hi, 400)
    vals = np.array([g(x) for x in grid])
    below = np.flatnonzero(vals <= 0)
    if len(below) == 0:
        return None
    j = below[-1]
    if j == len(grid) - 1:
        return hi
    return brentq(g, grid[j], grid[j + 1], xtol=1e-12, rtol=1e-12)


def perfect_matching(sc: MarketScenario, cal: Calibration):
    """m = min(Q, N/t_bar); no timing predictions.  Defined everywhere."""
    return ModelEstimate(Model.PERFECT, True, matching_rate=min(sc.Q, sc.capacity))


def fcfs(sc: MarketScenario, cal: Calibration):
    """Every request takes the nearest idle car at once.

    matching_time = 0; pickup_time = c / sqrt(N_v / area) / speed where the
    idle count solves N_v = N - Q (t_bar + pickup_time).  Infeasible when
    that balance has no positive solution.
    """
    c = cal.pickup_constant
    nv = _idle_fixed_point(sc, lambda nv: sc.Q, lambda nv: nearest_pickup_time(nv, sc, c))
    if nv is None:
        return ModelEstimate.infeasible(Model.FCFS, "no idle-vehicle equilibrium (demand exceeds supply)")
    return ModelEstimate(Model.FCFS, True, matching_rate=sc.Q, matching_time=0.0,
                         pickup_time=nearest_pickup_time(nv, sc, c))


def cobb_douglas(sc: MarketScenario, cal: Calibration):
    """Meeting function m = A * N_c^alpha * N_v^beta held at m = Q.

    N_v comes from the same idle balance as FCFS; the waiting-passenger
    count N_c that makes the meeting rate equal Q gives the matching time by
    Little's law, N_c / Q.  Infeasible when no idle vehicles remain.
    """
    cal.need("cd_A", "cd_alpha", "cd_beta")
    c = cal.pickup_constant
    nv = _idle_fixed_point(sc, lambda nv: sc.Q, lambda nv: nearest_pickup_time(nv, sc, c))
    if nv is None or nv <= 0:
        return ModelEstimate.infeasible(Model.COBB_DOUGLAS, "no idle vehicles at equilibrium")
    nc = (sc.Q / (cal.cd_A * nv ** cal.cd_beta)) ** (1.0 / cal.cd_alpha)
    return ModelEstimate(Model.COBB_DOUGLAS, True, matching_rate=sc.Q, matching_time=nc / sc.Q,
                         pickup_time=nearest_pickup_time(nv, sc, c))


def mm1_wait(lam, mu):
    """Mean time in queue (excluding service) of a stable M/M/1 queue."""
    return lam / (mu * (mu - lam))


def erlang_c(n, a):
    """Probability of waiting in M/M/n with offered load a = lambda/mu, via the Erlang B recursion."""
    b = 1.0
    for k in range(1, n + 1):
        b = a * b / (k + a * b)
    rho = a / n
    return b / (1.0 - rho + rho * b)


def mm1(sc: MarketScenario, cal: Calibration):
    """Passengers queue for the fleet seen as one server (mm1) or N servers (mmn).

    mm1: lambda = Q, mu = N/t_bar, Wq = lambda / (mu (mu - lambda)).
    mmn: each car serves at 1/t_bar, Wq = ErlangC / (N/t_bar - Q).
    Both need Q < N/t_bar.
    """
    lam, mu = sc.Q, sc.capacity
    if cal.queue not in ("mm1", "mmn"):
        raise ValueError(f"unknown queue variant {cal.queue!r}")
    if lam >= mu:
        return ModelEstimate.infeasible(Model.MM1, "queue unstable (Q >= N/t_bar)", cal.queue)
    if cal.queue == "mm1":
        w = mm1_wait(lam, mu)
    else:
        w = erlang_c(sc.N, lam * sc.t_bar) / (mu - lam)
    return ModelEstimate(Model.MM1, True, matching_rate=lam, matching_time=w, variant=cal.queue)


def mm1k_distribution(lam, mu, k):
    """Stationary law of the M/M/1/k queue, computed in log space."""
    n = np.arange(k + 1)
    logp = n * (math.log(lam) - math.log(mu))
    return np.exp(logp - logsumexp(logp))


def mm1k_capacity(sc: MarketScenario, cal: Calibration):
    if cal.k is not None:
        return int(cal.k)
    return max(1, int(math.ceil(sc.capacity * sc.max_wait)))


def mm1k(sc: MarketScenario, cal: Calibration):
    """Finite queue: arrivals finding k in the system leave.

    Throughput lambda (1 - P_k); matching time is the queueing delay of
    admitted passengers, L_q / throughput.  Defined for every load.
    """
    lam, mu = sc.Q, sc.capacity
    k = mm1k_capacity(sc, cal)
    p = mm1k_distribution(lam, mu, k)
    thr = float(lam * (1.0 - p[-1]))
    lq = float(np.dot(np.maximum(np.arange(k + 1) - 1, 0), p))
    return ModelEstimate(Model.MM1K, True, matching_rate=thr, matching_time=lq / thr if thr > 0 else 0.0,
                         variant=f"k={k}")


def batch_matching(sc: MarketScenario, cal: Calibration):
    """Requests collect over a batch interval and are matched to idle cars at its end.

    Per batch min(Q*interval, N_v) pairs form; the matching time is half an
    interval.  Pickup uses the nearest-car distance at the mean idle density
    over the batch, (N_v - matched/2) / area.  Infeasible when a batch's
    arrivals outnumber the idle cars, since the queue then grows.
    """
    cal.need("batch_interval")
    dt = cal.batch_interval
    c = cal.pickup_constant

    def matched(nv):
        return min(sc.Q * dt, nv)

    def pickup(nv):
        return nearest_pickup_time(max(nv - matched(nv) / 2.0, 1e-12), sc, c)

    nv = _idle_fixed_point(sc, lambda nv: matched(nv) / dt, pickup)
    if nv is None or sc.Q * dt > nv:
        return ModelEstimate.infeasible(Model.BATCH, "batch arrivals exceed idle vehicles")
    return ModelEstimate(Model.BATCH, True, matching_rate=sc.Q, matching_time=dt / 2.0, pickup_time=pickup(nv))


_MODELS = {
    Model.PERFECT: perfect_matching,
    Model.FCFS: fcfs,
    Model.COBB_DOUGLAS: cobb_douglas,
    Model.MM1: mm1,
    Model.MM1K: mm1k,
    Model.BATCH: batch_matching,
}


def estimate(model, sc: MarketScenario, cal: Calibration = None) -> ModelEstimate:
    model = Model(model) if not isinstance(model, Model) else model
    return _MODELS[model](sc, cal if cal is not None else Calibration())


def fit_cobb_douglas(x1, x2, m):
    """Least-squares fit of log m = log A + alpha log x1 + beta log x2; returns (A, alpha, beta)."""
    x1, x2, m = (np.asarray(v, dtype=float) for v in (x1, x2, m))
    ok = (x1 > 0) & (x2 > 0) & (m > 0)
    if ok.sum() < 3:
        raise ValueError("need at least three positive samples to fit")
    X = np.column_stack([np.ones(ok.sum()), np.log(x1[ok]), np.log(x2[ok])])
    coef, *_ = np.linalg.lstsq(X, np.log(m[ok]), rcond=None)
    return float(np.exp(coef[0])), float(coef[1]), float(coef[2])


# scoring

def ape(est, true):
    """Absolute percentage error, or None when undefined."""
    if est is None or true is None or true == 0 or not math.isfinite(true):
        return None
    return abs(est - true) / abs(true)


@dataclass
class Row:
    Q: float
    N: int
    metric: str
    true: Optional[float]
    model: Model
    estimate: Optional[float]
    ape: Optional[float]
    feasible: bool


@dataclass
class BestFit:
    Q: float
    N: int
    metric: str
    model: Optional[Model]  # None when every model is infeasible or undefined
    mape: Optional[float]
    tie: bool = False

    @property
    def label(self):
        return "none" if self.model is None else self.model.value


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    failed: list = field(default_factory=list)  # (Q, N, message)
    calibration: Optional[Calibration] = None

    def add(self, sc: MarketScenario, truth: dict, estimates):
        for est in estimates:
            for metric in METRICS:
                true = truth.get(metric)
                e = est.value(metric) if est.feasible else None
                self.rows.append(Row(sc.Q, sc.N, metric, true, est.model, e, ape(e, true), est.feasible))

    def mape(self, model, metric):
        """(mean APE over defined entries, number of excluded entries)."""
        vals, skipped = [], 0
        for r in self.rows:
            if r.model == model and r.metric == metric:
                if r.ape is None:
                    skipped += 1
                else:
                    vals.append(r.ape)
        return (float(np.mean(vals)) if vals else None), skipped

    def scenarios(self):
        seen = []
        for r in self.rows:
            if (r.Q, r.N) not in seen:
                seen.append((r.Q, r.N))
        return seen

    def best_fit(self, metric):
        out = []
        for q, n in self.scenarios():
            cands = [r for r in self.rows if (r.Q, r.N) == (q, n) and r.metric == metric and r.ape is not None]
            if not cands:
                out.append(BestFit(q, n, metric, None, None))
                continue
            low = min(r.ape for r in cands)
            # errors equal up to rounding count as a tie; the earlier model wins
            tied = [r for r in cands if math.isclose(r.ape, low, rel_tol=TIE_RTOL, abs_tol=1e-15)]
            top = min(tied, key=lambda r: MODEL_ORDER.index(r.model))
            out.append(BestFit(q, n, metric, top.model, top.ape, len(tied) > 1))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Q", "N", "metric", "true", "model", "estimate", "ape", "feasible"])
            for r in self.rows:
                w.writerow([repr(r.Q), r.N, r.metric, _num(r.true), r.model.value, _num(r.estimate), _num(r.ape),
                            int(r.feasible)])

    def write_best_fit_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Q", "N", "metric", "best_model", "mape"])
            for metric in METRICS:
                for b in self.best_fit(metric):
                    w.writerow([repr(b.Q), b.N, metric, b.label, _num(b.mape)])


def best_fit(report: EvaluationReport, metric):
    return report.best_fit(metric)


def _num(v):
    return "" if v is None else repr(float(v))


# sweep

@dataclass
class SweepSpec:
    """A scenario family: one network and demand pool, thinned to each Q and resized to each N."""

    template: SimulationConfig
    network: object
    pool: object
    Q: list
    N: list
    seeds: tuple = (0, 1, 2, 3, 4)
    warmup: float = 0.2
    calibration_seeds: tuple = (1000,)
    calibration: Optional[Calibration] = None


def pool_rate(pool, start, end):
    return len(pool.window(start, end)) / (end - start)


def mean_trip_time(spec: SweepSpec, cache, sample=500):
    cfg = spec.template
    rows = spec.pool.window(cfg.start_time, cfg.end_time)
    if len(rows) == 0:
        raise ValueError("demand pool has no requests in the simulated window")
    rows = rows[np.linspace(0, len(rows) - 1, min(sample, len(rows))).astype(int)]
    d = [cache.distance(int(spec.pool.origin[r]), int(spec.pool.destination[r])) for r in rows.tolist()]
    d = [x for x in d if math.isfinite(x)]
    return float(np.mean(d)) / cfg.speed


def scenario_truth(report, cfg: SimulationConfig, since):
    """True metrics of one run, with throughput in matches per second after warm-up."""
    window = cfg.end_time - since
    return {
        "matching_rate": report.matched / window,
        "matching_time": report.avg_matching_time if report.matched else None,
        "pickup_time": report.avg_pickup_time if report.finished or report.matched else None,
        "total_wait": report.avg_total_wait if report.matched else None,
        "waiting": report.avg_waiting_orders,
        "idle": report.avg_idle_vehicles,
        "pickup_distance": report.avg_pickup_distance,
    }


def _one_run(args):
    cfg, network, pool, since = args
    report, sim = run(cfg, network, pool)
    if since > cfg.start_time:
        report = compute_metrics(sim.log, since=since)
    return scenario_truth(report, cfg, since)


def _average(truths):
    out = {}
    for key in truths[0]:
        vals = [t[key] for t in truths if t[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def threads():
    try:
        return max(1, int(os.environ.get("RIDESIM_THREADS", "1")))
    except ValueError:
        return 1


def _run_many(jobs):
    out = []
    n = threads()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            futs = [ex.submit(_one_run, j) for j in jobs]
            for f in futs:
                try:
                    out.append(f.result())
                except Exception as exc:  # noqa: BLE001  a scenario failure must not stop the sweep
                    out.append(exc)
        return out
    for j in jobs:
        try:
            out.append(_one_run(j))
        except Exception as exc:  # noqa: BLE001
            out.append(exc)
    return out


def _configs(spec: SweepSpec, seeds):
    cfg = spec.template
    base_rate = pool_rate(spec.pool, cfg.start_time, cfg.end_time)
    for q in spec.Q:
        frac = q / base_rate
        if frac > 1.0 + 1e-9:
            raise ValueError(f"arrival rate {q} exceeds the pool's rate {base_rate:.4g}/s")
        for n in spec.N:
            yield q, n, [cfg.replace(fleet_size=int(n), sample_fraction=min(1.0, frac), seed=s) for s in seeds]


def calibrate_models(truths, scenarios, interval):
    """Fit Cobb-Douglas and the pickup constant to simulated markets."""
    cal = Calibration(batch_interval=interval)
    m = [t["matching_rate"] for t in truths]
    nc = [t["waiting"] for t in truths]
    nv = [t["idle"] for t in truths]
    try:
        cal.cd_A, cal.cd_alpha, cal.cd_beta = fit_cobb_douglas(nc, nv, m)
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("Cobb-Douglas calibration failed: %s", exc)
    cs = [t["pickup_distance"] * math.sqrt(t["idle"] / sc.area)
          for t, sc in zip(truths, scenarios) if t["idle"] and t["pickup_distance"]]
    if cs:
        cal.pickup_constant = float(np.median(cs))
    return cal


def sweep(spec: SweepSpec, cache=None) -> EvaluationReport:
    """Simulate every (Q, N) market over `spec.seeds`, then score all six models.

    The first `warmup` share of the horizon is discarded.  Unless a
    calibration is supplied, Cobb-Douglas and the pickup constant are
    fitted on separate runs using `calibration_seeds`.
    """
    from .network import RouteCache

    cfg = spec.template
    cache = cache if cache is not None else RouteCache(spec.network)
    t_bar = mean_trip_time(spec, cache)
    since = cfg.start_time + spec.warmup * (cfg.end_time - cfg.start_time)
    area = spec.network.area_m2()

    def market(q, n):
        return MarketScenario(Q=q, N=int(n), t_bar=t_bar, speed=cfg.speed, area=area, max_wait=cfg.behavior.max_wait)

    cal = spec.calibration
    if cal is None:
        plan = list(_configs(spec, spec.calibration_seeds))
        results = _run_many([(c, spec.network, spec.pool, since) for _, _, cs in plan for c in cs])
        truths, scs = [], []
        k = 0
        for q, n, cs in plan:
            got = [r for r in results[k:k + len(cs)] if not isinstance(r, Exception)]
            k += len(cs)
            # every run is one sample of the meeting function
            truths.extend(got)
            scs.extend([market(q, n)] * len(got))
        cal = calibrate_models(truths, scs, cfg.interval_length)

    report = EvaluationReport(calibration=cal)
    plan = list(_configs(spec, spec.seeds))
    results = _run_many([(c, spec.network, spec.pool, since) for _, _, cs in plan for c in cs])
    k = 0
    for q, n, cs in plan:
        chunk = results[k:k + len(cs)]
        k += len(cs)
        errors = [r for r in chunk if isinstance(r, Exception)]
        if errors:
            report.failed.append((q, n, repr(errors[0])))
            log.error("scenario Q=%s N=%s failed: %r", q, n, errors[0])
            continue
        sc = market(q, n)
        ests = []
        for model in MODEL_ORDER:
            try:
                ests.append(estimate(model, sc, cal))
            except CalibrationMissing as exc:
                ests.append(ModelEstimate.infeasible(model, str(exc)))
        report.add(sc, _average(chunk), ests)
    return report


# utilization calibration

@dataclass(frozen=True)
class TraceRecord:
    driver_id: int
    start: float
    end: float
    occupied: bool


TRACE_HEADER = ["driver_id", "interval_start_s", "interval_end_s", "occupied"]


def load_trace(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader)]
        if header != TRACE_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                did, a, b, occ = int(row[0]), float(row[1]), float(row[2]), int(row[3])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from None
            if occ not in (0, 1) or b < a:
                raise ValueError(f"{path}:{lineno}: bad trace record")
            out.append(TraceRecord(did, a, b, bool(occ)))
    return out


def write_trace(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([r.driver_id, repr(float(r.start)), repr(float(r.end)), int(r.occupied)])


def activity_trace(events, occupied=(DriverStatus.DELIVERING,)):
    """Online intervals of every simulated driver, flagged occupied for the given statuses."""
    out = []
    for did, spans in sorted(driver_intervals(events).items()):
        for status, a, b in spans:
            if status == DriverStatus.OFFLINE or b <= a:
                continue
            out.append(TraceRecord(did, a, b, status in occupied))
    return out


@dataclass
class CalibrationReport:
    bins: np.ndarray  # bin start times
    U_r: np.ndarray
    U_s: np.ndarray
    error: float


def _binned(records, edges):
    occ = np.zeros(len(edges) - 1)
    online = np.zeros(len(edges) - 1)
    for r in records:
        lo = np.maximum(edges[:-1], r.start)
        hi = np.minimum(edges[1:], r.end)
        span = np.clip(hi - lo, 0.0, None)
        online += span
        if r.occupied:
            occ += span
    return occ, online


def calibrate_utilization(real, simulated, bin_s=3600.0):
    """Compare utilization U = occupied time / online time between a real and a simulated trace.

    `simulated` is a list of TraceRecords or an event log from a run.  The
    aggregate error |U_r - U_s| / U_r uses whole-trace totals.
    """
    if hasattr(simulated, "end_time"):
        simulated = activity_trace(simulated)
    real = list(real)
    simulated = list(simulated)
    occ_r = sum(r.end - r.start for r in real if r.occupied)
    on_r = sum(r.end - r.start for r in real)
    occ_s = sum(r.end - r.start for r in simulated if r.occupied)
    on_s = sum(r.end - r.start for r in simulated)
    if on_r <= 0:
        raise ValueError("real trace has zero online time")
    if on_s <= 0:
        raise ValueError("simulated trace has zero online time")
    if occ_r <= 0:
        raise ValueError("real trace has zero occupied time; relative error undefined")
    # |occ_s/on_s - occ_r/on_r| / (occ_r/on_r), cross-multiplied to stay exact on round inputs
    error = abs(occ_s * on_r - occ_r * on_s) / (occ_r * on_s)
    t0 = min(r.start for r in real + simulated)
    t1 = max(r.end for r in real + simulated)
    nb = max(1, int(math.ceil((t1 - t0) / bin_s)))
    edges = t0 + bin_s * np.arange(nb + 1)
    o_r, n_r = _binned(real, edges)
    o_s, n_s = _binned(simulated, edges)
    with np.errstate(divide="ignore", invalid="ignore"):
        u_r = np.where(n_r > 0, o_r / n_r, np.nan)
        u_s = np.where(n_s > 0, o_s / n_s, np.nan)
    return CalibrationReport(edges[:-1], u_r, u_s, float(error))
