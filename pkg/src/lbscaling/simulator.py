"""Steady-state simulation of the load-balancing chain.

The default *aggregate* mode simulates the occupancy histogram directly:
O(b) work per event and memory independent of N, exact for every built-in
policy because servers are exchangeable. The *per-server* mode keeps
individual FIFO queues, tags jobs, and measures realized waits; it exists
to validate the aggregate reduction.

Standard errors come from batch means over equal-length time batches.
Random streams are keyed by ``(seed, stream, purpose)`` through
:class:`numpy.random.SeedSequence` and the counter-based Philox generator,
so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import _simkernels
from .metrics import MetricsEstimate, batch_se
from .model import AggregateState, Params
from .policies import Policy

log = logging.getLogger(__name__)

PURPOSES = {"aggregate": 0, "per-server": 1}


class SimulationError(RuntimeError):
    pass


def default_warmup(params: Params) -> float:
    return max(10.0, 5.0 * params.N ** params.alpha)


@dataclass(frozen=True)
class SimConfig:
    """Run length, batching and seeding.

    ``horizon`` and ``warmup`` default to ``20 * warmup`` and
    ``max(10, 5 N**alpha)``; the resolved values are reported in
    ``MetricsEstimate.info``. ``kbar`` defaults to ``32 r_max b + 1``.
    ``init`` is ``"empty"`` or an explicit histogram.
    """

    seed: int
    horizon: Optional[float] = None
    warmup: Optional[float] = None
    batches: int = 20
    mode: str = "aggregate"
    r_max: int = 1
    kbar: Optional[float] = None
    stream: int = 0
    init: Union[str, tuple] = "empty"

    def resolve(self, params: Params) -> "SimConfig":
        warmup = default_warmup(params) if self.warmup is None else float(self.warmup)
        horizon = 20.0 * warmup if self.horizon is None else float(self.horizon)
        kbar = 32.0 * self.r_max * params.b + 1.0 if self.kbar is None else float(self.kbar)
        cfg = replace(self, warmup=warmup, horizon=horizon, kbar=kbar)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in PURPOSES:
            raise SimulationError(f"unknown mode {self.mode!r}")
        if self.batches < 2:
            raise SimulationError("need at least 2 batches")
        if self.r_max < 1:
            raise SimulationError("r_max must be >= 1")
        if not 0.0 <= self.warmup < self.horizon:
            raise SimulationError(f"need 0 <= warmup < horizon, got {self.warmup}, {self.horizon}")


def make_rng(seed: int, stream: int, purpose: str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2 ** 64 - 1), spawn_key=(int(stream), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(ss))


def _initial_counts(cfg: SimConfig, params: Params) -> np.ndarray:
    if isinstance(cfg.init, str):
        if cfg.init != "empty":
            raise SimulationError(f"unknown init {cfg.init!r}")
        counts = (params.N,) + (0,) * params.b
    else:
        counts = tuple(cfg.init)
    state = AggregateState(counts)
    state.validate(params)
    return state


class SimulationRun:
    """A resumable simulation: call :meth:`advance` any number of times, then :meth:`estimate`.

    Splitting the horizon across several ``advance`` calls consumes the same
    random numbers as a single call.
    """

    def __init__(self, policy: Policy, params: Params, cfg: SimConfig):
        if not policy.builtin:
            raise SimulationError("the compiled simulator supports built-in policies only")
        policy.check_size(params.N)
        self.policy, self.params = policy, params
        self.defaults = {"warmup": cfg.warmup is None, "horizon": cfg.horizon is None}
        self.cfg = cfg = cfg.resolve(params)
        N, b = params.N, params.b
        self.rng = make_rng(cfg.seed, cfg.stream, cfg.mode)
        state = _initial_counts(cfg, params)
        self.m = state.tail_counts()
        self.h_level = 1.0 + cfg.kbar * math.log(N) / float(N) ** (1.0 - params.alpha)
        self.t = 0.0
        self.t_next = self.rng.exponential() / (params.arrival_rate + self.m[1])
        self.batch_len = (cfg.horizon - cfg.warmup) / cfg.batches
        B = cfg.batches
        self.acc_S = np.zeros((B + 1, b))
        self.acc_h = np.zeros((B + 1, cfg.r_max))
        self.levels = np.zeros((B + 1, b + 1), dtype=np.int64)
        self.ev = np.zeros((B + 1, 2), dtype=np.int64)
        self.wait_sum = np.zeros(B)
        self.wait_cnt = np.zeros(B, dtype=np.int64)
        if cfg.mode == "per-server":
            self.q = np.zeros(N, dtype=np.int64)
            self.fifo = np.zeros((N, b))
            self.head = np.zeros(N, dtype=np.int64)
            self.scratch = np.arange(N, dtype=np.int64)
            for j, lvl in enumerate(np.repeat(np.arange(b + 1), state.counts)):
                self.q[j] = lvl
        self.wall_time = 0.0

    def _segment(self, slot: int, t_end: float) -> None:
        p, cfg, pol = self.params, self.cfg, self.policy
        args = (self.m, self.t, self.t_next, t_end, p.arrival_rate, p.N, pol.code, int(pol.d),
                bool(pol.replace), self.rng, self.h_level, self.acc_S[slot], self.acc_h[slot],
                self.levels[slot], self.ev[slot])
        if cfg.mode == "aggregate":
            self.t_next = _simkernels.advance_aggregate(*args)
        else:
            self.t_next = _simkernels.advance_servers(
                self.q, self.fifo, self.head, *args, cfg.warmup, self.batch_len,
                self.wait_sum, self.wait_cnt, self.scratch)
        self.t = t_end

    def _boundary(self, k: int) -> float:
        """End time of slot ``k`` (slot 0 is the warm-up)."""
        cfg = self.cfg
        return cfg.horizon if k == cfg.batches else cfg.warmup + k * self.batch_len

    def advance(self, t_target: Optional[float] = None) -> None:
        """Simulate up to ``t_target`` (default: the horizon)."""
        t_target = self.cfg.horizon if t_target is None else min(float(t_target), self.cfg.horizon)
        start = time.perf_counter()
        while self.t < t_target:
            slot = self._slot()
            self._segment(slot, min(self._boundary(slot), t_target))
        self.wall_time += time.perf_counter() - start

    def _slot(self) -> int:
        cfg = self.cfg
        if self.t < cfg.warmup:
            return 0
        k = 1
        while k < cfg.batches and self._boundary(k) <= self.t:
            k += 1
        return k

    def estimate(self) -> MetricsEstimate:
        cfg, p = self.cfg, self.params
        if self.t < cfg.horizon:
            raise SimulationError("run has not reached its horizon")
        N, b = p.N, p.b
        acc_S, acc_h = self.acc_S[1:], self.acc_h[1:]
        levels, ev = self.levels[1:], self.ev[1:]
        arrivals = levels.sum(axis=1)
        empty = np.flatnonzero((ev.sum(axis=1) == 0) | (arrivals == 0))
        if empty.size:
            raise SimulationError(
                f"horizon too short: batch {int(empty[0])} of {cfg.batches} saw no arrivals; "
                "increase horizon or reduce batches")
        ES_b = acc_S / (N * self.batch_len)
        Eh_b = acc_h / self.batch_len
        level_b = levels / arrivals[:, None]
        admitted_b = arrivals - levels[:, b]
        ahead_b = levels[:, :b] @ np.arange(b)
        if cfg.mode == "aggregate":
            EW_b = np.where(admitted_b > 0, ahead_b / np.maximum(admitted_b, 1), 0.0)
            total_admitted = admitted_b.sum()
            EW = float(ahead_b.sum() / total_admitted) if total_admitted else 0.0
        else:
            EW_b = self.wait_sum / np.maximum(self.wait_cnt, 1)
            EW = float(self.wait_sum.sum() / max(int(self.wait_cnt.sum()), 1))
        total_levels = levels.sum(axis=0)
        level = total_levels / total_levels.sum()
        pW_b = level_b[:, 1:].sum(axis=1)
        events = int(self.ev.sum())
        info = {
            "mode": cfg.mode, "seed": cfg.seed, "stream": cfg.stream,
            "warmup": cfg.warmup, "horizon": cfg.horizon, "batches": cfg.batches,
            "warmup_default": self.defaults["warmup"], "horizon_default": self.defaults["horizon"],
            "arrivals": int(self.ev[:, 0].sum()), "departures": int(self.ev[:, 1].sum()),
            "post_warmup_arrivals": int(arrivals.sum()),
            "blocked": int(levels[:, b].sum()), "admitted": int(admitted_b.sum()),
        }
        return MetricsEstimate(
            ES=ES_b.mean(axis=0), ES_se=batch_se(ES_b),
            level_frac=level, level_frac_se=batch_se(level_b),
            p_W=float(level[1:].sum()), p_W_se=float(batch_se(pW_b)),
            p_B=float(level[b]), p_B_se=float(batch_se(level_b[:, b])),
            EW=EW, EW_se=float(batch_se(EW_b)),
            Eh=Eh_b.mean(axis=0), Eh_se=batch_se(Eh_b), kbar=cfg.kbar, exact=False,
            events=events, wall_time=self.wall_time, info=info,
            batches={"ES": ES_b, "level": level_b, "Eh": Eh_b, "EW": EW_b})


def simulate(policy: Policy, params: Params, cfg: SimConfig) -> MetricsEstimate:
    """Run one simulation to its horizon and return batch-means estimates."""
    run = SimulationRun(policy, params, cfg)
    run.advance()
    return run.estimate()


def estimated_events(params: Params, cfg: SimConfig) -> float:
    """Rough event count: arrival plus departure rates (about ``2 lam N``) over the horizon."""
    cfg = cfg.resolve(params)
    return 2.0 * params.arrival_rate * cfg.horizon


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    index: int
    estimate: Optional[MetricsEstimate]
    error: Optional[str] = None
    point: tuple = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_point(args):
    index, policy, params, cfg = args
    try:
        if policy is None or params is None or cfg is None:
            raise SimulationError("incomplete sweep point (policy, params and cfg are required)")
        return SweepResult(index, simulate(policy, params, cfg))
    except Exception as exc:  # isolate per-point failures
        log.warning("sweep point %d failed: %s", index, exc)
        return SweepResult(index, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=2)}")


def simulate_sweep(points: Sequence[tuple], master_seed: Optional[int] = None,
                   workers: int = 1) -> list:
    """Simulate every ``(policy, params, cfg)`` point.

    Point ``i`` draws from stream ``(seed, i)`` where ``seed`` is
    ``master_seed`` when given and the point's own seed otherwise. Results
    come back in input order whatever ``workers`` is.
    """
    if not points:
        raise ValueError("empty sweep")
    jobs = []
    for i, point in enumerate(points):
        policy, params, cfg = (tuple(point) + (None, None, None))[:3]
        if cfg is not None:
            cfg = replace(cfg, stream=i, seed=cfg.seed if master_seed is None else master_seed)
        jobs.append((i, policy, params, cfg))
    if workers <= 1:
        results = [_run_point(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    for res, job in zip(results, jobs):
        res.point = job[1:]
    return results


# ---------------------------------------------------------------------------
# aggregate vs per-server


@dataclass
class CrossCheck:
    aggregate: MetricsEstimate
    per_server: MetricsEstimate
    z: dict
    threshold: float = 4.0

    @property
    def flagged(self) -> list:
        return [name for name, z in self.z.items() if abs(z) > self.threshold]

    @property
    def agree(self) -> bool:
        return not self.flagged


def z_scores(a: MetricsEstimate, b: MetricsEstimate) -> dict:
    """Per-metric ``(a - b) / sqrt(se_a**2 + se_b**2)``; zero when both agree exactly."""
    out = {}
    mb = b.scalar_metrics()
    for name, (va, sa) in a.scalar_metrics().items():
        vb, sb = mb[name]
        se = math.hypot(sa, sb)
        diff = va - vb
        out[name] = 0.0 if diff == 0.0 else (diff / se if se > 0 else math.copysign(math.inf, diff))
    return out


def cross_check_modes(policy: Policy, params: Params, cfg: SimConfig,
                      threshold: float = 4.0) -> CrossCheck:
    """Run both modes on independent streams and compare every metric."""
    agg = simulate(policy, params, replace(cfg, mode="aggregate"))
    per = simulate(policy, params, replace(cfg, mode="per-server"))
    return CrossCheck(agg, per, z_scores(agg, per), threshold)
