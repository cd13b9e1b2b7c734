"""Discrete-event timing models for pipeline schedules.

Two schedules are modeled over abstract per-block forward/backward costs:

``sync_bp``
    Model-parallel backpropagation with one batch in flight: the batch walks
    the full forward chain, then the full backward chain, so a step costs
    T_F + T_B and exactly one block works at any moment.

``dsp``
    The bounded-queue pipeline. Event times follow a recurrence over
    (block, iteration): a block's forward starts once it has finished its
    previous iteration, its input packet exists, and its output queue has a
    free slot; its backward starts once the forward is done, the gradient
    from above exists, and the gradient queue below has a free slot. Queue
    capacities and FIFO order are therefore respected by construction, and
    the emitted event trace can be replayed against the capacities as an
    independent check.

Straggler model: each (block, step, phase) -- or (block, step) with step
granularity -- independently draws a slow state with the given probability;
a slow draw multiplies the affected cost by (1 + rho). For the bounded-queue
schedule the dilation stays local to the block that drew it. For ``sync_bp``
the whole step dilates by the largest factor drawn in it: a synchronized
schedule advances at the pace of its slowest participant, which is what makes
lock-step baselines fragile against stragglers in the first place. (Charging
a slowed block only for its own serial-chain work would make the baseline's
slowdown exactly prob * rho, the theoretical floor that no work-conserving
schedule can beat; see the straggler-model notes in the README.)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .pipeline import PipelineConfig
from .rng import SeededRng, derive_seed


@dataclass(frozen=True)
class CostModel:
    f_costs: tuple[float, ...]
    b_costs: tuple[float, ...]
    # recomputation overlaps the fresh forward when True; otherwise the
    # backward phase pays an extra forward to rebuild the tape
    overlap_recompute: bool = True
    transfer_cost: float = 0.0  # per queue hand-off, defaults to free links

    def __post_init__(self):
        if len(self.f_costs) != len(self.b_costs):
            raise ValueError("f_costs and b_costs must have equal length")
        if any(c <= 0 for c in self.f_costs) or any(c <= 0 for c in self.b_costs):
            raise ValueError("per-block costs must be positive")
        if self.transfer_cost < 0:
            raise ValueError("transfer cost must be non-negative")

    @property
    def k(self) -> int:
        return len(self.f_costs)


@dataclass(frozen=True)
class StragglerModel:
    prob: float = 1 / 3
    rho: float = 0.0
    seed: int = 0
    granularity: str = "phase"  # "phase" | "step"

    def __post_init__(self):
        if not (0.0 <= self.prob <= 1.0):
            raise ValueError("straggler probability must lie in [0, 1]")
        if self.rho < 0:
            raise ValueError("slowdown fraction must be non-negative")
        if self.granularity not in ("phase", "step"):
            raise ValueError("granularity must be 'phase' or 'step'")

    def multipliers(self, k: int, n_steps: int) -> np.ndarray:
        """(k, n_steps, 2) cost multipliers, deterministic in the seed."""
        rng = SeededRng(self.seed)
        if self.rho == 0.0 or self.prob == 0.0:
            return np.ones((k, n_steps, 2))
        if self.granularity == "phase":
            u = rng.uniform(k * n_steps * 2).reshape(k, n_steps, 2)
        else:
            u = np.repeat(rng.uniform(k * n_steps).reshape(k, n_steps, 1), 2, axis=2)
        return np.where(u < self.prob, 1.0 + self.rho, 1.0)


@dataclass(frozen=True)
class SimEvent:
    time: float
    block: int
    phase: str  # fwd_start | fwd_end | bwd_start | bwd_end
    batch_index: int


@dataclass
class RunStats:
    schedule: str
    makespan: float
    steady_interval: float
    completions: np.ndarray = field(repr=False)


def _steady_interval(completions: np.ndarray) -> float:
    gaps = np.diff(completions)
    if gaps.size == 0:
        return 0.0
    return float(np.median(gaps[gaps.size // 2:]))  # last half: warmup excluded


def simulate(
    schedule: str,
    cost: CostModel,
    n_steps: int,
    config: PipelineConfig | None = None,
    straggler: StragglerModel | None = None,
) -> tuple[RunStats, list[SimEvent]]:
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    if schedule == "sync_bp":
        return _simulate_sync(cost, n_steps, straggler)
    if schedule == "dsp":
        if config is None:
            raise ValueError("the dsp schedule requires a validated PipelineConfig")
        if config.k != cost.k:
            raise ValueError(f"config K={config.k} but cost model has {cost.k} blocks")
        return _simulate_pipeline(cost, config, n_steps, straggler)
    raise ValueError(f"unknown schedule: {schedule!r}")


def _simulate_sync(cost, n_steps, straggler) -> tuple[RunStats, list[SimEvent]]:
    k_total = cost.k
    mult = (straggler or StragglerModel()).multipliers(k_total, n_steps)
    chain = float(sum(cost.f_costs) + sum(cost.b_costs))
    events: list[SimEvent] = []
    completions = np.zeros(n_steps)
    t = 0.0
    for n in range(n_steps):
        scale = float(mult[:, n, :].max())  # barrier: slowest participant sets the pace
        start = t
        for k in range(k_total):
            events.append(SimEvent(t, k, "fwd_start", n))
            t += cost.f_costs[k] * scale
            events.append(SimEvent(t, k, "fwd_end", n))
        for k in range(k_total - 1, -1, -1):
            events.append(SimEvent(t, k, "bwd_start", n))
            t += cost.b_costs[k] * scale
            events.append(SimEvent(t, k, "bwd_end", n))
        t = start + chain * scale
        completions[n] = t
    stats = RunStats("sync_bp", makespan=t, steady_interval=_steady_interval(completions),
                     completions=completions)
    return stats, events


def _simulate_pipeline(cost, config, n_steps, straggler) -> tuple[RunStats, list[SimEvent]]:
    k_total = config.k
    p, q = config.p, config.q
    mult = (straggler or StragglerModel()).multipliers(k_total, n_steps)
    fwd = np.asarray(cost.f_costs)
    if cost.overlap_recompute:
        bwd = np.asarray(cost.b_costs)
    else:
        bwd = np.asarray(cost.b_costs) + fwd  # recomputation paid serially
    link = cost.transfer_cost

    s_f = np.zeros((k_total, n_steps))
    e_f = np.zeros((k_total, n_steps))
    s_b = np.zeros((k_total, n_steps))
    e_b = np.zeros((k_total, n_steps))
    for n in range(n_steps):
        for k in range(k_total):
            prev_end = e_b[k, n - 1] if n > 0 else 0.0
            if k == 0:
                input_ready = 0.0
            elif n < p[k - 1]:
                input_ready = 0.0  # warmup packet, present at t=0
            else:
                input_ready = e_f[k - 1, n - p[k - 1]] + link
            if k < k_total - 1 and n > 0:
                out_space = s_f[k + 1, n - 1]  # consumer freed a slot at its pop
            else:
                out_space = 0.0
            s_f[k, n] = max(prev_end, input_ready, out_space)
            e_f[k, n] = s_f[k, n] + fwd[k] * mult[k, n, 0]

            if k == k_total - 1:
                grad_ready = 0.0  # loss gradient is computed locally
            elif n < q[k + 1]:
                grad_ready = 0.0
            else:
                grad_ready = e_b[k + 1, n - q[k + 1]] + link
            if k > 0 and n > 0:
                grad_space = s_b[k - 1, n - 1]
            else:
                grad_space = 0.0
            s_b[k, n] = max(e_f[k, n], grad_ready, grad_space)
            e_b[k, n] = s_b[k, n] + bwd[k] * mult[k, n, 1]

    cum_p = np.concatenate([[0], np.cumsum(p)])
    events: list[SimEvent] = []
    for k in range(k_total):
        for n in range(n_steps):
            batch = n - int(cum_p[k]) - config.m[k]  # the batch being backpropagated
            events.append(SimEvent(float(s_f[k, n]), k, "fwd_start", n - int(cum_p[k])))
            events.append(SimEvent(float(e_f[k, n]), k, "fwd_end", n - int(cum_p[k])))
            events.append(SimEvent(float(s_b[k, n]), k, "bwd_start", batch))
            events.append(SimEvent(float(e_b[k, n]), k, "bwd_end", batch))
    events.sort(key=lambda e: (e.time, e.block, e.phase))
    completions = e_b[k_total - 1]
    stats = RunStats(f"dsp{config.describe()}", makespan=float(e_b.max()),
                     steady_interval=_steady_interval(completions), completions=completions)
    return stats, events


def check_trace(events: list[SimEvent], cost: CostModel, config: PipelineConfig) -> None:
    """Replay a pipeline trace against queue capacities and FIFO order.

    The recurrence respects these by construction; this is the independent
    verifier. Occupancy is counted at producer phase-end and consumer
    phase-start instants, matching the runtime's push/pop points.
    """
    k_total = config.k
    pushes: dict[tuple[str, int], list] = {}
    pops: dict[tuple[str, int], list] = {}
    for e in events:
        if e.phase == "fwd_end" and e.block < k_total - 1:
            pushes.setdefault(("out", e.block), []).append((e.time, e.batch_index))
        if e.phase == "fwd_start" and e.block > 0:
            pops.setdefault(("out", e.block - 1), []).append((e.time, e.batch_index))
        if e.phase == "bwd_end" and e.block > 0:
            pushes.setdefault(("grad", e.block), []).append((e.time, e.batch_index))
        if e.phase == "bwd_start" and e.block < k_total - 1:
            pops.setdefault(("grad", e.block + 1), []).append((e.time, e.batch_index))
    for key, push_list in pushes.items():
        kind, idx = key
        pop_list = pops.get(key, [])
        prefill = config.p[idx] if kind == "out" else config.q[idx]
        capacity = prefill + 1
        for seq in (push_list, pop_list):
            batches = [b for _, b in seq]
            if batches != sorted(batches):
                raise AssertionError(f"{kind}[{idx}]: batch order not FIFO: {batches[:10]}")
        # pushes and pops sharing a timestamp may interleave freely, so bounds
        # are enforced on the occupancy between distinct instants
        timeline = sorted([(t, +1) for t, _ in push_list] + [(t, -1) for t, _ in pop_list])
        occ = prefill
        i = 0
        while i < len(timeline):
            t = timeline[i][0]
            while i < len(timeline) and timeline[i][0] == t:
                occ += timeline[i][1]
                i += 1
            if occ > capacity or occ < 0:
                raise AssertionError(
                    f"{kind}[{idx}]: occupancy {occ} outside [0, {capacity}] at t={t}"
                )


def write_trace_csv(path, events: list[SimEvent]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time", "block", "phase", "batch_index"])
        for e in events:
            w.writerow([f"{e.time:.9g}", e.block, e.phase, e.batch_index])


def straggler_comparison(
    schedules: list[tuple[str, PipelineConfig | None]],
    cost: CostModel,
    rhos: list[float],
    n_steps: int,
    n_seeds: int,
    prob: float = 1 / 3,
    seed: int = 0,
    granularity: str = "phase",
) -> list[dict]:
    """Median-over-seeds slowdown table: (makespan_perturbed / makespan_clean - 1) * 100."""
    if not schedules or not rhos:
        raise ValueError("need at least one schedule and one rho")
    rows = []
    for name, config in schedules:
        clean, _ = simulate(name if config is None else "dsp", cost, n_steps, config=config)
        for rho in rhos:
            slowdowns = []
            for i in range(n_seeds):
                model = StragglerModel(prob=prob, rho=rho, seed=derive_seed(seed, i),
                                       granularity=granularity)
                pert, _ = simulate(name if config is None else "dsp", cost, n_steps,
                                   config=config, straggler=model)
                slowdowns.append((pert.makespan / clean.makespan - 1.0) * 100.0)
            rows.append({
                "schedule": clean.schedule,
                "rho": rho,
                "median_slowdown_pct": float(np.median(slowdowns)),
                "clean_makespan": clean.makespan,
                "seeds": n_seeds,
            })
    return rows
