"""Queue-pipelined training with layer-wise stale parameters.

Each of the K blocks repeatedly runs the same loop body: pop a fresh
activation from below and push it through a delay queue, pop the stale
activation that the delay queue yields back, forward the fresh one upward,
recompute the block's forward on the stale input with *current* parameters,
combine with the error gradient popped from above, push the input gradient
downward, and update. Three bounded FIFO families carry the traffic:

    out_queues[k]  (capacity 1 + p[k])  activations from block k to k+1
    in_queues[k]   (capacity 1 + m[k])  block k's own delay line
    grad_queues[k] (capacity 1 + q[k])  error gradients from block k to k-1

with q[k] = m[k-1] - p[k-1] - m[k] forced by the requirement that the
gradient a block pops belongs to the same batch as the stale activation it
pops (asserted at runtime on every iteration). m[k] is exactly the number of
updates block k applies between producing an activation and consuming that
batch's gradient, i.e. its staleness.

The serial backend runs the K loop bodies round-robin in one thread; the
parallel backend runs one thread per block communicating only through the
queues. Both execute identical floating-point operation sequences, so with
stragglers off their parameter trajectories agree bit for bit -- that
equivalence is the module's central correctness argument and is what the
tests pin down.
"""

from __future__ import annotations

import hashlib
import json
import queue as _queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .blocks import Model, block_backward, block_forward, build_model
from .optim import LrSchedule, OptimizerState, apply_update, lr_at
from .rng import mix64
from .tensor import softmax_xent

WARMUP_POLICIES = ("faithful_zero_updates", "discard_warmup_updates")


class ConfigError(ValueError):
    """A queue-sizing constraint is violated; names the constraint and block."""

    def __init__(self, constraint: str, index: int, message: str):
        super().__init__(message)
        self.constraint = constraint
        self.index = index


class ProtocolError(AssertionError):
    """Queue protocol violation; impossible under a validated config."""


class DeadlockError(RuntimeError):
    """Parallel workers stopped making progress (watchdog)."""


@dataclass(frozen=True)
class PipelineConfig:
    k: int
    p: tuple[int, ...]
    m: tuple[int, ...]
    q: tuple[int, ...]
    warmup: str = "faithful_zero_updates"
    overlap_recompute: bool = True

    def describe(self) -> str:
        return f"(p={','.join(map(str, self.p))}; m={','.join(map(str, self.m))})"


@dataclass(frozen=True)
class StalenessProfile:
    per_block: tuple[int, ...]
    max: int


def validate_config(
    p,
    m,
    warmup: str = "faithful_zero_updates",
    overlap_recompute: bool = True,
) -> PipelineConfig:
    """Check the queue-sizing constraints and derive the gradient-queue depths.

    Constraints, checked in this order (first failure is reported):
      p_last_zero   p[K-1] == 0
      p_positive    p[k] > 0 for k < K-1
      m_positive    m[k] > 0 for k < K-1
      m_last_nonneg m[K-1] >= 0 (0 is the standard choice: the last block's
                    forward and backward share a timestamp)
      q_positive    q[k] = m[k-1] - p[k-1] - m[k] > 0 for 1 <= k <= K-1
    """
    p = tuple(int(v) for v in p)
    m = tuple(int(v) for v in m)
    if len(p) != len(m) or not p:
        raise ConfigError("length", 0, f"p and m must be equal-length, non-empty: p={p}, m={m}")
    k_total = len(p)
    if warmup not in WARMUP_POLICIES:
        raise ConfigError("warmup", 0, f"warmup must be one of {WARMUP_POLICIES}, got {warmup!r}")
    if p[-1] != 0:
        raise ConfigError("p_last_zero", k_total - 1, f"p[{k_total - 1}] = {p[-1]} must be 0 "
                          "(the last block sends no activations upward)")
    for k in range(k_total - 1):
        if p[k] <= 0:
            raise ConfigError("p_positive", k, f"p[{k}] = {p[k]} must be > 0")
    for k in range(k_total - 1):
        if m[k] <= 0:
            raise ConfigError("m_positive", k, f"m[{k}] = {m[k]} must be > 0")
    if m[-1] < 0:
        raise ConfigError("m_last_nonneg", k_total - 1, f"m[{k_total - 1}] = {m[-1]} must be >= 0")
    q = [0]
    for k in range(1, k_total):
        qk = m[k - 1] - p[k - 1] - m[k]
        if qk <= 0:
            raise ConfigError(
                "q_positive", k,
                f"q[{k}] = m[{k - 1}]-p[{k - 1}]-m[{k}] = {m[k - 1]}-{p[k - 1]}-{m[k]} = {qk} <= 0",
            )
        q.append(qk)
    return PipelineConfig(k_total, p, m, tuple(q), warmup, overlap_recompute)


def staleness_of(config: PipelineConfig) -> StalenessProfile:
    return StalenessProfile(per_block=config.m, max=max(config.m))


@dataclass(frozen=True)
class ActivationPacket:
    batch_index: int
    tensor: np.ndarray
    labels: np.ndarray  # consumed only at the last block


@dataclass(frozen=True)
class GradPacket:
    batch_index: int
    tensor: np.ndarray


class _SerialQueue:
    """Bounded FIFO for single-threaded use; violations are bugs, not waits."""

    __slots__ = ("name", "capacity", "items")

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self.items: deque = deque()

    def put(self, pkt) -> None:
        if len(self.items) >= self.capacity:
            raise ProtocolError(f"push to full queue {self.name} (capacity {self.capacity})")
        self.items.append(pkt)

    def get(self):
        if not self.items:
            raise ProtocolError(f"pop from empty queue {self.name}")
        return self.items.popleft()

    def __len__(self) -> int:
        return len(self.items)


class _Aborted(Exception):
    pass


class _ThreadQueue:
    """Bounded blocking FIFO; put/get wake up if the engine aborts."""

    __slots__ = ("name", "capacity", "q", "should_abort")

    def __init__(self, name: str, capacity: int, should_abort: Callable[[], bool]):
        self.name = name
        self.capacity = capacity
        self.q: _queue.Queue = _queue.Queue(maxsize=capacity)
        self.should_abort = should_abort

    def put(self, pkt) -> None:
        while True:
            try:
                self.q.put(pkt, timeout=0.05)
                return
            except _queue.Full:
                if self.should_abort():
                    raise _Aborted()

    def get(self):
        while True:
            try:
                return self.q.get(timeout=0.05)
            except _queue.Empty:
                if self.should_abort():
                    raise _Aborted()

    def __len__(self) -> int:
        return self.q.qsize()


@dataclass
class LogRecord:
    step: int
    block: int
    batch_index: int
    grad_norm: float
    loss: float | None = None
    grad_deviation: float | None = None
    wall_nanos: int = 0


class TrainLog:
    """Per-(step, block) training records with a stable content checksum."""

    SCHEMA_VERSION = 1

    def __init__(self, records: list[LogRecord] | None = None):
        self.records = records or []

    def sorted(self) -> list[LogRecord]:
        return sorted(self.records, key=lambda r: (r.step, r.block))

    def checksum(self) -> str:
        """SHA-256 over the numeric trajectory (timing and diagnostics excluded)."""
        h = hashlib.sha256()
        for r in self.sorted():
            loss_hex = "-" if r.loss is None else float(r.loss).hex()
            h.update(f"{r.step}|{r.block}|{r.batch_index}|{loss_hex}|{float(r.grad_norm).hex()}\n".encode())
        return h.hexdigest()

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"schema_version": self.SCHEMA_VERSION, "kind": "train_log"}) + "\n")
            for r in self.sorted():
                f.write(json.dumps({
                    "step": r.step,
                    "block": r.block,
                    "batch_index": r.batch_index,
                    "loss": r.loss,
                    "grad_norm": r.grad_norm,
                    "grad_deviation": r.grad_deviation,
                    "wall_nanos": r.wall_nanos,
                }) + "\n")

    def losses(self) -> list[tuple[int, float]]:
        return [(r.step, r.loss) for r in self.sorted() if r.loss is not None]


def bp_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> tuple[list[np.ndarray], float]:
    """Plain chained backpropagation at the model's current parameters."""
    tapes = []
    h = x
    for block in model.blocks:
        h, tape = block_forward(block, h, record=True)
        tapes.append(tape)
    loss, upstream = softmax_xent(h, labels)
    grads: list[np.ndarray | None] = [None] * model.k
    for k in range(model.k - 1, -1, -1):
        grads[k], upstream = block_backward(model.blocks[k], tapes[k], upstream)
    return grads, loss


def stale_gradient(
    model: Model,
    fwd_params: list[np.ndarray],
    bwd_params: list[np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
    loss_and_grad: Callable = softmax_xent,
) -> tuple[list[np.ndarray], float]:
    """The recompute-based gradient for one batch, as a standalone operator.

    Block inputs are produced by a forward chain under ``fwd_params``; every
    block is then re-run on its recorded input under ``bwd_params`` and
    differentiated, chaining the error gradient downward. With identical
    snapshots this reduces bit-for-bit to ``bp_gradient``. The runtime engine
    realizes exactly this computation through its queues; this operator
    exists as an independent cross-check.
    """
    work = model.clone()
    k_total = work.k
    inputs = []
    h = x
    for k, block in enumerate(work.blocks):
        block.params[:] = fwd_params[k]
        inputs.append(h)
        if k < k_total - 1:
            h, _ = block_forward(block, h)
    for k, block in enumerate(work.blocks):
        block.params[:] = bwd_params[k]
    top, tape = block_forward(work.blocks[-1], inputs[-1], record=True)
    loss, upstream = loss_and_grad(top, labels)
    grads: list[np.ndarray | None] = [None] * k_total
    for k in range(k_total - 1, -1, -1):
        if k < k_total - 1:
            _, tape = block_forward(work.blocks[k], inputs[k], record=True)
        grads[k], upstream = block_backward(work.blocks[k], tape, upstream)
    return grads, loss


def grad_deviation(
    model: Model,
    bwd_params: list[np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
    pipeline_grads: list[np.ndarray],
) -> list[dict]:
    """Per-block distance between the runtime gradient and plain BP.

    BP is evaluated at the backward-time (current) parameter snapshot on the
    same batch. Returns one row per block with the raw L2 distance and the
    per-parameter value raw / d_k.
    """
    work = model.clone()
    work.load_params(bwd_params)
    bp_grads, _ = bp_gradient(work, x, labels)
    rows = []
    for k, (gp, gb) in enumerate(zip(pipeline_grads, bp_grads)):
        raw = float(np.sqrt(((gp - gb) ** 2).sum()))
        rows.append({"block": k, "raw": raw, "per_param": raw / max(1, gp.size)})
    return rows


@dataclass
class DeviationSample:
    """Everything recorded for one sampled batch index."""

    batch_index: int
    x: np.ndarray | None = None
    labels: np.ndarray | None = None
    fwd: dict = field(default_factory=dict)       # k -> params copy at fresh-forward time
    bwd: dict = field(default_factory=dict)       # k -> params copy at backward time
    grads: dict = field(default_factory=dict)     # k -> runtime grad copy
    upstream: dict = field(default_factory=dict)  # k -> ||error gradient received||
    steps: dict = field(default_factory=dict)     # k -> engine iteration of the backward


@dataclass
class DeviationRow:
    batch_index: int
    raw: list[float]            # ||g_k - bp_k|| with BP at the backward snapshot
    per_param: list[float]      # raw / d_k
    raw_fwd: list[float]        # ||g_k - bp_k|| with BP at the forward snapshot
    diffs: list[float]          # ||x_k(bwd) - x_k(fwd)||
    upstream_norms: list[float]
    steps: list[int]            # iteration at which block k ran this batch's backward


class DeviationTracker:
    """Collects per-batch snapshots during a run and scores them against BP.

    Block k contributes at two moments: when it fresh-forwards a sampled
    batch (forward-time parameters) and when it backward-processes it
    (backward-time parameters plus the runtime gradient). The last block has
    zero staleness, so its backward contribution covers both. Once all K
    blocks have reported, the batch is scored: BP at the backward snapshot
    on the same inputs.
    """

    def __init__(self, every: int, model: Model):
        if every <= 0:
            raise ValueError("sampling interval must be positive")
        self.every = every
        self._template = build_model(model.layers, model.boundaries)
        self._k = model.k
        self._pending: dict[int, DeviationSample] = {}
        self._rows: list[DeviationRow] = []
        self._lock = threading.Lock()

    def wants(self, batch_index: int) -> bool:
        return batch_index >= 0 and batch_index % self.every == 0

    def on_input(self, batch_index: int, x: np.ndarray, labels: np.ndarray) -> None:
        with self._lock:
            s = self._pending.setdefault(batch_index, DeviationSample(batch_index))
            s.x, s.labels = x, labels

    def on_forward(self, k: int, batch_index: int, params: np.ndarray) -> None:
        with self._lock:
            s = self._pending.setdefault(batch_index, DeviationSample(batch_index))
            s.fwd[k] = params

    def on_backward(
        self, k: int, batch_index: int, params: np.ndarray, grad: np.ndarray,
        upstream_norm: float, step: int,
    ) -> None:
        with self._lock:
            s = self._pending.setdefault(batch_index, DeviationSample(batch_index))
            s.bwd[k] = params
            if k == self._k - 1:
                s.fwd.setdefault(k, params)
            s.grads[k] = grad
            s.upstream[k] = upstream_norm
            s.steps[k] = step
            if len(s.bwd) == self._k and s.x is not None:
                del self._pending[batch_index]
                self._rows.append(self._score(s))

    def _score(self, s: DeviationSample) -> DeviationRow:
        bwd = [s.bwd[k] for k in range(self._k)]
        fwd = [s.fwd[k] for k in range(self._k)]
        grads = [s.grads[k] for k in range(self._k)]
        rows = grad_deviation(self._template, bwd, s.x, s.labels, grads)
        self._template.load_params(fwd)
        bp_fwd, _ = bp_gradient(self._template, s.x, s.labels)
        raw_fwd = [float(np.sqrt(((g - b) ** 2).sum())) for g, b in zip(grads, bp_fwd)]
        diffs = [float(np.sqrt(((s.bwd[k] - s.fwd[k]) ** 2).sum())) for k in range(self._k)]
        return DeviationRow(
            batch_index=s.batch_index,
            raw=[r["raw"] for r in rows],
            per_param=[r["per_param"] for r in rows],
            raw_fwd=raw_fwd,
            diffs=diffs,
            upstream_norms=[s.upstream[k] for k in range(self._k)],
            steps=[s.steps[k] for k in range(self._k)],
        )

    def rows(self) -> list[DeviationRow]:
        return sorted(self._rows, key=lambda r: r.batch_index)


@dataclass
class RuntimeStraggler:
    """Injects random sleeps into parallel workers; semantics must not change."""

    prob: float = 1 / 3
    delay_s: float = 0.001
    seed: int = 0

    def sleep_maybe(self, block: int, step: int, phase: int) -> None:
        z = mix64(self.seed ^ mix64((block + 1) * 0x9E37 + step * 2 + phase))
        if (z >> 11) * 2.0**-53 < self.prob:
            time.sleep(self.delay_s)


class TrainEngine:
    """Resumable K-block training pipeline over bounded FIFO queues.

    ``run(n)`` advances every block by exactly n iterations and may be called
    repeatedly (for per-epoch evaluation between chunks); queue contents
    persist across calls. The same loop body backs both backends.
    """

    def __init__(
        self,
        model: Model,
        config: PipelineConfig,
        data_stream: Iterator[tuple[np.ndarray, np.ndarray]],
        schedule: LrSchedule,
        rule: str = "sgd",
        beta: float = 0.0,
        s: float = 1.0,
        weight_decay: float = 0.0,
        backend: str = "serial",
        deviation_every: int = 0,
        straggler: RuntimeStraggler | None = None,
        watchdog_s: float = 120.0,
    ):
        if config.k != model.k:
            raise ConfigError("k", 0, f"config K={config.k} but model has {model.k} blocks")
        if backend not in ("serial", "parallel"):
            raise ValueError(f"backend must be 'serial' or 'parallel', got {backend!r}")
        self.model = model
        self.config = config
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.backend = backend
        self.straggler = straggler
        self.watchdog_s = watchdog_s
        self._data = data_stream
        self._abort = threading.Event()
        self._first_batch = next(data_stream)  # peeked to size the warmup packets
        self._pending_first = True
        batch_size = self._first_batch[0].shape[0]

        k_total = config.k
        cum_p = [0] * (k_total + 1)
        for k in range(k_total):
            cum_p[k + 1] = cum_p[k] + config.p[k]
        self._cum_p = cum_p

        def make_queue(name, capacity, threaded):
            if threaded and backend == "parallel":
                return _ThreadQueue(name, capacity, self._abort.is_set)
            return _SerialQueue(name, capacity)

        dims = model.block_input_dims
        self.out_queues = []
        for k in range(k_total - 1):
            qk = make_queue(f"out[{k}]", 1 + config.p[k], threaded=True)
            for t in range(config.p[k]):
                qk.put(self._zero_activation(t - cum_p[k + 1], dims[k + 1], batch_size))
            self.out_queues.append(qk)
        self.in_queues = []
        for k in range(k_total):
            # single-producer single-consumer within one block: never blocks
            qk = make_queue(f"in[{k}]", 1 + config.m[k], threaded=False)
            for t in range(config.m[k]):
                qk.put(self._zero_activation(t - cum_p[k] - config.m[k], dims[k], batch_size))
            self.in_queues.append(qk)
        self.grad_queues: list = [None]
        for k in range(1, k_total):
            qk = make_queue(f"grad[{k}]", 1 + config.q[k], threaded=True)
            for t in range(config.q[k]):
                qk.put(GradPacket(t - cum_p[k - 1] - config.m[k - 1], np.zeros((batch_size, dims[k]))))
            self.grad_queues.append(qk)

        self.opt_states = [
            OptimizerState.for_params(rule, b.params, beta=beta, s=s) for b in model.blocks
        ]
        self.block_steps = [0] * k_total
        self._block_logs: list[list[LogRecord]] = [[] for _ in range(k_total)]
        self.tracker = DeviationTracker(deviation_every, model) if deviation_every else None
        self._worker_errors: list[tuple[int, BaseException]] = []
        self._data_lock = threading.Lock()

    @staticmethod
    def _zero_activation(batch_index: int, dim: int, batch_size: int) -> ActivationPacket:
        return ActivationPacket(
            batch_index, np.zeros((batch_size, dim)), np.zeros(batch_size, dtype=np.int64)
        )

    def _next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pending_first:
            self._pending_first = False
            return self._first_batch
        return next(self._data)

    # ---- the Algorithm-2-shaped loop body, shared by both backends ----

    def _iterate_block(self, k: int) -> None:
        n = self.block_steps[k]
        cfg = self.config
        block = self.model.blocks[k]
        last = cfg.k - 1

        if k == 0:
            x, labels = self._next_batch()
            fresh = ActivationPacket(n, x, labels)
        else:
            fresh = self.out_queues[k - 1].get()
        self.in_queues[k].put(fresh)
        stale = self.in_queues[k].get()

        if self.straggler is not None:
            self.straggler.sleep_maybe(k, n, 0)

        track_fresh = self.tracker is not None and self.tracker.wants(fresh.batch_index)
        track_stale = self.tracker is not None and self.tracker.wants(stale.batch_index)
        if track_fresh and k == 0:
            self.tracker.on_input(fresh.batch_index, fresh.tensor, fresh.labels)
        if track_fresh and k < last:
            self.tracker.on_forward(k, fresh.batch_index, block.params.copy())

        loss = None
        if k < last:
            h_out, _ = block_forward(block, fresh.tensor)
            self.out_queues[k].put(ActivationPacket(fresh.batch_index, h_out, fresh.labels))
            _, tape = block_forward(block, stale.tensor, record=True)
            gpkt = self.grad_queues[k + 1].get()
            if gpkt.batch_index != stale.batch_index:
                raise ProtocolError(
                    f"block {k} step {n}: gradient batch {gpkt.batch_index} "
                    f"does not meet activation batch {stale.batch_index}"
                )
            upstream = gpkt.tensor
        else:
            h_top, tape = block_forward(block, stale.tensor, record=True)
            loss, upstream = softmax_xent(h_top, stale.labels)

        if self.straggler is not None:
            self.straggler.sleep_maybe(k, n, 1)

        grad_params, grad_input = block_backward(block, tape, upstream)
        if k > 0:
            self.grad_queues[k].put(GradPacket(stale.batch_index, grad_input))

        if track_stale:
            self.tracker.on_backward(
                k, stale.batch_index, block.params.copy(), grad_params.copy(),
                float(np.sqrt((np.asarray(upstream) ** 2).sum())), n,
            )

        g = grad_params
        if self.weight_decay != 0.0:
            g = g + self.weight_decay * block.params
        discard = cfg.warmup == "discard_warmup_updates" and stale.batch_index < 0
        if not discard:
            block.params = apply_update(self.opt_states[k], block.params, g, lr_at(self.schedule, n))

        self._block_logs[k].append(LogRecord(
            step=n,
            block=k,
            batch_index=stale.batch_index,
            grad_norm=float(np.sqrt((grad_params**2).sum())),
            loss=loss,
            wall_nanos=time.monotonic_ns(),
        ))
        self.block_steps[k] = n + 1

    # ---- drivers ----

    def run(self, n_steps: int) -> None:
        if n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if n_steps == 0:
            return
        if self.backend == "serial":
            for _ in range(n_steps):
                for k in range(self.config.k):
                    self._iterate_block(k)
        else:
            self._run_parallel(n_steps)

    def _run_parallel(self, n_steps: int) -> None:
        self._abort.clear()
        self._worker_errors.clear()

        def work(k: int) -> None:
            try:
                for _ in range(n_steps):
                    if self._abort.is_set():
                        return
                    self._iterate_block(k)
            except _Aborted:
                pass
            except BaseException as exc:  # propagate worker panics to the caller
                self._worker_errors.append((k, exc))
                self._abort.set()

        threads = [
            threading.Thread(target=work, args=(k,), name=f"block-{k}", daemon=True)
            for k in range(self.config.k)
        ]
        for t in threads:
            t.start()
        deadline = time.monotonic() + self.watchdog_s
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()))
        if any(t.is_alive() for t in threads):
            self._abort.set()
            for t in threads:
                t.join(5.0)
            if not self._worker_errors:
                occupancy = {q.name: len(q) for q in self.out_queues}
                occupancy.update({q.name: len(q) for q in self.grad_queues[1:]})
                raise DeadlockError(
                    f"workers stalled after {self.watchdog_s}s; queue occupancy {occupancy} "
                    f"steps {self.block_steps}"
                )
        if self._worker_errors:
            k, exc = self._worker_errors[0]
            raise RuntimeError(f"worker for block {k} failed") from exc

    # ---- results ----

    @property
    def log(self) -> TrainLog:
        merged: list[LogRecord] = []
        for rows in self._block_logs:
            merged.extend(rows)
        log = TrainLog(sorted(merged, key=lambda r: (r.step, r.block)))
        if self.tracker is not None:
            by_key = {}
            for row in self.tracker.rows():
                for k, step in enumerate(row.steps):
                    by_key[(step, k)] = row.per_param[k]
            for r in log.records:
                r.grad_deviation = by_key.get((r.step, r.block))
        return log

    def deviation_rows(self) -> list[DeviationRow]:
        return self.tracker.rows() if self.tracker is not None else []

    def realized_staleness(self) -> list[int]:
        """Fresh-vs-backward batch lag per block over logged steps (equals m[k])."""
        lags = []
        for k in range(self.config.k):
            rows = [r for r in self._block_logs[k] if r.batch_index >= 0]
            if not rows:
                lags.append(0)
                continue
            lag = {(r.step - self._cum_p[k]) - r.batch_index for r in rows}
            if len(lag) != 1:
                raise ProtocolError(f"block {k} staleness drifted: {sorted(lag)}")
            lags.append(lag.pop())
        return lags
