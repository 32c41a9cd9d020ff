"""Pool lifecycle and the prediction-serving path.

Queries are answered sequentially (seq order is part of the contract)
against an active pool; after Q_max answers the active pool expires and
the head of a standby buffer takes over atomically. Every swap enqueues
one background generation job to refill the buffer, so generation never
sits on the serving path. An empty buffer at swap time is a hard error:
reusing an expired pool would silently defeat the defense.
"""

import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExhausted, RejectedInput
from .ood import SchedulerKind, schedule_most_confident, schedule_ood

EWMA_ALPHA = 0.2   # weight of the newest timing measurement


def compute_qmax(t_n: float, k_t: int, t_q: float) -> int:
    """Smallest query budget that keeps the buffer ahead of renewal.

    ceil(T_n / (K_t * T_q)), nudged up if float rounding ever lands below
    the defining inequality K_t * Q_max * T_q >= T_n.
    """
    if t_n <= 0 or k_t <= 0 or t_q <= 0:
        raise RejectedInput("timings and buffer depth must be positive")
    q = math.ceil(t_n / (k_t * t_q))
    while k_t * q * t_q < t_n:
        q += 1
    return q


@dataclass
class QueryRecord:
    seq: int
    pool_id: int
    student: int
    routed_to: str
    prediction: int
    ood_score: float | None


class ServiceState:
    """Mutable serving state: active pool, buffer, counters, timings.

    `pools[0]` becomes active, the rest seed the FIFO buffer. When a
    pool_factory is given, each swap submits factory(next_pool_id) to a
    small worker pool (at most max_jobs in flight) and appends the result
    to the buffer on completion. T_q and T_n are exponentially weighted
    rolling means of measured per-query and per-generation times.
    """

    def __init__(self, f_b, pools, q_max: int, scheduler=SchedulerKind.MOST_CONFIDENT,
                 detector=None, pool_factory=None, max_jobs: int = 2):
        if q_max < 1:
            raise RejectedInput("q_max must be at least 1")
        if not pools:
            raise RejectedInput("need at least one pool to serve")
        if isinstance(scheduler, str):
            scheduler = SchedulerKind(scheduler)
        if scheduler is SchedulerKind.OOD_POWERED and detector is None:
            raise RejectedInput("ood_powered scheduling needs a detector")
        self.f_b = f_b
        self.active_pool = pools[0]
        self.buffer = deque(pools[1:])
        self.q_max = q_max
        self.scheduler = scheduler
        self.detector = detector
        self.pool_factory = pool_factory
        self.max_jobs = max_jobs
        self.query_count = 0
        self.seq = 0
        self.t_q = None
        self.t_n = None
        self.generation_backlog = 0
        self._next_pool_id = max(p.pool_id for p in pools) + 1
        self._lock = threading.RLock()
        self._executor = ThreadPoolExecutor(max_workers=max_jobs) \
            if pool_factory else None

    def close(self):
        if self._executor:
            self._executor.shutdown(wait=True)

    def _ewma(self, old, new):
        return new if old is None else (1 - EWMA_ALPHA) * old + EWMA_ALPHA * new


def _route(state: ServiceState, x):
    if state.scheduler is SchedulerKind.OOD_POWERED:
        return schedule_ood(state.active_pool, state.detector, state.f_b, x)
    idx, probs = schedule_most_confident(state.active_pool, x)
    routed = "defended" if state.active_pool.students[idx].adv_trained \
        else "undefended"
    return idx, probs, routed, None


def handle_query(state: ServiceState, x):
    """Answer one query; swap pools when the budget is exhausted.

    Returns (predicted class, QueryRecord). The swap happens after the
    Q_max-th answer and before returning, so the next query always sees
    the fresh pool; its cost is a buffer pop, never pool generation.
    """
    with state._lock:
        start = time.perf_counter()
        idx, probs, routed, score = _route(state, x)
        pred = int(np.argmax(probs))
        record = QueryRecord(state.seq, state.active_pool.pool_id, idx,
                             routed, pred, score)
        state.seq += 1
        state.query_count += 1
        state.t_q = state._ewma(state.t_q, time.perf_counter() - start)
        if state.query_count >= state.q_max:
            renew_pool(state)
        return pred, record


def renew_pool(state: ServiceState) -> ServiceState:
    """Activate the buffer head and kick off one refill job.

    Intended to fire at budget exhaustion (handle_query does this) or on
    operator command. Raises BudgetExhausted if the buffer is empty - the
    renewal inequality was violated by configuration.
    """
    with state._lock:
        if not state.buffer:
            raise BudgetExhausted(
                "buffer empty at pool swap; lower Q_max or deepen the buffer")
        state.active_pool = state.buffer.popleft()
        state.query_count = 0
        if state.pool_factory and state.generation_backlog < state.max_jobs:
            state.generation_backlog += 1
            pid = state._next_pool_id
            state._next_pool_id += 1
            state._executor.submit(_generate_into_buffer, state, pid)
    return state


def _generate_into_buffer(state: ServiceState, pool_id: int):
    start = time.perf_counter()
    try:
        pool = state.pool_factory(pool_id)
    except Exception:
        with state._lock:
            state.generation_backlog -= 1
        raise
    elapsed = time.perf_counter() - start
    with state._lock:
        state.buffer.append(pool)
        state.t_n = state._ewma(state.t_n, elapsed)
        state.generation_backlog -= 1


# --- newline-delimited wire protocol and audit log -----------------------
#
# Request frame:   predict,<f1>,...,<fd>
# Response frame:  <class>,<pool_id>,<seq>[,<ood score>]
# Error frame:     error,<message>        (session continues)
# Audit log: CSV, one row per answered query.

AUDIT_HEADER = "seq,pool_id,student,routed_to,prediction,ood_score"


def format_audit_row(r: QueryRecord) -> str:
    score = "" if r.ood_score is None else repr(r.ood_score)
    return f"{r.seq},{r.pool_id},{r.student},{r.routed_to},{r.prediction},{score}"


def read_audit_csv(path):
    """Parse an audit log back into QueryRecord objects."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != AUDIT_HEADER:
            raise RejectedInput(f"unexpected audit header {header!r}")
        for line in f:
            seq, pool_id, student, routed, pred, score = line.strip().split(",")
            records.append(QueryRecord(int(seq), int(pool_id), int(student),
                                       routed, int(pred),
                                       float(score) if score else None))
    return records


def _parse_frame(line: str, dim: int):
    parts = line.strip().split(",")
    if not parts or parts[0] != "predict":
        raise RejectedInput("frame must start with 'predict'")
    if len(parts) != dim + 1:
        raise RejectedInput(f"expected {dim} features, got {len(parts) - 1}")
    try:
        return np.array([float(v) for v in parts[1:]])
    except ValueError as err:
        raise RejectedInput(f"bad feature value: {err}") from None


def serve(state: ServiceState, lines_in, lines_out, audit_path=None):
    """Run the request loop until EOF; flush the audit log on the way out.

    `lines_in` / `lines_out` are line-oriented text streams (stdin/stdout
    or a socket makefile). Malformed frames produce an error frame and the
    session continues. Returns the number of answered queries.
    """
    dim = state.f_b.input_dim
    audit = open(audit_path, "w", encoding="utf-8") if audit_path else None
    answered = 0
    try:
        if audit:
            audit.write(AUDIT_HEADER + "\n")
        for line in lines_in:
            if not line.strip():
                continue
            try:
                x = _parse_frame(line, dim)
                pred, record = handle_query(state, x)
            except (RejectedInput, BudgetExhausted) as err:
                lines_out.write(f"error,{err}\n")
                lines_out.flush()
                if isinstance(err, BudgetExhausted):
                    break
                continue
            suffix = "" if record.ood_score is None else f",{record.ood_score!r}"
            lines_out.write(f"{pred},{record.pool_id},{record.seq}{suffix}\n")
            lines_out.flush()
            if audit:
                audit.write(format_audit_row(record) + "\n")
            answered += 1
    finally:
        if audit:
            audit.flush()
            audit.close()
    return answered
