"""In-process synchronization layer for n logical workers.

Workers' local computations may run on a thread pool; every cross-worker
read happens in :meth:`Fabric.reduce_mean`, which sums in a fixed order so
results never depend on scheduling.  All traffic is booked in a
:class:`CommLedger`.
"""
from __future__ import annotations

import enum
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

from .compressors import CompressedMessage, ProtocolError, Support, make_message

T = TypeVar("T")


class ReductionOrder(str, enum.Enum):
    SEQUENTIAL = "sequential"
    TREE = "tree"


class RunAborted(RuntimeError):
    def __init__(self, round: int, worker: int | None = None, reason: str = ""):
        super().__init__(f"run aborted at round {round}" + (f" by worker {worker}" if worker is not None else "") + (f": {reason}" if reason else ""))
        self.round, self.worker, self.reason = round, worker, reason


@dataclass(frozen=True)
class FabricConfig:
    n: int
    reduction_order: ReductionOrder = ReductionOrder.SEQUENTIAL
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "reduction_order", ReductionOrder(self.reduction_order))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class RoundTraffic:
    uplink_bits: int = 0
    uplink_value_bits: int = 0
    downlink_bits: int = 0
    downlink_value_bits: int = 0


@dataclass
class CommLedger:
    rounds: dict[int, RoundTraffic] = field(default_factory=dict)

    def book(self, round: int, uplink: Sequence[CompressedMessage], reduced: CompressedMessage, n: int) -> None:
        up = sum(m.payload_bits for m in uplink)
        if up == 0 and reduced.payload_bits == 0:
            return
        row = self.rounds.setdefault(round, RoundTraffic())
        row.uplink_bits += up
        row.uplink_value_bits += sum(m.value_bits for m in uplink)
        row.downlink_bits += n * reduced.payload_bits
        row.downlink_value_bits += n * reduced.value_bits

    @property
    def rounds_with_traffic(self) -> int:
        return len(self.rounds)

    def totals(self, up_to: int | None = None) -> RoundTraffic:
        out = RoundTraffic()
        for r, row in self.rounds.items():
            if up_to is not None and r > up_to:
                continue
            out.uplink_bits += row.uplink_bits
            out.uplink_value_bits += row.uplink_value_bits
            out.downlink_bits += row.downlink_bits
            out.downlink_value_bits += row.downlink_value_bits
        return out


def ledger_report(ledger: CommLedger) -> list[dict]:
    """Per-round rows in round order, each carrying running totals."""
    rows = []
    cum = RoundTraffic()
    for r in sorted(ledger.rounds):
        row = ledger.rounds[r]
        cum.uplink_bits += row.uplink_bits
        cum.uplink_value_bits += row.uplink_value_bits
        cum.downlink_bits += row.downlink_bits
        cum.downlink_value_bits += row.downlink_value_bits
        rows.append(
            {
                "round": r,
                "uplink_bits": row.uplink_bits,
                "uplink_value_bits": row.uplink_value_bits,
                "downlink_bits": row.downlink_bits,
                "downlink_value_bits": row.downlink_value_bits,
                "cum_uplink_bits": cum.uplink_bits,
                "cum_uplink_value_bits": cum.uplink_value_bits,
                "cum_downlink_bits": cum.downlink_bits,
                "cum_downlink_value_bits": cum.downlink_value_bits,
            }
        )
    return rows


def _tree_sum(vs: list[np.ndarray]) -> np.ndarray:
    while len(vs) > 1:
        paired = [vs[i] + vs[i + 1] for i in range(0, len(vs) - 1, 2)]
        if len(vs) % 2:
            paired.append(vs[-1])
        vs = paired
    return vs[0].copy()


def mean_vectors(vectors: Sequence[np.ndarray], order: ReductionOrder = ReductionOrder.SEQUENTIAL) -> np.ndarray:
    """Coordinate-wise mean; identical inputs come back bit-for-bit."""
    first = vectors[0]
    if all(v is first or np.array_equal(v, first) for v in vectors[1:]):
        # n * v / n is not always v in floating point
        return first.copy()
    if order is ReductionOrder.TREE:
        total = _tree_sum(list(vectors))
    else:
        total = vectors[0].copy()
        for v in vectors[1:]:
            total += v
    return total / len(vectors)


def reduce_mean(
    messages: Sequence[CompressedMessage],
    order: ReductionOrder = ReductionOrder.SEQUENTIAL,
) -> CompressedMessage:
    """Coordinate-wise mean of the workers' messages; support is the union."""
    if not messages:
        raise ProtocolError("nothing to reduce")
    if len(messages) == 1:
        return messages[0]
    first = messages[0]
    d = first.d
    for m in messages[1:]:
        if m.d != d:
            raise ProtocolError(f"message length mismatch: {d} vs {m.d}")
        if (first.support is Support.BLOCKS or m.support is Support.BLOCKS) and not first.same_support(m):
            raise ProtocolError("blockwise supports differ across workers (seed desynchronization?)")
    dense = mean_vectors([m.dense for m in messages], order)
    supports = {m.support for m in messages}
    if Support.FULL in supports:
        return make_message(dense, Support.FULL)
    if supports == {Support.BLOCKS}:
        return make_message(dense, Support.BLOCKS, first.selection, first.num_blocks)
    union = np.unique(np.concatenate([m.selection for m in messages]))
    return make_message(dense, Support.INDICES, union)


class RoundBarrier:
    """Reusable barrier for n worker threads that also carries run aborts.

    ``wait(round)`` blocks until all n parties arrive for that round.  If any
    party calls ``abort(round)``, every current and future waiter raises
    :class:`RunAborted` with that round.
    """

    def __init__(self, n: int, timeout: float | None = None):
        self.n = n
        self._barrier = threading.Barrier(n, action=self._close_round, timeout=timeout)
        self._lock = threading.Lock()
        self._aborted: RunAborted | None = None
        self._round: int | None = None

    def wait(self, round: int, worker: int | None = None) -> None:
        with self._lock:
            if self._aborted is not None:
                raise self._aborted
            if self._round is None:
                self._round = round
            elif self._round != round:
                raise ProtocolError(f"worker {worker} arrived for round {round} while round {self._round} is open")
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise self._aborted or RunAborted(round, worker, "barrier broken") from None

    def _close_round(self) -> None:
        # runs in one thread after all n arrive and before any is released
        self._round = None

    def abort(self, round: int, worker: int | None = None, reason: str = "") -> None:
        with self._lock:
            if self._aborted is None:
                self._aborted = RunAborted(round, worker, reason)
        self._barrier.abort()

    @property
    def aborted(self) -> RunAborted | None:
        return self._aborted


class Fabric:
    def __init__(self, config: FabricConfig):
        self.config = config
        self.ledger = CommLedger()
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    @property
    def n(self) -> int:
        return self.config.n

    def map(self, fn: Callable[[int], T]) -> list[T]:
        """Run ``fn(worker)`` for every worker; returns once all have finished.

        Results are in worker order whatever the thread count.
        """
        if self._pool is None:
            return [fn(i) for i in range(self.n)]
        return list(self._pool.map(fn, range(self.n)))

    def reduce_mean(self, messages: Sequence[CompressedMessage], round: int) -> CompressedMessage:
        if len(messages) != self.n:
            raise ProtocolError(f"fabric expects {self.n} contributions, got {len(messages)}")
        reduced = reduce_mean(messages, self.config.reduction_order)
        self.ledger.book(round, messages, reduced, self.n)
        return reduced

    def mean(self, vectors: Sequence[np.ndarray]) -> np.ndarray:
        """Uncounted mean, for observers (e.g. metrics on the average model)."""
        return mean_vectors(vectors, self.config.reduction_order)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
