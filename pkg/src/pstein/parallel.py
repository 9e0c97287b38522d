"""Bulk-synchronous collective communication over an in-process worker pool.

Workers compute independently between named collective points; allgather
and allreduce_sum are the only synchronization.  Reductions are evaluated
in rank order by every worker, so results are identical on all workers and
stable across runs; different worker counts agree up to floating-point
summation order.
"""

import threading
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import ShapeMismatch


@dataclass
class Partition:
    """Contiguous split of N particles over K workers (K must divide N)."""

    particles: int
    workers: int

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.particles % self.workers != 0:
            raise ValueError(
                f"{self.workers} workers must divide {self.particles} particles")
        self.block = self.particles // self.workers

    def bounds(self, rank):
        return rank * self.block, (rank + 1) * self.block


@dataclass
class CommStats:
    """Floats contributed to collectives, for communication accounting."""

    allgather_floats: int = 0
    allreduce_floats: int = 0
    calls: int = 0

    def total(self):
        return self.allgather_floats + self.allreduce_floats


class SerialCollectives:
    """Single-worker backend: gathers and reductions are identities."""

    def __init__(self):
        self.size = 1
        self.rank = 0
        self.stats = CommStats()

    def allgather(self, local):
        local = np.asarray(local)
        self.stats.allgather_floats += local.size
        self.stats.calls += 1
        return local.copy()

    def allreduce_sum(self, local):
        local = np.asarray(local)
        self.stats.allreduce_floats += local.size
        self.stats.calls += 1
        return local.copy()

    def barrier(self):
        pass


class _SharedPhase:
    """Slot storage plus a reusable barrier for one pool of workers."""

    def __init__(self, size):
        self.size = size
        self.slots = [None] * size
        self.barrier = threading.Barrier(size)


class ThreadCollectives:
    """One worker's handle onto the shared-memory collective state."""

    def __init__(self, shared, rank):
        self._shared = shared
        self.size = shared.size
        self.rank = rank
        self.stats = CommStats()

    def _exchange(self, local):
        shared = self._shared
        shared.slots[self.rank] = np.asarray(local)
        shared.barrier.wait()
        blocks = list(shared.slots)
        first = blocks[0]
        for blk in blocks[1:]:
            if blk.shape[1:] != first.shape[1:]:
                raise ShapeMismatch(
                    f"inconsistent block shapes {blk.shape} vs {first.shape}")
        # second barrier so nobody overwrites a slot a peer is still reading
        shared.barrier.wait()
        return blocks

    def allgather(self, local):
        local = np.asarray(local)
        self.stats.allgather_floats += local.size
        self.stats.calls += 1
        blocks = self._exchange(local)
        return np.concatenate([np.atleast_1d(b) for b in blocks], axis=0)

    def allreduce_sum(self, local):
        local = np.asarray(local)
        self.stats.allreduce_floats += local.size
        self.stats.calls += 1
        blocks = self._exchange(local)
        if any(b.shape != blocks[0].shape for b in blocks):
            raise ShapeMismatch("allreduce blocks must share one shape")
        total = blocks[0].astype(float, copy=True)
        for blk in blocks[1:]:
            total += blk
        return total

    def barrier(self):
        self._shared.barrier.wait()


def make_pool(workers):
    """Per-rank collective handles sharing one barrier and slot array."""
    shared = _SharedPhase(workers)
    return [ThreadCollectives(shared, rank) for rank in range(workers)]


def run_workers(worker_fn, workers):
    """Run worker_fn(rank, collectives) on K threads; return rank-ordered results.

    BLAS pools are limited to one thread per worker while the pool runs,
    otherwise nested BLAS threads oversubscribe the cores and spin.  Any
    worker exception is re-raised in the caller after the pool drains.
    """
    if workers == 1:
        return [worker_fn(0, SerialCollectives())]
    handles = make_pool(workers)
    results = [None] * workers
    errors = [None] * workers

    def target(rank):
        try:
            results[rank] = worker_fn(rank, handles[rank])
        except BaseException as exc:  # noqa: BLE001 - surfaced to caller
            errors[rank] = exc
            handles[rank]._shared.barrier.abort()

    threads = [threading.Thread(target=target, args=(rank,))
               for rank in range(workers)]
    with threadpool_limits(limits=1):
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    for exc in errors:
        if exc is not None and not isinstance(exc, threading.BrokenBarrierError):
            raise exc
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def parallel_psvn(model, config, partition, seed=0, adaptive=False):
    """Run the projected Newton transport with K barrier-synchronized workers.

    Each worker owns ``partition.block`` particles; per-particle work is
    local and the kernel sums, gathered derivatives, and stopping norms go
    through the collectives.  With one worker this is exactly the serial
    run.  Returns the rank-0 result (all ranks agree on the ensemble).
    """
    from . import transport

    runner = transport.adaptive_run if adaptive else transport.run

    def worker(rank, coll):
        return runner(model, config, seed=seed, collectives=coll,
                      particle_range=partition.bounds(rank))

    results = run_workers(worker, partition.workers)
    combined = results[0]
    if partition.workers > 1:
        for rec_tuple in zip(*[r.records for r in results]):
            base = rec_tuple[0]
            base.t_variation = max(r.t_variation for r in rec_tuple)
            base.t_kernel = max(r.t_kernel for r in rec_tuple)
            base.t_solve = max(r.t_solve for r in rec_tuple)
            base.t_sample = max(r.t_sample for r in rec_tuple)
        combined.comm_stats = [r.comm_stats for r in results]
    return combined
