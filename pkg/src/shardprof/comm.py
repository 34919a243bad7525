"""Rank-addressed communicator with in-process and multi-process backends.

The pipeline only needs two collectives: a barrier and a rooted gather. The
in-process backend runs P logical workers on threads inside one interpreter
and is what the test suite uses; the multi-process backend coordinates P OS
processes through a shared rendezvous directory, selected via the
``SHARDPROF_RANK`` / ``SHARDPROF_WORLD_SIZE`` / ``SHARDPROF_RENDEZVOUS``
environment variables.
"""

from __future__ import annotations

import abc
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable

from .errors import CollectiveTimeoutError, PayloadTooLargeError

ENV_RANK = "SHARDPROF_RANK"
ENV_WORLD_SIZE = "SHARDPROF_WORLD_SIZE"
ENV_RENDEZVOUS = "SHARDPROF_RENDEZVOUS"

DEFAULT_TIMEOUT_S = 300.0
DEFAULT_MAX_PAYLOAD_BYTES = 1 << 30


class WorkerCtx(abc.ABC):
    """One worker's identity plus its collective operations.

    Every collective must be invoked exactly once per worker, in the same
    order at every rank. A context is used by one logical worker at a time.
    """

    rank: int
    world_size: int

    def __init__(self, rank: int, world_size: int) -> None:
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside [0, {world_size})")
        self.rank = rank
        self.world_size = world_size

    @abc.abstractmethod
    def barrier(self) -> None:
        """Block until every worker has entered this barrier."""

    @abc.abstractmethod
    def gather(self, payload: bytes, root: int = 0) -> list[bytes] | None:
        """Collect one payload per rank at ``root``.

        The root receives the payloads ordered by rank regardless of arrival
        order; every other rank receives None.
        """

    def gather_to_root(self, payload: bytes) -> list[bytes] | None:
        """Gather rooted at rank 0."""
        return self.gather(payload, root=0)


def _check_payload(payload: bytes, limit: int) -> None:
    if len(payload) > limit:
        raise PayloadTooLargeError(
            f"payload of {len(payload)} bytes exceeds limit of {limit}"
        )


class InProcessGroup:
    """Shared state for P logical workers living in one process."""

    def __init__(
        self,
        world_size: int,
        *,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES,
    ) -> None:
        self.world_size = world_size
        self.timeout_s = timeout_s
        self.max_payload_bytes = max_payload_bytes
        self._barrier = threading.Barrier(world_size)
        self._slots: list[bytes | None] = [None] * world_size

    def worker_ctx(self, rank: int) -> InProcessCtx:
        return InProcessCtx(rank, self)

    def abort(self) -> None:
        """Break the barrier so blocked workers fail instead of hanging."""
        self._barrier.abort()

    def _wait(self) -> None:
        try:
            self._barrier.wait(timeout=self.timeout_s)
        except threading.BrokenBarrierError:
            raise CollectiveTimeoutError(
                f"collective timed out or was aborted after {self.timeout_s}s"
            ) from None


class InProcessCtx(WorkerCtx):
    """Worker context backed by a thread barrier within one process."""

    def __init__(self, rank: int, group: InProcessGroup) -> None:
        super().__init__(rank, group.world_size)
        self._group = group

    def barrier(self) -> None:
        if self.world_size == 1:
            return
        self._group._wait()

    def gather(self, payload: bytes, root: int = 0) -> list[bytes] | None:
        _check_payload(payload, self._group.max_payload_bytes)
        if self.world_size == 1:
            return [payload]
        group = self._group
        group._slots[self.rank] = payload
        group._wait()
        result = list(group._slots) if self.rank == root else None
        # Second phase keeps the slots stable until the root has copied them.
        group._wait()
        if result is not None and any(p is None for p in result):
            raise CollectiveTimeoutError("gather completed with missing payloads")
        return result  # type: ignore[return-value]


def run_workers(
    world_size: int,
    fn: Callable[[WorkerCtx], Any],
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> list[Any]:
    """Run ``fn`` on P in-process workers and return results ordered by rank.

    If any worker raises, the group barrier is aborted so the others unblock,
    and the lowest-ranked non-timeout exception is re-raised.
    """
    group = InProcessGroup(world_size, timeout_s=timeout_s)
    results: list[Any] = [None] * world_size
    failures: dict[int, BaseException] = {}

    def target(rank: int) -> None:
        try:
            results[rank] = fn(group.worker_ctx(rank))
        except BaseException as exc:  # noqa: BLE001 - propagated to the caller
            failures[rank] = exc
            group.abort()

    threads = [
        threading.Thread(target=target, args=(rank,), name=f"worker-{rank}")
        for rank in range(world_size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if failures:
        primary = [
            r for r in sorted(failures)
            if not isinstance(failures[r], CollectiveTimeoutError)
        ]
        raise failures[primary[0] if primary else min(failures)]
    return results


class FileRendezvousCtx(WorkerCtx):
    """Worker context for P OS processes coordinating through a shared directory.

    Collectives are sequenced by a per-context counter; round k of a barrier
    is the marker files ``b<k>.r<rank>`` and round k of a gather the payload
    files ``g<k>.r<rank>``, written atomically via rename. Barrier markers are
    left in place (a late poller may still need them); gather payloads are
    deleted by the root once read.
    """

    def __init__(
        self,
        rank: int,
        world_size: int,
        root_dir: str | Path,
        *,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES,
    ) -> None:
        super().__init__(rank, world_size)
        self.root_dir = Path(root_dir)
        self.timeout_s = timeout_s
        self.max_payload_bytes = max_payload_bytes
        self._seq = 0
        self.root_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(
        cls, env: dict[str, str] | None = None, *, timeout_s: float = DEFAULT_TIMEOUT_S
    ) -> FileRendezvousCtx:
        env = dict(os.environ) if env is None else env
        try:
            rank = int(env[ENV_RANK])
            world_size = int(env[ENV_WORLD_SIZE])
            rendezvous = env[ENV_RENDEZVOUS]
        except KeyError as exc:
            raise ValueError(f"missing environment variable {exc}") from None
        return cls(rank, world_size, rendezvous, timeout_s=timeout_s)

    def _write(self, name: str, payload: bytes) -> None:
        tmp = self.root_dir / f".{name}.r{self.rank:04d}.tmp"
        tmp.write_bytes(payload)
        os.replace(tmp, self.root_dir / name)

    def _poll(self, names: list[str], what: str) -> None:
        deadline = time.monotonic() + self.timeout_s
        delay = 0.001
        pending = [self.root_dir / n for n in names]
        while pending:
            pending = [p for p in pending if not p.exists()]
            if not pending:
                return
            if time.monotonic() > deadline:
                raise CollectiveTimeoutError(
                    f"{what} timed out after {self.timeout_s}s waiting for "
                    f"{len(pending)} of {self.world_size} workers"
                )
            time.sleep(delay)
            delay = min(delay * 2, 0.05)

    def barrier(self) -> None:
        self._seq += 1
        if self.world_size == 1:
            return
        self._write(f"b{self._seq:08d}.r{self.rank:04d}", b"")
        self._poll(
            [f"b{self._seq:08d}.r{r:04d}" for r in range(self.world_size)],
            "barrier",
        )

    def gather(self, payload: bytes, root: int = 0) -> list[bytes] | None:
        self._seq += 1
        _check_payload(payload, self.max_payload_bytes)
        if self.world_size == 1:
            return [payload]
        names = [f"g{self._seq:08d}.r{r:04d}" for r in range(self.world_size)]
        self._write(names[self.rank], payload)
        if self.rank != root:
            return None
        self._poll(names, "gather")
        payloads = [(self.root_dir / n).read_bytes() for n in names]
        for n in names:
            (self.root_dir / n).unlink(missing_ok=True)
        return payloads
