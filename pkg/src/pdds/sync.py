"""Telemetry upload queue with an UPLOAD -> CONFIRM -> WIPE protocol."""
from __future__ import annotations

import copy
import enum
import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Protocol

log = logging.getLogger(__name__)


class BatchState(str, enum.Enum):
    LOCAL = "LOCAL"
    UPLOADING = "UPLOADING"
    CONFIRMED = "CONFIRMED"


class SyncError(RuntimeError):
    """Raised by a cloud client when an upload does not produce a confirm token."""


@dataclass(frozen=True)
class Record:
    id: int
    payload: dict


@dataclass
class Batch:
    id: int
    records: tuple[Record, ...]
    state: BatchState = BatchState.LOCAL

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(r.id for r in self.records)


class SyncQueue:
    """Pending telemetry records.

    Records stay in the queue until the batch holding them is confirmed;
    anything appended while a batch is in flight waits for the next batch.
    Each confirm token can wipe at most once.
    """

    def __init__(self):
        self._records: list[Record] = []
        self._next_id = itertools.count()
        self._next_batch = itertools.count()
        self.inflight: Batch | None = None
        self.used_tokens: set[str] = set()
        self.wipe_counts: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._records)

    def append(self, payload: dict) -> int:
        rid = next(self._next_id)
        self._records.append(Record(rid, copy.deepcopy(payload)))
        return rid

    def extend(self, payloads: Iterable[dict]) -> None:
        for p in payloads:
            self.append(p)

    def contents(self) -> list[Record]:
        return list(self._records)

    def begin(self) -> Batch | None:
        if self.inflight is not None:
            raise RuntimeError("a batch is already in flight")
        if not self._records:
            return None
        batch = Batch(next(self._next_batch), tuple(self._records), BatchState.UPLOADING)
        self.inflight = batch
        return batch

    def revert(self, batch: Batch) -> None:
        batch.state = BatchState.LOCAL
        self.inflight = None

    def confirm(self, batch: Batch, token: str) -> int:
        """Mark the batch confirmed and wipe its records. Returns records wiped."""
        if token in self.used_tokens:
            log.warning("confirm token %s already used; nothing wiped", token)
            self.inflight = None
            return 0
        self.used_tokens.add(token)
        batch.state = BatchState.CONFIRMED
        return self._wipe(batch)

    def _wipe(self, batch: Batch) -> int:
        ids = batch.ids
        self._records = [r for r in self._records if r.id not in ids]
        for i in ids:
            self.wipe_counts[i] = self.wipe_counts.get(i, 0) + 1
        self.inflight = None
        return len(ids)


class CloudClient(Protocol):
    def upload(self, batch: Batch) -> str: ...


FAIL_POINTS = ("before_upload", "during_upload", "before_wipe")


class SimulatedCloud:
    """In-memory cloud with scheduled failures.

    ``fail_on`` lists upload call indices (0-based) that fail at
    ``fail_point``:

    * ``before_upload``: nothing reaches the cloud.
    * ``during_upload``: the first half of the batch is stored, then the link drops.
    * ``before_wipe``: the whole batch is stored but the confirm token is lost.

    Stored records are keyed by record id, so a re-upload never duplicates.
    """

    def __init__(self, fail_on: Iterable[int] = (), fail_point: str = "before_upload"):
        if fail_point not in FAIL_POINTS:
            raise ValueError(f"fail_point must be one of {FAIL_POINTS}")
        self.fail_on = set(fail_on)
        self.fail_point = fail_point
        self.calls = 0
        self.store: dict[int, dict] = {}
        self.deliveries: dict[int, int] = {}
        self._tokens = itertools.count()

    def _put(self, records: Iterable[Record]) -> None:
        for r in records:
            self.store[r.id] = r.payload
            self.deliveries[r.id] = self.deliveries.get(r.id, 0) + 1

    def upload(self, batch: Batch) -> str:
        call = self.calls
        self.calls += 1
        failing = call in self.fail_on
        if failing and self.fail_point == "before_upload":
            raise SyncError(f"upload {call}: connection refused")
        if failing and self.fail_point == "during_upload":
            self._put(batch.records[: len(batch.records) // 2])
            raise SyncError(f"upload {call}: connection reset mid-transfer")
        self._put(batch.records)
        if failing:
            raise SyncError(f"upload {call}: confirm lost")
        return f"tok-{next(self._tokens)}"


@dataclass(frozen=True)
class SyncOutcome:
    status: str  # "ok", "retryable" or "noop"
    batch_size: int = 0
    wiped: int = 0
    error: str | None = None


def sync(queue: SyncQueue, client: CloudClient) -> SyncOutcome:
    batch = queue.begin()
    if batch is None:
        return SyncOutcome("noop")
    try:
        token = client.upload(batch)
    except SyncError as exc:
        queue.revert(batch)
        log.info("sync failed, %d records kept: %s", len(batch.records), exc)
        return SyncOutcome("retryable", len(batch.records), 0, str(exc))
    wiped = queue.confirm(batch, token)
    return SyncOutcome("ok", len(batch.records), wiped)
