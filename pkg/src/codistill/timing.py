"""Simulated wall clock for the two local-training protocols.

``compute_and_wait``: a client trains the generic model, then the personalized
model, then uploads, then idles until the next broadcast arrives.

``wait_free``: the client uploads as soon as the generic model is trained and
trains the personalized model while the upload, aggregation and broadcast are
in flight. Its next round starts once both the broadcast has arrived and the
personalized training has finished.

The simulator only replays a schedule; it never touches model weights.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

PROTOCOLS = ("compute_and_wait", "wait_free")


@dataclass(frozen=True)
class ClientTiming:
    t_gm_epoch: float = 1.0
    t_pm_epoch: float = 1.0
    t_up: float = 1.0
    t_down: float = 1.0

    def __post_init__(self):
        for name in ("t_gm_epoch", "t_pm_epoch", "t_up", "t_down"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def scaled(self, c: float) -> "ClientTiming":
        return ClientTiming(self.t_gm_epoch * c, self.t_pm_epoch * c, self.t_up * c, self.t_down * c)


@dataclass(frozen=True)
class Schedule:
    """Participant ids per round plus the local epoch counts."""

    participants: tuple[tuple[int, ...], ...]
    e_g: int
    e_p: int

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(tuple(sorted(p)) for p in self.participants))
        if self.e_g < 0 or self.e_p < 0:
            raise ValueError("epoch counts must be non-negative")
        if any(len(p) == 0 for p in self.participants):
            raise ValueError("every round needs at least one participant")

    @property
    def rounds(self) -> int:
        return len(self.participants)


@dataclass
class RoundTiming:
    round: int
    start: dict[int, float] = field(default_factory=dict)
    upload_done: dict[int, float] = field(default_factory=dict)
    pm_done: dict[int, float] = field(default_factory=dict)
    agg_start: float = math.nan
    agg_done: float = math.nan
    broadcast_done: dict[int, float] = field(default_factory=dict)
    end: float = math.nan


@dataclass
class Timeline:
    protocol: str
    rounds: list[RoundTiming]

    @property
    def total(self) -> float:
        return self.rounds[-1].end if self.rounds else 0.0

    @property
    def round_ends(self) -> list[float]:
        return [r.end for r in self.rounds]


# event kinds; the integer doubles as a tie-break at equal times
_START, _GM_DONE, _PM_DONE, _UPLOAD_DONE, _AGG_DONE, _BCAST_DONE = range(6)


def simulate(schedule: Schedule, timings: Sequence[ClientTiming], t_agg: float = 0.0,
             protocol: str = "wait_free") -> Timeline:
    """Discrete-event replay of ``schedule`` under ``protocol``.

    ``timings[k]`` belongs to client ``k``. The server broadcasts each new
    generic model to every client; round ``r`` ends for a participant when it
    is ready to start round ``r + 1``.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if schedule.rounds < 1:
        raise ValueError("schedule must contain at least one round")
    if not math.isfinite(t_agg) or t_agg < 0:
        raise ValueError("t_agg must be finite and >= 0")
    n_clients = len(timings)
    for part in schedule.participants:
        if part[0] < 0 or part[-1] >= n_clients:
            raise ValueError("participant id outside the timing table")
    wait_free = protocol == "wait_free"
    e_g, e_p = schedule.e_g, schedule.e_p

    records = [RoundTiming(r + 1) for r in range(schedule.rounds)]
    members = [set(p) for p in schedule.participants]
    # latest round whose model client k holds (0 = initial model), and whether PM training is busy
    has_model = [0] * n_clients
    pm_busy = [False] * n_clients
    started = [0] * n_clients
    pending_uploads = [len(p) for p in schedule.participants]

    queue: list[tuple[float, int, int, int, int]] = []
    seq = itertools.count()

    def push(t, kind, client, rnd):
        heapq.heappush(queue, (t, kind, next(seq), client, rnd))

    def try_start(k, now):
        nxt = started[k] + 1
        while nxt <= schedule.rounds and k not in members[nxt - 1]:
            nxt += 1
        if nxt > schedule.rounds or pm_busy[k] or has_model[k] < nxt - 1 or started[k] >= nxt:
            return
        started[k] = nxt
        push(now, _START, k, nxt)

    for k in range(n_clients):
        try_start(k, 0.0)

    while queue:
        now, kind, _, k, r = heapq.heappop(queue)
        rec = records[r - 1]
        tm = timings[k] if k >= 0 else None
        if kind == _START:
            rec.start[k] = now
            push(now + e_g * tm.t_gm_epoch, _GM_DONE, k, r)
        elif kind == _GM_DONE:
            pm_busy[k] = True
            push(now + e_p * tm.t_pm_epoch, _PM_DONE, k, r)
            if wait_free:
                push(now + tm.t_up, _UPLOAD_DONE, k, r)
        elif kind == _PM_DONE:
            pm_busy[k] = False
            rec.pm_done[k] = now
            if wait_free:
                try_start(k, now)
            else:
                push(now + tm.t_up, _UPLOAD_DONE, k, r)
        elif kind == _UPLOAD_DONE:
            rec.upload_done[k] = now
            pending_uploads[r - 1] -= 1
            if pending_uploads[r - 1] == 0:
                rec.agg_start = now
                push(now + t_agg, _AGG_DONE, -1, r)
        elif kind == _AGG_DONE:
            rec.agg_done = now
            for j in range(n_clients):
                push(now + timings[j].t_down, _BCAST_DONE, j, r)
        elif kind == _BCAST_DONE:
            rec.broadcast_done[k] = now
            has_model[k] = max(has_model[k], r)
            try_start(k, now)

    for rec in records:
        rec.end = max(
            max(rec.broadcast_done[k], rec.pm_done.get(k, -math.inf)) for k in rec.start
        )
    return Timeline(protocol, records)


def closed_form_round_time(timing: ClientTiming, e_g: int, e_p: int, t_agg: float = 0.0,
                           protocol: str = "wait_free") -> float:
    """Round length when every client has the same timing."""
    gm = e_g * timing.t_gm_epoch
    pm = e_p * timing.t_pm_epoch
    comm = timing.t_up + t_agg + timing.t_down
    if protocol == "compute_and_wait":
        return gm + pm + comm
    if protocol == "wait_free":
        return gm + max(pm, comm)
    raise ValueError(f"unknown protocol {protocol!r}")


def speedup_report(baseline: Timeline, waitfree: Timeline, accuracy_trace: Sequence[float],
                   target_acc: float) -> dict:
    """Simulated time to reach ``target_acc`` under both protocols.

    Round numbers are 1-based. When the target is never reached the report
    carries ``reached: False`` and no speedup.
    """
    if len(accuracy_trace) == 0:
        raise ValueError("accuracy trace is empty")
    if len(baseline.rounds) < len(accuracy_trace) or len(waitfree.rounds) < len(accuracy_trace):
        raise ValueError("timelines are shorter than the accuracy trace")
    hit = next((i for i, acc in enumerate(accuracy_trace) if acc >= target_acc), None)
    if hit is None:
        return {"target_acc": target_acc, "reached": False, "rounds_to_target": None,
                "zeta_baseline": None, "zeta_waitfree": None, "speedup": None}
    zb = baseline.rounds[hit].end
    zw = waitfree.rounds[hit].end
    return {
        "target_acc": target_acc,
        "reached": True,
        "rounds_to_target": hit + 1,
        "zeta_baseline": zb,
        "zeta_waitfree": zw,
        "speedup": zb / zw if zw > 0 else None,
    }
