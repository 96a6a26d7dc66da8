"""Integer-packet simulation with FIFO queues and per-packet timestamps.

Packets are whole units.  Per-step transfer and service budgets are the
running floor of rate * dt: each link and each server banks only the
fractional remainder, so a backlogged link realizes its set rate exactly in
the long run while never bursting above it.

For delay measurement, packets are tracked as exchangeability classes: all
packets that entered the current node in the same step, carry the same
ingress arrival stamp, and share an origin are statistically identical, so
each node keeps a FIFO of per-step buckets holding integer counts per
(stamp, origin) class.  Ties inside a bucket (packets that arrived
together) are resolved by deterministic proportional splitting, which is
one valid FIFO execution.  Untagged mass (initial backlog and arrivals
after the measurement window) occupies queue space but carries no class.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineError, QueueState, Trajectory, _policy_rates
from .network import ArrivalProfile, LayeredNetwork, ServiceProfile, SimConfig


@dataclass
class TaggedRun:
    """Sojourn statistics for the packets that arrived within the window."""

    t0: float
    horizon: float
    dt: float
    origin_sum: np.ndarray
    origin_count: np.ndarray
    extension: float
    window_width: float | None = None
    window_stats: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    trajectory: Trajectory | None = None

    def window_mean(self, window_index: int) -> float:
        """Mean sojourn over all tagged packets arriving in one window."""
        total = 0.0
        count = 0.0
        for (_, w), (s, c) in self.window_stats.items():
            if w == window_index:
                total += s
                count += c
        if count == 0:
            raise ValueError(f"no tagged packets in window {window_index}")
        return total / count


def _allocate(amounts: np.ndarray, total: int) -> np.ndarray:
    """Integer split of ``total`` proportional to ``amounts`` (largest
    remainder, ties by position), each entry capped by ``amounts``."""
    weight = amounts.sum()
    if total <= 0 or weight <= 0:
        return np.zeros(len(amounts), dtype=np.int64)
    exact = amounts * (total / weight)
    base = np.floor(exact).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        frac = exact - base
        order = np.lexsort((np.arange(len(amounts)), -frac))
        base[order[:rest]] += 1
    return np.minimum(base, amounts)


class _Bucket:
    """Packets that entered one node during one step: per-stamp origin
    vectors for tagged mass plus an untagged scalar."""

    __slots__ = ("classes", "untagged", "total")

    def __init__(self):
        self.classes: dict[int, np.ndarray] = {}
        self.untagged = 0
        self.total = 0

    def add_class(self, stamp: int, vec: np.ndarray) -> None:
        cur = self.classes.get(stamp)
        if cur is None:
            self.classes[stamp] = vec.copy()
        else:
            cur += vec
        self.total += int(vec.sum())

    def add_untagged(self, n: int) -> None:
        self.untagged += n
        self.total += n


class _Parcel:
    """An extracted batch of packets, keyed like a bucket."""

    __slots__ = ("classes", "untagged", "total")

    def __init__(self):
        self.classes: dict[int, np.ndarray] = {}
        self.untagged = 0
        self.total = 0

    def merge_class(self, stamp: int, vec: np.ndarray) -> None:
        cur = self.classes.get(stamp)
        if cur is None:
            self.classes[stamp] = vec
        else:
            cur += vec
        self.total += int(vec.sum())


class _ClassFifo:
    """FIFO of buckets for one node."""

    __slots__ = ("buckets", "width")

    def __init__(self, width: int):
        self.buckets: deque[tuple[int, _Bucket]] = deque()
        self.width = width

    def push_class(self, step: int, stamp: int, vec: np.ndarray) -> None:
        bucket = self._tail(step)
        bucket.add_class(stamp, vec)

    def push_untagged(self, step: int, n: int) -> None:
        self._tail(step).add_untagged(n)

    def push_parcel(self, step: int, parcel: "_Parcel") -> None:
        bucket = self._tail(step)
        for stamp, vec in parcel.classes.items():
            bucket.add_class(stamp, vec)
        bucket.add_untagged(parcel.untagged)

    def _tail(self, step: int) -> _Bucket:
        if not self.buckets or self.buckets[-1][0] != step:
            self.buckets.append((step, _Bucket()))
        return self.buckets[-1][1]

    def pop(self, count: int) -> _Parcel:
        parcel = _Parcel()
        while count > 0:
            _, bucket = self.buckets[0]
            if bucket.total <= count:
                count -= bucket.total
                for stamp, vec in bucket.classes.items():
                    parcel.merge_class(stamp, vec)
                parcel.untagged += bucket.untagged
                self.buckets.popleft()
            else:
                self._split_from(bucket, count, parcel)
                count = 0
        parcel.total = sum(int(v.sum()) for v in parcel.classes.values()) + parcel.untagged
        return parcel

    def _split_from(self, bucket: _Bucket, count: int, parcel: _Parcel) -> None:
        """Take ``count`` packets out of a larger bucket, proportionally
        across its classes (a deterministic resolution of FIFO ties)."""
        stamps = sorted(bucket.classes)
        cells = [bucket.classes[s] for s in stamps]
        flat = np.concatenate(cells + [np.array([bucket.untagged], dtype=np.int64)])
        take = _allocate(flat, count)
        short = count - int(take.sum())
        if short > 0:  # caps bound the proportional shares; top up greedily
            room = flat - take
            order = np.argsort(-room, kind="stable")
            for idx in order:
                if short <= 0:
                    break
                extra = int(min(room[idx], short))
                take[idx] += extra
                short -= extra
        pos = 0
        for s, vec in zip(stamps, cells):
            part = take[pos : pos + self.width]
            if part.any():
                parcel.merge_class(s, part.copy())
                vec -= part
                removed = int(part.sum())
                bucket.total -= removed
                if not vec.any():
                    del bucket.classes[s]
            pos += self.width
        u = int(take[pos])
        parcel.untagged += u
        bucket.untagged -= u
        bucket.total -= u


def _split_parcel(parcel: _Parcel, grants: np.ndarray) -> list[_Parcel]:
    """Split a parcel into one parcel per grant, proportionally per class."""
    parts = [_Parcel() for _ in grants]
    stamps = sorted(parcel.classes)
    remaining_total = parcel.total
    rem_classes = {s: parcel.classes[s] for s in stamps}
    rem_untagged = parcel.untagged
    for idx, g in enumerate(grants):
        g = int(g)
        if g <= 0:
            continue
        if g >= remaining_total:
            for s, vec in rem_classes.items():
                if vec.any():
                    parts[idx].merge_class(s, vec)
            parts[idx].untagged += rem_untagged
            parts[idx].total = remaining_total
            rem_classes = {}
            rem_untagged = 0
            remaining_total = 0
            break
        keys = [s for s, v in rem_classes.items() if v.any()]
        cells = [rem_classes[s] for s in keys]
        flat = np.concatenate(
            cells + [np.array([rem_untagged], dtype=np.int64)]
        ) if cells else np.array([rem_untagged], dtype=np.int64)
        take = _allocate(flat, g)
        short = g - int(take.sum())
        if short > 0:
            room = flat - take
            order = np.argsort(-room, kind="stable")
            for j in order:
                if short <= 0:
                    break
                extra = int(min(room[j], short))
                take[j] += extra
                short -= extra
        width = cells[0].size if cells else 0
        pos = 0
        for s, vec in zip(keys, cells):
            part = take[pos : pos + width]
            if part.any():
                parts[idx].merge_class(s, part.copy())
                vec -= part
            pos += width
        u = int(take[pos]) if pos < take.size else 0
        parts[idx].untagged += u
        rem_untagged -= u
        parts[idx].total = g
        remaining_total -= g
    return parts


class _IntegerSim:
    def __init__(
        self,
        net: LayeredNetwork,
        arr: ArrivalProfile,
        svc: ServiceProfile,
        policy,
        cfg: SimConfig,
        track_packets: bool,
        window: float | None = None,
        keep_trajectory: bool = True,
    ):
        self.net = net
        self.arr = arr
        self.svc = svc
        self.policy = policy
        self.cfg = cfg
        self.dt = cfg.resolved_dt()
        self.track = track_packets
        self.window = window
        self.keep_trajectory = keep_trajectory
        self.n_origin = net.layer_sizes[0]

        q0 = cfg.initial_backlog(net)
        if not np.allclose(q0, np.round(q0)):
            raise ValueError("integer mode requires an integral q0")
        self.q = np.round(q0).astype(np.int64)
        self.arrival_bank = np.zeros(net.layer_sizes[0])
        self.link_bank = np.zeros(net.num_links)
        self.service_bank = np.zeros(net.layer_sizes[-1])
        self.egress_lo = net.node_id(net.num_layers - 1, 0)
        if track_packets:
            self.fifo = [_ClassFifo(self.n_origin) for _ in range(net.num_nodes)]
            for nid in range(net.num_nodes):
                if self.q[nid]:
                    self.fifo[nid].push_untagged(-1, int(self.q[nid]))
        self.origin_sum = np.zeros(self.n_origin)
        self.origin_count = np.zeros(self.n_origin)
        self.window_stats: dict[tuple[int, int], list[float]] = {}
        self.outstanding = 0
        self.rows: list[np.ndarray] = [self.q.astype(float)]
        self.applied: list[np.ndarray] = []
        self.link_flow = np.zeros(net.num_links)
        self.served_total = np.zeros(net.layer_sizes[-1])
        self._tag_steps = int(math.ceil(cfg.horizon / self.dt - 1e-12))
        self._eye = np.eye(self.n_origin, dtype=np.int64)
        self._transfer_nodes = []
        for l in range(net.num_layers - 1):
            for nid in net.layer_nodes(l):
                out = net.out_links[nid]
                if out:
                    ids = np.array(out, dtype=np.intp)
                    self._transfer_nodes.append((nid, out, ids, net.link_dst[ids]))

    # -- one step ----------------------------------------------------------

    def step(self, k: int) -> None:
        net = self.net
        t = self.cfg.t0 + k * self.dt
        state = QueueState(self.q.astype(float), t)
        rates = _policy_rates(self.policy, state, net, self.arr, self.svc, self.dt)
        bad = rates.capacity_violations()
        if bad:
            raise EngineError(f"policy rates exceed capacity on link {bad[0]}")

        self.arrival_bank += self.arr.rates * self.dt
        born = np.floor(self.arrival_bank + 1e-12).astype(np.int64)
        self.arrival_bank -= born
        self.q[: net.layer_sizes[0]] += born
        if self.track:
            tagged = k < self._tag_steps
            for i in range(self.n_origin):
                n = int(born[i])
                if not n:
                    continue
                if tagged:
                    self.fifo[i].push_class(k, k, n * self._eye[i])
                    self.outstanding += n
                else:
                    self.fifo[i].push_untagged(k, n)

        self.link_bank += rates.values * self.dt
        demand = np.floor(self.link_bank + 1e-12).astype(np.int64)
        self.link_bank -= demand
        for nid, out, out_ids, dsts in self._transfer_nodes:
            want = demand[out_ids]
            total_want = int(want.sum())
            if not total_want:
                continue
            supply = int(self.q[nid])
            if total_want <= supply:
                grant = want
            else:
                grant = _allocate(want, supply)
            moved = int(grant.sum())
            if not moved:
                continue
            self.q[nid] -= moved
            np.add.at(self.q, dsts, grant)
            self.link_flow[out_ids] += grant
            if self.track:
                parcel = self.fifo[nid].pop(moved)
                if len(out) == 1:
                    self.fifo[dsts[0]].push_parcel(k, parcel)
                elif not parcel.classes:
                    # untagged mass only: counts suffice, no class split
                    for pos in range(len(out)):
                        if grant[pos]:
                            self.fifo[dsts[pos]].push_untagged(k, int(grant[pos]))
                else:
                    for pos, part in enumerate(_split_parcel(parcel, grant)):
                        if part.total:
                            self.fifo[dsts[pos]].push_parcel(k, part)

        cap_f = self.service_bank + self.svc.rates * self.dt
        cap = np.floor(cap_f + 1e-12).astype(np.int64)
        self.service_bank = cap_f - cap
        for j in range(net.layer_sizes[-1]):
            nid = self.egress_lo + j
            serve = int(min(self.q[nid], cap[j]))
            if not serve:
                continue
            self.q[nid] -= serve
            self.served_total[j] += serve
            if self.track:
                self._depart(nid, serve, t)

        self.applied.append(rates.values.copy())
        if self.keep_trajectory:
            self.rows.append(self.q.astype(float))

    def _depart(self, nid: int, count: int, t: float) -> None:
        parcel = self.fifo[nid].pop(count)
        for stamp_step, vec in parcel.classes.items():
            n = int(vec.sum())
            if not n:
                continue
            stamp = self.cfg.t0 + stamp_step * self.dt
            sojourn = t - stamp
            self.origin_sum += sojourn * vec
            self.origin_count += vec
            self.outstanding -= n
            if self.window is not None:
                w = int((stamp - self.cfg.t0) / self.window)
                for i in np.flatnonzero(vec):
                    cell = self.window_stats.setdefault((int(i), w), [0.0, 0.0])
                    cell[0] += sojourn * int(vec[i])
                    cell[1] += int(vec[i])

    # -- drivers -----------------------------------------------------------

    def run_horizon(self) -> int:
        steps = int(math.ceil(self.cfg.horizon / self.dt - 1e-12))
        for k in range(steps):
            self.step(k)
        return steps

    def trajectory(self) -> Trajectory:
        queues = np.asarray(self.rows) if self.keep_trajectory else np.asarray(
            [self.q.astype(float)]
        )
        applied = (
            np.asarray(self.applied)
            if self.applied
            else np.empty((0, self.net.num_links))
        )
        return Trajectory(
            self.cfg.t0,
            self.dt,
            queues,
            applied,
            self.link_flow,
            self.served_total,
            meta={"mode": "integer"},
        )


def integer_run(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    policy,
    cfg: SimConfig,
) -> Trajectory:
    """Integer-packet run over the configured horizon (no packet tracking)."""
    sim = _IntegerSim(net, arr, svc, policy, cfg, track_packets=False)
    sim.run_horizon()
    return sim.trajectory()


def tagged_run(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    policy,
    cfg: SimConfig,
    window: float | None = None,
    keep_trajectory: bool = False,
    max_extension_steps: int | None = None,
) -> TaggedRun:
    """Simulate with per-packet stamps until every packet that arrived within
    ``[t0, t0 + horizon)`` has departed, extending past the horizon as needed.

    Arrivals continue during the extension (the overload persists; only the
    measured window is bounded).
    """
    sim = _IntegerSim(
        net, arr, svc, policy, cfg, track_packets=True, window=window,
        keep_trajectory=keep_trajectory,
    )
    k = sim.run_horizon()
    horizon_steps = k
    limit = max_extension_steps if max_extension_steps is not None else max(
        10_000, 100 * horizon_steps
    )
    while sim.outstanding > 0:
        if k - horizon_steps > limit:
            raise EngineError(
                f"{sim.outstanding} tagged packets still in flight after "
                f"{limit} extension steps"
            )
        sim.step(k)
        k += 1
    return TaggedRun(
        t0=cfg.t0,
        horizon=cfg.horizon,
        dt=sim.dt,
        origin_sum=sim.origin_sum,
        origin_count=sim.origin_count,
        extension=(k - horizon_steps) * sim.dt,
        window_width=window,
        window_stats=sim.window_stats,
        trajectory=sim.trajectory() if keep_trajectory else None,
    )
