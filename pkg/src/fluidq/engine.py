"""Fluid queueing dynamics: stepping, trajectories, and effective rates.

The backlog at each node evolves by flow conservation: arrivals minus
departures, with egress nodes serving work-conservingly at their maximum
rate.  Integration is explicit Euler with within-step clamping: a node can
ship at most what it holds plus what it received earlier in the same step
(layers are processed in order), and scarcity is shared across a node's
egress links in proportion to their set rates.  Between queue-emptying
events the dynamics are piecewise linear, so the scheme is exact there and
first-order accurate across events.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .network import (
    ArrivalProfile,
    LayeredNetwork,
    RateAssignment,
    ServiceProfile,
    SimConfig,
    ensure_valid,
)


class EngineError(RuntimeError):
    """Internal inconsistency or an unusable policy output."""


class PacketSinkError(EngineError):
    """A node receives traffic but has no egress rate to pass it on."""

    def __init__(self, nodes: list[tuple[int, int]]):
        self.nodes = nodes
        coords = ", ".join(f"(layer {l + 1}, node {i + 1})" for l, i in nodes)
        super().__init__(f"packet sink without service at {coords}")


@dataclass(frozen=True)
class QueueState:
    """Per-node backlog at one instant.  Fractional in fluid mode."""

    q: np.ndarray
    t: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if np.any(q < 0):
            raise ValueError("backlogs must be nonnegative")
        object.__setattr__(self, "q", q)


class Trajectory:
    """Uniformly sampled solution of a run: queue states plus the rates
    applied on each step, with cumulative per-link flow and per-egress
    service for conservation checks."""

    def __init__(
        self,
        t0: float,
        dt: float,
        queues: np.ndarray,
        rates: np.ndarray,
        link_flow: np.ndarray,
        served: np.ndarray,
        meta: dict | None = None,
    ):
        self.t0 = t0
        self.dt = dt
        self.queues = queues
        self.rates = rates
        self.link_flow = link_flow
        self.served = served
        self.meta = meta or {}

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.queues.shape[0])

    @property
    def num_steps(self) -> int:
        return self.rates.shape[0]

    def state(self, k: int) -> QueueState:
        return QueueState(self.queues[k], self.t0 + k * self.dt)

    @property
    def final(self) -> QueueState:
        return self.state(self.queues.shape[0] - 1)

    def link_throughput(self) -> np.ndarray:
        """Long-run realized rate per link over the whole horizon."""
        elapsed = self.num_steps * self.dt
        return self.link_flow / elapsed if elapsed else self.link_flow * 0.0

    def to_csv(self, net: LayeredNetwork, path) -> None:
        """Export as rows of ``t, node_id, q`` (node_id is 1-based "l:i")."""
        names = []
        for nid in range(net.num_nodes):
            l, i = net.node_coords(nid)
            names.append(f"{l + 1}:{i + 1}")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "node_id", "q"])
            for k, t in enumerate(self.times):
                for nid, name in enumerate(names):
                    writer.writerow([f"{t:.9g}", name, f"{self.queues[k, nid]:.9g}"])


# ---------------------------------------------------------------------------
# Effective (actual) transmission rates


def effective_flow(
    net: LayeredNetwork, arr: ArrivalProfile, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Layer-by-layer scaling of set rates by upstream supply.

    A node that would be asked to send more than it receives forwards its
    whole inflow, split across its egress links in proportion to the set
    rates.  Returns ``(g_tilde, inflow, set_out, sinks)`` where ``inflow``
    counts external arrivals for ingress nodes and effective upstream flow
    elsewhere, ``set_out`` is each node's total set egress rate, and
    ``sinks`` lists nodes with positive inflow but zero egress rate.
    """
    values = np.asarray(values, dtype=float)
    inflow = np.zeros(net.num_nodes)
    inflow[list(net.ingress_nodes)] = arr.rates
    set_out = np.zeros(net.num_nodes)
    np.add.at(set_out, net.link_src, values)
    g_tilde = np.zeros_like(values)
    sinks: list[tuple[int, int]] = []
    tol = 1e-12 * max(1.0, arr.total)
    for l in range(net.num_layers - 1):
        ids = net.layer_links(l)
        lo = net.node_id(l, 0)
        hi = lo + net.layer_sizes[l]
        out_l = set_out[lo:hi]
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(out_l > 0, np.minimum(1.0, inflow[lo:hi] / out_l), 0.0)
        if ids.size:
            g_tilde[ids] = values[ids] * factor[net.link_src[ids] - lo]
            np.add.at(inflow, net.link_dst[ids], g_tilde[ids])
        for local, nid in enumerate(range(lo, hi)):
            if inflow[nid] > tol and out_l[local] <= 0:
                sinks.append((l, local))
    return g_tilde, inflow, set_out, sinks


def effective_rates(
    net: LayeredNetwork, arr: ArrivalProfile, rates: RateAssignment
) -> RateAssignment:
    """Actual per-link rates after upstream zero-queue scarcity scaling.

    Idempotent: effective egress never exceeds effective ingress at any
    node, so a second application changes nothing.  Raises
    :class:`PacketSinkError` when traffic reaches a node with no egress
    rate.
    """
    g_tilde, _, _, sinks = effective_flow(net, arr, rates.values)
    if sinks:
        raise PacketSinkError(sinks)
    return RateAssignment(net, g_tilde)


# ---------------------------------------------------------------------------
# Fluid stepping


def _advance(
    q: np.ndarray,
    values: np.ndarray,
    net: LayeredNetwork,
    lam: np.ndarray,
    mu: np.ndarray,
    dt: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Euler step.  Returns (q_next, sent_per_link, served_per_egress)."""
    q = q.copy()
    n1 = net.layer_sizes[0]
    q[:n1] += lam * dt
    sent = np.zeros(net.num_links)
    for l in range(net.num_layers - 1):
        ids = net.layer_links(l)
        if not ids.size:
            continue
        lo = net.node_id(l, 0)
        width = net.layer_sizes[l]
        src_local = net.link_src[ids] - lo
        want = values[ids] * dt
        desired = np.bincount(src_local, weights=want, minlength=width)
        avail = q[lo : lo + width]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(desired > avail, avail / desired, 1.0)
        scale = np.clip(np.nan_to_num(scale, nan=1.0, posinf=1.0), 0.0, 1.0)
        x = want * scale[src_local]
        shipped = np.bincount(src_local, weights=x, minlength=width)
        q[lo : lo + width] = np.maximum(avail - shipped, 0.0)
        np.add.at(q, net.link_dst[ids], x)
        sent[ids] = x
    egress_lo = net.node_id(net.num_layers - 1, 0)
    served = np.minimum(q[egress_lo:], mu * dt)
    q[egress_lo:] -= served
    return q, sent, served


def step(
    state: QueueState,
    rates: RateAssignment,
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    dt: float,
) -> QueueState:
    """Advance the backlog vector by one step of length ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if rates.net is not net:
        raise EngineError("rate assignment belongs to a different network")
    bad = rates.capacity_violations()
    if bad:
        raise EngineError(f"rates exceed capacity on link {bad[0]}")
    q_next, _, _ = _advance(state.q, rates.values, net, arr.rates, svc.rates, dt)
    return QueueState(q_next, state.t + dt)


def _policy_rates(policy, state, net, arr, svc, dt) -> RateAssignment:
    if isinstance(policy, RateAssignment):
        return policy
    return policy.rates(state, net, arr, svc, dt)


def run(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    policy,
    cfg: SimConfig,
) -> Trajectory:
    """Integrate the dynamics under ``policy`` over ``[t0, t0 + horizon]``.

    ``policy`` is either a static :class:`RateAssignment` or any object
    exposing ``rates(state, net, arr, svc, dt)``; it is evaluated once per
    step on the recorded state at the step start (before that step's
    arrivals).  In integer-packet mode (``cfg.discretize``) backlogs stay
    integral and per-step transfers are rounded down with fractional
    remainders banked per link.
    """
    ensure_valid(net, arr, svc)
    if cfg.discretize:
        from . import discrete

        return discrete.integer_run(net, arr, svc, policy, cfg)

    dt = cfg.resolved_dt()
    steps = math.ceil(cfg.horizon / dt - 1e-12)
    q = cfg.initial_backlog(net)
    queues = np.empty((steps + 1, net.num_nodes))
    applied = np.empty((steps, net.num_links))
    link_flow = np.zeros(net.num_links)
    served_total = np.zeros(net.layer_sizes[-1])
    queues[0] = q
    injected = arr.total * dt
    for k in range(steps):
        state = QueueState(queues[k], cfg.t0 + k * dt)
        rates = _policy_rates(policy, state, net, arr, svc, dt)
        bad = rates.capacity_violations()
        if bad:
            raise EngineError(f"policy rates exceed capacity on link {bad[0]}")
        q_next, sent, served = _advance(
            queues[k], rates.values, net, arr.rates, svc.rates, dt
        )
        balance = injected - served.sum() - (q_next.sum() - queues[k].sum())
        if abs(balance) > 1e-9 * max(1.0, queues[k].sum() + injected):
            raise EngineError(f"mass balance violated at step {k}: residual {balance}")
        queues[k + 1] = q_next
        applied[k] = rates.values
        link_flow += sent
        served_total += served
    return Trajectory(cfg.t0, dt, queues, applied, link_flow, served_total)
