"""Link rate control policies and min-delay membership checkers.

Rate-proportional control keeps every node of a layer at the same
ingress/egress rate ratio; the per-layer ratios form the gamma vector.
Queue-proportional control replaces arrival-rate knowledge with live
backlogs and reaches the same delay asymptotically.  Backpressure and
max-link-rate serve as baselines.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import QueueState, effective_flow
from .network import (
    ArrivalProfile,
    LayeredNetwork,
    RateAssignment,
    ServiceProfile,
)

log = logging.getLogger("fluidq")

_warned: set[str] = set()


def _warn_once(message: str) -> None:
    if message not in _warned:
        _warned.add(message)
        log.warning(message)


@dataclass(frozen=True)
class CheckResult:
    """Outcome of a min-delay membership check.

    ``reason`` names the first violated clause when ``ok`` is false;
    ``gamma`` carries the per-layer ratios (supplied or inferred);
    ``residuals`` maps clause names to their deviations.
    """

    ok: bool
    reason: str | None = None
    gamma: tuple[float, ...] | None = None
    residuals: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


def as_gamma(values, num_layers: int) -> tuple[float, ...]:
    gamma = tuple(float(v) for v in values)
    if len(gamma) != num_layers:
        raise ValueError(f"gamma needs {num_layers} entries, got {len(gamma)}")
    if any(not v > 0 for v in gamma):
        raise ValueError("gamma entries must be positive")
    return gamma


def _spread(ratios: np.ndarray) -> float:
    """Relative spread of a ratio family (0 when all equal)."""
    mean = ratios.mean()
    if mean == 0:
        return float(np.max(np.abs(ratios)))
    return float(np.max(np.abs(ratios - mean)) / abs(mean))


# ---------------------------------------------------------------------------
# Membership checks


def check_min_delay_single_sink(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    rates: RateAssignment,
    tol: float = 1e-9,
) -> CheckResult:
    """Membership in the N x 1 min-delay region.

    The region is the union of the rate-proportional branch (all g_i in one
    proportion to lambda_i with total at least mu) and the drain branch
    (every g_i at least lambda_i), intersected with the capacity box.
    """
    if not net.is_single_sink():
        raise ValueError("check applies to N x 1 single-hop networks only")
    n = net.layer_sizes[0]
    g = np.zeros(n)
    for k, link in enumerate(net.links):
        g[link.src] = rates.values[k]
    lam = arr.rates
    mu = float(svc.rates[0])

    bad = rates.capacity_violations(tol)
    if bad:
        return CheckResult(False, f"capacity exceeded on link {bad[0]}")
    if np.all(g >= lam - tol * np.maximum(1.0, lam)):
        return CheckResult(True, None, (1.0, float(lam.sum() / mu)))
    ratios = g / lam
    spread = _spread(ratios)
    if spread > tol:
        return CheckResult(
            False,
            "rates are not proportional to arrival rates",
            residuals={"ratio_spread": spread},
        )
    if g.sum() < mu - tol * max(1.0, mu):
        return CheckResult(
            False,
            "total rate below the service rate (throughput lost)",
            residuals={"throughput_deficit": float(mu - g.sum())},
        )
    gamma1 = float(lam.sum() / g.sum())
    return CheckResult(True, None, (gamma1, float(g.sum() / mu)), {"ratio_spread": spread})


def check_min_delay_single_hop(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    rates: RateAssignment,
    tol: float = 1e-9,
) -> CheckResult:
    """Sufficient condition for single-hop networks: per-ingress totals
    proportional to arrivals, per-egress totals proportional to service
    rates, and every egress node fed at least its service rate."""
    if net.num_layers != 2:
        raise ValueError("check applies to 2-layer networks only")
    rows = np.array([rates.node_egress(nid) for nid in net.ingress_nodes])
    cols = np.array([rates.node_ingress(nid) for nid in net.egress_nodes])
    residuals = {}
    if np.any(rows <= 0):
        return CheckResult(False, "an ingress node has zero egress rate")
    residuals["ingress_ratio_spread"] = _spread(rows / arr.rates)
    residuals["egress_ratio_spread"] = _spread(cols / svc.rates)
    residuals["throughput_deficit"] = float(np.max(svc.rates - cols))
    if residuals["ingress_ratio_spread"] > tol:
        return CheckResult(False, "ingress totals are not proportional to arrivals", None, residuals)
    if residuals["egress_ratio_spread"] > tol:
        return CheckResult(False, "egress totals are not proportional to service rates", None, residuals)
    if residuals["throughput_deficit"] > tol * max(1.0, float(svc.rates.max())):
        return CheckResult(False, "an egress node is fed below its service rate", None, residuals)
    gamma = (float((arr.rates / rows).mean()), float((cols / svc.rates).mean()))
    return CheckResult(True, None, gamma, residuals)


def _layer_ratios(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    values: np.ndarray,
) -> list[np.ndarray | None]:
    """Per-layer arrays of node ingress/egress ratios over the nodes that
    carry flow.  Nodes with neither ingress nor egress rate are skipped (a
    zero-flow node is equivalent to omitting its links, which the routing
    model permits); a node with traffic to move but no egress rate marks
    the whole layer as None."""
    ingress = np.zeros(net.num_nodes)
    egress = np.zeros(net.num_nodes)
    np.add.at(ingress, net.link_dst, values)
    np.add.at(egress, net.link_src, values)
    ingress[list(net.ingress_nodes)] = arr.rates
    out: list[np.ndarray | None] = []
    for l in range(net.num_layers - 1):
        ids = np.array(net.layer_nodes(l))
        stuck = (egress[ids] <= 0) & (ingress[ids] > 0)
        if np.any(stuck):
            out.append(None)
            continue
        carrying = egress[ids] > 0
        out.append(ingress[ids[carrying]] / egress[ids[carrying]])
    egress_ids = list(net.egress_nodes)
    out.append(ingress[egress_ids] / svc.rates)
    return out


def check_min_delay_layered(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    rates: RateAssignment,
    gamma=None,
    tol: float = 1e-9,
) -> CheckResult:
    """Layered-network condition: each layer's node ingress/egress ratios
    collapse to one constant (gamma_l inferred when not supplied) and the
    egress layer actually serves min(total arrivals, total service).

    The throughput clause is evaluated on the effective flow, so set rates
    that overcommit an empty node are judged by what they really deliver.
    A node with zero egress rate in a flow-carrying layer fails the check
    (its ratio is undefined).
    """
    ratios = _layer_ratios(net, arr, svc, rates.values)
    inferred: list[float] = []
    residuals = {}
    given = as_gamma(gamma, net.num_layers) if gamma is not None else None
    for l, r in enumerate(ratios):
        if r is None:
            return CheckResult(False, f"zero egress rate at a node of layer {l + 1}")
        if r.size == 0:
            return CheckResult(False, f"no flow through layer {l + 1}")
        target = given[l] if given else float(r.mean())
        dev = float(np.max(np.abs(r - target)) / max(abs(target), 1e-300))
        residuals[f"layer_{l + 1}_ratio_spread"] = dev
        if dev > tol:
            return CheckResult(
                False, f"unequal ingress/egress ratios at layer {l + 1}", None, residuals
            )
        inferred.append(target)
    _, inflow, _, _ = effective_flow(net, arr, rates.values)
    service = np.minimum(inflow[list(net.egress_nodes)], svc.rates).sum()
    best = min(arr.total, svc.total)
    residuals["throughput_deficit"] = float(best - service)
    if service < best - tol * max(1.0, best):
        return CheckResult(False, "maximum throughput not achieved", tuple(inferred), residuals)
    return CheckResult(True, None, tuple(inferred), residuals)


# ---------------------------------------------------------------------------
# Constructors


def _check_constructible(net: LayeredNetwork) -> None:
    for l in range(net.num_layers - 1):
        full = net.layer_links(l).size == net.layer_sizes[l] * net.layer_sizes[l + 1]
        unique = all(len(net.out_links[nid]) == 1 for nid in net.layer_nodes(l))
        if not (full or unique):
            raise ValueError(
                f"layers {l + 1}-{l + 2} are neither fully connected nor "
                "single-child; no constructive split available"
            )


def construct_rate_proportional(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    gamma,
    masses=None,
) -> RateAssignment:
    """Build a rate vector realizing the given per-layer ratios.

    Each node's egress total is its ingress divided by gamma_l, split
    across next-layer nodes in proportion to their egress masses: uniform
    for middle layers (``masses`` overrides), service-rate shares for the
    egress layer.  Requires full connection (or single-child nodes) between
    adjacent layers and gamma consistent with maximum throughput.
    """
    gamma = as_gamma(gamma, net.num_layers)
    _check_constructible(net)
    ratio = arr.total / svc.total
    prod = math.prod(gamma)
    if abs(prod - ratio) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"gamma product {prod:g} differs from total arrival/service ratio "
            f"{ratio:g}; the egress-layer clause cannot hold"
        )
    values = np.zeros(net.num_links)
    ingress = arr.rates.copy()
    for l in range(net.num_layers - 1):
        node_egress = ingress / gamma[l]
        next_size = net.layer_sizes[l + 1]
        if l == net.num_layers - 2:
            mass = svc.rates
        elif masses is not None and masses[l] is not None:
            mass = np.asarray(masses[l], dtype=float)
        else:
            mass = np.ones(next_size)
        if len(mass) != next_size or np.any(mass <= 0):
            raise ValueError(f"bad egress masses for layer {l + 2}")
        nxt = np.zeros(next_size)
        for nid in net.layer_nodes(l):
            _, i = net.node_coords(nid)
            out = net.out_links[nid]
            if len(out) == 1:
                lk = out[0]
                values[lk] = node_egress[i]
                nxt[net.links[lk].dst] += node_egress[i]
            else:
                share = mass / mass.sum()
                for lk in out:
                    j = net.links[lk].dst
                    values[lk] = node_egress[i] * share[j]
                    nxt[j] += values[lk]
        ingress = nxt
    for k, link in enumerate(net.links):
        if values[k] > link.capacity + 1e-9 * max(1.0, values[k]):
            raise ValueError(
                f"gamma infeasible against capacities: link "
                f"({link.layer + 1},{link.src + 1},{link.dst + 1}) needs "
                f"{values[k]:g} > capacity {link.capacity:g}"
            )
    return RateAssignment(net, values)


def proportional_fill(weights, caps, budget: float) -> np.ndarray:
    """Allocate ``budget`` in proportion to ``weights`` subject to per-entry
    caps, waterfilling the excess of saturated entries onto the rest."""
    w = np.asarray(weights, dtype=float)
    c = np.asarray(caps, dtype=float)
    x = np.zeros_like(w)
    active = w > 0
    if budget <= 0 or not active.any():
        return x
    saturated = np.zeros_like(active)
    for _ in range(len(w)):
        free = active & ~saturated
        if not free.any():
            break
        remaining = budget - x[saturated].sum()
        if remaining <= 0:
            break
        scale = remaining / w[free].sum()
        trial = scale * w
        over = free & (trial >= c * (1 - 1e-12))
        if not over.any():
            x[free] = trial[free]
            break
        x[over] = c[over]
        saturated |= over
    return x


# ---------------------------------------------------------------------------
# Policies


class StaticPolicy:
    """Constant transmission rates."""

    def __init__(self, rates: RateAssignment, name: str = "opt-static"):
        self.assignment = rates
        self.name = name

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return self.assignment


class CallbackPolicy:
    """Arbitrary state-to-rates callback (must be re-entrant)."""

    def __init__(self, fn, name: str = "custom"):
        self.fn = fn
        self.name = name

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return self.fn(state, net, arr, svc, dt)


def max_link_rate_rates(net: LayeredNetwork) -> RateAssignment:
    """Every link at its capacity; undefined with unbounded links."""
    if any(link.unbounded for link in net.links):
        bad = next(link for link in net.links if link.unbounded)
        raise ValueError(
            f"max-link-rate undefined: link ({bad.layer + 1},{bad.src + 1},"
            f"{bad.dst + 1}) has unbounded capacity"
        )
    return RateAssignment(net, net.capacities)


class MaxLinkRatePolicy:
    name = "max"

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return max_link_rate_rates(net)


def backpressure_rates(
    state: QueueState, net: LayeredNetwork, svc: ServiceProfile
) -> RateAssignment:
    """Capacity on every link whose source backlog strictly exceeds its
    destination backlog, zero otherwise (egress service is handled by the
    engine's work-conserving servers)."""
    if any(link.unbounded for link in net.links):
        raise ValueError("backpressure undefined with unbounded capacities")
    active = state.q[net.link_src] > state.q[net.link_dst]
    return RateAssignment(net, np.where(active, net.capacities, 0.0))


class BackpressurePolicy:
    name = "bp"

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return backpressure_rates(state, net, svc)


def queue_proportional_rates(
    state: QueueState,
    net: LayeredNetwork,
    svc: ServiceProfile,
    gamma=None,
    arr: ArrivalProfile | None = None,
    dt: float = 0.0,
) -> RateAssignment:
    """Egress rates proportional to live backlogs within each layer.

    Without ``gamma`` each layer's total egress budget is exactly the
    downstream service requirement (the minimal throughput-preserving
    choice); with ``gamma`` a node's egress is its backlog divided by
    gamma_l, scaled up if needed to preserve the throughput floor.  Zero
    backlogs are smoothed with the arrivals observed over the step
    (``arr`` and ``dt``), realizing the policy's vanishing-step limit
    without arrival-rate knowledge entering the proportions.  Per-link
    splits follow the proportional construction: service-rate shares into
    the egress layer, uniform elsewhere.  Rates that would exceed capacity
    are waterfilled (single-sink) or proportionally downscaled with a
    warning.
    """
    if gamma is not None:
        gamma = as_gamma(gamma, net.num_layers)
    total_service = svc.total
    values = np.zeros(net.num_links)
    clipped = False
    for l in range(net.num_layers - 1):
        ids = list(net.layer_nodes(l))
        shares = state.q[ids].astype(float).copy()
        if l == 0 and arr is not None and dt > 0:
            shares = shares + arr.rates * dt
        if shares.sum() <= 0:
            shares = np.ones(len(ids))
        if gamma is not None:
            node_egress = shares / gamma[l]
            scale_up = total_service / node_egress.sum() if node_egress.sum() > 0 else 1.0
            if scale_up > 1.0:
                node_egress = node_egress * scale_up
        else:
            node_egress = total_service * shares / shares.sum()

        if net.is_single_sink():
            budget = total_service
            if gamma is not None:
                budget = max(budget, shares.sum() / gamma[0])
            values = proportional_fill(shares, net.capacities, budget)
            if values.sum() < budget - 1e-9 * max(1.0, budget):
                _warn_once(
                    "queue-proportional rates hit capacity and were downscaled; "
                    "the throughput clause may be violated"
                )
            break

        next_lo = net.node_id(l + 1, 0)
        mass = (
            svc.rates if l == net.num_layers - 2 else np.ones(net.layer_sizes[l + 1])
        )
        share = mass / mass.sum()
        for local, nid in enumerate(ids):
            out = net.out_links[nid]
            if len(out) == 1:
                values[out[0]] = node_egress[local]
            else:
                for lk in out:
                    values[lk] = node_egress[local] * share[net.links[lk].dst]
            factor = 1.0
            for lk in out:
                cap = net.links[lk].capacity
                if values[lk] > cap:
                    factor = min(factor, cap / values[lk])
            if factor < 1.0:
                clipped = True
                for lk in out:
                    values[lk] *= factor
    if clipped:
        _warn_once(
            "queue-proportional rates hit capacity and were downscaled; "
            "the throughput clause may be violated"
        )
    return RateAssignment(net, values)


class QueueProportionalPolicy:
    name = "opt-queue"

    def __init__(self, gamma=None):
        self.gamma = gamma

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return queue_proportional_rates(state, net, svc, self.gamma, arr, dt)


# ---------------------------------------------------------------------------
# Trees


def parent_source_set(net: LayeredNetwork) -> list[frozenset[int]]:
    """Ingress-layer ancestors of every node (a node's own index at the
    ingress layer)."""
    pss: list[set[int]] = [set() for _ in range(net.num_nodes)]
    for i, nid in enumerate(net.ingress_nodes):
        pss[nid] = {i}
    for l in range(net.num_layers - 1):
        for lk in net.layer_links(l):
            pss[net.link_dst[lk]] |= pss[net.link_src[lk]]
    return [frozenset(s) for s in pss]


def check_min_delay_tree(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    rates: RateAssignment,
    tol: float = 1e-9,
) -> CheckResult:
    """Tree condition: into every node, the parents' total subtree arrival
    rates stand in one proportion to the link rates (a per-destination
    constant), and maximum throughput is achieved."""
    if not net.is_fan_in_tree():
        raise ValueError("check applies to fan-in tree topologies only")
    pss = parent_source_set(net)
    subtree_lam = np.array([sum(arr.rates[i] for i in s) for s in pss])
    residuals = {}
    for l in range(1, net.num_layers):
        for nid in net.layer_nodes(l):
            _, j = net.node_coords(nid)
            in_ids = net.in_links[nid]
            g_in = rates.values[list(in_ids)]
            if np.any(g_in <= 0):
                return CheckResult(
                    False, f"zero rate into layer {l + 1} node {j + 1}"
                )
            lam_in = np.array([subtree_lam[net.link_src[k]] for k in in_ids])
            dev = _spread(lam_in / g_in)
            residuals[f"node_{l + 1}_{j + 1}_ratio_spread"] = dev
            if dev > tol:
                return CheckResult(
                    False,
                    f"link rates into layer {l + 1} node {j + 1} are not "
                    "proportional to their subtree arrival rates",
                    None,
                    residuals,
                )
    _, inflow, _, _ = effective_flow(net, arr, rates.values)
    egress_ids = list(net.egress_nodes)
    service = np.minimum(inflow[egress_ids], svc.rates).sum()
    best = float(np.minimum(subtree_lam[egress_ids], svc.rates).sum())
    residuals["throughput_deficit"] = float(best - service)
    if service < best - tol * max(1.0, best):
        return CheckResult(False, "maximum throughput not achieved", None, residuals)
    return CheckResult(True, None, None, residuals)


def tree_rate_proportional(
    net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile
) -> RateAssignment:
    """Each link carries a common multiple of its source's subtree arrival
    rate, the multiple chosen as the smallest that feeds every egress node
    its achievable throughput."""
    if not net.is_fan_in_tree():
        raise ValueError("construction applies to fan-in tree topologies only")
    pss = parent_source_set(net)
    subtree_lam = np.array([sum(arr.rates[i] for i in s) for s in pss])
    scale = 0.0
    for j, nid in enumerate(net.egress_nodes):
        reachable = subtree_lam[nid]
        target = min(float(svc.rates[j]), reachable)
        scale = max(scale, target / reachable)
    values = np.array([scale * subtree_lam[net.link_src[k]] for k in range(net.num_links)])
    assignment = RateAssignment(net, values)
    bad = assignment.capacity_violations()
    if bad:
        raise ValueError(f"tree rates exceed capacity on link {bad[0]}")
    return assignment


class TreePolicy:
    name = "tree"

    def __init__(self, net, arr, svc):
        self._static = tree_rate_proportional(net, arr, svc)

    def rates(self, state, net, arr, svc, dt) -> RateAssignment:
        return self._static


# ---------------------------------------------------------------------------
# Initial backlog correction (single-sink)


def initial_backlog_weights(arr: ArrivalProfile, q0, horizon: float) -> np.ndarray:
    """Rate-split weights for a single-sink network with initial backlog:
    w_i = sqrt(lambda_i (lambda_i + q0_i / T)).  Pairwise rate ratios are
    w_i / w_j, collapsing to lambda_i / lambda_j as q0/T vanishes."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    q0 = np.asarray(q0, dtype=float)
    if q0.shape != arr.rates.shape:
        raise ValueError("q0 must give one backlog per ingress node")
    if np.any(q0 < 0):
        raise ValueError("q0 must be nonnegative")
    lam = arr.rates
    return np.sqrt(lam * (lam + q0 / horizon))
