"""Overload detection and LP co-optimization under min-delay constraints.

Overload means no static rate vector within the capacities can keep every
buffer bounded: the defining inequality system is checked by LP
feasibility.  With the per-layer ratio vector gamma fixed, the min-delay
conditions are linear in the rates, so any piecewise-linear secondary
objective (bandwidth, utilization, buffer growth) can be co-optimized over
them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lp
from .network import (
    ArrivalProfile,
    LayeredNetwork,
    RateAssignment,
    ServiceProfile,
    ensure_valid,
)
from .policies import as_gamma, check_min_delay_layered

OBJECTIVE_KINDS = (
    "total_bandwidth",
    "max_utilization",
    "avg_utilization",
    "max_overload_rate",
    "max_layer_growth",
)


class InfeasibleError(RuntimeError):
    """The constraint system admits no rate vector."""

    def __init__(self, message: str, binding: list[str] | None = None):
        self.binding = binding or []
        if self.binding:
            message = f"{message} (binding: {'; '.join(self.binding)})"
        super().__init__(message)


@dataclass(frozen=True)
class OverloadVerdict:
    """Outcome of the overload feasibility check.  ``witness`` is a rate
    vector keeping all buffers bounded when one exists."""

    overloaded: bool
    witness: RateAssignment | None
    detail: str


@dataclass(frozen=True)
class ObjectiveSpec:
    """A secondary objective plus optional routing restrictions.

    ``forced_zero`` lists links that must carry nothing, ``split_cap`` caps
    the fraction of a node's inflow any single link may carry, and
    ``utilization_cap`` bounds g/c on every finite-capacity link.
    """

    kind: str
    forced_zero: tuple[tuple[int, int, int], ...] = ()
    split_cap: float | None = None
    utilization_cap: float | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.split_cap is not None and not 0 < self.split_cap <= 1:
            raise ValueError("split cap must be in (0, 1]")
        if self.utilization_cap is not None and not 0 < self.utilization_cap <= 1:
            raise ValueError("utilization cap must be in (0, 1]")


def _node_in_out_columns(net: LayeredNetwork):
    """Per node, the link-column index lists for ingress and egress."""
    return (
        [list(net.in_links[nid]) for nid in range(net.num_nodes)],
        [list(net.out_links[nid]) for nid in range(net.num_nodes)],
    )


def overload_check(
    net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile
) -> OverloadVerdict:
    """LP feasibility of the bounded-backlog inequality system.

    Not overloaded means some g within the capacities ships every ingress
    node's arrivals while no node (middle or egress) receives more than it
    can pass on; the witness returned satisfies that system to 1e-9.
    Boundary-feasible instances count as not overloaded.
    """
    ensure_valid(net, arr, svc)
    m = net.num_links
    in_cols, out_cols = _node_in_out_columns(net)
    a_ub: list[np.ndarray] = []
    b_ub: list[float] = []
    for i, nid in enumerate(net.ingress_nodes):
        row = np.zeros(m)
        row[out_cols[nid]] = -1.0
        a_ub.append(row)
        b_ub.append(-float(arr.rates[i]))
    for l in range(1, net.num_layers - 1):
        for nid in net.layer_nodes(l):
            row = np.zeros(m)
            row[in_cols[nid]] = 1.0
            row[out_cols[nid]] -= 1.0
            a_ub.append(row)
            b_ub.append(0.0)
    for j, nid in enumerate(net.egress_nodes):
        row = np.zeros(m)
        row[in_cols[nid]] = 1.0
        a_ub.append(row)
        b_ub.append(float(svc.rates[j]))
    for k, link in enumerate(net.links):
        if not link.unbounded:
            row = np.zeros(m)
            row[k] = 1.0
            a_ub.append(row)
            b_ub.append(link.capacity)
    result = lp.solve_lp(np.zeros(m), a_ub=np.array(a_ub), b_ub=np.array(b_ub))
    if result.status == lp.INFEASIBLE:
        return OverloadVerdict(
            True, None, "no rate vector within capacity can bound all backlogs"
        )
    witness = RateAssignment(net, result.x)
    residual = max(
        (float(row @ result.x) - bb for row, bb in zip(a_ub, b_ub)), default=0.0
    )
    if residual > 1e-9 * max(1.0, arr.total):
        raise lp.SimplexError(f"witness violates the system by {residual:g}")
    return OverloadVerdict(False, witness, "bounded-backlog rates exist")


def balanced_growth_gamma(
    arr: ArrivalProfile, svc: ServiceProfile, num_layers: int
) -> tuple[float, ...]:
    """Per-layer ratios that equalize total queue growth across layers.

    With overload excess S = total arrivals - total service, each of the L
    layers then backlogs at rate S / L.
    """
    lam_sum = arr.total
    mu_sum = svc.total
    excess = lam_sum - mu_sum
    gamma = []
    for l in range(1, num_layers + 1):
        upper = lam_sum - (l - 1) / num_layers * excess
        lower = lam_sum - l / num_layers * excess
        if lower <= 0 or upper <= 0:
            raise ValueError("balanced-growth ratios undefined: nonpositive layer total")
        gamma.append(upper / lower)
    return tuple(gamma)


def throughput_tight_gamma(
    arr: ArrivalProfile, svc: ServiceProfile, num_layers: int
) -> tuple[float, ...]:
    """Ratios that keep every layer's total egress at exactly the total
    service rate: all backlog accumulates at the ingress layer and no link
    bandwidth is spent beyond what throughput needs."""
    return (arr.total / svc.total,) + (1.0,) * (num_layers - 1)


def co_optimize(
    net: LayeredNetwork,
    arr: ArrivalProfile,
    svc: ServiceProfile,
    objective: ObjectiveSpec,
    gamma=None,
) -> tuple[RateAssignment, float]:
    """Minimize the secondary objective over the min-delay rate family.

    When ``gamma`` is omitted, bandwidth/utilization objectives use the
    throughput-tight ratios (smallest flow volume that still serves
    min(total arrivals, total service)) and the growth-balancing objectives
    use the balanced-growth ratios.  Raises :class:`InfeasibleError` with
    the binding constraints when the system admits no rate vector.
    """
    ensure_valid(net, arr, svc)
    if gamma is None:
        if objective.kind in ("max_overload_rate", "max_layer_growth"):
            gamma = balanced_growth_gamma(arr, svc, net.num_layers)
        else:
            gamma = throughput_tight_gamma(arr, svc, net.num_layers)
    gamma = as_gamma(gamma, net.num_layers)
    ratio = arr.total / svc.total
    if abs(math.prod(gamma) - ratio) > 1e-9 * max(1.0, ratio):
        raise InfeasibleError(
            f"gamma product {math.prod(gamma):g} is inconsistent with the "
            f"arrival/service ratio {ratio:g}; maximum throughput cannot hold"
        )

    m = net.num_links
    in_cols, out_cols = _node_in_out_columns(net)
    aux = 0
    if objective.kind in ("max_utilization", "max_layer_growth"):
        aux = 1
    elif objective.kind == "max_overload_rate":
        aux = 2  # free epigraph variable split into t+ and t-
    width = m + aux

    a_eq: list[np.ndarray] = []
    b_eq: list[float] = []
    eq_names: list[str] = []
    for i, nid in enumerate(net.ingress_nodes):
        row = np.zeros(width)
        row[out_cols[nid]] = 1.0
        a_eq.append(row)
        b_eq.append(float(arr.rates[i]) / gamma[0])
        eq_names.append(f"ingress ratio at layer 1 node {i + 1}")
    for l in range(1, net.num_layers - 1):
        for nid in net.layer_nodes(l):
            _, i = net.node_coords(nid)
            row = np.zeros(width)
            row[in_cols[nid]] = 1.0
            row[out_cols[nid]] -= gamma[l]
            a_eq.append(row)
            b_eq.append(0.0)
            eq_names.append(f"ratio at layer {l + 1} node {i + 1}")
    for j, nid in enumerate(net.egress_nodes):
        row = np.zeros(width)
        row[in_cols[nid]] = 1.0
        a_eq.append(row)
        b_eq.append(gamma[-1] * float(svc.rates[j]))
        eq_names.append(f"egress ratio at node {j + 1}")
    for key in objective.forced_zero:
        if tuple(key) not in net.link_index:
            raise ValueError(f"forced-zero link {key} does not exist")
        row = np.zeros(width)
        row[net.link_index[tuple(key)]] = 1.0
        a_eq.append(row)
        b_eq.append(0.0)
        eq_names.append(f"forced zero on link {tuple(key)}")

    a_ub: list[np.ndarray] = []
    b_ub: list[float] = []
    ub_names: list[str] = []

    def add_ub(row, b, name):
        a_ub.append(row)
        b_ub.append(b)
        ub_names.append(name)

    for k, link in enumerate(net.links):
        cap = link.capacity
        if objective.utilization_cap is not None and not link.unbounded:
            cap = min(cap, objective.utilization_cap * link.capacity)
        if not math.isinf(cap):
            row = np.zeros(width)
            row[k] = 1.0
            add_ub(row, cap, f"capacity of link {link.key}")
    if objective.split_cap is not None:
        beta = objective.split_cap
        for k, link in enumerate(net.links):
            row = np.zeros(width)
            row[k] = 1.0
            nid = net.link_src[k]
            if link.layer == 0:
                bound = beta * float(arr.rates[link.src])
            else:
                row[in_cols[nid]] -= beta
                bound = 0.0
            add_ub(row, bound, f"split cap on link {link.key}")

    c = np.zeros(width)
    if objective.kind == "total_bandwidth":
        c[:m] = 1.0
    elif objective.kind == "avg_utilization":
        finite = [k for k, link in enumerate(net.links) if not link.unbounded]
        if not finite:
            raise ValueError("average utilization needs at least one finite capacity")
        for k in finite:
            c[k] = 1.0 / (net.capacities[k] * len(finite))
    elif objective.kind == "max_utilization":
        c[m] = 1.0
        for k, link in enumerate(net.links):
            if link.unbounded:
                continue
            row = np.zeros(width)
            row[k] = 1.0
            row[m] = -net.capacities[k]
            add_ub(row, 0.0, f"utilization epigraph for link {link.key}")
    elif objective.kind == "max_overload_rate":
        c[m] = 1.0
        c[m + 1] = -1.0
        for nid in range(net.num_nodes):
            l, i = net.node_coords(nid)
            row = np.zeros(width)
            rhs = 0.0
            if l == 0:
                rhs = -float(arr.rates[i])
            else:
                row[in_cols[nid]] = 1.0
            if l == net.num_layers - 1:
                rhs += float(svc.rates[i])
            else:
                row[out_cols[nid]] -= 1.0
            row[m] = -1.0
            row[m + 1] = 1.0
            add_ub(row, rhs, f"overload epigraph at layer {l + 1} node {i + 1}")
    elif objective.kind == "max_layer_growth":
        c[m] = 1.0
        for l in range(net.num_layers):
            row = np.zeros(width)
            rhs = 0.0
            for nid in net.layer_nodes(l):
                _, i = net.node_coords(nid)
                if l == 0:
                    rhs -= float(arr.rates[i])
                else:
                    row[in_cols[nid]] += 1.0
                if l == net.num_layers - 1:
                    rhs += float(svc.rates[i])
                else:
                    row[out_cols[nid]] -= 1.0
            row[m] = -1.0
            add_ub(row, rhs, f"growth epigraph at layer {l + 1}")

    result = lp.solve_lp(
        c,
        a_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        a_eq=np.array(a_eq),
        b_eq=np.array(b_eq),
    )
    if result.status == lp.INFEASIBLE:
        names = ub_names + eq_names
        binding = [names[r] for r in result.infeasible_rows if r < len(names)]
        raise InfeasibleError("min-delay constraint system is infeasible", binding)
    if result.status != lp.OPTIMAL:
        raise InfeasibleError(f"solver returned {result.status}")
    rates = RateAssignment(net, result.x[:m])
    verdict = check_min_delay_layered(net, arr, svc, rates, gamma, tol=1e-8)
    if not verdict:
        raise lp.SimplexError(f"optimizer output fails the ratio check: {verdict.reason}")
    if objective.kind == "max_overload_rate":
        value = float(result.x[m] - result.x[m + 1])
    elif aux:
        value = float(result.x[m])
    else:
        value = float(result.objective)
    return rates, value
