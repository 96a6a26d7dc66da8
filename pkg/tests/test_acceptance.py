"""Acceptance suite: one test per exit criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  The directional benchmark reproduction (criterion 6) runs 50
instances per family and takes a few minutes; everything else is fast.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from fluidq import (
    ArrivalProfile,
    QueueProportionalPolicy,
    RateAssignment,
    ServiceProfile,
    SimConfig,
    analytic_report,
    balanced_growth_gamma,
    construct_rate_proportional,
    co_optimize,
    empirical_report,
    full_connection,
    ObjectiveSpec,
    run,
    single_sink,
    tagged_run,
)
from fluidq.bench import (
    conjecture_sweep,
    policy_values,
    preset,
    run_experiment,
)
from fluidq.engine import effective_rates

from conftest import single_sink_rates
from test_analytics import random_min_delay_gamma
from test_policies import region_distance

SEED = 20240811
WORKERS = 2


def report(criterion: str, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS ({detail})")


def test_criterion_1_closed_form_reproduction(two_source_instance):
    started = time.perf_counter()
    net, arr, svc, rates = two_source_instance
    analytic = analytic_report(net, arr, svc, rates, horizon=200.0)
    assert abs(analytic.d_avg - 450.0) <= 1e-9
    assert abs(analytic.d_max - 450.0) <= 1e-9
    cfg = SimConfig(horizon=200.0, dt=1.0, discretize=True)
    empirical = empirical_report(tagged_run(net, arr, svc, rates, cfg), arr)
    assert abs(empirical.d_avg - 450.0) <= 0.05 * 450.0
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    report("1", f"analytic 450 exact, empirical {empirical.d_avg:.1f}, {elapsed:.2f}s")


def test_criterion_2_region_oracle_by_lattice_search():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED)
    for trial in range(5):
        lam = np.round(rng.uniform(12, 20, size=2))
        caps = np.round(rng.uniform(20, 35, size=2))
        mu = float(np.round(0.4 * lam.sum()))
        net = single_sink(2, caps)
        arr, svc = ArrivalProfile(lam), ServiceProfile([mu])
        closed_form = 100.0 / mu * (lam.sum() - mu)
        grid1 = np.linspace(0.0, caps[0], 50)
        grid2 = np.linspace(0.0, caps[1], 50)
        best = math.inf
        argmins = []
        for g1 in grid1:
            for g2 in grid2:
                value = analytic_report(
                    net, arr, svc, single_sink_rates(net, [g1, g2]), 200.0
                ).d_avg
                if value < best - 1e-9:
                    best, argmins = value, [(g1, g2)]
                elif value <= best + 1e-9:
                    argmins.append((g1, g2))
        cell = math.hypot(caps[0] / 49, caps[1] / 49)
        # region members attain the lattice minimum (within lattice resolution)
        assert closed_form <= best + 1e-9
        assert best <= closed_form + 1e-9
        # lattice minima all sit within one cell of the region
        for point in argmins:
            assert region_distance(np.array(point), lam, mu) <= cell + 1e-9
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    report("2", f"5 lattice searches, minima on the region, {elapsed:.1f}s")


def test_criterion_3_value_identity_across_region_members():
    rng = np.random.default_rng(SEED + 1)
    checked = 0
    for sizes in ((2, 2), (2, 2, 2)):
        lam = np.round(rng.uniform(5.0, 12.0, size=sizes[0]))
        weights = rng.uniform(0.5, 1.5, size=sizes[-1])
        mu = weights / weights.sum() * lam.sum() * 0.4
        net = full_connection(sizes)
        arr, svc = ArrivalProfile(lam), ServiceProfile(mu)
        ratio = arr.total / svc.total
        expected = 25.0 * (ratio - 1.0)  # T = 50
        for _ in range(10):
            gamma = random_min_delay_gamma(rng, len(sizes), ratio)
            rates = construct_rate_proportional(net, arr, svc, gamma)
            rep = analytic_report(net, arr, svc, rates, horizon=50.0)
            assert abs(rep.d_avg - expected) <= 1e-9 * expected
            assert abs(rep.d_max / rep.d_avg - 1.0) <= 1e-12
            checked += 1
    report("3", f"{checked} region members share the closed-form value")


def test_criterion_4_effective_rate_golden_cases():
    net = full_connection([2, 2])
    arr = ArrivalProfile([4.0, 8.0])
    g_a = effective_rates(net, arr, RateAssignment(net, [4, 4, 5, 5]))
    assert np.array_equal(g_a.values, [2.0, 2.0, 4.0, 4.0])
    g_b = effective_rates(net, arr, RateAssignment(net, [4, 4, 5, 15]))
    assert np.array_equal(g_b.values, [2.0, 2.0, 2.0, 6.0])
    mid = full_connection([2, 1, 2])
    g_c = effective_rates(
        mid,
        ArrivalProfile([1.0, 2.0]),
        RateAssignment.from_dict(
            mid, {(0, 0, 0): 1.0, (0, 1, 0): 2.0, (1, 0, 0): 3.0, (1, 0, 1): 3.0}
        ),
    )
    assert np.array_equal(g_c.values[2:], [1.5, 1.5])
    report("4", "[2,2,4,4], [2,2,2,6], and the 1.5/1.5 middle node reproduce exactly")


def test_criterion_5_queue_proportional_asymptotics():
    lam = np.array([16.0, 12.0])
    mu = float(np.round(0.4 * lam.sum()))  # section-V law
    net = single_sink(2, 100.0)
    arr, svc = ArrivalProfile(lam), ServiceProfile([mu])
    q0 = np.array([300.0, 101.0, 0.0])
    cfg = SimConfig(horizon=500.0, dt=1.0, q0=q0, discretize=True)
    traj = run(net, arr, svc, QueueProportionalPolicy(), cfg)
    q = traj.final.q
    ratio_err = abs(q[0] / q[1] - lam[0] / lam[1]) / (lam[0] / lam[1])
    assert ratio_err < 0.01

    tagged = tagged_run(net, arr, svc, QueueProportionalPolicy(), cfg, window=50.0)
    m_early = tagged.window_mean(7)  # arrivals in [350, 400)
    m_late = tagged.window_mean(9)  # arrivals in [450, 500)
    slope = (m_late - m_early) / 100.0
    target = (lam.sum() - mu) / mu
    assert abs(slope - target) <= 0.03 * target
    report(
        "5",
        f"backlog ratio error {ratio_err:.3%} at t=500, window slope "
        f"{slope:.4f} vs {target:.4f}",
    )


@pytest.fixture(scope="module")
def directional_sweeps():
    sweeps = {}
    for family in (
        "nx1-sufficient",
        "nx1-limited",
        "nsxnd",
        "multistage-16x12x8x6",
        "multistage-6x8x12x16",
    ):
        cfg = replace(preset(family), num_instances=50, seed=SEED)
        sweeps[family] = run_experiment(cfg, workers=WORKERS)
    return sweeps


def _mean_ratio(rows, policy, attr="ratio_avg_vs_opt"):
    values = [getattr(r, attr) for r in rows if r.policy == policy]
    return float(np.mean(values))


def test_criterion_6a_sufficient_capacity_single_sink(directional_sweeps):
    rows = directional_sweeps["nx1-sufficient"]
    opt = np.sort(policy_values(rows, "opt-queue"))
    mx = np.sort(policy_values(rows, "max"))
    cdf_gap = float(np.max(np.abs(opt - mx) / opt))
    assert cdf_gap <= 0.02
    bp_ratio = _mean_ratio(rows, "bp")
    assert bp_ratio >= 1.02
    report("6a", f"OPT/MAX CDF gap {cdf_gap:.3%}, BP mean ratio {bp_ratio:.3f}")


def test_criterion_6b_limited_capacity_single_sink(directional_sweeps):
    rows = directional_sweeps["nx1-limited"]
    max_avg = _mean_ratio(rows, "max")
    max_max = _mean_ratio(rows, "max", "ratio_max_vs_opt")
    assert max_avg >= 1.10
    assert max_max >= 1.5
    report("6b", f"MAX mean d_avg ratio {max_avg:.3f}, d_max ratio {max_max:.3f}")


def test_criterion_6c_single_hop_fan_out(directional_sweeps):
    rows = directional_sweeps["nsxnd"]
    bp_ratio = _mean_ratio(rows, "bp")
    max_ratio = _mean_ratio(rows, "max")
    assert bp_ratio >= 1.2
    assert max_ratio >= 1.8
    report("6c", f"BP mean ratio {bp_ratio:.2f}, MAX mean ratio {max_ratio:.2f}")


def test_criterion_6d_multistage_topologies(directional_sweeps):
    details = []
    for family in ("multistage-16x12x8x6", "multistage-6x8x12x16"):
        rows = directional_sweeps[family]
        bp_ratio = _mean_ratio(rows, "bp")
        max_ratio = _mean_ratio(rows, "max")
        assert bp_ratio >= 1.2
        assert max_ratio >= 1.2
        # min-delay policy keeps per-ingress delays balanced on every instance
        for r in rows:
            if r.policy == "opt-queue":
                assert r.fairness <= 1.02
        details.append(f"{family}: BP {bp_ratio:.2f}, MAX {max_ratio:.2f}")
    report("6d", "; ".join(details))


def test_criterion_6_dominance_across_all_families(directional_sweeps):
    # integer-mode dominance: no baseline beats OPT by more than rounding
    worst = min(
        row.ratio_avg_vs_opt for rows in directional_sweeps.values() for row in rows
    )
    assert worst >= 0.98
    report("6-dominance", f"min baseline/OPT d_avg ratio {worst:.4f} >= 0.98")


def test_criterion_7_optimizer_closed_forms():
    rng = np.random.default_rng(SEED + 2)
    for _ in range(10):
        n = int(rng.integers(2, 8))
        lam = np.round(rng.uniform(5.0, 20.0, size=n))
        mu = float(np.round(0.4 * lam.sum()))
        net = single_sink(n)
        arr, svc = ArrivalProfile(lam), ServiceProfile([mu])
        rates, value = co_optimize(net, arr, svc, ObjectiveSpec("total_bandwidth"))
        assert abs(value - mu) <= 1e-8
        expected = lam * mu / lam.sum()
        per_source = np.array([rates[(0, i, 0)] for i in range(n)])
        assert np.max(np.abs(per_source - expected)) <= 1e-8

    for _ in range(5):
        lam = rng.uniform(4.0, 10.0, size=3)
        mu = rng.uniform(0.4, 1.2, size=2)
        net = full_connection([3, 2, 2])
        arr, svc = ArrivalProfile(lam), ServiceProfile(mu)
        gamma = balanced_growth_gamma(arr, svc, 3)
        rates = construct_rate_proportional(net, arr, svc, gamma)
        target = (lam.sum() - mu.sum()) / 3
        growth = [
            lam.sum() - sum(rates.node_egress(v) for v in net.layer_nodes(0)),
            sum(rates.node_ingress(v) - rates.node_egress(v) for v in net.layer_nodes(1)),
            sum(rates.node_ingress(v) for v in net.layer_nodes(2)) - mu.sum(),
        ]
        assert np.max(np.abs(np.array(growth) - target)) <= 1e-9
    report("7", "bandwidth optimum = mu with proportional split; layer growth balanced")


def test_criterion_8_conjecture_sweep(tmp_path):
    agree, counterexamples = conjecture_sweep(10_000, seed=SEED, out_dir=tmp_path)
    if counterexamples:
        assert (tmp_path / "conjecture_counterexamples.json").exists()
        pytest.fail(
            f"{len(counterexamples)} disagreements; artifact written to {tmp_path}"
        )
    assert agree == 10_000
    report("8", "10000/10000 predicted vs empirical min-delay agreements")


def test_criterion_9_property_suites():
    rng = np.random.default_rng(SEED + 3)
    # queue nonnegativity + mass balance under an adversarial static vector
    net = full_connection([2, 2, 2])
    arr = ArrivalProfile([5.0, 3.0])
    svc = ServiceProfile([2.0, 1.0])
    values = rng.uniform(0.0, 6.0, size=net.num_links)
    cfg = SimConfig(horizon=20.0, dt=0.01, q0=rng.uniform(0, 3, net.num_nodes))
    traj = run(net, arr, svc, RateAssignment(net, values), cfg)
    assert traj.queues.min() >= 0.0
    injected = arr.total * traj.num_steps * traj.dt + cfg.q0.sum()
    assert abs(injected - traj.served.sum() - traj.final.q.sum()) <= 1e-9 * injected

    # dt-halving first-order convergence (dynamic policy; static is exact)
    from test_engine import (
        test_dt_halving_gives_first_order_convergence_for_dynamic_policies,
        test_static_rates_are_integrated_exactly_across_drain_events,
    )

    test_static_rates_are_integrated_exactly_across_drain_events()
    test_dt_halving_gives_first_order_convergence_for_dynamic_policies()

    # tree condition is implied by the layered condition on trees
    from test_policies import test_layered_condition_implies_tree_condition

    test_layered_condition_implies_tree_condition()
    report("9", "nonnegativity, mass balance, dt-order, tree implication all hold")
