import math

import numpy as np
import pytest

from fluidq import (
    AnalyticScopeError,
    ArrivalProfile,
    PacketSinkError,
    QueueState,
    RateAssignment,
    ServiceProfile,
    SimConfig,
    analytic_report,
    construct_rate_proportional,
    empirical_report,
    full_connection,
    packet_delay,
    path_weights,
    single_sink,
    tagged_run,
)
from fluidq.policies import initial_backlog_weights

from conftest import single_sink_rates


def random_min_delay_gamma(rng, num_layers, ratio):
    """Per-layer ratios >= 1 multiplying to the given overload ratio."""
    while True:
        g = rng.uniform(1.0, ratio ** (1.0 / num_layers) * 1.3, size=num_layers - 1)
        if g.prod() <= ratio:
            tail = ratio / g.prod()
            if tail >= 1.0:
                return (*g.tolist(), tail)


# ---------------------------------------------------------------------------
# packet_delay


def test_packet_delay_two_node_max_form():
    # q1=4 behind rate 1, then q2=2 at service 2: max{(4+2)/2, 4/1} = 4
    net = full_connection([1, 1])
    arr, svc = ArrivalProfile([1.0]), ServiceProfile([2.0])
    rates = RateAssignment(net, [1.0])
    state = QueueState(np.array([4.0, 2.0]), 0.0)
    assert packet_delay(net, arr, svc, rates, (0, 0), 0.0, source=state) == pytest.approx(4.0)
    # and the faster-drain branch: g=3 > mu: max{6/2, 4/3} = 3
    fast = RateAssignment(net, [3.0])
    assert packet_delay(net, arr, svc, fast, (0, 0), 0.0, source=state) == pytest.approx(3.0)


def test_packet_delay_zero_when_everything_drains():
    net = full_connection([2, 2])
    arr, svc = ArrivalProfile([1.0, 1.0]), ServiceProfile([3.0, 3.0])
    rates = RateAssignment(net, [0.5, 0.5, 0.5, 0.5])
    assert packet_delay(net, arr, svc, rates, (0, 1), 7.0) == 0.0


def test_packet_delay_closed_form_linear_growth(two_source_instance):
    net, arr, svc, rates = two_source_instance
    for t in (1.0, 10.0, 123.4):
        assert packet_delay(net, arr, svc, rates, (0, 0), t) == pytest.approx(4.5 * t)
        assert packet_delay(net, arr, svc, rates, (1, 0), t) == pytest.approx(4.5 * t)


def test_packet_delay_infinite_without_egress_rate():
    net = single_sink(2)
    arr, svc = ArrivalProfile([2.0, 1.0]), ServiceProfile([1.0])
    stuck = single_sink_rates(net, [0.0, 1.0])
    assert math.isinf(packet_delay(net, arr, svc, stuck, (0, 0), 5.0))


def test_packet_delay_rejects_bad_paths(two_source_instance):
    net, arr, svc, rates = two_source_instance
    with pytest.raises(ValueError):
        packet_delay(net, arr, svc, rates, (0,), 1.0)
    tree_net = full_connection([2, 2])
    with pytest.raises(TypeError):
        packet_delay(net, arr, svc, rates, (0, 0), 1.0, source="nope")


# ---------------------------------------------------------------------------
# analytic metrics


def test_analytic_metrics_reproduce_two_source_closed_form(two_source_instance):
    net, arr, svc, rates = two_source_instance
    report = analytic_report(net, arr, svc, rates, horizon=200.0)
    expected = 200.0 / (2 * 2.0) * (11.0 - 2.0)
    assert report.d_avg == pytest.approx(expected, abs=1e-9)
    assert report.d_max == pytest.approx(expected, abs=1e-9)


def test_analytic_metrics_zero_when_underloaded():
    net = single_sink(2)
    arr, svc = ArrivalProfile([1.0, 2.0]), ServiceProfile([5.0])
    report = analytic_report(net, arr, svc, single_sink_rates(net, [1.0, 2.0]), 50.0)
    assert report.d_avg == 0.0 and report.d_max == 0.0


def test_analytic_metrics_multistage_closed_form():
    # overload ratio 2.5 on a 3-layer network: D = (T/2)(2.5 - 1) = 37.5
    net = full_connection([2, 2, 2])
    arr = ArrivalProfile([6.0, 4.0])
    svc = ServiceProfile([3.0, 1.0])
    rng = np.random.default_rng(3)
    gamma = random_min_delay_gamma(rng, 3, 2.5)
    rates = construct_rate_proportional(net, arr, svc, gamma)
    report = analytic_report(net, arr, svc, rates, horizon=50.0)
    assert report.d_avg == pytest.approx(37.5, abs=1e-9)
    assert report.d_max == pytest.approx(37.5, abs=1e-9)


def test_min_delay_value_invariance_across_satisfying_vectors():
    """Ten distinct region members on random 2x2 and 2x2x2 instances all
    produce the same closed-form metric value."""
    rng = np.random.default_rng(42)
    for sizes in ((2, 2), (2, 2, 2)):
        lam = rng.uniform(3.0, 9.0, size=sizes[0])
        mu_weights = rng.uniform(0.5, 1.5, size=sizes[-1])
        mu = mu_weights / mu_weights.sum() * lam.sum() * 0.4
        net = full_connection(sizes)
        arr, svc = ArrivalProfile(lam), ServiceProfile(mu)
        ratio = arr.total / svc.total
        expected = 25.0 * (ratio - 1.0)
        seen = set()
        for _ in range(10):
            gamma = random_min_delay_gamma(rng, len(sizes), ratio)
            rates = construct_rate_proportional(net, arr, svc, gamma)
            seen.add(tuple(np.round(rates.values, 12)))
            report = analytic_report(net, arr, svc, rates, horizon=50.0)
            assert abs(report.d_avg - expected) <= 1e-9 * expected
            assert abs(report.d_max / report.d_avg - 1.0) <= 1e-12
        assert len(seen) == 10


def test_weighted_mean_identity():
    rng = np.random.default_rng(5)
    net = full_connection([3, 2])
    lam = rng.uniform(1.0, 6.0, size=3)
    arr, svc = ArrivalProfile(lam), ServiceProfile([2.0, 1.0])
    rates = RateAssignment(net, rng.uniform(0.2, 3.0, size=net.num_links))
    report = analytic_report(net, arr, svc, rates, horizon=30.0)
    assert report.d_avg == np.dot(lam, report.d_bar) / lam.sum()
    assert report.d_max == report.d_bar.max()
    assert report.d_max >= report.d_avg >= 0.0


def test_analytic_metrics_infinite_for_stranded_traffic():
    net = single_sink(2)
    arr, svc = ArrivalProfile([2.0, 1.0]), ServiceProfile([1.0])
    report = analytic_report(net, arr, svc, single_sink_rates(net, [0.0, 1.0]), 10.0)
    assert math.isinf(report.d_max) and math.isinf(report.d_avg)
    assert math.isfinite(report.d_bar[1])


# ---------------------------------------------------------------------------
# path weights


def test_path_weights_single_path_network():
    net = full_connection([1, 1])
    table = path_weights(net, ArrivalProfile([2.0]), RateAssignment(net, [1.5]))
    assert table.for_ingress(0) == {(0, 0): 1.0}


def test_path_weights_equal_splits_multistage():
    net = full_connection([2, 2, 2])
    arr = ArrivalProfile([4.0, 4.0])
    rates = RateAssignment(net, np.ones(net.num_links))
    table = path_weights(net, arr, rates)
    for i in range(2):
        weights = table.for_ingress(i)
        assert len(weights) == 4
        assert all(w == pytest.approx(0.25) for w in weights.values())
        assert sum(weights.values()) == pytest.approx(1.0)


def test_path_weights_follow_effective_splits():
    net = full_connection([2, 2])
    arr = ArrivalProfile([4.0, 8.0])
    rates = RateAssignment(net, [4.0, 4.0, 5.0, 15.0])
    table = path_weights(net, arr, rates)
    w = table.for_ingress(1)
    assert w[(1, 0)] == pytest.approx(0.25)
    assert w[(1, 1)] == pytest.approx(0.75)


def test_path_weights_error_on_packet_sink():
    net = full_connection([1, 1, 1])
    arr = ArrivalProfile([2.0])
    rates = RateAssignment.from_dict(net, {(0, 0, 0): 1.0, (1, 0, 0): 0.0})
    with pytest.raises(PacketSinkError):
        path_weights(net, arr, rates)


# ---------------------------------------------------------------------------
# empirical metrics


def test_empirical_matches_analytic_on_min_delay_instance(two_source_instance):
    net, arr, svc, rates = two_source_instance
    cfg = SimConfig(horizon=200.0, dt=1.0, discretize=True)
    report = empirical_report(tagged_run(net, arr, svc, rates, cfg), arr)
    assert abs(report.d_avg - 450.0) <= 0.05 * 450.0


def test_empirical_matches_analytic_off_optimum():
    net = full_connection([2, 2])
    arr = ArrivalProfile([5.0, 9.0])
    svc = ServiceProfile([3.0, 2.0])
    rates = RateAssignment(net, [2.0, 1.0, 3.0, 2.0])
    analytic = analytic_report(net, arr, svc, rates, horizon=150.0)
    cfg = SimConfig(horizon=150.0, dt=1.0, discretize=True)
    empirical = empirical_report(tagged_run(net, arr, svc, rates, cfg), arr)
    assert abs(empirical.d_avg - analytic.d_avg) <= 0.05 * analytic.d_avg
    assert abs(empirical.d_max - analytic.d_max) <= 0.05 * analytic.d_max


def test_empirical_zero_sojourns_without_overload():
    net = full_connection([1, 1])
    arr, svc = ArrivalProfile([1.0]), ServiceProfile([2.0])
    cfg = SimConfig(horizon=50.0, dt=1.0, discretize=True)
    report = empirical_report(
        tagged_run(net, arr, svc, RateAssignment(net, [1.0]), cfg), arr
    )
    assert report.d_avg == 0.0 and report.d_max == 0.0


def test_drain_branch_and_proportional_branch_agree():
    """Serving above the arrival rates and serving rate-proportionally are
    both minimum-delay; their measured averages coincide."""
    lam = np.array([4.0, 8.0, 6.0])
    net = single_sink(3)
    arr, svc = ArrivalProfile(lam), ServiceProfile([9.0])
    cfg = SimConfig(horizon=120.0, dt=1.0, discretize=True)
    prop = empirical_report(
        tagged_run(net, arr, svc, single_sink_rates(net, lam / 2), cfg), arr
    )
    drain = empirical_report(
        tagged_run(net, arr, svc, single_sink_rates(net, lam), cfg), arr
    )
    assert abs(prop.d_avg - drain.d_avg) <= 0.05 * drain.d_avg


# ---------------------------------------------------------------------------
# initial backlog (single-sink piecewise form)


def test_backlog_report_matches_simulation():
    lam = np.array([3.0, 7.0])
    net = single_sink(2)
    arr, svc = ArrivalProfile(lam), ServiceProfile([4.0])
    rates = single_sink_rates(net, [4.0, 3.0])  # source 1 drains, source 2 grows
    q0 = np.array([37.0, 11.0, 5.0])
    report = analytic_report(net, arr, svc, rates, horizon=60.0, q0=q0)
    cfg = SimConfig(horizon=60.0, dt=1.0, q0=q0, discretize=True)
    empirical = empirical_report(tagged_run(net, arr, svc, rates, cfg), arr)
    assert abs(report.d_avg - empirical.d_avg) <= 0.05 * empirical.d_avg
    assert abs(report.d_max - empirical.d_max) <= 0.05 * empirical.d_max


def test_backlog_adjusted_weights_contract():
    arr = ArrivalProfile([4.0, 8.0])
    # zero backlog collapses to the arrival rates
    w0 = initial_backlog_weights(arr, [0.0, 0.0], 10.0)
    assert w0[0] / w0[1] == pytest.approx(0.5)
    # worked value: sqrt(4*5 / (8*8)) = sqrt(0.3125)
    w = initial_backlog_weights(arr, [10.0, 0.0], 10.0)
    assert w[0] / w[1] == pytest.approx(math.sqrt(0.3125), abs=1e-12)
    # long horizons wash the backlog out
    w_long = initial_backlog_weights(arr, [10.0, 0.0], 1e9)
    assert w_long[0] / w_long[1] == pytest.approx(0.5, abs=1e-8)
    with pytest.raises(ValueError):
        initial_backlog_weights(arr, [1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        initial_backlog_weights(arr, [1.0], 5.0)


def test_backlog_analytic_restricted_to_single_sink():
    net = full_connection([2, 2])
    arr, svc = ArrivalProfile([2.0, 2.0]), ServiceProfile([1.0, 1.0])
    rates = RateAssignment(net, [0.5] * 4)
    with pytest.raises(AnalyticScopeError):
        analytic_report(net, arr, svc, rates, 10.0, q0=np.array([1.0, 0, 0, 0]))


def test_reports_to_csv(tmp_path):
    from fluidq.analytics import reports_to_csv

    net = single_sink(2)
    arr, svc = ArrivalProfile([8.0, 3.0]), ServiceProfile([2.0])
    rep = analytic_report(net, arr, svc, single_sink_rates(net, [2.0, 0.75]), 200.0)
    path = tmp_path / "reports.csv"
    reports_to_csv([(0, "opt-static", rep)], path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "instance_id,policy,d_avg,d_max,d_bar_1,d_bar_2"
    assert lines[1].startswith("0,opt-static,450,450,")


def test_tagged_run_reports_drain_extension(two_source_instance):
    net, arr, svc, rates = two_source_instance
    cfg = SimConfig(horizon=50.0, dt=1.0, discretize=True)
    tr = tagged_run(net, arr, svc, rates, cfg)
    # overloaded: the last tagged packets depart well after the window
    assert tr.extension > 0
    assert np.all(tr.origin_count == 50.0 * arr.rates)


def test_report_flags_when_effective_rates_differ():
    net = full_connection([2, 2])
    arr = ArrivalProfile([4.0, 8.0])
    svc = ServiceProfile([4.0, 4.0])
    overcommitted = RateAssignment(net, [4.0, 4.0, 5.0, 5.0])
    assert analytic_report(net, arr, svc, overcommitted, 50.0).effective_differs
    exact = RateAssignment(net, [1.0, 1.0, 2.0, 2.0])
    assert not analytic_report(net, arr, svc, exact, 50.0).effective_differs


def test_three_layer_path_delay_is_the_expected_linear_combination():
    """With all queues positive, the hop recursion collapses to a linear
    combination of the on-path backlogs whose coefficients are products of
    downstream inflow/outflow ratios."""
    rng = np.random.default_rng(33)
    net = full_connection([2, 2, 2])
    for _ in range(10):
        lam = rng.uniform(6.0, 12.0, size=2)
        # layer-2 rates sit well below layer-1 column sums and mu below
        # layer-2 column sums, so every backlog keeps growing (no clamps)
        values = np.concatenate(
            [rng.uniform(0.5, 1.2, size=4), rng.uniform(0.1, 0.45, size=4)]
        )
        mu = rng.uniform(0.02, 0.15, size=2)
        arr, svc = ArrivalProfile(lam), ServiceProfile(mu)
        rates = RateAssignment(net, values)
        q = rng.uniform(5.0, 40.0, size=net.num_nodes)
        state = QueueState(q, 0.0)

        got = packet_delay(net, arr, svc, rates, (0, 0, 0), 0.0, source=state)

        e1 = rates.node_egress(net.node_id(0, 0))
        n3 = net.node_id(1, 0)
        i3, e3 = rates.node_ingress(n3), rates.node_egress(n3)
        n5 = net.node_id(2, 0)
        i5 = rates.node_ingress(n5)
        expected = (
            q[net.node_id(0, 0)] / e1 * (i3 / e3) * (i5 / mu[0])
            + q[n3] / e3 * (i5 / mu[0])
            + q[n5] / mu[0]
        )
        assert got == pytest.approx(expected, rel=1e-12)


def test_single_sink_queue_policy_warns_when_capacity_starves_budget(caplog):
    import logging

    from fluidq.policies import _warned, queue_proportional_rates

    _warned.clear()
    net = single_sink(2, [0.5, 0.5])  # total capacity 1 < mu
    svc = ServiceProfile([4.0])
    state = QueueState(np.array([5.0, 5.0, 0.0]), 0.0)
    with caplog.at_level(logging.WARNING, logger="fluidq"):
        rates = queue_proportional_rates(state, net, svc)
    assert rates.values.sum() == pytest.approx(1.0)
    assert any("throughput clause" in r.message for r in caplog.records)
