import numpy as np
import pytest

from fluidq import (
    ArrivalProfile,
    RateAssignment,
    ServiceProfile,
    single_sink,
)


@pytest.fixture
def two_source_instance():
    """2 x 1 overloaded instance: lambda=(8,3), c=(4,2), mu=2, with the
    rate-proportional vector g=(2, 0.75)."""
    net = single_sink(2, [4.0, 2.0])
    arr = ArrivalProfile([8.0, 3.0])
    svc = ServiceProfile([2.0])
    rates = RateAssignment.from_dict(net, {(0, 0, 0): 2.0, (0, 1, 0): 0.75})
    return net, arr, svc, rates


def rates_of(net, mapping):
    return RateAssignment.from_dict(net, mapping)


def single_sink_rates(net, per_source):
    """Rate vector for an N x 1 network from per-source values."""
    values = np.zeros(net.num_links)
    for k, link in enumerate(net.links):
        values[k] = per_source[link.src]
    return RateAssignment(net, values)
