"""Layered network topologies, traffic profiles, and their on-disk format.

A layered network is a DAG whose nodes are arranged in L >= 2 layers; links
only join adjacent layers.  Packets enter at layer 1, traverse one node per
layer, and depart at layer L.  Everything downstream (the fluid engine,
policies, the optimizer, the benchmark harness) consumes the types defined
here.

Indexing convention: node and layer indices are 0-based in code and 1-based
in topology documents.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

#: Sentinel for a link without a capacity limit.  Kept structural (checked
#: with math.isinf) so that unlimited and limited capacity never blur.
UNBOUNDED = math.inf


class NetworkFormatError(ValueError):
    """A topology document could not be parsed or is missing fields."""


class ValidationError(ValueError):
    """An instance failed validation; carries the full error list."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True, order=True)
class Link:
    """Directed link from node ``src`` of layer ``layer`` to node ``dst`` of
    layer ``layer + 1``.  Adjacent-layer topology is enforced by shape: a
    Link cannot express anything else."""

    layer: int
    src: int
    dst: int
    capacity: float = UNBOUNDED

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.capacity)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.layer, self.src, self.dst)


class LayeredNetwork:
    """Immutable layered topology with per-link capacities.

    Structural errors (bad indices, duplicate links, fewer than two layers)
    are rejected at construction.  Value-level problems (nonpositive
    capacities, dangling nodes) are reported by :func:`validate` so that a
    loaded document can be diagnosed in full.
    """

    def __init__(self, layer_sizes: Sequence[int], links: Iterable[Link]):
        sizes = tuple(int(n) for n in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a layered network needs at least 2 layers")
        if any(n <= 0 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        self.layer_sizes = sizes
        self.num_layers = len(sizes)
        self.num_nodes = sum(sizes)

        offsets = [0]
        for n in sizes:
            offsets.append(offsets[-1] + n)
        self._offsets = tuple(offsets)

        seen: set[tuple[int, int, int]] = set()
        ordered: list[Link] = []
        for link in sorted(links):
            if not 0 <= link.layer < self.num_layers - 1:
                raise ValueError(f"link {link.key}: layer out of range")
            if not 0 <= link.src < sizes[link.layer]:
                raise ValueError(f"link {link.key}: source index out of range")
            if not 0 <= link.dst < sizes[link.layer + 1]:
                raise ValueError(f"link {link.key}: destination index out of range")
            if link.key in seen:
                raise ValueError(f"duplicate link {link.key}")
            seen.add(link.key)
            ordered.append(link)
        self.links = tuple(ordered)
        self.num_links = len(ordered)
        self.link_index = {link.key: k for k, link in enumerate(ordered)}
        self.capacities = np.array([link.capacity for link in ordered], dtype=float)
        self.capacities.flags.writeable = False

        # Per-node link lists and per-layer arrays used by the engine.
        self.out_links: tuple[tuple[int, ...], ...]
        self.in_links: tuple[tuple[int, ...], ...]
        out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        into: list[list[int]] = [[] for _ in range(self.num_nodes)]
        src_nid = np.empty(self.num_links, dtype=np.intp)
        dst_nid = np.empty(self.num_links, dtype=np.intp)
        for k, link in enumerate(ordered):
            s = self.node_id(link.layer, link.src)
            d = self.node_id(link.layer + 1, link.dst)
            src_nid[k] = s
            dst_nid[k] = d
            out[s].append(k)
            into[d].append(k)
        self.out_links = tuple(tuple(v) for v in out)
        self.in_links = tuple(tuple(v) for v in into)
        self.link_src = src_nid
        self.link_dst = dst_nid
        self.link_src.flags.writeable = False
        self.link_dst.flags.writeable = False
        self._layer_links = tuple(
            np.array([k for k, ln in enumerate(ordered) if ln.layer == l], dtype=np.intp)
            for l in range(self.num_layers - 1)
        )

    # -- node addressing ---------------------------------------------------

    def node_id(self, layer: int, index: int) -> int:
        return self._offsets[layer] + index

    def node_coords(self, node_id: int) -> tuple[int, int]:
        for l in range(self.num_layers):
            if node_id < self._offsets[l + 1]:
                return l, node_id - self._offsets[l]
        raise IndexError(node_id)

    def layer_nodes(self, layer: int) -> range:
        return range(self._offsets[layer], self._offsets[layer + 1])

    def layer_links(self, layer: int) -> np.ndarray:
        """Indices of the links leaving ``layer`` (into ``layer + 1``)."""
        return self._layer_links[layer]

    @property
    def ingress_nodes(self) -> range:
        return self.layer_nodes(0)

    @property
    def egress_nodes(self) -> range:
        return self.layer_nodes(self.num_layers - 1)

    def is_single_sink(self) -> bool:
        return self.num_layers == 2 and self.layer_sizes[1] == 1

    def is_fan_in_tree(self) -> bool:
        """True when every non-egress node has exactly one outgoing link and
        the (undirected) topology is connected, i.e. a tree."""
        if self.layer_sizes[-1] != 1:
            return False
        for l in range(self.num_layers - 1):
            for nid in self.layer_nodes(l):
                if len(self.out_links[nid]) != 1:
                    return False
        # single egress + unique out-edges => connected iff no node is isolated
        return all(
            self.in_links[nid] for l in range(1, self.num_layers) for nid in self.layer_nodes(l)
        )

    def __repr__(self) -> str:
        shape = "x".join(str(n) for n in self.layer_sizes)
        return f"LayeredNetwork({shape}, {self.num_links} links)"

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayeredNetwork):
            return NotImplemented
        return self.layer_sizes == other.layer_sizes and self.links == other.links

    def __hash__(self) -> int:
        return hash((self.layer_sizes, self.links))


def _readonly_vector(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ArrivalProfile:
    """External packet arrival rates at the ingress layer (packets/time)."""

    rates: np.ndarray

    def __init__(self, rates: Sequence[float]):
        object.__setattr__(self, "rates", _readonly_vector(rates, "lambda"))

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    def __len__(self) -> int:
        return self.rates.size


@dataclass(frozen=True)
class ServiceProfile:
    """Maximum work-conserving service rates at the egress layer."""

    rates: np.ndarray

    def __init__(self, rates: Sequence[float]):
        object.__setattr__(self, "rates", _readonly_vector(rates, "mu"))

    @property
    def total(self) -> float:
        return float(self.rates.sum())

    def __len__(self) -> int:
        return self.rates.size


class RateAssignment:
    """A transmission-rate vector ``g`` over the links of one network.

    Stored as an array aligned with ``net.links``; absent links are simply
    not representable, which matches treating their rate as zero.
    """

    def __init__(self, net: LayeredNetwork, values: Sequence[float]):
        arr = np.asarray(values, dtype=float)
        if arr.shape != (net.num_links,):
            raise ValueError(
                f"expected {net.num_links} rates, got shape {arr.shape}"
            )
        if np.any(arr < 0):
            k = int(np.argmin(arr))
            raise ValueError(f"negative rate on link {net.links[k].key}")
        self.net = net
        self.values = arr.copy()
        self.values.flags.writeable = False

    @classmethod
    def zeros(cls, net: LayeredNetwork) -> "RateAssignment":
        return cls(net, np.zeros(net.num_links))

    @classmethod
    def from_dict(cls, net: LayeredNetwork, mapping: Mapping) -> "RateAssignment":
        """Build from ``{(layer, src, dst): rate}`` with 0-based keys, or the
        file form ``{"l:i:j": rate}`` with 1-based indices."""
        values = np.zeros(net.num_links)
        for key, rate in mapping.items():
            if isinstance(key, str):
                parts = key.split(":")
                if len(parts) != 3:
                    raise ValueError(f"bad link key {key!r}, expected 'l:i:j'")
                key = tuple(int(p) - 1 for p in parts)
            key = tuple(int(p) for p in key)
            if key not in net.link_index:
                raise ValueError(f"rate given for nonexistent link {key}")
            values[net.link_index[key]] = float(rate)
        return cls(net, values)

    def to_dict(self) -> dict[str, float]:
        """File form: 1-based ``"l:i:j"`` keys."""
        return {
            f"{ln.layer + 1}:{ln.src + 1}:{ln.dst + 1}": float(v)
            for ln, v in zip(self.net.links, self.values)
        }

    def __getitem__(self, key: tuple[int, int, int]) -> float:
        return float(self.values[self.net.link_index[tuple(key)]])

    def node_egress(self, node_id: int) -> float:
        ids = self.net.out_links[node_id]
        return float(self.values[list(ids)].sum()) if ids else 0.0

    def node_ingress(self, node_id: int) -> float:
        ids = self.net.in_links[node_id]
        return float(self.values[list(ids)].sum()) if ids else 0.0

    def capacity_violations(self, tol: float = 1e-9) -> list[tuple[int, int, int]]:
        bad = np.flatnonzero(self.values > self.net.capacities + tol)
        return [self.net.links[int(k)].key for k in bad]

    def __repr__(self) -> str:
        return f"RateAssignment({np.array2string(self.values, precision=4)})"


@dataclass
class SimConfig:
    """Simulation window and stepping parameters.

    ``dt`` defaults to 0.01 in fluid mode and 1.0 in integer-packet mode.
    ``q0`` is a per-node backlog vector (all zero when omitted).
    """

    horizon: float
    t0: float = 0.0
    dt: float | None = None
    q0: np.ndarray | None = None
    discretize: bool = False

    def resolved_dt(self) -> float:
        dt = self.dt if self.dt is not None else (1.0 if self.discretize else 0.01)
        if dt <= 0:
            raise ValueError("dt must be positive")
        if dt > self.horizon:
            raise ValueError("dt must not exceed the horizon")
        return dt

    def initial_backlog(self, net: LayeredNetwork) -> np.ndarray:
        if self.q0 is None:
            return np.zeros(net.num_nodes)
        q0 = np.asarray(self.q0, dtype=float)
        if q0.shape != (net.num_nodes,):
            raise ValueError(
                f"q0 has {q0.size} entries, network has {net.num_nodes} nodes"
            )
        if np.any(q0 < 0):
            raise ValueError("q0 must be nonnegative")
        return q0.copy()


# ---------------------------------------------------------------------------
# Validation


def validate(net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile) -> list[str]:
    """Check all type invariants and mutual dimensions.

    Returns an empty list when the instance is consistent, otherwise one
    message per violation with node/link coordinates (1-based, matching the
    document convention).
    """
    errors: list[str] = []
    if len(arr) != net.layer_sizes[0]:
        errors.append(
            "dimension mismatch: lambda has "
            f"{len(arr)} entries but the ingress layer has {net.layer_sizes[0]} nodes"
        )
    if len(svc) != net.layer_sizes[-1]:
        errors.append(
            "dimension mismatch: mu has "
            f"{len(svc)} entries but the egress layer has {net.layer_sizes[-1]} nodes"
        )
    for i, lam in enumerate(arr.rates):
        if not lam > 0:
            errors.append(f"nonpositive rate: lambda[{i + 1}] = {lam}")
    for j, mu in enumerate(svc.rates):
        if not mu > 0:
            errors.append(f"nonpositive rate: mu[{j + 1}] = {mu}")
    for link in net.links:
        if not link.capacity > 0:
            errors.append(
                f"nonpositive capacity: link ({link.layer + 1},{link.src + 1},"
                f"{link.dst + 1}) capacity = {link.capacity}"
            )
    for l in range(net.num_layers):
        for nid in net.layer_nodes(l):
            _, i = net.node_coords(nid)
            if l < net.num_layers - 1 and not net.out_links[nid]:
                errors.append(
                    f"dangling node: layer {l + 1} node {i + 1} has no egress link"
                )
            if l > 0 and not net.in_links[nid]:
                errors.append(
                    f"dangling node: layer {l + 1} node {i + 1} has no ingress link"
                )
    return errors


def ensure_valid(net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile) -> None:
    errors = validate(net, arr, svc)
    if errors:
        raise ValidationError(errors)


# ---------------------------------------------------------------------------
# Builders


def full_connection(
    layer_sizes: Sequence[int], capacity=UNBOUNDED
) -> LayeredNetwork:
    """Network with every adjacent-layer node pair linked.

    ``capacity`` may be a scalar shared by all links, one scalar per layer
    pair, or an array of per-link values for a layer pair (shape
    ``(N_l, N_{l+1})`` or anything broadcastable to it).
    """
    sizes = [int(n) for n in layer_sizes]
    caps = capacity
    if np.isscalar(caps):
        caps = [caps] * (len(sizes) - 1)
    if len(caps) != len(sizes) - 1:
        raise ValueError("need one capacity spec per adjacent layer pair")
    links = []
    for l in range(len(sizes) - 1):
        block = np.broadcast_to(np.asarray(caps[l], dtype=float), (sizes[l], sizes[l + 1]))
        for i in range(sizes[l]):
            for j in range(sizes[l + 1]):
                links.append(Link(l, i, j, float(block[i, j])))
    return LayeredNetwork(sizes, links)


def single_sink(num_sources: int, capacities=UNBOUNDED) -> LayeredNetwork:
    """N x 1 single-hop network; ``capacities`` is a scalar or one value per
    source link."""
    caps = np.broadcast_to(np.asarray(capacities, dtype=float), (num_sources,))
    return full_connection([num_sources, 1], [caps.reshape(-1, 1)])


def fan_in_tree(
    layer_sizes: Sequence[int], child_of: Sequence[Sequence[int]], capacity=UNBOUNDED
) -> LayeredNetwork:
    """Tree where node ``i`` of layer ``l`` links only to ``child_of[l][i]``.

    ``child_of`` has one row per non-egress layer.  The resulting undirected
    topology is a tree whenever every next-layer node is some node's child.
    """
    sizes = [int(n) for n in layer_sizes]
    if len(child_of) != len(sizes) - 1:
        raise ValueError("need one child row per non-egress layer")
    links = []
    for l, row in enumerate(child_of):
        if len(row) != sizes[l]:
            raise ValueError(f"child row {l} has {len(row)} entries, layer has {sizes[l]}")
        for i, j in enumerate(row):
            links.append(Link(l, i, int(j), float(capacity)))
    return LayeredNetwork(sizes, links)


# ---------------------------------------------------------------------------
# Topology documents (JSON)
#
# Normative keys: `layers` (int array), `links` (array of {l, i, j, c} with
# 1-based indices, c a number or the string "unbounded"), `lambda`, `mu`.


def network_to_doc(
    net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile
) -> dict:
    links = [
        {
            "l": link.layer + 1,
            "i": link.src + 1,
            "j": link.dst + 1,
            "c": "unbounded" if link.unbounded else link.capacity,
        }
        for link in net.links
    ]
    return {
        "layers": list(net.layer_sizes),
        "links": links,
        "lambda": [float(x) for x in arr.rates],
        "mu": [float(x) for x in svc.rates],
    }


def doc_to_network(doc: Mapping) -> tuple[LayeredNetwork, ArrivalProfile, ServiceProfile]:
    for key in ("layers", "links", "lambda", "mu"):
        if key not in doc:
            raise NetworkFormatError(f"missing field {key!r}")
    try:
        links = []
        for entry in doc["links"]:
            cap = entry["c"]
            if cap == "unbounded":
                cap = UNBOUNDED
            links.append(
                Link(int(entry["l"]) - 1, int(entry["i"]) - 1, int(entry["j"]) - 1, float(cap))
            )
        net = LayeredNetwork(doc["layers"], links)
        arr = ArrivalProfile(doc["lambda"])
        svc = ServiceProfile(doc["mu"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"bad topology document: {exc}") from exc
    ensure_valid(net, arr, svc)
    return net, arr, svc


def canonical_json(doc: Mapping) -> str:
    """Canonical byte form: links sorted by (l, i, j), stable key order."""
    doc = dict(doc)
    doc["links"] = sorted(
        (dict(e) for e in doc.get("links", [])),
        key=lambda e: (e["l"], e["i"], e["j"]),
    )
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save(path, net: LayeredNetwork, arr: ArrivalProfile, svc: ServiceProfile) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(network_to_doc(net, arr, svc)))


def load(path) -> tuple[LayeredNetwork, ArrivalProfile, ServiceProfile]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise NetworkFormatError(f"{path}: empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return doc_to_network(doc)
