"""Radial feeder, consumers and bid curves, plus their CSV loaders."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Literal, Mapping

import numpy as np

from .errors import (
    BaseError,
    CapacityError,
    DegenerateNetworkError,
    InputError,
    MismatchError,
    OverReductionError,
    ParseError,
    RadialityError,
    StepError,
)

BID_STEP_KW = 10
BID_CAP_KW = 130
LOAD_TOLERANCE_KW = 0.5

# "load": a consumer may shed up to its whole load (curtailment still limited to
# the non-firmed part); "non_firmed": curtailment plus accepted bid must fit in
# the non-firmed part.
ReductionLimit = Literal["load", "non_firmed"]
REDUCTION_LIMITS = ("load", "non_firmed")


@dataclass(frozen=True)
class PerUnitBases:
    base_kv: float = 12.66
    base_mva: float = 100.0
    slack_voltage: float = 1.0

    def __post_init__(self):
        if not (self.base_kv > 0 and self.base_mva > 0 and self.slack_voltage > 0):
            raise BaseError(f"per-unit bases must be positive, got {self}")


DEFAULT_BASES = PerUnitBases()


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float
    q_load: float

    def __post_init__(self):
        if self.p_load < 0 or self.q_load < 0:
            raise InputError(f"bus {self.id}: negative load ({self.p_load}, {self.q_load})")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float

    def __post_init__(self):
        if self.resistance < 0 or self.reactance < 0:
            raise InputError(f"branch {self.from_bus}-{self.to_bus}: negative impedance")
        if self.resistance == 0:
            raise DegenerateNetworkError(
                f"branch {self.from_bus}-{self.to_bus} has zero resistance")


class Topology:
    """Index arrays describing the feeder as a tree rooted at the slack bus.

    Positions refer to the order of ``Network.buses`` / ``Network.branches``.
    ``order`` lists non-slack bus positions parents-first; ``parent`` and
    ``parent_branch`` give, for each bus position, its upstream bus and the
    branch feeding it (-1 for the slack).
    """

    def __init__(self, buses, branches, slack_bus):
        n = len(buses)
        self.n_bus = n
        self.n_branch = len(branches)
        self.index = {b.id: k for k, b in enumerate(buses)}
        if len(self.index) != n:
            raise InputError("duplicate bus ids")
        if slack_bus not in self.index:
            raise RadialityError(f"slack bus {slack_bus} not among buses")
        self.slack = self.index[slack_bus]

        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for k, br in enumerate(branches):
            try:
                a, b = self.index[br.from_bus], self.index[br.to_bus]
            except KeyError as exc:
                raise RadialityError(f"branch {k + 1} references unknown bus {exc.args[0]}")
            if a == b:
                raise RadialityError(f"branch {k + 1} is a self-loop at bus {br.from_bus}")
            adj[a].append((b, k))
            adj[b].append((a, k))

        parent = np.full(n, -1, dtype=np.int64)
        parent_branch = np.full(n, -1, dtype=np.int64)
        seen = np.zeros(n, dtype=bool)
        seen[self.slack] = True
        order = []
        queue = deque([self.slack])
        used = set()
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if k in used:
                    continue
                used.add(k)
                if seen[v]:
                    raise RadialityError(
                        f"branch {branches[k].from_bus}-{branches[k].to_bus} closes a cycle")
                seen[v] = True
                parent[v] = u
                parent_branch[v] = k
                order.append(v)
                queue.append(v)
        if not seen.all():
            missing = [buses[i].id for i in np.flatnonzero(~seen)]
            raise RadialityError(f"buses not reachable from slack: {missing}")
        if self.n_branch != n - 1:
            raise RadialityError(f"{self.n_branch} branches for {n} buses, expected {n - 1}")

        self.order = np.asarray(order, dtype=np.int64)
        self.parent = parent
        self.parent_branch = parent_branch
        # downstream bus of every branch
        self.branch_to = np.empty(self.n_branch, dtype=np.int64)
        self.branch_from = np.empty(self.n_branch, dtype=np.int64)
        for v in order:
            self.branch_to[parent_branch[v]] = v
            self.branch_from[parent_branch[v]] = parent[v]

    @cached_property
    def bibc(self) -> np.ndarray:
        """Branch-by-bus 0/1 matrix: entry (k, j) is 1 when bus j is fed through branch k."""
        m = np.zeros((self.n_branch, self.n_bus))
        for v in self.order:
            u = v
            while u != self.slack:
                m[self.parent_branch[u], v] = 1.0
                u = self.parent[u]
        return m


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_kv: float = DEFAULT_BASES.base_kv
    base_mva: float = DEFAULT_BASES.base_mva
    slack_voltage: float = DEFAULT_BASES.slack_voltage
    slack_bus: int = 1

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        PerUnitBases(self.base_kv, self.base_mva, self.slack_voltage)
        if not self.buses:
            raise InputError("network has no buses")
        if "topology" not in self.__dict__:
            self.__dict__["topology"] = Topology(self.buses, self.branches, self.slack_bus)
        slack = self.buses[self.topology.slack]
        if slack.p_load != 0 or slack.q_load != 0:
            raise InputError(f"slack bus {slack.id} must carry no load")

    @property
    def topology(self) -> Topology:
        return self.__dict__["topology"]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @cached_property
    def p_kw(self) -> np.ndarray:
        a = np.array([b.p_load for b in self.buses], dtype=float)
        a.flags.writeable = False
        return a

    @cached_property
    def q_kvar(self) -> np.ndarray:
        a = np.array([b.q_load for b in self.buses], dtype=float)
        a.flags.writeable = False
        return a

    @property
    def total_load_kw(self) -> float:
        return float(sum(b.p_load for b in self.buses))

    @property
    def z_base(self) -> float:
        return self.base_kv ** 2 / self.base_mva

    @property
    def i_base_ka(self) -> float:
        return self.base_mva / (math.sqrt(3.0) * self.base_kv)

    @cached_property
    def z_pu(self) -> np.ndarray:
        z = np.array([complex(br.resistance, br.reactance) for br in self.branches])
        return z / self.z_base

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.topology.index[bus_id]]

    def with_loads(self, p_kw, q_kvar) -> "Network":
        """Copy of the network with new bus loads; the topology is shared."""
        buses = tuple(Bus(b.id, float(p), float(q)) for b, p, q in zip(self.buses, p_kw, q_kvar))
        net = object.__new__(Network)
        net.__dict__["topology"] = self.topology
        object.__setattr__(net, "buses", buses)
        for name in ("branches", "base_kv", "base_mva", "slack_voltage", "slack_bus"):
            object.__setattr__(net, name, getattr(self, name))
        net.__post_init__()
        return net


@dataclass(frozen=True)
class Consumer:
    bus_id: int
    firmed_kw: float
    non_firmed_kw: float
    curtail_cost: float

    def __post_init__(self):
        if self.firmed_kw < 0 or self.non_firmed_kw < 0:
            raise InputError(f"consumer {self.bus_id}: negative load split")
        if self.non_firmed_kw > 0 and not self.curtail_cost > 0:
            raise InputError(f"consumer {self.bus_id}: curtailable load needs a positive cost")

    @property
    def load_kw(self) -> float:
        return self.firmed_kw + self.non_firmed_kw

    def reduction_cap(self, limit: ReductionLimit = "load") -> float:
        """Upper bound on curtailment plus accepted bid for this consumer."""
        if limit == "load":
            return self.load_kw
        if limit == "non_firmed":
            return self.non_firmed_kw
        raise ValueError(f"unknown reduction limit {limit!r}")


@dataclass(frozen=True)
class BidCurve:
    consumer_id: int
    steps: tuple[tuple[int, float], ...]
    step_kw: int = field(default=BID_STEP_KW, compare=False)
    cap_kw: float = field(default=BID_CAP_KW, compare=False)

    def __post_init__(self):
        steps = tuple((int(p), float(c)) for p, c in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise StepError(f"consumer {self.consumer_id}: empty bid curve")
        prev_p, prev_c = 0, -math.inf
        for p, c in steps:
            if p <= 0 or p % self.step_kw:
                raise StepError(
                    f"consumer {self.consumer_id}: bid level {p} kW is not a positive "
                    f"multiple of {self.step_kw} kW")
            if p <= prev_p:
                raise StepError(f"consumer {self.consumer_id}: bid levels must increase")
            if c < prev_c:
                raise StepError(f"consumer {self.consumer_id}: bid prices must not decrease")
            if c < 0:
                raise StepError(f"consumer {self.consumer_id}: negative bid price")
            prev_p, prev_c = p, c
        if prev_p > self.cap_kw:
            raise CapacityError(
                f"consumer {self.consumer_id}: bid level {prev_p} kW above the "
                f"{self.cap_kw:g} kW market cap")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.steps)

    @property
    def max_kw(self) -> int:
        return self.steps[-1][0]

    def price_at(self, p: float) -> float | None:
        for level, price in self.steps:
            if level == p:
                return price
        return None


# -- CSV reading ----------------------------------------------------------------

def _rows(path, header: tuple[str, ...]) -> Iterator[tuple[int, dict[str, str]]]:
    """Yield (line number, row) pairs, skipping blank and ``#`` lines."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open file ({exc.strerror})", path) from exc
    with fh:
        lines = [(n, s) for n, s in enumerate(fh, start=1)
                 if s.strip() and not s.lstrip().startswith("#")]
    if not lines:
        raise ParseError("missing header", path)
    first_line, head = lines[0]
    columns = tuple(c.strip() for c in next(csv.reader([head])))
    if columns != header:
        raise ParseError(f"expected header {','.join(header)}, got {','.join(columns)}",
                         path, first_line)
    for n, s in lines[1:]:
        values = [v.strip() for v in next(csv.reader([s]))]
        if len(values) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(values)}", path, n)
        yield n, dict(zip(header, values))


def _num(row, key, path, line, kind=float, allow_dash=False):
    value = row[key]
    if allow_dash and value in ("-", ""):
        return None
    try:
        x = kind(value) if kind is float else kind(float(value))
        if kind is int and float(value) != int(float(value)):
            raise ValueError
    except (ValueError, OverflowError):
        raise ParseError(f"bad {key} value {value!r}", path, line) from None
    if isinstance(x, float) and not math.isfinite(x):
        raise ParseError(f"non-finite {key}", path, line)
    return x


def load_network(branch_file, load_file, bases: PerUnitBases = DEFAULT_BASES,
                 slack_bus: int = 1) -> Network:
    bases = PerUnitBases(bases.base_kv, bases.base_mva, bases.slack_voltage)
    buses = []
    for n, row in _rows(load_file, ("bus", "p_kw", "q_kvar")):
        try:
            buses.append(Bus(_num(row, "bus", load_file, n, int),
                             _num(row, "p_kw", load_file, n),
                             _num(row, "q_kvar", load_file, n)))
        except ParseError:
            raise
        except InputError as exc:
            raise ParseError(str(exc), load_file, n) from None
    branches = []
    for n, row in _rows(branch_file, ("from", "to", "r_ohm", "x_ohm")):
        try:
            branches.append(Branch(_num(row, "from", branch_file, n, int),
                                   _num(row, "to", branch_file, n, int),
                                   _num(row, "r_ohm", branch_file, n),
                                   _num(row, "x_ohm", branch_file, n)))
        except (ParseError, DegenerateNetworkError):
            raise
        except InputError as exc:
            raise ParseError(str(exc), branch_file, n) from None
    return Network(tuple(buses), tuple(branches), bases.base_kv, bases.base_mva,
                   bases.slack_voltage, slack_bus)


def load_consumers(consumer_file, network: Network,
                   tolerance_kw: float = LOAD_TOLERANCE_KW) -> dict[int, Consumer]:
    """Read the firmed/non-firmed split; one consumer per bus, keyed by bus id."""
    found: dict[int, Consumer] = {}
    for n, row in _rows(consumer_file, ("bus", "firmed_kw", "nonfirmed_kw",
                                        "curtail_cost_per_kwh")):
        bus_id = _num(row, "bus", consumer_file, n, int)
        if bus_id not in network.topology.index:
            raise ParseError(f"unknown bus {bus_id}", consumer_file, n)
        if bus_id in found:
            raise ParseError(f"duplicate row for bus {bus_id}", consumer_file, n)
        cost = _num(row, "curtail_cost_per_kwh", consumer_file, n, allow_dash=True)
        try:
            c = Consumer(bus_id, _num(row, "firmed_kw", consumer_file, n),
                         _num(row, "nonfirmed_kw", consumer_file, n),
                         0.0 if cost is None else cost)
        except InputError as exc:
            raise ParseError(str(exc), consumer_file, n) from None
        load = network.bus(bus_id).p_load
        if abs(c.load_kw - load) > tolerance_kw:
            raise MismatchError(
                f"{consumer_file}:{n}: bus {bus_id} split {c.firmed_kw:g}+{c.non_firmed_kw:g}"
                f" kW does not match its {load:g} kW load")
        found[bus_id] = c
    missing = [b for b in network.bus_ids if b not in found]
    if missing:
        raise MismatchError(f"{consumer_file}: no consumer row for buses {missing}")
    return {b: found[b] for b in network.bus_ids}


def load_bids(bid_file, consumers: Mapping[int, Consumer], *,
              limit: ReductionLimit = "load", step_kw: int = BID_STEP_KW,
              cap_kw: float = BID_CAP_KW) -> dict[int, BidCurve]:
    """Read stepwise reduction offers; consumers without rows get no curve.

    Each offered level must fit within the consumer's reduction cap under
    ``limit`` (whole load by default, or the non-firmed part).
    """
    grouped: dict[int, list[tuple[int, float, int]]] = {}
    for n, row in _rows(bid_file, ("bus", "power_kw", "price_per_kwh")):
        bus_id = _num(row, "bus", bid_file, n, int)
        if bus_id not in consumers:
            raise ParseError(f"bid from unknown consumer {bus_id}", bid_file, n)
        power = _num(row, "power_kw", bid_file, n)
        if power != int(power) or power <= 0 or int(power) % step_kw:
            raise StepError(f"{bid_file}:{n}: consumer {bus_id} bid level {power:g} kW is "
                            f"not a positive multiple of {step_kw} kW")
        grouped.setdefault(bus_id, []).append(
            (int(power), _num(row, "price_per_kwh", bid_file, n), n))

    curves = {}
    for bus_id in sorted(grouped):
        rows = sorted(grouped[bus_id])
        cap = consumers[bus_id].reduction_cap(limit)
        for power, _, n in rows:
            if power > cap:
                raise CapacityError(
                    f"{bid_file}:{n}: consumer {bus_id} bids {power} kW but can shed at most "
                    f"{cap:g} kW ({limit.replace('_', '-')} limit)")
        try:
            curves[bus_id] = BidCurve(bus_id, tuple((p, c) for p, c, _ in rows),
                                      step_kw=step_kw, cap_kw=cap_kw)
        except InputError as exc:
            raise type(exc)(f"{bid_file}: {exc}") from None
    return curves


# -- load state after clearing --------------------------------------------------------

def reduction_array(network: Network, decisions: Mapping[int, tuple[float, float]]) -> np.ndarray:
    red = np.zeros(network.topology.n_bus)
    for bus_id, (p_cr, p_dr) in decisions.items():
        red[network.topology.index[bus_id]] += p_cr + p_dr
    return red


def reduced_loads(p_kw: np.ndarray, q_kvar: np.ndarray, reduction_kw: np.ndarray):
    """Subtract active reductions and scale reactive load at constant power factor."""
    p_new = p_kw - reduction_kw
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(p_kw > 0, p_new / np.where(p_kw > 0, p_kw, 1.0), 1.0)
    return p_new, q_kvar * ratio


def check_decisions(consumers: Mapping[int, Consumer], decisions: Mapping[int, tuple[float, float]],
                    limit: ReductionLimit = "load") -> None:
    for bus_id, (p_cr, p_dr) in decisions.items():
        if bus_id not in consumers:
            raise InputError(f"decision for unknown consumer {bus_id}")
        c = consumers[bus_id]
        if p_cr < 0 or p_dr < 0:
            raise OverReductionError(f"consumer {bus_id}: negative reduction")
        if p_cr > c.non_firmed_kw:
            raise OverReductionError(
                f"consumer {bus_id}: curtailment {p_cr:g} kW exceeds non-firmed "
                f"{c.non_firmed_kw:g} kW")
        cap = c.reduction_cap(limit)
        if p_cr + p_dr > cap:
            raise OverReductionError(
                f"consumer {bus_id}: reduction {p_cr + p_dr:g} kW exceeds {cap:g} kW")


def apply_reduction(network: Network, consumers: Mapping[int, Consumer],
                    decisions: Mapping[int, tuple[float, float]],
                    limit: ReductionLimit = "load") -> Network:
    """Return a new network with each bus load lowered by p_cr + p_dr."""
    check_decisions(consumers, decisions, limit)
    if not any(p_cr or p_dr for p_cr, p_dr in decisions.values()):
        return network
    p, q = reduced_loads(network.p_kw, network.q_kvar, reduction_array(network, decisions))
    return network.with_loads(p, q)


def total_capacity(consumers: Iterable[Consumer]) -> float:
    return float(sum(c.non_firmed_kw for c in consumers))
