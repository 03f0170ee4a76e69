"""Cost model, constraint checks and the curtailment-only baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from .errors import InfeasibleError, InvalidLevelError, OverCapacityError
from .grid import (
    BidCurve,
    Consumer,
    Network,
    ReductionLimit,
    check_decisions,
    reduced_loads,
)
from .powerflow import DEFAULT_MAX_ITER, DEFAULT_TOL, PowerFlowResult, solve_loads

Decisions = Mapping[int, tuple[int, int]]


class Mode(enum.Enum):
    VOLTAGE_REGULATION = "voltage"
    CONGESTION_RELIEF = "congestion"
    SCHEDULED_REDUCTION = "scheduled"


_MODE_LIMIT = {
    Mode.VOLTAGE_REGULATION: "v_min",
    Mode.CONGESTION_RELIEF: "i_max",
    Mode.SCHEDULED_REDUCTION: "p_sch",
}
# constraint names used in Violation records and MarketRequest.active
CURTAIL_CAP = "curtailment_cap"
BID_CAP = "bid_cap"
REDUCTION_CAP = "reduction_cap"
TARGET = "target"
CURRENT = "current"
VOLTAGE = "voltage"
NETWORK_LIMITS = frozenset({CURRENT, VOLTAGE})
_LIMIT_NAME = {"p_sch": TARGET, "i_max": CURRENT, "v_min": VOLTAGE}


@dataclass(frozen=True)
class MarketRequest:
    """What the market runner asks for.

    Only the limit belonging to ``mode`` may be set; leaving it as None makes
    the request unconstrained apart from the per-consumer capacities.
    ``wholesale_price`` is in $/kWh.
    """

    mode: Mode
    v_min: float | None = None
    i_max: float | None = None
    p_sch: float | None = None
    wholesale_price: float = 0.04
    interval_hours: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        own = _MODE_LIMIT[self.mode]
        for name in _MODE_LIMIT.values():
            if name != own and getattr(self, name) is not None:
                raise ValueError(f"{name} is not a limit of {self.mode.value} requests")
        if not self.wholesale_price > 0:
            raise ValueError("wholesale_price must be positive")
        if not self.interval_hours > 0:
            raise ValueError("interval_hours must be positive")
        if self.v_min is not None and not 0 < self.v_min:
            raise ValueError("v_min must be positive")
        if self.i_max is not None and not 0 < self.i_max:
            raise ValueError("i_max must be positive")
        if self.p_sch is not None and self.p_sch < 0:
            raise ValueError("p_sch must be non-negative")

    @property
    def active(self) -> frozenset[str]:
        """Names of the network/target constraints this request enforces."""
        own = _MODE_LIMIT[self.mode]
        return frozenset() if getattr(self, own) is None else frozenset({_LIMIT_NAME[own]})

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "v_min": self.v_min, "i_max": self.i_max,
                "p_sch": self.p_sch, "wholesale_price_per_kwh": self.wholesale_price,
                "interval_hours": self.interval_hours}


WHOLESALE_PRICE = 40.0 / 1000.0  # $/kWh

SCENARIOS = {
    "A": MarketRequest(Mode.VOLTAGE_REGULATION, v_min=0.95, wholesale_price=WHOLESALE_PRICE),
    "B": MarketRequest(Mode.CONGESTION_RELIEF, i_max=0.04, wholesale_price=WHOLESALE_PRICE),
    "C": MarketRequest(Mode.SCHEDULED_REDUCTION, p_sch=500.0, wholesale_price=WHOLESALE_PRICE),
}


def scenario_request(name: str, **overrides) -> MarketRequest:
    base = SCENARIOS[name.upper()]
    if not overrides:
        return base
    fields = base.__dict__ | overrides
    return MarketRequest(**fields)


# -- single-consumer pricing ---------------------------------------------------------

def dr_payment(bid: BidCurve | None, p: float, interval_hours: float = 1.0) -> float:
    """Pay-as-bid: accepted level times the price offered at that level."""
    if p == 0:
        return 0.0
    price = bid.price_at(p) if bid is not None else None
    if price is None:
        who = bid.consumer_id if bid is not None else "non-bidder"
        raise InvalidLevelError(f"{p:g} kW is not a bid level of consumer {who}")
    return p * price * interval_hours


def curtailment_cost(consumer: Consumer, p: float, interval_hours: float = 1.0) -> float:
    if p < 0 or p > consumer.non_firmed_kw:
        raise OverCapacityError(
            f"consumer {consumer.bus_id}: curtailment {p:g} kW outside "
            f"[0, {consumer.non_firmed_kw:g}] kW")
    return p * consumer.curtail_cost * interval_hours


# -- instance ------------------------------------------------------------------------

class MarketInstance:
    """Network, consumers and bids bundled with bus-aligned lookup arrays."""

    def __init__(self, network: Network, consumers: Mapping[int, Consumer],
                 bids: Mapping[int, BidCurve], limit: ReductionLimit = "load",
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 backend: str | None = None):
        self.network = network
        self.consumers = dict(consumers)
        self.bids = dict(bids)
        self.limit = limit
        self.tol = tol
        self.max_iter = max_iter
        self.backend = backend
        idx = network.topology.index
        n = network.topology.n_bus
        self.non_firmed = np.zeros(n)
        self.curtail_cost = np.zeros(n)
        self.cap = np.zeros(n)
        for b, c in self.consumers.items():
            k = idx[b]
            self.non_firmed[k] = c.non_firmed_kw
            self.curtail_cost[k] = c.curtail_cost
            self.cap[k] = c.reduction_cap(limit)
        for b in self.bids:
            if b not in self.consumers:
                raise ValueError(f"bid curve for unknown consumer {b}")

    @classmethod
    def coerce(cls, network, consumers=None, bids=None, **kw) -> "MarketInstance":
        if isinstance(network, MarketInstance):
            return network
        return cls(network, consumers, bids or {}, **kw)

    def position(self, bus_id: int) -> int:
        return self.network.topology.index[bus_id]

    def arrays(self, decisions: Decisions) -> tuple[np.ndarray, np.ndarray]:
        n = self.network.topology.n_bus
        p_cr = np.zeros(n)
        p_dr = np.zeros(n)
        for b, (cr, dr) in decisions.items():
            k = self.position(b)
            p_cr[k] = cr
            p_dr[k] = dr
        return p_cr, p_dr

    def decisions(self, p_cr: np.ndarray, p_dr: np.ndarray) -> dict[int, tuple[int, int]]:
        return {b: (_as_number(p_cr[k]), _as_number(p_dr[k]))
                for k, b in enumerate(self.network.bus_ids)}

    def dr_prices(self, p_dr: np.ndarray) -> np.ndarray:
        """Per-bus $/kWh of the accepted level (0 where nothing is accepted)."""
        prices = np.zeros_like(p_dr)
        for k in np.flatnonzero(p_dr):
            b = self.network.buses[k].id
            bid = self.bids.get(b)
            price = bid.price_at(p_dr[k]) if bid is not None else None
            if price is None:
                raise InvalidLevelError(f"{p_dr[k]:g} kW is not a bid level of consumer {b}")
            prices[k] = price
        return prices

    def flow(self, p_cr: np.ndarray, p_dr: np.ndarray, raise_on_fail=True) -> PowerFlowResult:
        net = self.network
        p, q = reduced_loads(net.p_kw, net.q_kvar, p_cr + p_dr)
        return solve_loads(net, p, q, self.tol, self.max_iter, self.backend, raise_on_fail)

    @cached_property
    def base_flow(self) -> PowerFlowResult:
        net = self.network
        return solve_loads(net, net.p_kw, net.q_kvar, self.tol, self.max_iter, self.backend)


def _as_number(x):
    x = float(x)
    return int(x) if x.is_integer() else x


def cost_breakdown(inst: MarketInstance, p_cr, p_dr, loss_kw: float, request: MarketRequest,
                   prices=None) -> tuple[float, float, float, float]:
    """(curtailment, DR payment, loss cost, total) in $ for one interval."""
    h = request.interval_hours
    if prices is None:
        prices = inst.dr_prices(p_dr)
    curtail = float(np.dot(p_cr, inst.curtail_cost)) * h
    payment = float(np.dot(p_dr, prices)) * h
    loss = loss_kw * h * request.wholesale_price
    return curtail, payment, loss, curtail + payment + loss


# -- constraints ------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    """One failed constraint; ``excess`` is how far ``value`` is past ``limit``."""

    constraint: str
    subject: int | None
    value: float
    limit: float
    excess: float
    note: str = ""

    def to_dict(self) -> dict:
        return {"constraint": self.constraint, "subject": self.subject, "value": self.value,
                "limit": self.limit, "excess": self.excess, "note": self.note}


def network_violations(flow: PowerFlowResult, request: MarketRequest, total_reduction_kw: float,
                       branch_labels=None) -> list[Violation]:
    out = []
    if TARGET in request.active and total_reduction_kw < request.p_sch:
        out.append(Violation(TARGET, None, float(total_reduction_kw), float(request.p_sch),
                             float(request.p_sch - total_reduction_kw)))
    if CURRENT in request.active:
        mags = np.abs(flow.branch_current)
        for k in np.flatnonzero(mags > request.i_max):
            label = k + 1 if branch_labels is None else branch_labels[k]
            out.append(Violation(CURRENT, int(label), float(mags[k]), request.i_max,
                                 float(mags[k] - request.i_max)))
    if VOLTAGE in request.active:
        mags = np.abs(flow.bus_voltage)
        for k in np.flatnonzero(mags < request.v_min):
            out.append(Violation(VOLTAGE, int(flow.bus_ids[k]), float(mags[k]), request.v_min,
                                 float(request.v_min - mags[k])))
    return out


def check_constraints(decisions: Decisions, consumers: Mapping[int, Consumer],
                      bids: Mapping[int, BidCurve], flow_after: PowerFlowResult,
                      request: MarketRequest, limit: ReductionLimit = "load") -> list[Violation]:
    """List every violated constraint: per-consumer caps, then the request's target,
    branch-current or bus-voltage limit.

    Bounds are non-strict. The reduction cap bounds curtailment plus accepted bid
    under ``limit``.
    """
    if not flow_after.converged:
        raise ValueError("check_constraints needs a converged power flow")
    out = []
    total = 0.0
    for b in sorted(decisions):
        p_cr, p_dr = decisions[b]
        total += p_cr + p_dr
        c = consumers[b]
        if p_cr > c.non_firmed_kw or p_cr < 0:
            out.append(Violation(CURTAIL_CAP, b, float(p_cr), c.non_firmed_kw,
                                 float(max(p_cr - c.non_firmed_kw, -p_cr))))
        bid = bids.get(b)
        dr_max = bid.max_kw if bid is not None else 0
        if p_dr > dr_max or p_dr < 0:
            out.append(Violation(BID_CAP, b, float(p_dr), float(dr_max),
                                 float(max(p_dr - dr_max, -p_dr))))
        elif p_dr and bid.price_at(p_dr) is None:
            out.append(Violation(BID_CAP, b, float(p_dr), float(dr_max), 0.0, "not a bid level"))
        cap = c.reduction_cap(limit)
        if p_cr + p_dr > cap:
            out.append(Violation(REDUCTION_CAP, b, float(p_cr + p_dr), cap, float(p_cr + p_dr - cap)))
    out.extend(network_violations(flow_after, request, total))
    return out


# -- evaluation -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClearingSolution:
    p_cr: dict[int, int]
    p_dr: dict[int, int]
    curtail_cost_total: float
    dr_payment_total: float
    loss_cost: float
    total_cost: float
    flow_after: PowerFlowResult
    feasible: bool
    request: MarketRequest
    violations: tuple[Violation, ...] = field(default=())

    @property
    def total_reduction_kw(self) -> float:
        return float(sum(self.p_cr.values()) + sum(self.p_dr.values()))

    @property
    def curtailed_kw(self) -> float:
        return float(sum(self.p_cr.values()))

    @property
    def dr_kw(self) -> float:
        return float(sum(self.p_dr.values()))


def evaluate_arrays(inst: MarketInstance, p_cr: np.ndarray, p_dr: np.ndarray,
                    request: MarketRequest, flow: PowerFlowResult | None = None) -> ClearingSolution:
    decisions = inst.decisions(p_cr, p_dr)
    check_decisions(inst.consumers, decisions, inst.limit)
    prices = inst.dr_prices(p_dr)
    if flow is None:
        flow = inst.flow(p_cr, p_dr)
    curtail, payment, loss, total = cost_breakdown(inst, p_cr, p_dr, flow.total_loss_kw,
                                                   request, prices)
    violations = check_constraints(decisions, inst.consumers, inst.bids, flow, request, inst.limit)
    return ClearingSolution(
        p_cr={b: d[0] for b, d in decisions.items()},
        p_dr={b: d[1] for b, d in decisions.items()},
        curtail_cost_total=curtail, dr_payment_total=payment, loss_cost=loss,
        total_cost=total, flow_after=flow, feasible=not violations, request=request,
        violations=tuple(violations))


def evaluate(network, consumers, bids, decisions: Decisions, request: MarketRequest,
             limit: ReductionLimit = "load") -> ClearingSolution:
    """Apply the decisions, run the power flow and price the outcome.

    ``network`` may also be a prepared :class:`MarketInstance`, in which case
    ``consumers``/``bids`` are ignored. Capacity violations
    raise OverReductionError; off-curve bid levels raise InvalidLevelError.
    """
    inst = MarketInstance.coerce(network, consumers, bids, limit=limit)
    p_cr, p_dr = inst.arrays(decisions)
    return evaluate_arrays(inst, p_cr, p_dr, request)


def curtailment_only_baseline(network, consumers=None, request: MarketRequest = None,
                              limit: ReductionLimit = "load", block_kw: float = 10.0
                              ) -> ClearingSolution:
    """Utility-only remedy: curtail the cheapest consumers first, in blocks, until
    the request's active constraints hold. Ties go to the lower bus id."""
    inst = MarketInstance.coerce(network, consumers, {}, limit=limit)
    order = sorted((c for c in inst.consumers.values() if c.non_firmed_kw > 0),
                   key=lambda c: (c.curtail_cost, c.bus_id))
    p_cr = np.zeros(inst.network.topology.n_bus)
    p_dr = np.zeros_like(p_cr)
    needs_flow = bool(request.active & NETWORK_LIMITS)

    def satisfied():
        if TARGET in request.active and p_cr.sum() < request.p_sch:
            return False, None
        if not needs_flow:
            return True, None
        flow = inst.flow(p_cr, p_dr)
        return not network_violations(flow, request, p_cr.sum()), flow

    ok, flow = satisfied()
    queue = iter(order)
    current = next(queue, None)
    while not ok:
        while current is not None and p_cr[inst.position(current.bus_id)] >= current.non_firmed_kw:
            current = next(queue, None)
        if current is None:
            raise InfeasibleError("constraints cannot be met even with every non-firmed load "
                                  "curtailed")
        k = inst.position(current.bus_id)
        p_cr[k] = min(p_cr[k] + block_kw, current.non_firmed_kw)
        ok, flow = satisfied()
    return evaluate_arrays(inst, p_cr, p_dr, request, flow)


# -- report ---------------------------------------------------------------------------

def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def flow_summary(flow: PowerFlowResult) -> dict:
    return {
        "loss_kw": float(flow.total_loss_kw),
        "min_voltage_pu": float(np.min(np.abs(flow.bus_voltage))),
        "max_current_pu": float(np.max(np.abs(flow.branch_current))) if flow.branch_current.size
        else 0.0,
        "iterations": int(flow.iterations),
        "converged": bool(flow.converged),
    }


def clearing_report(solution: ClearingSolution, inst: MarketInstance,
                    baseline: ClearingSolution | None = None, extra: dict | None = None) -> dict:
    """JSON-ready dict: request, per-consumer decisions, costs, feasibility, flows."""
    h = solution.request.interval_hours
    rows = []
    for b, c in inst.consumers.items():
        p_cr, p_dr = solution.p_cr.get(b, 0), solution.p_dr.get(b, 0)
        bid = inst.bids.get(b)
        rows.append({
            "bus": b,
            "p_cr_kw": p_cr,
            "p_dr_kw": p_dr,
            "offered_kw": bid.max_kw if bid is not None else 0,
            "curtailment_cost": float(curtailment_cost(c, p_cr, h)) if p_cr else 0.0,
            "dr_payment": float(dr_payment(bid, p_dr, h)),
        })
    net = inst.network
    report = {
        "request": solution.request.to_dict(),
        "bases": {"base_kv": net.base_kv, "base_mva": net.base_mva,
                  "slack_voltage": net.slack_voltage, "i_base_ka": net.i_base_ka},
        "reduction_limit": inst.limit,
        "consumers": rows,
        "costs": {
            "curtailment": solution.curtail_cost_total,
            "dr_payment": solution.dr_payment_total,
            "loss": solution.loss_cost,
            "total": solution.total_cost,
        },
        "total_reduction_kw": solution.total_reduction_kw,
        "feasible": solution.feasible,
        "violations": [v.to_dict() for v in solution.violations],
        "before": flow_summary(inst.base_flow),
        "after": flow_summary(solution.flow_after),
    }
    if baseline is not None:
        report["baseline"] = {
            "curtailment": baseline.curtail_cost_total,
            "loss": baseline.loss_cost,
            "total": baseline.total_cost,
            "curtailed_kw": baseline.curtailed_kw,
            "after": flow_summary(baseline.flow_after),
        }
        report["cost_ratio"] = _finite(baseline.total_cost / solution.total_cost
                                       if solution.total_cost > 0 else None)
    if extra:
        report.update(extra)
    return report
