"""Backward/forward sweep power flow for radial feeders (constant-power loads)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._kernels import DEFAULT_BACKEND, get_sweep
from .errors import DegenerateNetworkError, NonConvergenceError, NotConvergedError
from .grid import Network

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class PowerFlowResult:
    """Voltages (per bus, in ``bus_ids`` order) and currents (per branch, file order).

    Currents are oriented away from the slack bus and expressed in per-unit of
    ``i_base_ka``.
    """

    bus_voltage: np.ndarray
    branch_current: np.ndarray
    total_loss_kw: float
    converged: bool
    iterations: int
    trace: tuple[float, ...] = ()
    bus_ids: tuple[int, ...] = ()
    slack_injection_kva: complex = 0j
    base_kv: float = 12.66
    base_mva: float = 100.0
    i_base_ka: float = field(default=0.0)

    @property
    def voltage_magnitude(self) -> np.ndarray:
        return np.abs(self.bus_voltage)

    @property
    def current_magnitude(self) -> np.ndarray:
        return np.abs(self.branch_current)

    @property
    def voltage_angle_deg(self) -> np.ndarray:
        return np.degrees(np.angle(self.bus_voltage))


def _solve(network: Network, p_kw, q_kvar, tol, max_iter, backend, raise_on_fail=True):
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    z = network.z_pu
    if z.size and np.any(z == 0):
        raise DegenerateNetworkError("zero-impedance branch")
    topo = network.topology
    s_pu = (np.asarray(p_kw, dtype=float) + 1j * np.asarray(q_kvar, dtype=float)) / (
        1000.0 * network.base_mva)
    v, ib, iters, ok, trace = get_sweep(backend)(topo, s_pu, z, network.slack_voltage,
                                                 tol, max_iter)
    loss_kw = float(np.sum(np.abs(ib) ** 2 * z.real) * network.base_mva * 1000.0)
    # power leaving the slack through the branches attached to it
    out = np.zeros(topo.n_bus, dtype=np.complex128)
    if topo.n_branch:
        np.add.at(out, topo.branch_from, ib)
    s_slack = complex(v[topo.slack] * np.conj(out[topo.slack])) * network.base_mva * 1000.0
    result = PowerFlowResult(
        bus_voltage=v, branch_current=ib, total_loss_kw=loss_kw, converged=bool(ok),
        iterations=int(iters), trace=tuple(float(t) for t in trace),
        bus_ids=tuple(network.bus_ids), slack_injection_kva=s_slack,
        base_kv=network.base_kv, base_mva=network.base_mva, i_base_ka=network.i_base_ka)
    if not ok and raise_on_fail:
        raise NonConvergenceError(
            f"sweep did not converge in {max_iter} iterations "
            f"(last change {trace[-1]:.3e} p.u.)", result)
    return result


def solve(network: Network, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          backend: str | None = None, raise_on_fail: bool = True) -> PowerFlowResult:
    """Run the sweep on the network's own loads.

    Raises NonConvergenceError (carrying the partial result and its trace) when
    the voltage change does not fall below ``tol`` within ``max_iter`` sweeps,
    unless ``raise_on_fail`` is False.
    """
    return _solve(network, network.p_kw, network.q_kvar, tol, max_iter, backend, raise_on_fail)


def solve_loads(network: Network, p_kw, q_kvar, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, backend: str | None = None,
                raise_on_fail: bool = True) -> PowerFlowResult:
    """Same as :func:`solve` with bus loads supplied as arrays (kW / kVAr)."""
    return _solve(network, p_kw, q_kvar, tol, max_iter, backend, raise_on_fail)


def _require_converged(result: PowerFlowResult):
    if not result.converged:
        raise NotConvergedError("power-flow result did not converge")


def min_voltage(result: PowerFlowResult) -> float:
    _require_converged(result)
    return float(np.min(np.abs(result.bus_voltage)))


def max_branch_current(result: PowerFlowResult) -> float:
    _require_converged(result)
    if result.branch_current.size == 0:
        return 0.0
    return float(np.max(np.abs(result.branch_current)))


def write_voltage_csv(result: PowerFlowResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_pu", "angle_deg"])
        for b, v, a in zip(result.bus_ids, result.voltage_magnitude, result.voltage_angle_deg):
            w.writerow([b, repr(float(v)), repr(float(a))])


def write_current_csv(result: PowerFlowResult, path) -> None:
    """Branches are numbered from 1 in network file order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "i_pu"])
        for k, i in enumerate(result.current_magnitude, start=1):
            w.writerow([k, repr(float(i))])


__all__ = [
    "DEFAULT_BACKEND", "DEFAULT_MAX_ITER", "DEFAULT_TOL", "PowerFlowResult",
    "max_branch_current", "min_voltage", "solve", "solve_loads",
    "write_current_csv", "write_voltage_csv",
]
