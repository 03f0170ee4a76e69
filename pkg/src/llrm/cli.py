"""Command-line runner: clear the market for a scenario and write report files.

Exit status: 0 feasible clearing, 1 input error, 2 infeasible request.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets
from .errors import InfeasibleError, InputError, LLRMError
from .ga import GaConfig, GaResult, clear_market, write_trace_csv
from .grid import REDUCTION_LIMITS, PerUnitBases, load_bids, load_consumers, load_network
from .market import (
    SCENARIOS,
    WHOLESALE_PRICE,
    ClearingSolution,
    MarketInstance,
    MarketRequest,
    Mode,
    clearing_report,
    curtailment_only_baseline,
)
from .powerflow import PowerFlowResult, write_current_csv, write_voltage_csv

log = logging.getLogger("llrm")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2

_LIMIT_FLAGS = {"vmin": Mode.VOLTAGE_REGULATION, "imax_pu": Mode.CONGESTION_RELIEF,
                "psch_kw": Mode.SCHEDULED_REDUCTION}
_FLAG_FIELD = {"vmin": "v_min", "imax_pu": "i_max", "psch_kw": "p_sch"}


class UsageError(InputError):
    pass


@dataclass
class RunConfig:
    network: str
    loads: str
    consumers: str
    bids: str
    request: MarketRequest
    scenario: str | None = None
    ga: GaConfig = field(default_factory=GaConfig)
    out: Path = Path("llrm_out")
    formats: tuple[str, ...] = ("json",)
    limit: str = "load"
    bases: PerUnitBases = field(default_factory=PerUnitBases)
    baseline: bool = True


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    paths = datasets.canonical_paths()
    p = _Parser(prog="llrm", description="Clear a localized load-reduction market with a GA.")
    data = p.add_argument_group("input data (defaults: bundled IEEE 33-bus case)")
    data.add_argument("--network", default=paths["network"], help="branch CSV")
    data.add_argument("--loads", default=paths["loads"], help="bus load CSV")
    data.add_argument("--consumers", default=paths["consumers"], help="consumer split CSV")
    data.add_argument("--bids", default=paths["bids"], help="bid CSV")

    req = p.add_argument_group("market request")
    req.add_argument("--scenario", type=str.upper, choices=sorted(SCENARIOS),
                     help="A: voltage regulation, B: congestion relief, C: 500 kW reduction")
    req.add_argument("--vmin", type=float, help="minimum bus voltage, p.u.")
    req.add_argument("--imax-pu", type=float, help="maximum branch current, p.u.")
    req.add_argument("--psch-kw", type=float, help="scheduled reduction target, kW")
    req.add_argument("--wholesale", type=float, default=WHOLESALE_PRICE * 1000,
                     help="wholesale price for losses, $/MWh (default %(default)g)")
    req.add_argument("--interval-h", type=float, default=1.0, help="clearing interval, h")
    req.add_argument("--reduction-limit", choices=REDUCTION_LIMITS, default="load",
                     help="cap on curtailment plus accepted bid (default %(default)s)")
    req.add_argument("--base-mva", type=float, default=PerUnitBases().base_mva)
    req.add_argument("--base-kv", type=float, default=PerUnitBases().base_kv)

    ga = p.add_argument_group("genetic algorithm")
    d = GaConfig(threads=1)
    ga.add_argument("--pop", type=int, default=d.population_size)
    ga.add_argument("--iters", type=int, default=d.iterations)
    ga.add_argument("--seed", type=int, default=42)
    ga.add_argument("--crossover", type=float, default=d.crossover_fraction)
    ga.add_argument("--mutation", type=float, default=d.mutation_fraction)
    ga.add_argument("--elitism", type=int, default=d.elitism)
    ga.add_argument("--cr-step", type=int, default=d.cr_step_kw,
                    help="curtailment granularity, kW")

    out = p.add_argument_group("output")
    out.add_argument("--out", type=Path, default=Path("llrm_out"), help="output directory")
    out.add_argument("--format", dest="formats", action="append", choices=("json", "csv"),
                     help="report format; repeat for both (default json)")
    out.add_argument("--no-baseline", action="store_true",
                     help="skip the curtailment-only comparison")
    out.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    given = {k: getattr(args, k) for k in _LIMIT_FLAGS if getattr(args, k) is not None}
    try:
        if args.scenario:
            own = SCENARIOS[args.scenario].mode
            foreign = [k for k in given if _LIMIT_FLAGS[k] != own]
            if foreign:
                raise UsageError(f"--scenario {args.scenario} cannot be combined with "
                                 + ", ".join("--" + k.replace("_", "-") for k in foreign))
            fields = dict(SCENARIOS[args.scenario].__dict__)
        else:
            if len(given) != 1:
                raise UsageError("give --scenario or exactly one of --vmin, --imax-pu, --psch-kw")
            fields = {"mode": _LIMIT_FLAGS[next(iter(given))]}
        for k, v in given.items():
            fields[_FLAG_FIELD[k]] = v
        fields["wholesale_price"] = args.wholesale / 1000.0
        fields["interval_hours"] = args.interval_h
        request = MarketRequest(**fields)
        ga = GaConfig(population_size=args.pop, iterations=args.iters, rng_seed=args.seed,
                      crossover_fraction=args.crossover, mutation_fraction=args.mutation,
                      elitism=args.elitism, cr_step_kw=args.cr_step)
        bases = PerUnitBases(args.base_kv, args.base_mva)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RunConfig(network=args.network, loads=args.loads, consumers=args.consumers,
                     bids=args.bids, request=request, scenario=args.scenario, ga=ga,
                     out=args.out, formats=tuple(dict.fromkeys(args.formats or ["json"])),
                     limit=args.reduction_limit, bases=bases, baseline=not args.no_baseline)


def emit_plot_data(solution: ClearingSolution, flow_before: PowerFlowResult,
                   flow_after: PowerFlowResult, outdir, inst: MarketInstance) -> list[Path]:
    """Before/after voltage and current tables plus offered vs accepted kW per consumer."""
    outdir = Path(outdir)
    files = []
    path = outdir / "bus_voltages.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_before_pu", "v_after_pu"])
        for b, v0, v1 in zip(flow_before.bus_ids, flow_before.voltage_magnitude,
                             flow_after.voltage_magnitude):
            w.writerow([b, repr(float(v0)), repr(float(v1))])
    files.append(path)

    path = outdir / "branch_currents.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "from", "to", "i_before_pu", "i_after_pu"])
        for k, (br, i0, i1) in enumerate(zip(inst.network.branches,
                                             flow_before.current_magnitude,
                                             flow_after.current_magnitude), start=1):
            w.writerow([k, br.from_bus, br.to_bus, repr(float(i0)), repr(float(i1))])
    files.append(path)

    path = outdir / "consumer_reductions.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "offered_kw", "accepted_kw", "curtailed_kw"])
        for b in inst.consumers:
            bid = inst.bids.get(b)
            w.writerow([b, bid.max_kw if bid else 0, solution.p_dr.get(b, 0),
                        solution.p_cr.get(b, 0)])
    files.append(path)

    for name, flow in (("before", flow_before), ("after", flow_after)):
        write_voltage_csv(flow, outdir / f"voltages_{name}.csv")
        write_current_csv(flow, outdir / f"currents_{name}.csv")
        files += [outdir / f"voltages_{name}.csv", outdir / f"currents_{name}.csv"]
    return files


def _write_decisions_csv(report, path):
    with open(path, "w", newline="") as fh:
        cols = ["bus", "p_cr_kw", "p_dr_kw", "offered_kw", "curtailment_cost", "dr_payment"]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in report["consumers"]:
            w.writerow(row)


def _write_summary(path, label, result: GaResult, baseline):
    market = result.solution.total_cost
    base = baseline.total_cost if baseline is not None else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "cost_with_llrm", "cost_without_llrm", "ratio"])
        w.writerow([label, repr(market), "" if base is None else repr(base),
                    "" if base is None or market <= 0 else repr(base / market)])
    return market, base


def run(config: RunConfig) -> int:
    net = load_network(config.network, config.loads, config.bases)
    consumers = load_consumers(config.consumers, net)
    bids = load_bids(config.bids, consumers, limit=config.limit)
    inst = MarketInstance(net, consumers, bids, limit=config.limit)
    request = config.request
    label = config.scenario or request.mode.value

    try:
        config.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {config.out}: {exc}") from None

    baseline = None
    if config.baseline:
        try:
            baseline = curtailment_only_baseline(inst, request=request, limit=config.limit)
        except InfeasibleError as exc:
            log.warning("curtailment-only baseline infeasible: %s", exc)

    result = clear_market(inst, request=request, config=config.ga)
    sol = result.solution
    report = clearing_report(sol, inst, baseline, extra={
        "scenario": config.scenario,
        "ga": {k: v for k, v in config.ga.__dict__.items()},
        "evaluations": result.evaluations,
        "flow_failures": result.flow_failures,
    })
    if "json" in config.formats:
        (config.out / "report.json").write_text(json.dumps(report, indent=2))
    if "csv" in config.formats:
        _write_decisions_csv(report, config.out / "decisions.csv")
    write_trace_csv(result.trace, config.out / "trace.csv")
    emit_plot_data(sol, inst.base_flow, sol.flow_after, config.out, inst)
    market, base = _write_summary(config.out / "summary.csv", label, result, baseline)

    after = report["after"]
    print(f"scenario {label}: cost with market ${market:,.2f}"
          + (f", without market ${base:,.2f} ({base / market:,.0f}x)" if base and market > 0
             else ", without market: infeasible" if config.baseline else ""))
    print(f"  loss {report['before']['loss_kw']:.1f} -> {after['loss_kw']:.1f} kW, "
          f"min V {after['min_voltage_pu']:.4f} p.u., max I {after['max_current_pu']:.4f} p.u. "
          f"(I base {net.i_base_ka * 1000:.1f} A)")
    print(f"  reduction {sol.total_reduction_kw:g} kW "
          f"(bids {sol.dr_kw:g}, curtailment {sol.curtailed_kw:g}); wrote {config.out}")
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"llrm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(config_from_args(args))
    except InfeasibleError as exc:
        print(f"llrm: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InputError as exc:
        print(f"llrm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LLRMError as exc:
        print(f"llrm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
