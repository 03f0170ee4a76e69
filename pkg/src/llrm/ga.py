"""Genetic-algorithm market clearing over integer decision vectors.

A genome holds one gene per bidding consumer (index of the accepted bid step,
0 = nothing accepted) and one gene per curtailable consumer (utility
curtailment in kW, a multiple of ``GaConfig.cr_step_kw``). Genomes are kept
inside the per-consumer capacities by clamping, and pushed into the request's
feasible region by a repair pass that adds the cheapest reduction per unit of
constraint relief until the active limit holds.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleProblemError, NonConvergenceError, SpaceTooLargeError
from .market import (
    CURRENT,
    NETWORK_LIMITS,
    TARGET,
    VOLTAGE,
    ClearingSolution,
    MarketInstance,
    MarketRequest,
    cost_breakdown,
    evaluate_arrays,
    network_violations,
)

log = logging.getLogger(__name__)

_MAX_REPAIR_STEPS = 100_000


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("LLRM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 100
    iterations: int = 200
    crossover_fraction: float = 0.8
    mutation_fraction: float = 0.3
    rng_seed: int = 42
    elitism: int = 2
    tournament_size: int = 2
    mutation_rate: float | None = None  # per gene; None means 1 / number of genes
    cr_step_kw: int = 1
    repair_block_kw: int = 10
    threads: int = field(default_factory=_env_threads)

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        for name in ("crossover_fraction", "mutation_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if not 0 <= self.elitism < self.population_size:
            raise ValueError("elitism must be below population_size")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be positive")
        if self.cr_step_kw < 1 or self.repair_block_kw < 1:
            raise ValueError("step sizes must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass(frozen=True)
class Genome:
    dr: tuple[int, ...]
    cr: tuple[int, ...]

    @property
    def genes(self) -> tuple[int, ...]:
        return self.dr + self.cr


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    best_cost: float
    mean_cost: float
    feasible_count: int


@dataclass(frozen=True, eq=False)
class GaResult:
    solution: ClearingSolution
    genome: Genome
    trace: tuple[TraceRow, ...]
    evaluations: int
    flow_failures: int

    @property
    def best_cost(self) -> float:
        return self.solution.total_cost


class ClearingProblem:
    """Encoding, operators, repair and fitness for one market instance/request."""

    def __init__(self, inst: MarketInstance, request: MarketRequest,
                 config: GaConfig | None = None):
        self.inst = inst
        self.request = request
        self.config = config or GaConfig()
        net = inst.network
        topo = net.topology
        h = request.interval_hours

        self.bidders = tuple(sorted(inst.bids))
        self.bid_pos = np.array([inst.position(b) for b in self.bidders], dtype=np.int64)
        self.levels, self.prices, self.pays, dr_max = [], [], [], []
        for b, k in zip(self.bidders, self.bid_pos):
            steps = inst.bids[b].steps
            lv = np.array([0.0] + [p for p, _ in steps])
            pr = np.array([0.0] + [c for _, c in steps])
            self.levels.append(lv)
            self.prices.append(pr)
            self.pays.append(lv * pr * h)
            dr_max.append(int(np.searchsorted(lv, inst.cap[k], side="right") - 1))
        self.dr_max = np.array(dr_max, dtype=np.int64)

        step = self.config.cr_step_kw
        self.curtailables = tuple(b for b in net.bus_ids
                                  if inst.consumers[b].non_firmed_kw >= step)
        self.cr_pos = np.array([inst.position(b) for b in self.curtailables], dtype=np.int64)
        self.cr_cost = inst.curtail_cost[self.cr_pos] if self.curtailables else np.zeros(0)
        self.n_genes = len(self.bidders) + len(self.curtailables)

        # linear voltage / current sensitivities to a 1 kW cut at each bus (constant pf)
        p, q = net.p_kw, net.q_kvar
        self.q_ratio = np.where(p > 0, q / np.where(p > 0, p, 1.0), 0.0)
        bibc = topo.bibc
        self._bibc = bibc
        z = net.z_pu
        self._r_common = bibc.T @ (z.real[:, None] * bibc)
        self._x_common = bibc.T @ (z.imag[:, None] * bibc)
        self._needs_flow = bool(request.active & NETWORK_LIMITS)
        self._cache: dict[Genome, tuple[Genome, float]] = {}
        self.flow_failures = 0

    # -- encoding ------------------------------------------------------------------

    def zero(self) -> Genome:
        return Genome((0,) * len(self.bidders), (0,) * len(self.curtailables))

    def dr_kw_at(self, dr) -> np.ndarray:
        out = np.zeros(self.inst.network.topology.n_bus)
        for i, g in enumerate(dr):
            out[self.bid_pos[i]] = self.levels[i][g]
        return out

    def cr_limit(self, j: int, dr_kw_bus: float) -> int:
        k = self.cr_pos[j]
        room = min(self.inst.non_firmed[k], self.inst.cap[k] - dr_kw_bus)
        step = self.config.cr_step_kw
        return max(0, int(math.floor(room / step + 1e-9)) * step)

    def arrays(self, genome: Genome):
        """(p_cr, p_dr, dr prices) as bus-aligned float arrays."""
        n = self.inst.network.topology.n_bus
        p_cr = np.zeros(n)
        p_dr = np.zeros(n)
        prices = np.zeros(n)
        for i, g in enumerate(genome.dr):
            k = self.bid_pos[i]
            p_dr[k] = self.levels[i][g]
            prices[k] = self.prices[i][g]
        if genome.cr:
            p_cr[self.cr_pos] = genome.cr
        return p_cr, p_dr, prices

    def decisions(self, genome: Genome) -> dict[int, tuple[int, int]]:
        p_cr, p_dr, _ = self.arrays(genome)
        return self.inst.decisions(p_cr, p_dr)

    def clamp(self, genome: Genome) -> Genome:
        """Truncate genes into their integer ranges (per-consumer capacities)."""
        step = self.config.cr_step_kw
        dr = tuple(int(min(max(int(g), 0), m)) for g, m in zip(genome.dr, self.dr_max))
        dr_kw = self.dr_kw_at(dr)
        cr = []
        for j, g in enumerate(genome.cr):
            hi = self.cr_limit(j, dr_kw[self.cr_pos[j]])
            g = int(g) // step * step
            cr.append(min(max(g, 0), hi))
        return Genome(dr, tuple(cr))

    def in_range(self, genome: Genome) -> bool:
        return self.clamp(genome) == genome and all(
            isinstance(g, int) for g in genome.genes)

    # -- repair and fitness ----------------------------------------------------------

    def _flow(self, p_cr, p_dr):
        try:
            return self.inst.flow(p_cr, p_dr)
        except NonConvergenceError:
            self.flow_failures += 1
            return None

    def _benefit(self, flow, short: bool) -> np.ndarray | None:
        """Relief per kW cut at each bus for the currently violated constraint."""
        req = self.request
        if short:
            return np.ones(self.inst.network.topology.n_bus)
        if VOLTAGE in req.active:
            vm = np.abs(flow.bus_voltage)
            k = int(np.argmin(vm))
            if vm[k] >= req.v_min:
                return None
            return self._r_common[:, k] + self._x_common[:, k] * self.q_ratio
        if CURRENT in req.active:
            im = np.abs(flow.branch_current)
            if im.size == 0:
                return None
            l = int(np.argmax(im))
            if im[l] <= req.i_max:
                return None
            s = flow.bus_voltage[self.inst.network.topology.branch_from[l]] * np.conj(
                flow.branch_current[l])
            return self._bibc[l] * (s.real + s.imag * self.q_ratio) / abs(s)
        return None

    def repair(self, genome: Genome):
        """Clamp, then add reductions until the active constraint holds.

        Returns ``(genome, ok, flow)``. ``ok`` is False when no further
        reduction can relieve the violation or the power flow fails; ``flow``
        is the last solve, or None when the request needed none.
        """
        g = self.clamp(genome)
        dr = list(g.dr)
        cr = list(g.cr)
        p_cr, p_dr, _ = self.arrays(g)
        req = self.request
        block = self.config.repair_block_kw
        step = self.config.cr_step_kw
        block = max(step, block // step * step)
        for _ in range(_MAX_REPAIR_STEPS):
            short = TARGET in req.active and p_cr.sum() + p_dr.sum() < req.p_sch
            flow = None
            if self._needs_flow:
                flow = self._flow(p_cr, p_dr)
                if flow is None:
                    return Genome(tuple(dr), tuple(cr)), False, None
            benefit = self._benefit(flow, short)
            if benefit is None:
                return Genome(tuple(dr), tuple(cr)), True, flow

            best, best_score = None, math.inf
            for i in range(len(dr)):
                if dr[i] >= self.dr_max[i]:
                    continue
                k = self.bid_pos[i]
                lv = self.levels[i]
                if p_cr[k] + lv[dr[i] + 1] > self.inst.cap[k] or benefit[k] <= 0:
                    continue
                dkw = lv[dr[i] + 1] - lv[dr[i]]
                score = (self.pays[i][dr[i] + 1] - self.pays[i][dr[i]]) / (dkw * benefit[k])
                if score < best_score:
                    best, best_score = ("dr", i), score
            for j in range(len(cr)):
                k = self.cr_pos[j]
                if benefit[k] <= 0:
                    continue
                hi = self.cr_limit(j, p_dr[k])
                if cr[j] >= hi:
                    continue
                score = self.cr_cost[j] / benefit[k]
                if score < best_score:
                    best, best_score = ("cr", j), score
            if best is None:
                return Genome(tuple(dr), tuple(cr)), False, flow
            kind, i = best
            if kind == "dr":
                dr[i] += 1
                p_dr[self.bid_pos[i]] = self.levels[i][dr[i]]
            else:
                k = self.cr_pos[i]
                cr[i] = min(cr[i] + block, self.cr_limit(i, p_dr[k]))
                p_cr[k] = cr[i]
        raise RuntimeError("repair did not terminate")

    def _cost(self, genome: Genome, flow) -> float:
        p_cr, p_dr, prices = self.arrays(genome)
        if flow is None:
            flow = self._flow(p_cr, p_dr)
            if flow is None:
                return math.inf
        return cost_breakdown(self.inst, p_cr, p_dr, flow.total_loss_kw, self.request,
                              prices)[3]

    def score(self, genome: Genome) -> tuple[Genome, float]:
        """Repaired genome and its total cost (+inf when it cannot be repaired)."""
        hit = self._cache.get(genome)
        if hit is not None:
            return hit
        fixed, ok, flow = self.repair(genome)
        out = (fixed, self._cost(fixed, flow) if ok else math.inf)
        self._cache[genome] = out
        return out

    def solution(self, genome: Genome) -> ClearingSolution:
        p_cr, p_dr, _ = self.arrays(genome)
        return evaluate_arrays(self.inst, p_cr, p_dr, self.request)

    # -- operators -------------------------------------------------------------------

    def _resample_cr(self, j, dr_kw_bus, rng) -> int:
        step = self.config.cr_step_kw
        hi = self.cr_limit(j, dr_kw_bus)
        return int(rng.integers(0, hi // step + 1)) * step

    def mutate(self, genome: Genome, rng: np.random.Generator, rate: float | None = None,
               repair: bool = True) -> Genome:
        """Resample each gene with probability ``rate`` uniformly over its range."""
        if rate is None:
            rate = self.config.mutation_rate
        if rate is None:
            rate = 1.0 / max(1, self.n_genes)
        hits = rng.random(self.n_genes) < rate
        if not hits.any():
            return genome
        nb = len(self.bidders)
        dr = list(genome.dr)
        for i in np.flatnonzero(hits[:nb]):
            dr[i] = int(rng.integers(0, self.dr_max[i] + 1))
        dr_kw = self.dr_kw_at(dr)
        cr = list(genome.cr)
        for j in np.flatnonzero(hits[nb:]):
            cr[j] = self._resample_cr(j, dr_kw[self.cr_pos[j]], rng)
        child = Genome(tuple(dr), tuple(cr))
        return self.score(child)[0] if repair else child

    def crossover(self, a: Genome, b: Genome, rng: np.random.Generator,
                  repair: bool = True) -> tuple[Genome, Genome]:
        """Uniform crossover: each gene position is swapped with probability 1/2."""
        swap = rng.random(self.n_genes) < 0.5
        ga, gb = a.genes, b.genes
        c1 = tuple(y if s else x for x, y, s in zip(ga, gb, swap))
        c2 = tuple(x if s else y for x, y, s in zip(ga, gb, swap))
        nb = len(self.bidders)
        kids = (Genome(c1[:nb], c1[nb:]), Genome(c2[:nb], c2[nb:]))
        if repair:
            kids = tuple(self.score(k)[0] for k in kids)
        return kids

    def random_genome(self, rng: np.random.Generator) -> Genome:
        dr = tuple(int(rng.integers(0, m + 1)) for m in self.dr_max)
        dr_kw = self.dr_kw_at(dr)
        p_curtail = 1.0 / max(1, len(self.curtailables))
        cr = []
        for j in range(len(self.curtailables)):
            if rng.random() < p_curtail:
                cr.append(self._resample_cr(j, dr_kw[self.cr_pos[j]], rng))
            else:
                cr.append(0)
        return Genome(dr, tuple(cr))

    def evaluate_many(self, genomes) -> list[tuple[Genome, float]]:
        threads = self.config.threads
        if threads > 1 and len(genomes) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                return list(ex.map(self.score, genomes))
        return [self.score(g) for g in genomes]


def _problem(network, consumers, bids, request, config) -> ClearingProblem:
    if isinstance(network, ClearingProblem):
        return network
    inst = MarketInstance.coerce(network, consumers, bids)
    return ClearingProblem(inst, request, config)


def random_feasible_population(network, consumers=None, bids=None, request=None,
                               config: GaConfig | None = None,
                               rng: np.random.Generator | None = None,
                               retries: int = 10) -> list[tuple[Genome, float]]:
    """Initial population of repaired genomes with their costs.

    The first member is the repaired all-zero genome; the rest are random.
    Raises InfeasibleProblemError when even the zero genome cannot be repaired.
    """
    problem = _problem(network, consumers, bids, request, config)
    cfg = problem.config
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    seed = problem.score(problem.zero())
    if not math.isfinite(seed[1]):
        raise InfeasibleProblemError(
            "no feasible clearing: the active constraint cannot be met at full capacity")
    pop = [seed]
    raw = []
    for _ in range(cfg.population_size - 1):
        raw.append([problem.random_genome(rng) for _ in range(retries)])
    for tries in raw:
        for g in tries:
            scored = problem.score(g)
            if math.isfinite(scored[1]):
                pop.append(scored)
                break
        else:
            pop.append(seed)
    return pop


def _tournament(pop, rng, size) -> int:
    picks = rng.integers(0, len(pop), size=size)
    return int(min(picks, key=lambda i: (pop[i][1], i)))


def _summary(it, pop) -> TraceRow:
    costs = np.array([c for _, c in pop])
    finite = costs[np.isfinite(costs)]
    return TraceRow(it, float(costs.min()),
                    float(finite.mean()) if finite.size else math.inf, int(finite.size))


def clear_market(network, consumers=None, bids=None, request: MarketRequest | None = None,
                 config: GaConfig | None = None) -> GaResult:
    """Run the GA and return the cheapest feasible clearing with its trace.

    Each generation keeps the ``elitism`` best genomes and refills the rest by
    tournament selection, uniform crossover (with probability
    ``crossover_fraction``) and mutation (with probability ``mutation_fraction``
    per child). Operator randomness is drawn before the children are repaired
    and scored, so results do not depend on ``threads``.
    """
    problem = _problem(network, consumers, bids, request, config)
    cfg = problem.config
    rng = np.random.default_rng(cfg.rng_seed)
    pop = random_feasible_population(problem, rng=rng)
    trace = [_summary(0, pop)]
    n_children = cfg.population_size - cfg.elitism
    for it in range(1, cfg.iterations + 1):
        ranked = sorted(range(len(pop)), key=lambda i: (pop[i][1], i))
        elites = [pop[i] for i in ranked[:cfg.elitism]]
        children = []
        while len(children) < n_children:
            a = pop[_tournament(pop, rng, cfg.tournament_size)][0]
            b = pop[_tournament(pop, rng, cfg.tournament_size)][0]
            if rng.random() < cfg.crossover_fraction:
                a, b = problem.crossover(a, b, rng, repair=False)
            for child in (a, b):
                if rng.random() < cfg.mutation_fraction:
                    child = problem.mutate(child, rng, repair=False)
                children.append(child)
        pop = elites + problem.evaluate_many(children[:n_children])
        trace.append(_summary(it, pop))

    best_i = min(range(len(pop)), key=lambda i: (pop[i][1], i))
    genome, cost = pop[best_i]
    if not math.isfinite(cost):
        raise InfeasibleProblemError("GA found no feasible clearing")
    solution = problem.solution(genome)
    if solution.total_cost != cost or not solution.feasible:
        raise AssertionError("GA fitness disagrees with market evaluation")
    log.debug("cleared: cost %.4f after %d evaluations", cost, len(problem._cache))
    return GaResult(solution, genome, tuple(trace), len(problem._cache), problem.flow_failures)


def best_of_seeds(network, consumers=None, bids=None, request=None,
                  config: GaConfig | None = None, seeds=range(10)) -> tuple[GaResult, list[GaResult]]:
    """Run the GA once per seed and return (cheapest run, all runs)."""
    base = config or GaConfig()
    inst = network if isinstance(network, MarketInstance) else MarketInstance.coerce(
        network, consumers, bids)
    runs = []
    for s in seeds:
        cfg = GaConfig(**{**base.__dict__, "rng_seed": int(s)})
        runs.append(clear_market(ClearingProblem(inst, request, cfg)))
    best = min(runs, key=lambda r: r.best_cost)
    return best, runs


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "best_cost", "mean_cost", "feasible_count"])
        for row in trace:
            w.writerow([row.iteration, repr(row.best_cost), repr(row.mean_cost),
                        row.feasible_count])


# -- exhaustive reference --------------------------------------------------------------

def exhaustive_oracle(network, consumers=None, bids=None, request: MarketRequest | None = None,
                      grid_kw: int = 10, max_space: int = 10 ** 7) -> ClearingSolution:
    """Cheapest feasible clearing by enumerating every decision combination.

    Curtailment is enumerated on a ``grid_kw`` grid. Ties go to the smaller
    total reduction, then to the lexicographically smaller decision vector.
    """
    inst = MarketInstance.coerce(network, consumers, bids)
    bidders = sorted(inst.bids)
    curtailables = [b for b in inst.network.bus_ids
                    if inst.consumers[b].non_firmed_kw >= grid_kw]
    dr_opts = [[0] + list(inst.bids[b].levels) for b in bidders]
    cr_opts = [list(range(0, int(inst.consumers[b].non_firmed_kw) + 1, grid_kw))
               for b in curtailables]
    space = math.prod(len(o) for o in dr_opts + cr_opts)
    if space > max_space:
        raise SpaceTooLargeError(f"{space} combinations exceed the {max_space} guard")

    n = inst.network.topology.n_bus
    dr_k = [inst.position(b) for b in bidders]
    cr_k = [inst.position(b) for b in curtailables]
    best_key, best = None, None
    for combo in itertools.product(*dr_opts, *cr_opts):
        p_dr = np.zeros(n)
        p_cr = np.zeros(n)
        p_dr[dr_k] = combo[:len(bidders)]
        p_cr[cr_k] = combo[len(bidders):]
        if np.any(p_cr + p_dr > inst.cap):
            continue
        total = p_cr.sum() + p_dr.sum()
        if TARGET in request.active and total < request.p_sch:
            continue
        try:
            flow = inst.flow(p_cr, p_dr)
        except NonConvergenceError:
            continue
        if network_violations(flow, request, total):
            continue
        cost = cost_breakdown(inst, p_cr, p_dr, flow.total_loss_kw, request)[3]
        key = (cost, total, combo)
        if best_key is None or key < best_key:
            best_key, best = key, (p_cr, p_dr, flow)
    if best is None:
        raise InfeasibleProblemError("no feasible combination")
    return evaluate_arrays(inst, best[0], best[1], request, best[2])
