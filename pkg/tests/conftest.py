import numpy as np
import pytest

from llrm import datasets
from llrm.grid import Branch, Bus, Consumer, BidCurve, Network
from llrm.market import MarketInstance


@pytest.fixture(scope="session")
def paths():
    return datasets.canonical_paths()


@pytest.fixture(scope="session")
def ieee33():
    return datasets.load_ieee33()


@pytest.fixture(scope="session")
def inst33(ieee33):
    net, consumers, bids = ieee33
    return MarketInstance(net, consumers, bids)


def write_csv(path, header, rows, comment=None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(header)
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def random_feeder(rng, n_bus, p_range=(0.0, 300.0), r_range=(0.05, 1.5), x_range=(0.0, 1.5)):
    """Random radial feeder: bus k hangs off a random earlier bus."""
    buses = [Bus(1, 0.0, 0.0)]
    for k in range(2, n_bus + 1):
        p = float(rng.uniform(*p_range))
        q = float(rng.uniform(0.0, 0.7)) * p
        buses.append(Bus(k, p, q))
    branches = [Branch(int(rng.integers(1, k)), k, float(rng.uniform(*r_range)),
                       float(rng.uniform(*x_range))) for k in range(2, n_bus + 1)]
    return Network(tuple(buses), tuple(branches))


def toy_instance(loads, bids, non_firmed=None, costs=None, r=0.5, x=0.3, chain=True):
    """Chain (or star) feeder with one consumer per load bus.

    ``loads`` lists kW per non-slack bus; ``bids`` maps bus id -> steps.
    """
    buses = [Bus(1, 0.0, 0.0)]
    for k, p in enumerate(loads, start=2):
        buses.append(Bus(k, float(p), 0.5 * float(p)))
    branches = [Branch(k - 1 if chain else 1, k, r, x) for k in range(2, len(loads) + 2)]
    net = Network(tuple(buses), tuple(branches))
    non_firmed = non_firmed or [0.0] * len(loads)
    costs = costs or [50.0] * len(loads)
    consumers = {1: Consumer(1, 0.0, 0.0, 0.0)}
    for k, (p, nf, c) in enumerate(zip(loads, non_firmed, costs), start=2):
        consumers[k] = Consumer(k, p - nf, nf, c)
    curves = {b: BidCurve(b, tuple(steps)) for b, steps in bids.items()}
    return MarketInstance(net, consumers, curves)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
