import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import write_csv
from llrm.errors import (
    BaseError,
    CapacityError,
    DegenerateNetworkError,
    MismatchError,
    OverReductionError,
    ParseError,
    RadialityError,
    StepError,
)
from llrm.grid import (
    BidCurve,
    PerUnitBases,
    apply_reduction,
    load_bids,
    load_consumers,
    load_network,
)


def test_canonical_network(ieee33):
    net, _, _ = ieee33
    assert len(net.buses) == 33
    assert len(net.branches) == 32
    assert net.total_load_kw == 3715.0
    assert sum(b.q_load for b in net.buses) == 2300.0
    assert net.base_kv == 12.66 and net.base_mva == 100.0 and net.slack_voltage == 1.0


def test_slack_only_network(tmp_path):
    br = write_csv(tmp_path / "br.csv", "from,to,r_ohm,x_ohm", [])
    ld = write_csv(tmp_path / "ld.csv", "bus,p_kw,q_kvar", [(1, 0, 0)])
    net = load_network(br, ld)
    assert len(net.buses) == 1 and net.branches == ()


def _feeder_files(tmp_path, branch_rows, load_rows):
    br = write_csv(tmp_path / "br.csv", "from,to,r_ohm,x_ohm", branch_rows)
    ld = write_csv(tmp_path / "ld.csv", "bus,p_kw,q_kvar", load_rows)
    return br, ld


LOADS4 = [(1, 0, 0), (2, 10, 5), (3, 10, 5), (4, 10, 5)]


def test_duplicate_edge_is_a_cycle(tmp_path):
    br, ld = _feeder_files(tmp_path, [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1), (2, 3, 0.1, 0.1)],
                           LOADS4)
    with pytest.raises(RadialityError, match="cycle"):
        load_network(br, ld)


def test_disconnected_bus(tmp_path):
    br, ld = _feeder_files(tmp_path, [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1)], LOADS4)
    with pytest.raises(RadialityError, match="not reachable"):
        load_network(br, ld)


def test_unknown_bus_in_branch(tmp_path):
    br, ld = _feeder_files(tmp_path, [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1), (3, 9, 0.1, 0.1)],
                           LOADS4)
    with pytest.raises(RadialityError):
        load_network(br, ld)


def test_bad_bases(paths):
    with pytest.raises(BaseError):
        load_network(paths["network"], paths["loads"], PerUnitBases(base_kv=0.0))
    with pytest.raises(BaseError):
        PerUnitBases(base_mva=-1.0)


def test_zero_resistance_rejected(tmp_path):
    br, ld = _feeder_files(tmp_path, [(1, 2, 0.0, 0.1)], LOADS4[:2])
    with pytest.raises(DegenerateNetworkError):
        load_network(br, ld)


@pytest.mark.parametrize("row,msg", [
    ((2, "abc", 5), "bad p_kw"),
    ((2, 10), "expected 3 fields"),
    ((2, -10, 5), "negative load"),
])
def test_malformed_load_rows(tmp_path, row, msg):
    br, ld = _feeder_files(tmp_path, [(1, 2, 0.1, 0.1)], [(1, 0, 0), row])
    with pytest.raises(ParseError, match=msg) as info:
        load_network(br, ld)
    assert info.value.line == 3


def test_wrong_header(tmp_path):
    br = write_csv(tmp_path / "br.csv", "a,b,c,d", [])
    ld = write_csv(tmp_path / "ld.csv", "bus,p_kw,q_kvar", [(1, 0, 0)])
    with pytest.raises(ParseError, match="expected header"):
        load_network(br, ld)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ParseError, match="nowhere.csv"):
        load_network(tmp_path / "nowhere.csv", tmp_path / "nowhere.csv")


def test_comment_lines_skipped(tmp_path):
    br = tmp_path / "br.csv"
    br.write_text("# feeder\nfrom,to,r_ohm,x_ohm\n# a comment\n1,2,0.1,0.1\n")
    ld = write_csv(tmp_path / "ld.csv", "bus,p_kw,q_kvar", [(1, 0, 0), (2, 5, 1)], "loads")
    assert len(load_network(br, ld).branches) == 1


# -- consumers ---------------------------------------------------------------------

def test_consumer_rows(ieee33):
    _, consumers, _ = ieee33
    c8 = consumers[8]
    assert (c8.firmed_kw, c8.non_firmed_kw, c8.curtail_cost) == (60, 140, 45)
    c1 = consumers[1]
    assert (c1.firmed_kw, c1.non_firmed_kw) == (0, 0)
    assert len(consumers) == 33


def test_reconciliation_invariant(ieee33):
    net, consumers, _ = ieee33
    for b in net.buses:
        assert abs(consumers[b.id].load_kw - b.p_load) <= 0.5


def test_consumer_split_mismatch(tmp_path, ieee33, paths):
    net, _, _ = ieee33
    text = open(paths["consumers"]).read().replace("\n2,80,20,73\n", "\n2,80,30,73\n")
    bad = tmp_path / "consumers.csv"
    bad.write_text(text)
    with pytest.raises(MismatchError, match="bus 2"):
        load_consumers(bad, net)


def test_consumer_missing_bus(tmp_path, ieee33):
    net, _, _ = ieee33
    bad = write_csv(tmp_path / "c.csv", "bus,firmed_kw,nonfirmed_kw,curtail_cost_per_kwh",
                    [(1, 0, 0, "-"), (2, 80, 20, 73)])
    with pytest.raises(MismatchError, match="no consumer row"):
        load_consumers(bad, net)


# -- bids --------------------------------------------------------------------------

def test_bid_curves(ieee33):
    _, _, bids = ieee33
    assert len(bids) == 20
    c25 = bids[25]
    assert len(c25.steps) == 13
    assert c25.steps[0] == (10, 0.19) and c25.steps[-1] == (130, 0.79)
    assert bids[12].steps == ((10, 0.28), (20, 0.42))
    assert 5 not in bids  # curtailment-only participant


def test_bid_prices_non_decreasing(ieee33):
    for curve in ieee33[2].values():
        prices = [c for _, c in curve.steps]
        assert prices == sorted(prices)
        assert max(curve.levels) <= 130


def test_bid_above_non_firmed_capacity(tmp_path, ieee33):
    _, consumers, _ = ieee33
    f = write_csv(tmp_path / "b.csv", "bus,power_kw,price_per_kwh",
                  [(9, 10, 0.4), (9, 20, 0.5), (9, 30, 0.6)])
    with pytest.raises(CapacityError, match="consumer 9"):
        load_bids(f, consumers, limit="non_firmed")
    # under the whole-load cap the same offer fits in bus 9's 60 kW
    assert load_bids(f, consumers, limit="load")[9].max_kw == 30


def test_bid_above_load(tmp_path, ieee33):
    _, consumers, _ = ieee33
    f = write_csv(tmp_path / "b.csv", "bus,power_kw,price_per_kwh",
                  [(11, k, 0.4) for k in (10, 20, 30, 40, 50)])
    with pytest.raises(CapacityError):
        load_bids(f, consumers)


def test_canonical_bids_need_load_cap(paths, ieee33):
    _, consumers, _ = ieee33
    with pytest.raises(CapacityError):
        load_bids(paths["bids"], consumers, limit="non_firmed")


@pytest.mark.parametrize("level", [15, 0, -10])
def test_bid_step_multiple(tmp_path, ieee33, level):
    _, consumers, _ = ieee33
    f = write_csv(tmp_path / "b.csv", "bus,power_kw,price_per_kwh", [(25, level, 0.2)])
    with pytest.raises(StepError):
        load_bids(f, consumers)


def test_bid_curve_invariants():
    with pytest.raises(StepError):
        BidCurve(2, ((10, 0.3), (10, 0.4)))
    with pytest.raises(StepError):
        BidCurve(2, ((10, 0.3), (20, 0.2)))
    with pytest.raises(CapacityError):
        BidCurve(2, tuple((10 * k, 0.1) for k in range(1, 15)))


# -- apply_reduction -----------------------------------------------------------------

def test_zero_reduction_is_identity(ieee33):
    net, consumers, _ = ieee33
    out = apply_reduction(net, consumers, {b: (0, 0) for b in consumers})
    assert out == net


def test_reduction_scales_q(ieee33):
    net, consumers, _ = ieee33
    out = apply_reduction(net, consumers, {25: (170, 0)})
    assert out.bus(25).p_load == 250.0
    assert out.bus(25).q_load == pytest.approx(200.0 * 250.0 / 420.0, rel=1e-15)
    assert net.bus(25).p_load == 420.0  # input untouched
    assert out.bus(24) == net.bus(24)


def test_over_reduction(ieee33):
    net, consumers, _ = ieee33
    with pytest.raises(OverReductionError):
        apply_reduction(net, consumers, {9: (0, 20)}, limit="non_firmed")
    with pytest.raises(OverReductionError):
        apply_reduction(net, consumers, {9: (0, 70)})  # above bus 9's 60 kW
    with pytest.raises(OverReductionError):
        apply_reduction(net, consumers, {9: (20, 0)})  # curtailment above non-firmed


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.integers(2, 33), st.tuples(st.integers(0, 400), st.integers(0, 130)),
                       max_size=8))
def test_apply_reduction_arithmetic(ieee33, raw):
    net, consumers, _ = ieee33
    decisions = {}
    for b, (cr, dr) in raw.items():
        c = consumers[b]
        cr = min(cr, int(c.non_firmed_kw))
        dr = min(dr, int(c.load_kw) - cr)
        decisions[b] = (cr, dr)
    out = apply_reduction(net, consumers, decisions)
    for bus in net.buses:
        cr, dr = decisions.get(bus.id, (0, 0))
        assert out.bus(bus.id).p_load == bus.p_load - cr - dr
        if bus.p_load > 0:
            assert out.bus(bus.id).q_load == pytest.approx(
                bus.q_load * (bus.p_load - cr - dr) / bus.p_load, abs=1e-12)
    assert np.array_equal(net.p_kw, [b.p_load for b in net.buses])
