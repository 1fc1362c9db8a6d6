import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsched.grid import (Branch, Bus, FeederFormatError, FeederNetwork, RadialityError, aggregate_demand,
                            bundled_feeder_path, count_summary, load_feeder, parse_feeder, serialize_feeder,
                            tree_arrays, validate_radial)

TWO_BUS = """
base_mva = 1.0
base_kv = 4.16
bus 0 root p=0 q=0
bus 1 p=500 q=200
branch 0 1 r=0.01 x=0.02 lmax=2.0
"""


@pytest.fixture(scope="module")
def ieee123():
    return load_feeder(bundled_feeder_path())


def test_bundled_counts(ieee123):
    counts = count_summary(ieee123)
    assert counts["basic_branches"] == 118
    assert counts["loads"] == 85
    assert counts["capacitors"] == 4
    assert counts["switches"] == 11
    assert (counts["closed_switches"], counts["open_switches"]) == (6, 5)


def test_bundled_round_trip(ieee123):
    again = parse_feeder(serialize_feeder(ieee123))
    assert again == ieee123
    assert serialize_feeder(again) == serialize_feeder(ieee123)


def test_two_bus_document():
    net = parse_feeder(TWO_BUS)
    assert net.root == 0
    assert len(net.branches) == 1
    assert net.bus_map[1].demand_at(0) == (500.0, 200.0)


def test_bundled_is_radial(ieee123):
    assert validate_radial(ieee123).ok


def test_bundled_matches_networkx_tree(ieee123):
    g = nx.Graph()
    g.add_nodes_from(ieee123.order)
    g.add_edges_from((br.from_bus, br.to_bus) for br in ieee123.closed_branches)
    assert nx.is_tree(g)
    assert set(g.nodes) == set(ieee123.order)


def test_aggregate_demand_matches_column_sum(ieee123):
    # independent route: sum the p= and q= fields straight from the text
    text = bundled_feeder_path().read_text()
    energized = set(ieee123.order)
    total_p = total_q = 0.0
    for line in text.splitlines():
        tok = line.split("#")[0].split()
        if tok and tok[0] == "bus" and int(tok[1]) in energized:
            fields = dict(t.split("=") for t in tok if "=" in t)
            total_p += float(fields["p"])
            total_q += float(fields["q"])
    p, q = aggregate_demand(ieee123, 0)
    assert p == pytest.approx(total_p, abs=1e-9)
    assert q == pytest.approx(total_q, abs=1e-9)


def test_loop_is_reported_with_its_path():
    text = TWO_BUS + "bus 2 p=1 q=0\nbranch 1 2 r=0.01 x=0.01 lmax=1\nbranch 0 2 r=0.01 x=0.01 lmax=1\n"
    with pytest.raises(RadialityError) as err:
        parse_feeder(text)
    (cycle,) = err.value.report.cycles
    assert {frozenset(e) for e in cycle} == {frozenset(e) for e in [(0, 1), (1, 2), (0, 2)]}
    assert "loop" in str(err.value)


def test_open_switch_breaks_loop():
    text = TWO_BUS + "bus 2 p=1 q=0\nbranch 1 2 r=0.01 x=0.01 lmax=1\nbranch 0 2 r=0.01 x=0.01 lmax=1 switch open\n"
    assert validate_radial(parse_feeder(text)).ok


def test_island_with_load_is_disconnected():
    text = TWO_BUS + "bus 2 p=1 q=0\nbus 3 p=0 q=0\nbranch 2 3 r=0.01 x=0.01 lmax=1\n"
    report = validate_radial(parse_feeder(text, validate=False))
    assert report.disconnected == [2, 3]


def test_misoriented_branch():
    text = TWO_BUS + "bus 2 p=1 q=0\nbranch 2 1 r=0.01 x=0.01 lmax=1\n"
    report = validate_radial(parse_feeder(text, validate=False))
    assert report.misoriented == [(2, 1)]


def test_hourly_demand_series():
    text = TWO_BUS.replace("p=500 q=200", "p=1,2,3 q=0.5,0.5,0.5")
    net = parse_feeder(text)
    assert net.horizon == 3
    assert aggregate_demand(net, 2) == (3.0, 0.5)
    with pytest.raises(IndexError):
        aggregate_demand(net, 3)


@pytest.mark.parametrize("bad, fragment", [
    ("bus x p=1", "line"),
    ("bus 5 p=1 color=red", "color"),
    ("branch 0 1 r=0.1 x=0.1", "lmax"),
    ("branch 0 1 r=0.1 x=0.1 lmax=1 switch maybe", "switch"),
    ("transformer 0 1", "unknown record"),
])
def test_malformed_lines(bad, fragment):
    with pytest.raises(FeederFormatError, match=fragment):
        parse_feeder(TWO_BUS + bad + "\n", validate=False)


def test_missing_header():
    with pytest.raises(FeederFormatError, match="base_mva"):
        parse_feeder("bus 0 root\n")


def test_tree_arrays_parent_precedes_child(ieee123):
    order, parent_idx, branch_idx = tree_arrays(ieee123)
    assert parent_idx[0] == -1
    assert all(parent_idx[k] < k for k in range(1, len(order)))
    for k in range(1, len(order)):
        br = ieee123.branches[branch_idx[k]]
        assert (br.from_bus, br.to_bus) == (order[parent_idx[k]], order[k])


# ---------------------------------------------------------------- properties

@st.composite
def random_trees(draw):
    n = draw(st.integers(2, 25))
    parents = [draw(st.integers(0, j - 1)) for j in range(1, n)]
    loads = draw(st.lists(st.floats(0, 500, allow_nan=False), min_size=n, max_size=n))
    imp = draw(st.lists(st.floats(1e-4, 0.1, allow_nan=False), min_size=n - 1, max_size=n - 1))
    buses = tuple(Bus(j, demand_p=loads[j], demand_q=0.5 * loads[j], is_root=(j == 0)) for j in range(n))
    branches = tuple(Branch(parents[j - 1], j, imp[j - 1], 2 * imp[j - 1], 1.0) for j in range(1, n))
    return FeederNetwork(buses, branches, 1.0, 4.16)


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_random_tree_round_trips_and_is_radial(net):
    assert parse_feeder(serialize_feeder(net)) == net
    assert validate_radial(net).ok


@settings(max_examples=60, deadline=None)
@given(random_trees(), st.data())
def test_extra_edge_detection_agrees_with_networkx(net, data):
    n = len(net.buses)
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(0, n - 1).filter(lambda k: k != a))
    extra = Branch(a, b, 0.01, 0.01, 1.0)
    bigger = FeederNetwork(net.buses, net.branches + (extra,), 1.0, 4.16)
    g = nx.MultiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from((br.from_bus, br.to_bus) for br in bigger.branches)
    report = validate_radial(bigger)
    assert bool(report.cycles) == (not nx.is_forest(g))
    assert report.cycles


def test_root_only_network_is_radial():
    net = parse_feeder("base_mva = 1\nbase_kv = 4.16\nbus 0 root\n")
    assert validate_radial(net).ok
    assert aggregate_demand(net, 0) == (0.0, 0.0)


def test_two_load_sum():
    text = "base_mva = 1\nbase_kv = 4.16\nbus 0 root\nbus 1 p=0.5\nbus 2 p=0.3\n" \
           "branch 0 1 r=0.01 x=0.01 lmax=1\nbranch 1 2 r=0.01 x=0.01 lmax=1\n"
    assert aggregate_demand(parse_feeder(text), 0)[0] == pytest.approx(0.8)


def test_duplicate_bus_id():
    with pytest.raises(FeederFormatError, match="duplicate"):
        parse_feeder(TWO_BUS + "bus 1 p=3\n")


def test_extra_closed_switch_on_bundled_feeder_is_a_loop(ieee123):
    # close every open switch whose ends are both energized
    energized = set(ieee123.order)
    branches = tuple(Branch(b.from_bus, b.to_bus, b.r, b.x, b.l_max, True, True)
                     if b.is_switch and not b.closed and {b.from_bus, b.to_bus} <= energized else b
                     for b in ieee123.branches)
    report = validate_radial(FeederNetwork(ieee123.buses, branches, ieee123.base_mva, ieee123.base_kv))
    assert report.cycles


@settings(max_examples=40, deadline=None)
@given(random_trees())
def test_parent_children_consistent(net):
    assert len(net.closed_branches) == len(net.order) - 1
    for b in net.order[1:]:
        assert b in net.children[net.parent[b]]
