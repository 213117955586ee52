import numpy as np
import pytest

from p2pgrid.network import (CaseFileError, TopologyError, from_per_unit, load_network,
                             parse_case, to_per_unit)

TWO_BUS = """
[system]
name      tiny
s_base    1.0   MVA
v_base    12.66 kV
slack_bus 1

[buses]
id  p_load q_load v_min v_max
-   kW     kVAr   pu    pu
1   0      0      0.95  1.05
2   100    50     0.95  1.05
{extra_bus}
[lines]
id from to r    x    i_max
-  -    -  pu   pu   pu
1  1    2  0.01 0.02 2.0
{extra_line}
[generators]
bus p_min p_max q_min q_max
-   MW    MW    MVAr  MVAr
1   0     5     -5    5
"""


def case(extra_bus="", extra_line=""):
    return TWO_BUS.format(extra_bus=extra_bus, extra_line=extra_line)


def test_bundled_feeder_sizes(net):
    assert net.n_buses == 33
    assert net.n_lines == 32
    assert net.slack_bus == 1
    assert net.p_load.sum() == pytest.approx(3715.0)
    assert net.q_load.sum() == pytest.approx(2300.0)
    assert sorted(g.bus for g in net.generators) == [1, 18]


def test_bundled_voltage_band_is_squared(net):
    assert np.allclose(net.v_min, 0.95**2)
    assert np.allclose(net.v_max, 1.05**2)


def test_sweep_order_visits_parents_first(net):
    pos = {b: k for k, b in enumerate(net.order)}
    for i in range(net.n_buses):
        k = net.parent_line_idx[i]
        if k < 0:
            assert i == net.slack_index
        else:
            assert pos[net.line_from[k]] < pos[i]
            assert net.line_to[k] == i


def test_reversed_line_is_reoriented():
    t = parse_case(case(extra_bus="3 10 5 0.95 1.05", extra_line="2 3 2 0.01 0.01 1.0"))
    k = t.parent_line_idx[t.index_of(3)]
    assert t.lines[k].from_bus == 2 and t.lines[k].to_bus == 3


def test_loop_is_rejected():
    text = case(extra_bus="3 10 5 0.95 1.05",
                extra_line="2 2 3 0.01 0.01 1.0\n3 1 3 0.01 0.01 1.0")
    with pytest.raises(TopologyError, match="loop"):
        parse_case(text)


def test_disconnected_bus_is_rejected():
    with pytest.raises(TopologyError, match="unreachable"):
        parse_case(case(extra_bus="3 10 5 0.95 1.05"))


def test_missing_section():
    with pytest.raises(CaseFileError, match="generators"):
        parse_case(case().split("[generators]")[0])


def test_bad_unit():
    with pytest.raises(CaseFileError, match="impedance unit"):
        parse_case(case().replace("-  -    -  pu   pu   pu", "-  -    -  furlong   pu   pu"))


def test_non_numeric_entry():
    with pytest.raises(CaseFileError, match="non-numeric"):
        parse_case(case().replace("2   100    50", "2   lots   50"))


def test_ohm_conversion():
    t = parse_case(case().replace("-  -    -  pu   pu   pu\n1  1    2  0.01 0.02 2.0",
                                  "-  -    -  ohm  ohm  A\n1  1    2  1.6028 0.0 100"))
    zb = 12.66**2 / 1.0
    assert t.r[0] == pytest.approx(1.6028 / zb)
    ib = 1000.0 / (np.sqrt(3) * 12.66)
    assert t.c_max[0] == pytest.approx((100 / ib) ** 2)


def test_missing_file(tmp_path):
    with pytest.raises(CaseFileError):
        load_network(tmp_path / "nope.case")


def test_per_unit_round_trip(net):
    assert to_per_unit(net, 250.0) == pytest.approx(0.25)
    assert from_per_unit(net, to_per_unit(net, 123.4)) == pytest.approx(123.4)


def test_p2p_caps(net):
    t = net.with_p2p_caps({17: 50.0})
    assert t.p2p_cap[t.index_of(17)] == 50.0
    assert t.p2p_cap.sum() == 50.0
    with pytest.raises(KeyError):
        net.with_p2p_caps({99: 1.0})


def test_summary_is_complete(net):
    s = net.summary()
    assert s["n_buses"] == 33 and len(s["lines"]) == 32 and len(s["generators"]) == 2


def test_ieee33_adjacency(net):
    from p2pgrid.network import children_lines, parent_line

    to_bus = {ln.id: ln.to_bus for ln in net.lines}
    assert {to_bus[k] for k in children_lines(net, 2)} == {3, 19}
    assert children_lines(net, 18) == set()
    assert parent_line(net, 1) is None
    assert to_bus[parent_line(net, 19)] == 19
    assert to_per_unit(net, 52.0) == pytest.approx(0.052)
