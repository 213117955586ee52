import numpy as np
import pytest

from p2pgrid.powerflow import PowerFlowDiverged, run_power_flow


def test_base_case(net):
    pf = run_power_flow(net, net.p_load, net.q_load)
    assert pf.losses == pytest.approx(202.68, abs=0.05)
    assert pf.voltage.min() == pytest.approx(0.9131, abs=1e-4)
    assert pf.p_slack * 1000 == pytest.approx(3715.0 + pf.losses, rel=1e-9)


def test_local_injection_cuts_losses_and_lifts_voltage(net):
    base = run_power_flow(net, net.p_load, net.q_load)
    inj = np.zeros(net.n_buses)
    inj[net.index_of(18)] = 300.0
    pf = run_power_flow(net, net.p_load, net.q_load, p_inj=inj)
    assert pf.losses < base.losses
    assert pf.voltage[net.index_of(18)] > base.voltage[net.index_of(18)]


def test_generator_at_slack_is_ignored(net):
    a = run_power_flow(net, net.p_load, net.q_load, gen_p=[5.0, 0.0], gen_q=[1.0, 0.0])
    b = run_power_flow(net, net.p_load, net.q_load)
    assert np.allclose(a.v, b.v)


def test_injection_equals_negative_load(net):
    inj = np.zeros(net.n_buses)
    inj[net.index_of(25)] = 120.0
    p2 = net.p_load.copy()
    p2[net.index_of(25)] -= 120.0
    a = run_power_flow(net, net.p_load, net.q_load, p_inj=inj)
    b = run_power_flow(net, p2, net.q_load)
    assert np.allclose(a.v, b.v, atol=1e-13)


def test_slack_voltage_is_respected(net):
    pf = run_power_flow(net, net.p_load, net.q_load, v_slack=1.05**2)
    assert pf.voltage[net.slack_index] == pytest.approx(1.05)


def test_overload_diverges(net):
    with pytest.raises(PowerFlowDiverged):
        run_power_flow(net, net.p_load * 20, net.q_load * 20)
