import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from p2pgrid.microgrid import (BessSpec, LocalSolveError, MgDecision, MicrogridError,
                               MicrogridSpec, SurrogatePenalty, gen_cost, payoff, payoff_terms,
                               soc_step, solve_local, utility)


def spec(**kw):
    base = dict(id=1, bus=17, alpha=0.8, beta=0.004, a=0.002, b=0.2, g_max=40.0,
                pv_profile=(15.0,), lambda_d=0.02)
    base.update(kw)
    return MicrogridSpec(**base)


def decision(load=0.0, gen=0.0, ren=0.0, p_ch=0.0, p_dch=0.0, soc_next=12.0):
    return MgDecision(load, gen, ren, p_ch, p_dch, soc_next)


def test_utility_values():
    assert utility(0.0, 0.8, 0.004) == 0.0
    assert utility(50.0, 0.8, 0.004) == pytest.approx(30.0)
    knee = 0.8 / (2 * 0.004)
    assert utility(knee, 0.8, 0.004) == pytest.approx(0.8**2 / (4 * 0.004))
    assert utility(knee + 30, 0.8, 0.004) == pytest.approx(utility(knee, 0.8, 0.004))
    with pytest.raises(MicrogridError):
        utility(-1.0, 0.8, 0.004)


@given(st.floats(0.5, 1.0), st.floats(0.003, 0.0045))
def test_utility_is_monotone_and_concave(alpha, beta):
    grid = np.linspace(0, 2 * alpha / beta, 201)
    u = utility(grid, alpha, beta)
    assert np.all(np.diff(u) >= -1e-12)
    mid = utility((grid[:-2] + grid[2:]) / 2, alpha, beta)
    assert np.all(mid >= (u[:-2] + u[2:]) / 2 - 1e-9)


def test_gen_cost_values():
    assert gen_cost(0.0, 0.3, 0.2) == 0.0
    assert gen_cost(52.0, 0.0001, 0.079) == pytest.approx(4.3784)
    assert gen_cost(44.0, 0.009, 0.5) == pytest.approx(39.424)
    with pytest.raises(MicrogridError):
        gen_cost(-1.0, 0.1, 0.1)


def test_soc_step_values():
    bess = BessSpec()
    assert soc_step(10.0, 0.0, 0.0, bess) == 10.0
    assert soc_step(10.0, 10.0, 0.0, bess) == pytest.approx(19.5)
    assert soc_step(19.5, 0.0, 10.0, bess) == pytest.approx(8.973684, abs=1e-6)


def test_payoff_values():
    free = spec(a=0.0, b=0.0, lambda_d=0.1)
    assert payoff(decision(), 2.0, free) == 0.0
    assert payoff(decision(gen=10.0), 3.0, free) == pytest.approx(30.0)
    t = payoff_terms(decision(p_ch=10.0), 2.0, free)
    assert t.degradation == pytest.approx(1.0)
    with pytest.raises(MicrogridError):
        payoff(decision(gen=-1.0), 1.0, free)


def test_spec_validation():
    with pytest.raises(MicrogridError):
        spec(alpha=0.0)
    with pytest.raises(MicrogridError):
        spec(load_min=50.0, load_max=10.0)
    with pytest.raises(MicrogridError):
        spec(pv_profile=(-1.0,))
    with pytest.raises(MicrogridError):
        BessSpec(soc_init=30.0)


def test_decision_roles():
    d = decision(gen=20.0, load=5.0)
    assert d.p_net == 15.0 and d.role == "seller" and d.p_buy == 0.0
    d = decision(load=7.0)
    assert d.role == "buyer" and d.p_buy == 7.0 and d.p_sell == 0.0


def test_high_price_gives_seller_at_knee():
    s = spec(pv_profile=(80.0,), bess=BessSpec(soc_init=4.0))
    d = solve_local(s, 5.0, 0, 4.0)
    assert d.p_net > 0
    # marginal utility alpha - 2 beta L equals the price only beyond the knee range
    assert d.load == pytest.approx(s.load_min, abs=1e-6)
    d = solve_local(s, 0.3, 0, 4.0)
    knee = (s.alpha[0] - 0.3) / (2 * s.beta[0])
    assert d.load == pytest.approx(knee, abs=1e-4)


def test_zero_price_gives_buyer_without_generation():
    s = spec(pv_profile=(0.0,))
    d = solve_local(s, 0.0, 0, 12.0)
    assert d.gen == pytest.approx(0.0, abs=1e-8)
    assert d.role == "buyer"
    assert d.load == pytest.approx(min(s.alpha[0] / (2 * s.beta[0]), s.load_max), abs=1e-4)


def boxes(s, soc, hour=0):
    b = s.bess
    return ([s.load_min, 0, 0, 0, 0],
            [s.load_max, s.g_max, s.pv_at(hour), min(b.p_max, (b.soc_max - soc) / b.eta_c),
             min(b.p_max, (soc - b.soc_min) * b.eta_d)])


@given(st.floats(0.0, 1.2), st.floats(4.0, 20.0), st.floats(0.5, 1.0), st.floats(0.003, 0.0045),
       st.floats(0.0, 0.009), st.floats(0.079, 0.5))
def test_solver_beats_grid_search(price, soc, alpha, beta, a, b):
    s = spec(alpha=alpha, beta=beta, a=a, b=b)
    d = solve_local(s, price, 0, soc)
    got = payoff(d, price, s)
    lo, hi = boxes(s, soc)
    axes = [np.linspace(l, h, 5) for l, h in zip(lo, hi)]
    best = -np.inf
    for z in itertools.product(*axes):
        best = max(best, payoff(MgDecision(*z, 0.0), price, s))
    assert best <= got + 1e-3


@given(st.floats(0.0, 1.2), st.floats(4.0, 20.0))
def test_decisions_are_complementary_and_in_bounds(price, soc):
    s = spec()
    d = solve_local(s, price, 0, soc)
    assert d.p_ch * d.p_dch == 0.0
    assert d.p_sell * d.p_buy == 0.0
    assert s.bess.soc_min - 1e-7 <= d.soc_next <= s.bess.soc_max + 1e-7
    lo, hi = boxes(s, soc)
    z = d.as_array()
    assert np.all(z >= np.array(lo) - 1e-7) and np.all(z <= np.array(hi) + 1e-7)


@given(st.floats(0.0, 1.2), st.floats(4.0, 20.0))
def test_slsqp_matches_closed_form(price, soc):
    s = spec()
    a = solve_local(s, price, 0, soc)
    b = solve_local(s, price, 0, soc, method="kkt")
    assert payoff(a, price, s) == pytest.approx(payoff(b, price, s), abs=1e-6)
    assert a.p_net == pytest.approx(b.p_net, abs=1e-3)


def test_payoff_gradient_matches_finite_differences():
    s = spec(alpha=0.9, beta=0.004, a=0.003, b=0.2)
    price, h = 0.6, 1e-4

    def f(L, G):
        return payoff(decision(load=L, gen=G), price, s)

    for L, G in ((30.0, 10.0), (60.0, 25.0), (80.0, 5.0)):
        gl = s.alpha[0] - 2 * s.beta[0] * L - price
        gg = price - 2 * s.a * G - s.b
        fl = (f(L + h, G) - f(L - h, G)) / (2 * h)
        fg = (f(L, G + h) - f(L, G - h)) / (2 * h)
        assert fl == pytest.approx(gl, rel=1e-5)
        assert fg == pytest.approx(gg, rel=1e-5)


def test_identity_penalty_does_not_move_the_decision():
    s = spec()
    plain = solve_local(s, 0.5, 0, 12.0)
    pen = SurrogatePenalty(mu=1e6, f0=plain.p_net, slope=1.0, p0=plain.p_net)
    heavy = solve_local(s, 0.5, 0, 12.0, penalty=pen)
    assert heavy.p_net == pytest.approx(plain.p_net, abs=1e-6)


def test_penalty_pulls_toward_acceptance():
    s = spec()
    plain = solve_local(s, 0.5, 0, 12.0)
    # the DSO is predicted to accept half of any proposal
    pen = SurrogatePenalty(mu=0.05, f0=0.5 * plain.p_net, slope=0.5, p0=plain.p_net)
    d = solve_local(s, 0.5, 0, 12.0, penalty=pen)
    assert abs(d.p_net) < abs(plain.p_net)


def test_net_bounds_are_respected():
    s = spec()
    d = solve_local(s, 0.5, 0, 12.0, net_bounds=(-5.0, 5.0))
    assert -5.0 - 1e-7 <= d.p_net <= 5.0 + 1e-7
    with pytest.raises(LocalSolveError):
        solve_local(s, 0.5, 0, 12.0, net_bounds=(500.0, 600.0))


def test_bad_inputs():
    s = spec()
    with pytest.raises(MicrogridError):
        solve_local(s, -0.1, 0, 12.0)
    with pytest.raises(MicrogridError):
        solve_local(s, 0.5, 0, 30.0)
    with pytest.raises(MicrogridError):
        solve_local(s, 0.5, 0, 12.0, method="newton")
    with pytest.raises(MicrogridError):
        solve_local(s, 0.5, 0, 12.0, method="kkt", net_bounds=(0, 1))


def test_solve_is_deterministic():
    s = spec()
    assert solve_local(s, 0.47, 3, 9.0) == solve_local(s, 0.47, 3, 9.0)


@given(st.floats(0.05, 1.2), st.floats(4.0, 20.0), st.floats(0.01, 0.2), st.floats(0.2, 1.2),
       st.floats(-30.0, 30.0))
def test_penalised_optimum_is_the_closed_form_at_the_effective_price(price, soc, mu, slope, f0):
    # with a penalty mu (f(p) - p)^2 the optimum prices net power at
    # pi - 2 mu c1 (c0 + c1 p): the plain closed form at that price
    s = spec()
    pen = SurrogatePenalty(mu=mu, f0=f0, slope=slope, p0=0.0)
    d = solve_local(s, price, 0, soc, penalty=pen)
    c1, c0 = slope - 1.0, f0
    pe = price - 2.0 * mu * c1 * (c0 + c1 * d.p_net)
    if pe < 0:
        return
    ref = solve_local(s, pe, 0, soc, method="kkt")
    obj = lambda x: payoff(x, price, s) - mu * (c0 + c1 * x.p_net) ** 2
    assert obj(d) >= obj(ref) - 1e-6
    if abs(pe - s.lambda_d) > 1e-6:  # the battery response jumps at its wear cost
        assert d.p_net == pytest.approx(ref.p_net, abs=1e-3)
