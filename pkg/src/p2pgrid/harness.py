"""End-to-end case studies over the daily horizon.

Case 1 clears the market without the network. Case 2 sends every cleared
hour through the D-OPF and re-clears with the corrections as trade bounds.
Case 3 clears with the learned DSO response inside each agent's objective
and calls the D-OPF once per hour, after clearing, as an audit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dopf, powerflow
from .config import StudyConfig
from .market import MarketOutcome, aggregate, clear_hour
from .metrics import CaseResult, reduction, recovery, voltage_violation
from .microgrid import payoff_terms, solve_local


class HarnessError(RuntimeError):
    pass


class DopfCounter:
    """Counts D-OPF solves, split by whether a market loop is running."""

    def __init__(self, topology, params):
        self.topology = topology
        self.params = params
        self.clearing = 0
        self.audit = 0
        self.in_clearing = False

    def solve(self, p_net, p_load, q_load) -> dopf.DopfSolution:
        if self.in_clearing:
            self.clearing += 1
        else:
            self.audit += 1
        sol = dopf.accept(self.topology, dopf.InjectionRequest(p_net, p_load, q_load), self.params)
        if sol.status != "optimal":
            raise dopf.DopfInfeasible("D-OPF infeasible")
        return sol


def features(config: StudyConfig, p_net_mg, p_load, pf: float,
             c_ls: float | None = None, lambda_corr: float | None = None) -> np.ndarray:
    """Per-bus feature matrix [p_net, p_load, pf, c_ls, lambda_corr]."""
    n = config.network.n_buses
    X = np.zeros((n, 5))
    X[config.mg_index, 0] = p_net_mg
    X[:, 1] = p_load
    X[:, 2] = pf
    X[:, 3] = config.dopf.c_ls if c_ls is None else c_ls
    X[:, 4] = config.dopf.lambda_corr if lambda_corr is None else lambda_corr
    return X


def surrogate_response(model, config: StudyConfig, p_load, pf: float):
    """Learned DSO response at the MG buses, in MG kW.

    The model works in network kW; scaling in and out leaves slopes unchanged.
    """
    from .surrogate import pack, predict_and_slopes, predict_at

    idx = config.mg_index
    k = config.network_scale
    packed = pack(model)

    def response(p_net_mg):
        X = features(config, k * np.asarray(p_net_mg, dtype=float), p_load, pf)
        pred, slope = predict_and_slopes(model, X, idx, packed)
        return pred / k, slope

    def predict(p_net_mg):
        X = features(config, k * np.asarray(p_net_mg, dtype=float), p_load, pf)
        return predict_at(model, X, idx, packed) / k

    response.predict = predict
    return response


def oracle_response(config: StudyConfig, p_load, q_load, h: float = 1e-3):
    """Exact D-OPF response with finite-difference slopes (diagnostics only)."""
    idx = config.mg_index

    def accepted(p_mg):
        return _accepted(config, dopf.solve_dopf(
            config.network, dopf.InjectionRequest(_pad(config, p_mg), p_load, q_load), config.dopf))

    def response(p_net_mg):
        p = np.asarray(p_net_mg, dtype=float)
        f0 = accepted(p)
        slope = np.empty_like(p)
        for j in range(p.size):
            q = p.copy()
            q[j] += h
            slope[j] = (accepted(q)[j] - f0[j]) / h
        return f0, slope

    return response


def _pad(config: StudyConfig, p_mg) -> np.ndarray:
    """MG-kW trades to a network-kW injection vector."""
    p = np.zeros(config.network.n_buses)
    p[config.mg_index] = config.network_scale * np.asarray(p_mg, dtype=float)
    return p


def _accepted(config: StudyConfig, sol: dopf.DopfSolution) -> np.ndarray:
    return sol.p_acc[config.mg_index] / config.network_scale


def _settle(config, hour, soc, price, p_acc):
    """Device schedules that deliver the accepted trades, and their payoffs."""
    decisions, terms = [], []
    for spec, s, p in zip(config.microgrids, soc, p_acc):
        d = solve_local(spec, price, hour, s, net_bounds=(p, p), dt=config.dt)
        decisions.append(d)
        terms.append(payoff_terms(d, price, spec, hour, p_net=p))
    return decisions, terms


def _terms_array(terms) -> np.ndarray:
    return np.array([[t.utility, t.gen_cost, t.revenue, t.degradation, t.total] for t in terms])


def _voltage(config, p_net_mg, p_load, q_load, sol: dopf.DopfSolution) -> np.ndarray:
    pf = powerflow.run_power_flow(config.network, p_load, q_load, p_inj=_pad(config, p_net_mg),
                                  gen_p=sol.pg, gen_q=sol.qg, v_slack=float(sol.v[config.network.slack_index]))
    return pf.voltage


def run_case(config: StudyConfig, case_id: int, model=None,
             response_factory=None) -> CaseResult:
    """Run one case over the horizon.

    ``response_factory(config, p_load, q_load)`` replaces the learned model
    in case 3 (e.g. :func:`oracle_response` for diagnostics).
    """
    if case_id not in (1, 2, 3):
        raise HarnessError(f"unknown case {case_id}")
    if case_id == 3 and model is None and response_factory is None:
        raise HarnessError("case 3 needs a trained surrogate model")
    t0 = time.perf_counter()
    H, M, N = config.hours, len(config.microgrids), config.network.n_buses
    counter = DopfCounter(config.network, config.dopf)
    soc = np.array([m.bess.soc_init for m in config.microgrids])
    out = dict(prices=np.zeros(H), proposed=np.zeros((H, M)), traded=np.zeros((H, M)),
               payoff=np.zeros((H, M, 5)), voltages=np.zeros((H, N)), iterations=np.zeros(H, int),
               converged=np.zeros(H, bool), dopf_clearing=np.zeros(H, int),
               dopf_audit=np.zeros(H, int), soc=np.zeros((H + 1, M)))
    out["soc"][0] = soc
    logs: list[MarketOutcome] = []
    for h in range(H):
        p_load, q_load = config.loads(h)
        c0, a0 = counter.clearing, counter.audit
        try:
            if case_id == 1:
                res = clear_hour(config.microgrids, h, soc, config.market)
                logs.append(res)
                p, price = res.p_net, res.final_price
                decisions = res.decisions
                terms = [payoff_terms(d, price, s, h) for d, s in zip(decisions, config.microgrids)]
                base = counter.solve(np.zeros(N), p_load, q_load)
                volts = _voltage(config, p, p_load, q_load, base)
                traded, iters, conv = p, res.iterations, res.converged
            elif case_id == 2:
                bounds = None
                iters = 0
                counter.in_clearing = True
                for _ in range(config.case2_rounds):
                    res = clear_hour(config.microgrids, h, soc, config.market, net_bounds=bounds)
                    logs.append(res)
                    iters += res.iterations
                    sol = counter.solve(_pad(config, res.p_net), p_load, q_load)
                    acc = _accepted(config, sol)
                    s_acc, d_acc = aggregate(acc)
                    if abs(s_acc - d_acc) < config.market.epsilon:
                        break
                    bounds = [(min(0.0, a), max(0.0, a)) for a in acc]
                counter.in_clearing = False
                p, price, conv = res.p_net, res.final_price, res.converged
                decisions, terms = _settle(config, h, soc, price, acc)
                volts = _voltage(config, acc, p_load, q_load, sol)
                traded = acc
            else:
                if response_factory is not None:
                    response = response_factory(config, p_load, q_load)
                else:
                    response = surrogate_response(model, config, p_load, config.power_factor)
                res = clear_hour(config.microgrids, h, soc, config.market, mode="augmented",
                                 response=response)
                logs.append(res)
                p, price = res.p_net, res.final_price
                sol = counter.solve(_pad(config, p), p_load, q_load)
                acc = _accepted(config, sol)
                decisions, terms = _settle(config, h, soc, price, acc)
                volts = _voltage(config, p, p_load, q_load, sol)
                traded, iters, conv = acc, res.iterations, res.converged
        except Exception as exc:
            raise HarnessError(f"case {case_id}, hour {h}: {exc}") from exc
        out["prices"][h] = price
        out["proposed"][h] = p
        out["traded"][h] = traded
        out["payoff"][h] = _terms_array(terms)
        out["voltages"][h] = volts
        out["iterations"][h] = iters
        out["converged"][h] = conv
        out["dopf_clearing"][h] = counter.clearing - c0
        out["dopf_audit"][h] = counter.audit - a0
        soc = np.array([d.soc_next for d in decisions])
        out["soc"][h + 1] = soc
    return CaseResult(case_id=case_id, mg_ids=tuple(m.id for m in config.microgrids),
                      bus_ids=tuple(config.network.bus_ids), wall_time=time.perf_counter() - t0,
                      fingerprint=config.fingerprint(), seed=config.seed, logs=logs, **out)


@dataclass
class Comparison:
    rows: dict  # case id -> metrics
    reductions: dict

    def table(self) -> str:
        cols = ["case", "traded_kwh", "traded_kwh_year*", "payoff_rs", "max_v_dev_pct",
                "violated_h", "dopf_clearing", "dopf_audit", "wall_s"]
        lines = ["  ".join(f"{c:>16}" for c in cols)]
        for cid, r in sorted(self.rows.items()):
            vals = [cid, r["traded"], r["traded_annual"], r["payoff"], r["max_v_dev_pct"],
                    r["violated_hours"], r["dopf_clearing"], r["dopf_audit"], r["wall_time"]]
            lines.append("  ".join(f"{v:>16.4f}" if isinstance(v, float) else f"{v:>16}"
                                   for v in vals))
        lines.append("* annual figures extrapolate the simulated day x 365")
        for k, v in self.reductions.items():
            lines.append(f"{k}: {100 * v:.2f}%")
        return "\n".join(lines)


def compare(results) -> Comparison:
    results = list(results)
    if len(results) < 2:
        raise HarnessError("compare needs at least two case results")
    fps = {(r.fingerprint, r.seed) for r in results}
    if len(fps) > 1:
        raise HarnessError("results come from different configs or seeds")
    rows = {}
    for r in results:
        dev, nviol = voltage_violation(r.voltages)
        rows[r.case_id] = {
            "traded": r.traded_total(),
            "traded_annual": r.traded_total() * 365.0 * 24 / r.hours,
            "payoff": r.payoff_total(),
            "max_v_dev_pct": dev,
            "violated_hours": nviol,
            "dopf_clearing": int(r.dopf_clearing.sum()),
            "dopf_audit": int(r.dopf_audit.sum()),
            "wall_time": float(r.wall_time),
        }
    red = {}
    if 1 in rows and 2 in rows:
        red["case2_reduction_vs_case1"] = reduction(rows[1]["traded"], rows[2]["traded"])
    if 2 in rows and 3 in rows:
        red["case3_recovery_vs_case2"] = recovery(rows[2]["traded"], rows[3]["traded"])
    return Comparison(rows, red)
