"""Pooled-price P2P market cleared by iterative price adjustment.

Each iteration every microgrid best-responds to the current price, buy and
sell quantities are pooled, and the price moves by ``xi`` times the
mismatch. In augmented mode the pooled quantities are the learned DSO
response to each proposal and every agent carries the surrogate penalty.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .microgrid import (LocalSolveError, MgDecision, MicrogridError, MicrogridSpec,
                        SurrogatePenalty, payoff, solve_local)


class MarketError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarketConfig:
    xi: float = 0.005  # Rs/kWh per kW of mismatch
    epsilon: float = 0.01  # kW
    k_max: int = 2000
    pi_init: float = 0.5  # Rs/kWh
    mu: float = 0.0  # Rs/kW^2, augmented mode only
    local_method: str = "slsqp"
    relinearize: int = 1  # augmented mode: extra re-linearised solves per iteration
    relin_tol: float = 1e-3  # kW

    def __post_init__(self):
        if self.xi < 0 or self.epsilon <= 0 or self.k_max < 1 or self.mu < 0:
            raise ValueError("need xi >= 0, epsilon > 0, k_max >= 1, mu >= 0")
        if self.relinearize < 0 or self.relin_tol <= 0:
            raise ValueError("need relinearize >= 0, relin_tol > 0")


# (p_net per MG) -> (predicted accepted injection per MG, d pred / d p_net per MG)
# p_net -> (accepted, d accepted_i / d p_net_i); an optional ``predict``
# attribute returning only the accepted values is used when slopes are not needed
DsoResponse = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class MarketOutcome:
    hour: int
    prices: np.ndarray  # price evaluated at each iteration
    supply: np.ndarray
    demand: np.ndarray
    decisions: tuple[MgDecision, ...]
    converged: bool
    accepted: np.ndarray | None = None  # learned response at the final proposals

    @property
    def final_price(self) -> float:
        return float(self.prices[-1])

    @property
    def iterations(self) -> int:
        return int(self.prices.size)

    @property
    def p_net(self) -> np.ndarray:
        return np.array([d.p_net for d in self.decisions])

    @property
    def soc_next(self) -> np.ndarray:
        return np.array([d.soc_next for d in self.decisions])

    def log_rows(self):
        for k, (pi, s, d) in enumerate(zip(self.prices, self.supply, self.demand)):
            yield k, pi, s, d, d - s


def price_update(pi: float, xi: float, demand: float, supply: float) -> float:
    return max(0.0, pi + xi * (demand - supply))


def aggregate(p_net) -> tuple[float, float]:
    """Pooled (supply, demand) from net injections or decisions."""
    vals = np.array([d.p_net if isinstance(d, MgDecision) else float(d) for d in p_net])
    return float(vals[vals > 0].sum()), float(-vals[vals < 0].sum())


def clip_accepted(pred, p_net):
    """Learned acceptance cannot flip or enlarge a trade."""
    p_net = np.asarray(p_net, dtype=float)
    return np.clip(pred, np.minimum(0.0, p_net), np.maximum(0.0, p_net))


def clear_hour(specs: Sequence[MicrogridSpec], hour: int, soc: Sequence[float],
               config: MarketConfig = MarketConfig(), mode: str = "grid_unaware",
               response: DsoResponse | None = None,
               net_bounds: Sequence[tuple[float, float] | None] | None = None,
               pi0: float | None = None) -> MarketOutcome:
    """Run the price iteration for one hour.

    ``mode="augmented"`` needs ``response``; ``net_bounds`` holds optional
    per-MG p_net bounds imposed by an earlier DSO correction.
    """
    if mode not in ("grid_unaware", "augmented"):
        raise ValueError(f"unknown market mode {mode!r}")
    if mode == "augmented" and response is None:
        raise ValueError("augmented mode needs a DSO response model")
    m = len(specs)
    bounds = list(net_bounds) if net_bounds is not None else [None] * m
    pi = config.pi_init if pi0 is None else float(pi0)
    prices, supply, demand = [], [], []
    converged = False
    accepted = None
    lin = None  # (pred, slope, p0) for the penalty linearisation
    if mode == "augmented":
        p0 = np.array([solve_local(s, pi, hour, soc[i], method="kkt").p_net
                       if bounds[i] is None else 0.0 for i, s in enumerate(specs)])
        pred, slope = response(p0)
        lin = (pred, slope, p0)

    def best_responses():
        out = []
        for i, spec in enumerate(specs):
            pen = None
            if lin is not None and config.mu > 0:
                pen = SurrogatePenalty(config.mu, float(lin[0][i]), float(lin[1][i]),
                                       float(lin[2][i]))
            try:
                out.append(solve_local(spec, pi, hour, soc[i], penalty=pen,
                                       net_bounds=bounds[i], method=config.local_method))
            except (LocalSolveError, MicrogridError) as exc:
                raise MarketError(f"hour {hour}, MG {spec.id}: {exc}") from exc
        return out

    predict = getattr(response, "predict", None)
    decisions: list[MgDecision] = []
    for _ in range(config.k_max):
        decisions = best_responses()
        p = np.array([d.p_net for d in decisions])
        if mode == "augmented":
            # a penalty linearised at last iteration's proposals lags the
            # price step and can lock the loop into a two-cycle
            for _ in range(config.relinearize):
                pred, slope = response(p)
                moved = np.max(np.abs(p - lin[2]))
                lin = (pred, slope, p)
                if moved <= config.relin_tol or config.mu == 0:
                    break
                decisions = best_responses()
                p = np.array([d.p_net for d in decisions])
            else:
                # the slope from one re-solve back is close enough for the
                # next linearisation; only the prediction has to be fresh
                if predict is not None:
                    pred = predict(p)
                else:
                    pred, slope = response(p)
                lin = (pred, slope, p)
            accepted = clip_accepted(pred, p)
            s, d = aggregate(accepted)
        else:
            s, d = aggregate(p)
        prices.append(pi)
        supply.append(s)
        demand.append(d)
        if abs(d - s) < config.epsilon:
            converged = True
            break
        pi = price_update(pi, config.xi, d, s)
    return MarketOutcome(hour, np.array(prices), np.array(supply), np.array(demand),
                         tuple(decisions), converged, accepted)


def deviation_gain(specs: Sequence[MicrogridSpec], outcome: MarketOutcome,
                   soc: Sequence[float]) -> np.ndarray:
    """Payoff each MG gains by re-optimising alone at the final price."""
    gains = []
    pi = outcome.final_price
    for spec, d, s in zip(specs, outcome.decisions, soc):
        best = solve_local(spec, pi, outcome.hour, s)
        gains.append(payoff(best, pi, spec, outcome.hour) - payoff(d, pi, spec, outcome.hour))
    return np.array(gains)


def convergence_log(outcomes: Sequence[MarketOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["hour", "iteration", "price", "supply", "demand", "mismatch"])
    for o in outcomes:
        for k, pi, s, d, gap in o.log_rows():
            w.writerow([o.hour, k, f"{pi:.10g}", f"{s:.10g}", f"{d:.10g}", f"{gap:.10g}"])
    return buf.getvalue()
