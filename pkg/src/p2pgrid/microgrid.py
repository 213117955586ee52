"""Microgrid devices, payoff and the hourly local best response."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, minimize

from . import kernels


class MicrogridError(ValueError):
    pass


class LocalSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class BessSpec:
    p_max: float = 10.0  # kW
    soc_min: float = 4.0  # kWh
    soc_max: float = 20.0
    eta_c: float = 0.95
    eta_d: float = 0.95
    soc_init: float = 12.0

    def __post_init__(self):
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise MicrogridError("efficiencies must lie in (0, 1]")
        if not self.soc_min < self.soc_max:
            raise MicrogridError("soc_min must be below soc_max")
        if not self.soc_min <= self.soc_init <= self.soc_max:
            raise MicrogridError("soc_init outside [soc_min, soc_max]")
        if self.p_max <= 0:
            raise MicrogridError("p_max must be positive")


def _hourly(value, name: str) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise MicrogridError(f"{name} must be a scalar or a 1-d profile")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class MicrogridSpec:
    """One prosumer agent. ``alpha``, ``beta`` and ``pv_profile`` may be hourly."""

    id: int
    bus: int
    alpha: Sequence[float]  # Rs/kWh
    beta: Sequence[float]  # Rs/kWh^2
    a: float  # Rs/kW^2
    b: float  # Rs/kW
    g_max: float  # kW
    load_min: float = 15.0
    load_max: float = 100.0
    pv_profile: Sequence[float] = (0.0,)
    bess: BessSpec = field(default_factory=BessSpec)
    lambda_d: float = 0.02  # Rs/kWh of throughput

    def __post_init__(self):
        for name in ("alpha", "beta", "pv_profile"):
            object.__setattr__(self, name, _hourly(getattr(self, name), name))
        if min(self.alpha) <= 0 or min(self.beta) <= 0:
            raise MicrogridError(f"MG {self.id}: alpha and beta must be positive")
        if self.a < 0 or self.b < 0 or self.g_max < 0 or self.lambda_d < 0:
            raise MicrogridError(f"MG {self.id}: negative cost or capacity")
        if not 0 <= self.load_min <= self.load_max:
            raise MicrogridError(f"MG {self.id}: need 0 <= load_min <= load_max")
        if min(self.pv_profile) < 0:
            raise MicrogridError(f"MG {self.id}: negative PV availability")

    def alpha_at(self, hour: int) -> float:
        return self.alpha[hour % len(self.alpha)]

    def beta_at(self, hour: int) -> float:
        return self.beta[hour % len(self.beta)]

    def pv_at(self, hour: int) -> float:
        return self.pv_profile[hour % len(self.pv_profile)]

    def max_abs_net(self) -> float:
        """Largest |p_net| the devices can physically produce."""
        buy = self.load_max + self.bess.p_max
        sell = self.g_max + max(self.pv_profile) + self.bess.p_max
        return max(buy, sell)


@dataclass(frozen=True)
class MgDecision:
    load: float
    gen: float
    ren: float
    p_ch: float
    p_dch: float
    soc_next: float

    @property
    def p_net(self) -> float:
        return self.gen + self.ren + self.p_dch - self.load - self.p_ch

    @property
    def p_sell(self) -> float:
        return max(self.p_net, 0.0)

    @property
    def p_buy(self) -> float:
        return max(-self.p_net, 0.0)

    @property
    def role(self) -> str:
        p = self.p_net
        return "seller" if p > 0 else "buyer" if p < 0 else "neutral"

    def as_array(self) -> np.ndarray:
        return np.array([self.load, self.gen, self.ren, self.p_ch, self.p_dch])


def utility(L, alpha: float, beta: float):
    """Concave utility that saturates at the knee alpha / (2 beta)."""
    L = np.asarray(L, dtype=float)
    if np.any(L < 0) or beta <= 0:
        raise MicrogridError("utility needs L >= 0 and beta > 0")
    knee = alpha / (2.0 * beta)
    out = np.where(L <= knee, alpha * L - beta * L * L, alpha * alpha / (4.0 * beta))
    return float(out) if out.ndim == 0 else out


def marginal_utility(L, alpha: float, beta: float):
    return np.maximum(alpha - 2.0 * beta * np.asarray(L, dtype=float), 0.0)


def gen_cost(G, a: float, b: float):
    G = np.asarray(G, dtype=float)
    if np.any(G < 0):
        raise MicrogridError("generation must be non-negative")
    out = a * G * G + b * G
    return float(out) if out.ndim == 0 else out


def soc_step(soc: float, p_ch: float, p_dch: float, bess: BessSpec, dt: float = 1.0) -> float:
    return soc + bess.eta_c * p_ch * dt - p_dch * dt / bess.eta_d


@dataclass(frozen=True)
class PayoffTerms:
    utility: float
    gen_cost: float
    revenue: float  # price * p_net (negative for buyers)
    degradation: float
    total: float


def payoff_terms(d: MgDecision, price: float, spec: MicrogridSpec, hour: int = 0,
                 p_net: float | None = None) -> PayoffTerms:
    """Payoff decomposition; ``p_net`` overrides the traded quantity when
    a DSO settles a different amount than the devices imply."""
    traded = d.p_net if p_net is None else p_net
    u = utility(d.load, spec.alpha_at(hour), spec.beta_at(hour))
    c = gen_cost(d.gen, spec.a, spec.b)
    rev = price * traded
    deg = spec.lambda_d * (d.p_ch + d.p_dch)
    return PayoffTerms(u, c, rev, deg, u + rev - c - deg)


def payoff(d: MgDecision, price: float, spec: MicrogridSpec, hour: int = 0) -> float:
    if min(d.load, d.gen, d.ren, d.p_ch, d.p_dch) < -1e-9:
        raise MicrogridError("decision has negative device power")
    return payoff_terms(d, price, spec, hour).total


@dataclass(frozen=True)
class SurrogatePenalty:
    """Local linear model of the learned DSO response around ``p0``.

    The penalty is ``mu * (f(p) - p)^2`` with ``f(p) = f0 + slope * (p - p0)``.
    """

    mu: float
    f0: float
    slope: float
    p0: float

    def predict(self, p):
        return self.f0 + self.slope * (p - self.p0)


def _device_boxes(spec: MicrogridSpec, hour: int, soc: float, dt: float):
    bess = spec.bess
    ch_room = max(0.0, (bess.soc_max - soc) / (bess.eta_c * dt))
    dch_room = max(0.0, (soc - bess.soc_min) * bess.eta_d / dt)
    lo = np.array([spec.load_min, 0.0, 0.0, 0.0, 0.0])
    hi = np.array([spec.load_max, spec.g_max, spec.pv_at(hour),
                   min(bess.p_max, ch_room), min(bess.p_max, dch_room)])
    return lo, hi


def closed_form(spec: MicrogridSpec, price: float, hour: int, soc: float, dt: float = 1.0):
    """Exact best response without penalty or trade bounds."""
    out = np.zeros((1, kernels.N_DEC))
    kernels.best_response_numpy(
        price, np.array([spec.alpha_at(hour)]), np.array([spec.beta_at(hour)]),
        np.array([spec.a]), np.array([spec.b]), np.array([spec.g_max]),
        np.array([spec.load_min]), np.array([spec.load_max]), np.array([spec.pv_at(hour)]),
        np.array([spec.bess.p_max]), np.array([soc]), np.array([spec.bess.soc_min]),
        np.array([spec.bess.soc_max]), np.array([spec.bess.eta_c]),
        np.array([spec.bess.eta_d]), np.array([spec.lambda_d]), dt, out)
    return out[0]


_NET = np.array([-1.0, 1.0, 1.0, -1.0, 1.0])  # p_net = NET @ z


def _finish(z, spec: MicrogridSpec, soc: float, dt: float) -> MgDecision:
    L, G, R, ch, dch = (float(v) for v in z)
    # net out simultaneous charge and discharge; p_net is unchanged
    b = dch - ch
    ch, dch = max(-b, 0.0), max(b, 0.0)
    return MgDecision(L, G, R, ch, dch, soc_step(soc, ch, dch, spec.bess, dt))


def _penalised_start(spec, price, hour, soc, dt, mu, c0, c1, z_plain):
    """Closed form at the price where the penalised marginal value balances.

    The unpenalised net response is non-decreasing in price and the effective
    price falls as p_net rises, so the balance point is unique and can be
    bracketed.
    """
    bess = spec.bess
    args = [np.array([v], dtype=float) for v in (
        spec.alpha_at(hour), spec.beta_at(hour), spec.a, spec.b, spec.g_max, spec.load_min,
        spec.load_max, spec.pv_at(hour), bess.p_max, soc, bess.soc_min, bess.soc_max,
        bess.eta_c, bess.eta_d, spec.lambda_d)]
    out = np.zeros((1, kernels.N_DEC))

    def gap(pe):
        kernels.best_response_loops(pe, *args, dt, out)
        z = out[0]
        p = z[1] + z[2] + z[4] - z[0] - z[3]
        return pe - price + 2.0 * mu * c1 * (c0 + c1 * p)

    g0 = gap(price)
    if g0 == 0.0:
        return z_plain
    step = max(abs(g0), 1e-6)
    lo_p, hi_p = price, price
    if g0 > 0:
        while lo_p > 0.0 and gap(lo_p) > 0:
            lo_p = max(0.0, lo_p - step)
            step *= 2.0
        if gap(lo_p) > 0:  # balance point below zero price
            return out[0].copy()
    else:
        while gap(hi_p) < 0:
            hi_p += step
            step *= 2.0
    gap(brentq(gap, lo_p, hi_p, xtol=1e-13, rtol=1e-13))
    return out[0].copy()


def solve_local(spec: MicrogridSpec, price: float, hour: int, soc: float,
                penalty: SurrogatePenalty | None = None,
                net_bounds: tuple[float, float] | None = None,
                method: str = "slsqp", dt: float = 1.0,
                tol: float = 1e-12, max_iter: int = 200) -> MgDecision:
    """Payoff-maximising decision for one hour.

    ``net_bounds`` restricts p_net (used when the DSO has capped a trade);
    ``penalty`` adds the learned-response regulariser. ``method="kkt"`` uses
    the closed form and only applies to the plain problem.
    """
    if price < 0:
        raise MicrogridError("price must be non-negative")
    bess = spec.bess
    if not bess.soc_min - 1e-9 <= soc <= bess.soc_max + 1e-9:
        raise MicrogridError(f"MG {spec.id}: soc {soc} outside bounds")
    lo, hi = _device_boxes(spec, hour, soc, dt)
    if method == "kkt":
        if penalty is not None or net_bounds is not None:
            raise MicrogridError("closed form only covers the unpenalised, unbounded problem")
        return _finish(closed_form(spec, price, hour, soc, dt), spec, soc, dt)
    if method != "slsqp":
        raise MicrogridError(f"unknown local method {method!r}")

    alpha, beta = spec.alpha_at(hour), spec.beta_at(hour)
    a, b, lam = spec.a, spec.b, spec.lambda_d
    knee = alpha / (2.0 * beta)
    mu = 0.0 if penalty is None else penalty.mu
    if penalty is not None:
        # f(p) - p = c0 + c1 * p
        c1 = penalty.slope - 1.0
        c0 = penalty.f0 - penalty.slope * penalty.p0
    scale = 1.0 / max(1.0, alpha * spec.load_max)

    def neg_payoff(z):
        L, G, R, ch, dch = z
        Lc = min(L, knee)  # flat beyond the knee
        u = alpha * Lc - beta * Lc * Lc
        p = _NET @ z
        f = u + price * p - a * G * G - b * G - lam * (ch + dch)
        if mu:
            e = c0 + c1 * p
            f -= mu * e * e
        return -f * scale

    def grad(z):
        L, G, R, ch, dch = z
        g = np.array([max(alpha - 2 * beta * L, 0.0), -2 * a * G - b, 0.0, -lam, -lam])
        dp = price
        if mu:
            dp -= 2.0 * mu * (c0 + c1 * (_NET @ z)) * c1
        g += dp * _NET
        return -g * scale

    constraints = []
    if net_bounds is not None:
        nlo, nhi = net_bounds
        pmin, pmax = float(_NET @ np.where(_NET > 0, lo, hi)), float(_NET @ np.where(_NET > 0, hi, lo))
        if nlo > pmax + 1e-9 or nhi < pmin - 1e-9 or nlo > nhi:
            raise LocalSolveError(f"MG {spec.id}: net bounds [{nlo}, {nhi}] unreachable")
        constraints = [
            {"type": "ineq", "fun": lambda z: np.array([_NET @ z - nlo, nhi - _NET @ z]),
             "jac": lambda z: np.vstack([_NET, -_NET])},
        ]

    # warm start from the closed form; with a penalty, at the effective price
    # pi - 2 mu c1 (c0 + c1 p) where that price and the response agree
    z0 = closed_form(spec, price, hour, soc, dt)
    if mu and net_bounds is None:
        z0 = _penalised_start(spec, price, hour, soc, dt, mu, c0, c1, z0)
    z0 = np.clip(z0, lo, hi)
    res = minimize(neg_payoff, z0, jac=grad, method="SLSQP",
                   bounds=list(zip(lo, hi)), constraints=constraints,
                   options={"ftol": tol, "maxiter": max_iter})
    if not res.success and res.status != 8:  # 8: line search stalled at the optimum
        raise LocalSolveError(f"MG {spec.id}: SLSQP failed ({res.message})")
    return _finish(np.clip(res.x, lo, hi), spec, soc, dt)
