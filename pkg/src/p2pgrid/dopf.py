"""DSO layer: SOCP branch-flow OPF that projects proposed P2P injections.

The conic program is assembled once per topology in Clarabel's standard form
``min 1/2 x'Px + q'x  s.t.  Ax + s = b, s in K``; each solve only refreshes
``q`` (proposed injections) and ``b`` (loads and injection boxes).

Variable layout: ``[v (N), P (L), Q (L), c (L), pg (G), qg (G), pacc (N)]``,
all in per-unit. Accepted injections use the same sign as proposals
(positive = MG sells into the feeder).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import clarabel
import numpy as np
import scipy.sparse as sp

from .network import NetworkTopology
from . import powerflow


class DopfError(RuntimeError):
    """Conic solver failed for numerical reasons."""


class DopfInfeasible(DopfError):
    """The relaxation is infeasible, which certifies the OPF is infeasible."""


@dataclass(frozen=True)
class DopfParams:
    c_ls: float = 5.0  # Rs per kWh of losses
    lambda_corr: float = 0.02  # Rs/kW^2
    solver_tol: float = 1e-8
    curtail_only: bool = True

    def __post_init__(self):
        if self.c_ls < 0 or self.lambda_corr <= 0 or self.solver_tol <= 0:
            raise ValueError("need c_ls >= 0, lambda_corr > 0, solver_tol > 0")


@dataclass(frozen=True)
class InjectionRequest:
    """Per-bus proposed injections and loads, physical units, topology order."""

    p_net: np.ndarray  # kW
    p_load: np.ndarray  # kW
    q_load: np.ndarray  # kVAr

    def __post_init__(self):
        for name in ("p_net", "p_load", "q_load"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.p_net.shape == self.p_load.shape == self.q_load.shape):
            raise ValueError("request vectors must share one shape")
        if np.any(self.p_load < 0) or np.any(self.q_load < 0):
            raise ValueError("loads must be non-negative")


@dataclass
class DopfSolution:
    status: str  # "optimal" | "infeasible"
    p_acc: np.ndarray  # kW per bus
    v: np.ndarray  # p.u.^2 per bus
    P: np.ndarray  # p.u. sending-end flows
    Q: np.ndarray
    c: np.ndarray  # p.u.^2
    pg: np.ndarray  # MW per generator
    qg: np.ndarray  # MVAr per generator
    losses: float  # kW
    objective: float  # Rs
    exactness_residuals: np.ndarray
    solve_time: float
    iterations: int = 0
    p_net: np.ndarray = field(default=None, repr=False)

    @property
    def voltage(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.v, 0.0))


class DopfModel:
    """Conic data for one topology, reused across solves."""

    def __init__(self, topology: NetworkTopology):
        self.topology = topology
        N, L, G = topology.n_buses, topology.n_lines, len(topology.generators)
        self.N, self.L, self.G = N, L, G
        self.kw = topology.s_base * 1000.0  # kW per p.u.
        o = dict(v=0, P=N, Q=N + L, c=N + 2 * L, pg=N + 3 * L, qg=N + 3 * L + G,
                 pacc=N + 3 * L + 2 * G)
        self.off = o
        self.n_var = N + 3 * L + 2 * G + N
        r, x = topology.r, topology.x
        fr, to = topology.line_from, topology.line_to
        gen_bus = np.array([topology.index_of(g.bus) for g in topology.generators])
        self.gen_bus = gen_bus

        rows, cols, vals = [], [], []

        def put(i, j, a):
            rows.append(i)
            cols.append(j)
            vals.append(a)

        # equalities: active balance, reactive balance, voltage drop
        # out - in_net - gen - pacc = -load
        for k in range(L):
            put(fr[k], o["P"] + k, 1.0)
            put(to[k], o["P"] + k, -1.0)
            put(to[k], o["c"] + k, r[k])
            put(N + fr[k], o["Q"] + k, 1.0)
            put(N + to[k], o["Q"] + k, -1.0)
            put(N + to[k], o["c"] + k, x[k])
        for g, bi in enumerate(gen_bus):
            put(bi, o["pg"] + g, -1.0)
            put(N + bi, o["qg"] + g, -1.0)
        for n in range(N):
            put(n, o["pacc"] + n, -1.0)
        base = 2 * N
        for k in range(L):
            put(base + k, o["v"] + fr[k], 1.0)
            put(base + k, o["v"] + to[k], -1.0)
            put(base + k, o["P"] + k, -2.0 * r[k])
            put(base + k, o["Q"] + k, -2.0 * x[k])
            put(base + k, o["c"] + k, r[k] ** 2 + x[k] ** 2)
        self.n_eq = 2 * N + L

        # box inequalities  x_j <= ub  and  -x_j <= -lb
        bounded = ([o["v"] + n for n in range(N)] + [o["c"] + k for k in range(L)]
                   + [o["pg"] + g for g in range(G)] + [o["qg"] + g for g in range(G)]
                   + [o["pacc"] + n for n in range(N)])
        self.bounded = np.array(bounded)
        row = self.n_eq
        for j in bounded:
            put(row, j, 1.0)
            row += 1
        for j in bounded:
            put(row, j, -1.0)
            row += 1
        self.n_box = len(bounded)

        # rotated cones: (v_from + c, 2P, 2Q, v_from - c) in SOC(4); A = -coeffs
        self.cone_start = row
        for k in range(L):
            put(row, o["v"] + fr[k], -1.0)
            put(row, o["c"] + k, -1.0)
            put(row + 1, o["P"] + k, -2.0)
            put(row + 2, o["Q"] + k, -2.0)
            put(row + 3, o["v"] + fr[k], -1.0)
            put(row + 3, o["c"] + k, 1.0)
            row += 4
        self.n_rows = row
        self.A = sp.csc_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_var))
        self.cones = [clarabel.ZeroConeT(self.n_eq),
                      clarabel.NonnegativeConeT(2 * self.n_box)]
        self.cones += [clarabel.SecondOrderConeT(4) for _ in range(L)]

        gens = topology.generators
        s = topology.s_base
        self.lb_fixed = np.concatenate([topology.v_min, np.zeros(L),
                                        [g.p_min / s for g in gens], [g.q_min / s for g in gens]])
        self.ub_fixed = np.concatenate([topology.v_max, topology.c_max,
                                        [g.p_max / s for g in gens], [g.q_max / s for g in gens]])
        self.r = r

    def _data(self, request: InjectionRequest, params: DopfParams, pin: bool = False):
        N, kw = self.N, self.kw
        p_net = request.p_net / kw
        cap = self.topology.p2p_cap / kw
        lo, hi = -cap, cap.copy()
        if params.curtail_only:
            lo = np.maximum(lo, np.minimum(0.0, p_net))
            hi = np.minimum(hi, np.maximum(0.0, p_net))
        if pin:
            lo, hi = p_net.copy(), p_net.copy()
        lb = np.concatenate([self.lb_fixed, lo])
        ub = np.concatenate([self.ub_fixed, hi])

        b = np.zeros(self.n_rows)
        b[:N] = -request.p_load / kw
        b[N:2 * N] = -request.q_load / kw
        b[self.n_eq:self.n_eq + self.n_box] = ub
        b[self.n_eq + self.n_box:self.n_eq + 2 * self.n_box] = -lb

        # objective in Rs: c_ls * loss_kW + lambda * sum((pacc - pnet) * kw)^2
        w = params.lambda_corr * kw * kw
        q = np.zeros(self.n_var)
        q[self.off["c"]:self.off["c"] + self.L] = params.c_ls * kw * self.r
        q[self.off["pacc"]:] = -2.0 * w * p_net
        diag = np.zeros(self.n_var)
        diag[self.off["pacc"]:] = 2.0 * w
        const = w * float(p_net @ p_net)
        return sp.diags(diag, format="csc"), q, b, const, p_net

    def solve(self, request: InjectionRequest, params: DopfParams,
              pin: bool = False) -> DopfSolution:
        """``pin`` fixes pacc to the proposal, turning the solve into a feasibility check."""
        if request.p_net.shape != (self.N,):
            raise ValueError(f"request has {request.p_net.shape} entries, network {self.N} buses")
        P, q, b, const, p_net = self._data(request, params, pin)
        # scale the objective so its Hessian is O(1) for the interior-point method
        scale = max(1.0, float(P.diagonal().max()))
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = params.solver_tol
        settings.tol_gap_rel = params.solver_tol
        settings.tol_feas = params.solver_tol
        settings.tol_ktratio = 1e-7
        settings.max_iter = 200
        t0 = time.perf_counter()
        solver = clarabel.DefaultSolver(P / scale, q / scale, self.A, b, self.cones, settings)
        sol = solver.solve()
        elapsed = time.perf_counter() - t0
        status = str(sol.status)
        N, L, G, o, kw = self.N, self.L, self.G, self.off, self.kw
        if "Infeasible" in status:
            nan = np.full(N, np.nan)
            return DopfSolution("infeasible", nan, nan, np.full(L, np.nan), np.full(L, np.nan),
                                np.full(L, np.nan), np.full(G, np.nan), np.full(G, np.nan),
                                np.nan, np.nan, np.full(L, np.nan), elapsed,
                                int(sol.iterations), request.p_net.copy())
        if status not in ("Solved", "AlmostSolved"):
            raise DopfError(f"conic solver returned {status}")
        xs = np.asarray(sol.x)
        v = xs[o["v"]:o["v"] + N]
        Pf = xs[o["P"]:o["P"] + L]
        Qf = xs[o["Q"]:o["Q"] + L]
        c = xs[o["c"]:o["c"] + L]
        pg = xs[o["pg"]:o["pg"] + G] * self.topology.s_base
        qg = xs[o["qg"]:o["qg"] + G] * self.topology.s_base
        pacc = xs[o["pacc"]:o["pacc"] + N]
        resid = c - (Pf**2 + Qf**2) / v[self.topology.line_from]
        losses = float(self.r @ c) * kw
        objective = params.c_ls * losses + params.lambda_corr * float(
            np.sum(((pacc - p_net) * kw) ** 2))
        return DopfSolution("optimal", pacc * kw, v, Pf, Qf, c, pg, qg, losses, objective,
                            resid, elapsed, int(sol.iterations), request.p_net.copy())


_MODELS: dict[int, DopfModel] = {}


def model_for(topology: NetworkTopology) -> DopfModel:
    key = id(topology)
    m = _MODELS.get(key)
    if m is None or m.topology is not topology:
        m = DopfModel(topology)
        _MODELS[key] = m
    return m


def solve_dopf(topology: NetworkTopology, request: InjectionRequest,
               params: DopfParams = DopfParams()) -> DopfSolution:
    """Loss- and correction-minimising OPF over the SOCP relaxation."""
    return model_for(topology).solve(request, params)


@dataclass
class ExactnessReport:
    residuals: np.ndarray
    flagged: list[int]  # line ids whose cone is slack beyond tol
    max_residual: float

    @property
    def exact(self) -> bool:
        return not self.flagged


def check_exactness(topology: NetworkTopology, solution: DopfSolution,
                    tol: float = 1e-5) -> ExactnessReport:
    if solution.status != "optimal":
        raise ValueError("exactness is only defined for optimal solutions")
    res = solution.c - (solution.P**2 + solution.Q**2) / solution.v[topology.line_from]
    flagged = [topology.lines[k].id for k in np.flatnonzero(res > tol)]
    return ExactnessReport(res, flagged, float(np.max(res)) if res.size else 0.0)


def accept(topology: NetworkTopology, request: InjectionRequest,
           params: DopfParams = DopfParams()) -> DopfSolution:
    """The DSO's answer to a request, as a full solution.

    Without a loss price the map is a Euclidean projection, so a proposal
    that is already feasible is accepted as given. Checking that first
    matters: the interior-point solve only pins pacc to roughly the square
    root of its gap tolerance when the optimal correction is zero.
    """
    cap = topology.p2p_cap
    if params.c_ls == 0.0 and np.all(np.abs(request.p_net) <= cap * (1 + 1e-12) + 1e-9):
        # round-off past the cap (or off the MG buses) is clipped, not projected
        req = InjectionRequest(np.clip(request.p_net, -cap, cap), request.p_load, request.q_load)
        try:
            pinned = model_for(topology).solve(req, params, pin=True)
        except DopfError:
            pinned = None
        if pinned is not None and pinned.status == "optimal":
            return replace(pinned, p_acc=req.p_net.copy())
    return solve_dopf(topology, request, params)


def project(topology: NetworkTopology, p_net, p_load, q_load,
            params: DopfParams = DopfParams()) -> np.ndarray:
    """DSO-accepted injections (kW) for proposed injections ``p_net`` (kW)."""
    sol = accept(topology, InjectionRequest(p_net, p_load, q_load), params)
    if sol.status != "optimal":
        raise DopfInfeasible("D-OPF relaxation infeasible for this request")
    return sol.p_acc


def validate_with_power_flow(topology: NetworkTopology, solution: DopfSolution,
                             p_load, q_load) -> powerflow.PowerFlowResult:
    """Re-run the exact branch-flow equations on the OPF dispatch.

    Non-slack generators and accepted injections are held at their OPF
    values; the slack voltage is the OPF's.
    """
    return powerflow.run_power_flow(
        topology, p_load, q_load, p_inj=solution.p_acc,
        gen_p=solution.pg, gen_q=solution.qg,
        v_slack=float(solution.v[topology.slack_index]))
