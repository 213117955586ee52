"""Exact radial power flow, used to audit trades and to cross-check the OPF."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .network import NetworkTopology


class PowerFlowDiverged(RuntimeError):
    pass


@dataclass
class PowerFlowResult:
    v: np.ndarray  # squared voltage, p.u.^2
    P: np.ndarray  # sending-end flows, p.u.
    Q: np.ndarray
    c: np.ndarray  # squared currents, p.u.^2
    p_slack: float  # MW
    q_slack: float  # MVAr
    losses: float  # kW
    iterations: int

    @property
    def voltage(self) -> np.ndarray:
        return np.sqrt(self.v)


@lru_cache(maxsize=8)
def _path_matrix(topology: NetworkTopology) -> np.ndarray:
    return kernels.path_matrix(topology.parent_line_idx, topology.line_from,
                               topology.line_to, topology.n_buses)


def run_power_flow(topology: NetworkTopology, p_load, q_load, p_inj=None,
                   gen_p=None, gen_q=None, v_slack: float = 1.0,
                   tol: float = 1e-12, max_iter: int = 500) -> PowerFlowResult:
    """Forward/backward sweep with the slack bus absorbing the balance.

    Loads and P2P injections are in kW/kVAr; ``gen_p``/``gen_q`` (MW/MVAr, one
    entry per generator) are applied at non-slack generator buses only.
    ``v_slack`` is the squared slack voltage.
    """
    kw = topology.s_base * 1000.0
    p_d = np.asarray(p_load, dtype=float) / kw
    q_d = np.asarray(q_load, dtype=float) / kw
    if p_inj is not None:
        p_d = p_d - np.asarray(p_inj, dtype=float) / kw
    if gen_p is not None or gen_q is not None:
        p_d = p_d.copy()
        q_d = q_d.copy()
        for g, spec in enumerate(topology.generators):
            i = topology.index_of(spec.bus)
            if i == topology.slack_index:
                continue
            if gen_p is not None:
                p_d[i] -= gen_p[g] / topology.s_base
            if gen_q is not None:
                q_d[i] -= gen_q[g] / topology.s_base
    A = None if kernels.USE_NUMBA else _path_matrix(topology)
    v, P, Q, c, p0, q0, iters = kernels.fbs(
        topology.order, topology.parent_line_idx, topology.line_from, topology.line_to,
        topology.r, topology.x, p_d, q_d, v_slack, tol=tol, max_iter=max_iter, A=A)
    if iters < 0 or not np.all(v > 0):
        raise PowerFlowDiverged("forward/backward sweep did not converge")
    losses = float(topology.r @ c) * kw
    return PowerFlowResult(v, P, Q, c, p0 * topology.s_base, q0 * topology.s_base, losses, iters)
