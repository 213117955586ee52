"""Case metrics: traded power, payoff decomposition, voltage statistics."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

PAYOFF_TERMS = ("utility", "gen_cost", "revenue", "degradation", "total")


@dataclass
class CaseResult:
    case_id: int
    mg_ids: tuple[int, ...]
    bus_ids: tuple[int, ...]
    prices: np.ndarray  # (H,)
    proposed: np.ndarray  # (H, M) kW
    traded: np.ndarray  # (H, M) kW actually transacted
    payoff: np.ndarray  # (H, M, 5) in PAYOFF_TERMS order
    voltages: np.ndarray  # (H, N) p.u.
    iterations: np.ndarray  # (H,) market iterations, summed over rounds
    converged: np.ndarray  # (H,) bool
    dopf_clearing: np.ndarray  # (H,) D-OPF calls inside the clearing loop
    dopf_audit: np.ndarray  # (H,) D-OPF calls outside it
    soc: np.ndarray  # (H + 1, M)
    wall_time: float = 0.0
    fingerprint: str = ""
    seed: int = 0
    logs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.voltages.shape[1] != len(self.bus_ids):
            raise ValueError("voltage profile length differs from the bus count")
        gap = np.abs(self.payoff[..., :4] @ np.array([1.0, -1.0, 1.0, -1.0]) - self.payoff[..., 4])
        if gap.size and gap.max() > 1e-6:
            raise ValueError("payoff terms do not add up to the total")

    @property
    def hours(self) -> int:
        return self.prices.shape[0]

    def traded_total(self) -> float:
        return float(np.abs(self.traded).sum())

    def traded_per_mg(self) -> np.ndarray:
        return np.abs(self.traded).sum(axis=0)

    def payoff_total(self) -> float:
        return float(self.payoff[..., 4].sum())

    def to_dict(self) -> dict:
        """Deterministic content (wall time is reported separately)."""
        return {
            "case_id": self.case_id,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "mg_ids": list(self.mg_ids),
            "bus_ids": list(self.bus_ids),
            "prices": self.prices.tolist(),
            "proposed": self.proposed.tolist(),
            "traded": self.traded.tolist(),
            "payoff_terms": list(PAYOFF_TERMS),
            "payoff": self.payoff.tolist(),
            "voltages": self.voltages.tolist(),
            "iterations": self.iterations.tolist(),
            "converged": self.converged.tolist(),
            "dopf_clearing": self.dopf_clearing.tolist(),
            "dopf_audit": self.dopf_audit.tolist(),
            "soc": self.soc.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, wall_time: float = 0.0) -> "CaseResult":
        return cls(
            case_id=int(d["case_id"]), mg_ids=tuple(d["mg_ids"]), bus_ids=tuple(d["bus_ids"]),
            prices=np.array(d["prices"]), proposed=np.array(d["proposed"]),
            traded=np.array(d["traded"]), payoff=np.array(d["payoff"]),
            voltages=np.array(d["voltages"]), iterations=np.array(d["iterations"]),
            converged=np.array(d["converged"], dtype=bool),
            dopf_clearing=np.array(d["dopf_clearing"]), dopf_audit=np.array(d["dopf_audit"]),
            soc=np.array(d["soc"]), wall_time=wall_time, fingerprint=d.get("fingerprint", ""),
            seed=int(d.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def acceptance_ratio(case_traded, case1_traded) -> np.ndarray:
    """Elementwise traded / traded-in-case-1; zero case-1 entries become NaN."""
    num = np.abs(np.asarray(case_traded, dtype=float))
    den = np.abs(np.asarray(case1_traded, dtype=float))
    if num.shape != den.shape:
        raise ValueError("series are not aligned")
    zero = den == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} entries with zero case-1 trade excluded", stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zero, np.nan, num / np.where(zero, 1.0, den))


def voltage_violation(profiles, band=(0.95, 1.05), tol: float = 1e-6) -> tuple[float, int]:
    """(max exceedance beyond the band in %, number of hours with any violation).

    Exceedance above the band is measured relative to the upper limit and
    below it relative to the lower limit. Relative exceedances up to ``tol``
    (solver round-off at an active limit) do not count.
    """
    v = np.atleast_2d(np.asarray(profiles, dtype=float))
    lo, hi = band
    over = (v - hi) / hi
    under = (lo - v) / lo
    per_hour = np.maximum(over, under).max(axis=1)
    per_hour = np.where(per_hour > tol, per_hour, 0.0)
    return float(per_hour.max()) * 100.0, int(np.sum(per_hour > 0))


def payoff_table(results) -> dict:
    """Per-case, per-MG hourly averages of every payoff term plus traded power."""
    table = {}
    for r in results:
        rows = {}
        for j, mg in enumerate(r.mg_ids):
            avg = r.payoff[:, j, :].mean(axis=0) if r.hours else np.zeros(5)
            row = dict(zip(PAYOFF_TERMS, map(float, avg)))
            row["traded"] = float(np.abs(r.traded[:, j]).mean()) if r.hours else 0.0
            rows[mg] = row
        table[r.case_id] = rows
    return table


def payoff_table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "mg", *PAYOFF_TERMS, "traded_kw"])
    for case, rows in payoff_table(results).items():
        for mg, row in rows.items():
            w.writerow([case, mg, *(f"{row[k]:.6f}" for k in PAYOFF_TERMS), f"{row['traded']:.6f}"])
    return buf.getvalue()


def reduction(reference: float, value: float) -> float:
    """Relative drop of ``value`` below ``reference``."""
    return (reference - value) / reference


def recovery(baseline: float, value: float) -> float:
    """Relative gain of ``value`` over ``baseline``."""
    return (value - baseline) / baseline
