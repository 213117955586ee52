"""Training data for the DSO surrogate.

Every scenario samples operating conditions, clears the grid-unaware market
and asks the D-OPF what it would accept. One record holds a token per bus.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, dopf
from .config import SamplingRanges, StudyConfig
from .harness import features
from .market import clear_hour

log = logging.getLogger(__name__)

FEATURES = ("p_net", "p_load", "pf", "c_ls", "lambda_corr")
MAX_DROP_FRACTION = 0.5


class ScenarioError(RuntimeError):
    pass


class PipelineError(ScenarioError):
    """Systematic failure, e.g. most scenarios infeasible."""


@dataclass(frozen=True)
class ScenarioParams:
    c_ls: float
    lambda_corr: float
    load_scale: float
    power_factor: float
    solar_uncertainty: float  # percent

    def as_array(self) -> np.ndarray:
        return np.array([self.c_ls, self.lambda_corr, self.load_scale,
                         self.power_factor, self.solar_uncertainty])


def scenario_seeds(master: int, n: int) -> np.ndarray:
    """Per-scenario seeds, a pure function of (master seed, scenario id)."""
    return np.array([np.random.SeedSequence(master, spawn_key=(i,)).generate_state(1, np.uint64)[0]
                     for i in range(n)], dtype=np.uint64)


def sample_scenario(seed: int, ranges: SamplingRanges = SamplingRanges()) -> ScenarioParams:
    """Independent uniform draw of every sampled parameter."""
    rng = np.random.default_rng(int(seed))
    vals = [rng.uniform(*getattr(ranges, name)) for name in SamplingRanges.names()]
    return ScenarioParams(*(float(v) for v in vals))


@dataclass
class Dataset:
    scenario_id: np.ndarray  # (S,)
    seed: np.ndarray  # (S,) uint64
    params: np.ndarray  # (S, 5) in SamplingRanges.names() order
    hour: np.ndarray  # (S,)
    X: np.ndarray  # (S, N, 5)
    y: np.ndarray  # (S, N) accepted injection, feeder kW
    iterations: np.ndarray  # (S,) market iterations
    converged: np.ndarray  # (S,) market converged
    exact: np.ndarray  # (S,) relaxation exact
    bus_ids: np.ndarray  # (N,)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenario_id)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.scenario_id[idx], self.seed[idx], self.params[idx], self.hour[idx],
                       self.X[idx], self.y[idx], self.iterations[idx], self.converged[idx],
                       self.exact[idx], self.bus_ids, dict(self.manifest))

    _COLUMNS = ("scenario_id", "seed", "params", "hour", "X", "y", "iterations",
                "converged", "exact", "bus_ids")

    def save(self, path) -> None:
        """Directory of ``.npy`` columns plus ``manifest.json``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name in self._COLUMNS:
            arr = np.ascontiguousarray(getattr(self, name))
            _write_atomic(path / f"{name}.npy", _npy_bytes(arr))
            digests[name] = hashlib.sha256(arr.tobytes()).hexdigest()
        man = dict(self.manifest)
        man["columns"] = digests
        _write_atomic(path / "manifest.json", (json.dumps(man, indent=1, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            man = json.loads((path / "manifest.json").read_text())
            cols = {n: np.load(path / f"{n}.npy", allow_pickle=False) for n in cls._COLUMNS}
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"cannot read dataset {path}: {exc}") from exc
        for n, digest in man.get("columns", {}).items():
            if hashlib.sha256(np.ascontiguousarray(cols[n]).tobytes()).hexdigest() != digest:
                raise ScenarioError(f"dataset column {n} fails its checksum")
        return cls(manifest=man, **cols)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def scenario_config(config: StudyConfig, params: ScenarioParams) -> StudyConfig:
    """Config with PV scaled by the solar uncertainty and the sampled DSO prices."""
    k = max(0.0, 1.0 + params.solar_uncertainty / 100.0)
    mgs = tuple(replace(m, pv_profile=tuple(v * k for v in m.pv_profile)) for m in config.microgrids)
    return config.with_overrides(
        microgrids=mgs,
        dopf=replace(config.dopf, c_ls=params.c_ls, lambda_corr=params.lambda_corr),
        power_factor=params.power_factor)


def run_scenario(config: StudyConfig, sid: int, seed: int) -> dict:
    """One scenario; returns a record dict, or one with ``status != 'optimal'``."""
    params = sample_scenario(seed, config.sampling)
    rng = np.random.default_rng([int(seed), 1])
    hour = int(rng.integers(config.hours))
    soc = np.array([rng.uniform(m.bess.soc_min, m.bess.soc_max) for m in config.microgrids])
    cfg = scenario_config(config, params)
    mkt = replace(cfg.market, local_method="kkt", mu=0.0)
    out = clear_hour(cfg.microgrids, hour, soc, mkt)
    p_net = cfg.network_scale * out.p_net
    p_load, q_load = cfg.loads(hour, scale=params.load_scale)
    req = np.zeros(cfg.network.n_buses)
    req[cfg.mg_index] = p_net
    sol = dopf.solve_dopf(cfg.network, dopf.InjectionRequest(req, p_load, q_load), cfg.dopf)
    rec = dict(sid=sid, seed=seed, params=params.as_array(), hour=hour, status=sol.status,
               iterations=out.iterations, converged=out.converged)
    if sol.status != "optimal":
        return rec
    rec["X"] = features(cfg, p_net, p_load, params.power_factor, params.c_ls, params.lambda_corr)
    rec["y"] = sol.p_acc.copy()
    rec["exact"] = dopf.check_exactness(cfg.network, sol).exact
    return rec


def _worker(args):
    config, sid, seed = args
    return run_scenario(config, sid, seed)


def generate_dataset(config: StudyConfig, n: int, seed: int | None = None,
                     workers: int = 1, progress=None) -> Dataset:
    """``n`` scenarios, infeasible ones dropped. Identical for any ``workers``."""
    if n < 1:
        raise ScenarioError("need at least one scenario")
    seed = config.seed if seed is None else int(seed)
    seeds = scenario_seeds(seed, n)
    jobs = [(config, i, int(s)) for i, s in enumerate(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            recs = []
            for k, r in enumerate(ex.map(_worker, jobs, chunksize=max(1, n // (8 * workers)))):
                recs.append(r)
                if progress is not None:
                    progress(k + 1, n)
    else:
        recs = []
        for k, job in enumerate(jobs):
            recs.append(_worker(job))
            if progress is not None:
                progress(k + 1, n)
    recs.sort(key=lambda r: r["sid"])
    kept = [r for r in recs if r["status"] == "optimal"]
    dropped = n - len(kept)
    if dropped:
        log.warning("dropped %d of %d scenarios with infeasible D-OPF", dropped, n)
    if dropped > MAX_DROP_FRACTION * n:
        raise PipelineError(f"{dropped} of {n} scenarios infeasible; check the sampling ranges")
    N = config.network.n_buses
    manifest = {
        "package_version": __version__,
        "seed": seed,
        "n_requested": n,
        "n_kept": len(kept),
        "n_dropped": dropped,
        "n_market_unconverged": int(sum(not r["converged"] for r in kept)),
        "n_inexact": int(sum(not r["exact"] for r in kept)),
        "config_fingerprint": config.fingerprint(),
        "network_scale": config.network_scale,
        "features": list(FEATURES),
        "target": "p_acc (feeder kW)",
        "sampling_ranges": {k: list(v) for k, v in asdict(config.sampling).items()},
        "sampling_ranges_note": "range endpoints are estimates read off figure axes",
    }
    return Dataset(
        scenario_id=np.array([r["sid"] for r in kept], dtype=np.int64),
        seed=np.array([r["seed"] for r in kept], dtype=np.uint64),
        params=np.array([r["params"] for r in kept]).reshape(-1, 5),
        hour=np.array([r["hour"] for r in kept], dtype=np.int64),
        X=np.array([r["X"] for r in kept]).reshape(-1, N, 5),
        y=np.array([r["y"] for r in kept]).reshape(-1, N),
        iterations=np.array([r["iterations"] for r in kept], dtype=np.int64),
        converged=np.array([r["converged"] for r in kept], dtype=bool),
        exact=np.array([r["exact"] for r in kept], dtype=bool),
        bus_ids=np.array(config.network.bus_ids, dtype=np.int64),
        manifest=manifest,
    )


def pearson_matrix(X, level: str = "scenario") -> np.ndarray:
    """Correlation between the five inputs.

    Accepts a :class:`Dataset`, an (S, N, 5) array or a (rows, 5) array.
    At ``level="scenario"`` each scenario is one row: summed net injection,
    summed load, and the scenario-wide pf, c_ls and lambda. ``"token"``
    uses every (scenario, bus) row instead.
    """
    X = X.X if isinstance(X, Dataset) else np.asarray(X, dtype=float)
    if level not in ("scenario", "token"):
        raise ScenarioError(f"unknown level {level!r}")
    if X.ndim == 3 and level == "scenario":
        flat = np.column_stack([X[:, :, 0].sum(axis=1), X[:, :, 1].sum(axis=1),
                                X[:, :, 2:].mean(axis=1)])
    else:
        flat = X.reshape(-1, X.shape[-1])
    if flat.shape[0] < 2:
        raise ScenarioError("need at least two rows")
    sd = flat.std(axis=0)
    flat_cols = sd <= 1e-12 * np.maximum(1.0, np.abs(flat).max(axis=0))
    bad = [FEATURES[i] if i < len(FEATURES) else str(i) for i in np.flatnonzero(flat_cols)]
    if bad:
        raise ScenarioError(f"zero-variance feature(s): {', '.join(bad)}")
    return np.clip(np.corrcoef(flat, rowvar=False), -1.0, 1.0)


def split(n, fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, test) index arrays over ``n`` records (or len(n))."""
    if not 0 < fraction < 1:
        raise ScenarioError("split fraction must lie in (0, 1)")
    n = n if isinstance(n, (int, np.integer)) else len(n)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])
