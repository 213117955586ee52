"""Study configuration: one TOML file drives every subcommand."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .dopf import DopfParams
from .market import MarketConfig
from .microgrid import BessSpec, MicrogridSpec
from .network import NetworkTopology, load_network


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingRanges:
    c_ls: tuple[float, float] = (2.0, 8.0)
    lambda_corr: tuple[float, float] = (0.01, 0.05)
    load_scale: tuple[float, float] = (0.5, 1.1)
    power_factor: tuple[float, float] = (0.80, 0.95)
    solar_uncertainty: tuple[float, float] = (-20.0, 20.0)  # percent

    def __post_init__(self):
        for name in self.names():
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"sampling range {name}: {lo} > {hi}")
        pf = self.power_factor
        if pf[0] <= 0 or pf[1] > 1:
            raise ConfigError("power factor range must lie in (0, 1]")

    @staticmethod
    def names() -> tuple[str, ...]:
        return ("c_ls", "lambda_corr", "load_scale", "power_factor", "solar_uncertainty")


@dataclass(frozen=True)
class ModelShape:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 200
    patience: int = 25  # epochs without validation improvement; 0 disables
    val_fraction: float = 0.2
    seed: int = 7
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")


@dataclass(frozen=True)
class StudyConfig:
    network: NetworkTopology
    microgrids: tuple[MicrogridSpec, ...]
    market: MarketConfig
    dopf: DopfParams
    load_profile: tuple[float, ...]
    power_factor: float = 0.85
    hours: int = 24
    dt: float = 1.0
    seed: int = 7
    case2_rounds: int = 5
    network_scale: float = 1.0  # network kW per MG kW (each MG aggregates identical units)
    sampling: SamplingRanges = field(default_factory=SamplingRanges)
    model_shape: ModelShape = field(default_factory=ModelShape)
    train: TrainConfig = field(default_factory=TrainConfig)
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.hours < 1:
            raise ConfigError("hours must be at least 1")
        if not 0 < self.power_factor <= 1:
            raise ConfigError("power_factor must lie in (0, 1]")
        if self.network_scale <= 0:
            raise ConfigError("network_scale must be positive")
        if self.case2_rounds < 1:
            raise ConfigError("case2 max_rounds must be at least 1")
        for mg in self.microgrids:
            if mg.bus not in self.network.bus_index:
                raise ConfigError(f"MG {mg.id} sits on unknown bus {mg.bus}")

    @property
    def mg_index(self) -> np.ndarray:
        return np.array([self.network.index_of(m.bus) for m in self.microgrids])

    def loads(self, hour: int, scale: float | None = None, pf: float | None = None):
        """(p_load, q_load) per bus in kW/kVAr for one hour."""
        s = self.load_profile[hour % len(self.load_profile)] if scale is None else scale
        p = self.network.p_load * s
        pf = self.power_factor if pf is None else pf
        return p, p * np.tan(np.arccos(pf))

    def with_overrides(self, **kw) -> "StudyConfig":
        return replace(self, **kw)

    def fingerprint(self) -> str:
        """Stable hash of the source document, for manifests."""
        blob = json.dumps(self.source, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_config_path() -> Path:
    return Path(str(resources.files("p2pgrid") / "data" / "default.toml"))


def _pair(v, name):
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigError(f"{name} must be a [lo, hi] pair")
    return (float(v[0]), float(v[1]))


def parse_config(doc: dict, base_dir: Path | None = None) -> StudyConfig:
    try:
        net_ref = doc.get("network", "ieee33")
        if net_ref == "ieee33":
            net = load_network()
        else:
            p = Path(net_ref)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            net = load_network(p)

        bess = BessSpec(**doc.get("bess", {}))
        pv = doc.get("pv", {})
        pv_profile = np.asarray(pv.get("profile", [0.0]), dtype=float) * float(pv.get("capacity", 10.0))
        mgs = []
        for entry in doc.get("microgrid", []):
            e = dict(entry)
            e_bess = BessSpec(**{**asdict(bess), **e.pop("bess", {})})
            e.setdefault("pv_profile", pv_profile)
            mgs.append(MicrogridSpec(bess=e_bess, **e))
        if not mgs:
            raise ConfigError("config defines no microgrids")

        margin = float(doc.get("p2p_cap_margin", 1.2))
        k = float(doc.get("network_scale", 1.0))
        caps = {m.bus: margin * k * m.max_abs_net() for m in mgs}
        net = net.with_p2p_caps(caps)

        sampling = SamplingRanges(**{k: _pair(v, k) for k, v in doc.get("sampling", {}).items()})
        return StudyConfig(
            network=net,
            microgrids=tuple(mgs),
            market=MarketConfig(**doc.get("market", {})),
            dopf=DopfParams(**doc.get("dopf", {})),
            load_profile=tuple(float(x) for x in doc.get("load_profile", [1.0])),
            power_factor=float(doc.get("power_factor", 0.85)),
            hours=int(doc.get("hours", 24)),
            dt=float(doc.get("dt", 1.0)),
            seed=int(doc.get("seed", 7)),
            network_scale=k,
            case2_rounds=int(doc.get("case2", {}).get("max_rounds", 5)),
            sampling=sampling,
            model_shape=ModelShape(**doc.get("surrogate", {})),
            train=TrainConfig(**doc.get("train", {})),
            source=doc,
        )
    except TypeError as exc:  # unknown keys in a table
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None) -> StudyConfig:
    path = default_config_path() if path is None else Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc, path.parent)
