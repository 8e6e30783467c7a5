"""Run configuration: dataclasses with defaults and an INI round trip."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import InvalidInput
from .mapping import MappingConfig
from .tracking.graph import TrackingConfig

# INI key -> dataclass field where they differ
MAPPING_KEYS = {"lambda": "lam", "theta": "downsample", "theta_first": "first_downsample"}

# per-dataset values (flow threshold, covisibility cutoffs, window size, final refinement)
PROFILES = {
    "replica": dict(tau=2.25, kf_cov=0.95, kf_m=0.04, window_size=10, beta=2000),
    "tum": dict(tau=3.0, kf_cov=0.90, kf_m=0.08, window_size=8, beta=26000),
    "scannet": dict(tau=4.0, kf_cov=0.90, kf_m=0.08, window_size=8, beta=26000),
}


@dataclass
class ProxyConfig:
    min_fit_pixels: int = 100


@dataclass
class RunOptions:
    input: str = ""
    output: str = "out"
    seed: int = 0
    synthetic: str = ""
    profile: str = "replica"
    loop_closure: bool = True
    mono_depth: bool = True
    multiview_filter: bool = True
    deform: bool = True
    verbosity: int = 1
    # disk datasets only
    image_scale: float = 1.0
    max_frames: int = 0
    flow_sigma: float = 0.5


@dataclass
class RunConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    run: RunOptions = field(default_factory=RunOptions)

    @classmethod
    def for_profile(cls, name: str) -> "RunConfig":
        cfg = cls()
        cfg.apply_profile(name)
        return cfg

    def apply_profile(self, name: str) -> None:
        if name not in PROFILES:
            raise InvalidInput(f"unknown profile '{name}'")
        p = PROFILES[name]
        self.run.profile = name
        self.tracking.tau = p["tau"]
        for k in ("kf_cov", "kf_m", "window_size", "beta"):
            setattr(self.mapping, k, p[k])

    def sections(self) -> dict[str, dict]:
        mapping = {}
        inv = {v: k for k, v in MAPPING_KEYS.items()}
        for f in dataclasses.fields(self.mapping):
            mapping[inv.get(f.name, f.name)] = getattr(self.mapping, f.name)
        return {
            "tracking": dataclasses.asdict(self.tracking),
            "mapping": mapping,
            "proxy": dataclasses.asdict(self.proxy),
            "run": dataclasses.asdict(self.run),
        }

    def dump(self) -> str:
        lines = []
        for sec, vals in self.sections().items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in vals.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dump())

    @classmethod
    def from_ini(cls, text_or_path: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        if "\n" in text_or_path or text_or_path.lstrip().startswith("["):
            cp.read_string(text_or_path)
        elif not cp.read(text_or_path):
            raise InvalidInput(f"cannot read config {text_or_path}")
        cfg = cls()
        if cp.has_option("run", "profile"):
            cfg.apply_profile(cp.get("run", "profile"))
        targets = {"tracking": cfg.tracking, "mapping": cfg.mapping, "proxy": cfg.proxy, "run": cfg.run}
        for sec in cp.sections():
            if sec not in targets:
                raise InvalidInput(f"unknown config section [{sec}]")
            obj = targets[sec]
            names = {f.name: f for f in dataclasses.fields(obj)}
            for key, raw in cp[sec].items():
                name = MAPPING_KEYS.get(key, key) if sec == "mapping" else key
                if name not in names:
                    raise InvalidInput(f"unknown key '{key}' in [{sec}]")
                setattr(obj, name, _coerce(raw, type(getattr(obj, name))))
        cfg.mapping.__post_init__()
        return cfg


def _coerce(raw: str, typ):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise InvalidInput(f"bad value '{raw}'") from exc
