"""Experiment configuration: one JSON document, SI units throughout.

Unknown keys are rejected with a :class:`ConfigError` naming the dotted path
of the offending key, e.g. ``protocol.omega3``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from importlib import resources

from . import lifshitz
from .dsp import LockInConfig
from .instrument import (CantileverParams, ForceStack, InterferometerParams, NoiseModel,
                         ResidualPotential, ScanProtocol, SimulationSettings, SqueezeFilm)
from .lifshitz import LifshitzConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` holds the dotted path of the culprit."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class LockInSettings:
    rc_time: float
    filter_stages: int = 4


@dataclass(frozen=True)
class LockInSet:
    omega1: LockInSettings = LockInSettings(0.01)
    two_omega1: LockInSettings = LockInSettings(0.2)
    omega2: LockInSettings = LockInSettings(0.1)


@dataclass(frozen=True)
class ServoSettings:
    v0_loop_time: float = 0.1
    amplitude_loop_time: float = 1.5
    vac_min: float = 1e-3
    vac_max: float = 10.0
    vdc_limit: float = 5.0
    initial_vdc: float = 0.0


@dataclass(frozen=True)
class SimulationSection:
    integration_rate: float = 60000.0
    record_rate: float = 10.0
    min_separation: float = 45e-9
    truth_channels: bool = False
    contact_duration: float = 3.0
    tune_laser: bool = True
    casimir_table_points: int = 120


@dataclass(frozen=True)
class AnalysisSettings:
    settle_time: float = 4.0
    decimation_rate: float = 100.0
    delay_window: float = 2.0
    v0_rc_time: float = 0.1
    v0_dither_correction: bool = True
    transfer_correction: bool = True
    backaction_correction: bool = True
    finite_amplitude_correction: bool = True
    calibration_min_separation: float = 60e-9
    separation_from: str = "displacement"
    fringe_lowpass: float = 20.0
    residual_window: tuple = (160e-9, 200e-9)
    theory_points: int = 81


@dataclass(frozen=True)
class Interferometers:
    ferrule: InterferometerParams = InterferometerParams()
    barefiber: InterferometerParams = InterferometerParams(visibility=0.8, rest_gap=200e-6)


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "out"


@dataclass(frozen=True)
class ExperimentConfig:
    cantilever: CantileverParams = CantileverParams()
    interferometers: Interferometers = Interferometers()
    protocol: ScanProtocol = ScanProtocol()
    forces: ForceStack = field(default_factory=ForceStack)
    lockins: LockInSet = LockInSet()
    servos: ServoSettings = ServoSettings()
    simulation: SimulationSection = SimulationSection()
    analysis: AnalysisSettings = AnalysisSettings()
    output: OutputSettings = OutputSettings()

    def lockin(self, name, phase=0.0) -> LockInConfig:
        """Lock-in config for ``omega1``, ``two_omega1`` or ``omega2``."""
        f1, f2 = self.protocol.omega1, self.protocol.omega2
        freq = {"omega1": f1, "two_omega1": 2 * f1, "omega2": f2}[name]
        s = getattr(self.lockins, name)
        return LockInConfig(freq, phase, s.rc_time, s.filter_stages)

    def simulation_settings(self) -> SimulationSettings:
        sv, sim = self.servos, self.simulation
        return SimulationSettings(
            integration_rate=sim.integration_rate, record_rate=sim.record_rate,
            min_separation=sim.min_separation, truth_channels=sim.truth_channels,
            v0_loop_time=sv.v0_loop_time, amplitude_loop_time=sv.amplitude_loop_time,
            vac_limits=(sv.vac_min, sv.vac_max), vdc_limit=sv.vdc_limit,
            initial_vdc=sv.initial_vdc)

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def with_seed(self, seed):
        noise = dataclasses.replace(self.forces.noise, seed=int(seed))
        return self.replace(forces=dataclasses.replace(self.forces, noise=noise))

    def with_scans(self, n):
        return self.replace(protocol=dataclasses.replace(self.protocol, n_scans=int(n)))

    def noiseless(self):
        noise = dataclasses.replace(self.forces.noise, photodiode_white_noise_density=0.0)
        return self.replace(forces=dataclasses.replace(self.forces, noise=noise))


# --- JSON mapping ------------------------------------------------------------

_SECTIONS = {
    "cantilever": CantileverParams,
    "protocol": ScanProtocol,
    "servos": ServoSettings,
    "simulation": SimulationSection,
    "analysis": AnalysisSettings,
    "output": OutputSettings,
}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, "expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(key, "expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "expected a number")
        if not math.isfinite(value):
            raise ConfigError(key, "must be finite")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, "expected a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, "expected a string")
        return value
    return value


def _build(cls, data, where, base=None):
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}", "unknown key")
        kw[key] = _coerce(value, getattr(base, key), f"{where}.{key}")
    try:
        return dataclasses.replace(base, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from None


def _casimir_from_json(data, base_dir, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object or null")
    spec = dict(data)
    kind = spec.pop("kind", None)
    if kind == "lifshitz":
        try:
            return lifshitz.config_from_dict(spec, base_dir)
        except KeyError as exc:
            raise ConfigError(f"{where}.{exc.args[0]}", "unknown or invalid key") from None
        except (ValueError, TypeError, OSError) as exc:
            raise ConfigError(where, str(exc)) from None
    if kind == "theory_csv":
        extra = set(spec) - {"path"}
        if extra:
            raise ConfigError(f"{where}.{sorted(extra)[0]}", "unknown key")
        if "path" not in spec:
            raise ConfigError(f"{where}.path", "missing")
        p = Path(spec["path"])
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        try:
            return lifshitz.read_theory_csv(p)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{where}.path", str(exc)) from None
    raise ConfigError(f"{where}.kind", f"unknown kind {kind!r}")


def _forces_from_json(data, base_dir):
    where = "forces"
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    allowed = {"casimir", "sphere_radius", "residual_potential", "squeeze_film", "noise",
               "electrostatic"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}", "unknown key")
    d = ForceStack()
    kw = {}
    if "casimir" in data:
        kw["casimir"] = _casimir_from_json(data["casimir"], base_dir, "forces.casimir")
    if "sphere_radius" in data:
        kw["sphere_radius"] = _coerce(data["sphere_radius"], 1.0, "forces.sphere_radius")
    if "electrostatic" in data:
        kw["electrostatic"] = _coerce(data["electrostatic"], True, "forces.electrostatic")
    if "residual_potential" in data:
        kw["residual_potential"] = _build(ResidualPotential, data["residual_potential"],
                                          "forces.residual_potential")
    if "squeeze_film" in data:
        sq = data["squeeze_film"]
        kw["squeeze_film"] = None if sq is None else _build(SqueezeFilm, sq, "forces.squeeze_film")
    if "noise" in data:
        kw["noise"] = _build(NoiseModel, data["noise"], "forces.noise")
    try:
        return dataclasses.replace(d, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from None


def config_from_json(data: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    kw = {}
    for key, value in data.items():
        if key.startswith("_"):
            # annotation slots ("_comment") are ignored
            continue
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key == "interferometers":
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            sub = {}
            for name, body in value.items():
                if name not in ("ferrule", "barefiber"):
                    raise ConfigError(f"{key}.{name}", "unknown key")
                sub[name] = _build(InterferometerParams, body, f"{key}.{name}",
                                   getattr(Interferometers(), name))
            kw[key] = dataclasses.replace(Interferometers(), **sub)
        elif key == "lockins":
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            base = LockInSet()
            sub = {}
            for name, body in value.items():
                if name not in ("omega1", "two_omega1", "omega2"):
                    raise ConfigError(f"{key}.{name}", "unknown key")
                sub[name] = _build(LockInSettings, body, f"{key}.{name}", getattr(base, name))
                if not sub[name].rc_time > 0 or sub[name].filter_stages < 1:
                    raise ConfigError(f"{key}.{name}", "rc_time must be > 0, filter_stages >= 1")
            kw[key] = dataclasses.replace(base, **sub)
        elif key == "forces":
            kw[key] = _forces_from_json(value, base_dir)
        else:
            raise ConfigError(key, "unknown key")
    cfg = ExperimentConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    p = cfg.protocol
    if p.sampling_rate <= 10 * cfg.cantilever.resonance_frequency:
        raise ConfigError("protocol.sampling_rate", "must exceed 10 x resonance_frequency")
    ratio = cfg.simulation.integration_rate / p.sampling_rate
    if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("simulation.integration_rate",
                          "must be an integer multiple of protocol.sampling_rate")
    for name, rate in (("simulation.record_rate", cfg.simulation.record_rate),
                       ("analysis.decimation_rate", cfg.analysis.decimation_rate)):
        r = p.sampling_rate / rate
        if rate <= 0 or abs(r - round(r)) > 1e-9:
            raise ConfigError(name, "must divide protocol.sampling_rate")
    r = cfg.analysis.decimation_rate / cfg.simulation.record_rate
    if abs(r - round(r)) > 1e-9:
        raise ConfigError("analysis.decimation_rate", "must be a multiple of record_rate")
    if cfg.simulation.min_separation <= 0:
        raise ConfigError("simulation.min_separation", "must be > 0")
    lo, hi = cfg.analysis.residual_window if len(cfg.analysis.residual_window) == 2 else (1, 0)
    if not 0 < lo < hi:
        raise ConfigError("analysis.residual_window", "need [lo, hi] with 0 < lo < hi")
    if cfg.analysis.separation_from not in ("displacement", "signal"):
        raise ConfigError("analysis.separation_from", "must be 'displacement' or 'signal'")
    if cfg.servos.vac_min <= 0 or cfg.servos.vac_max <= cfg.servos.vac_min:
        raise ConfigError("servos.vac_min", "need 0 < vac_min < vac_max")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_json(data, base_dir=path.parent)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def config_to_json(cfg: ExperimentConfig) -> dict:
    """JSON form of a config; a tabulated theory curve is summarized, not embedded."""
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "forces":
            body = {k: _plain(getattr(val, k)) for k in
                    ("sphere_radius", "residual_potential", "squeeze_film", "noise",
                     "electrostatic")}
            cas = val.casimir
            if cas is None:
                body["casimir"] = None
            elif isinstance(cas, LifshitzConfig):
                body["casimir"] = {"kind": "lifshitz", **lifshitz.config_to_dict(cas)}
            else:
                body["casimir"] = {"kind": "theory_csv", "rows": len(cas.separations)}
            out[f.name] = body
        else:
            out[f.name] = _plain(val)
    return out


def shipped_config_path(name="reference.json") -> Path:
    return Path(str(resources.files("ferrule_casimir") / "data" / name))


def reference_config() -> ExperimentConfig:
    return load_config(shipped_config_path("reference.json"))
