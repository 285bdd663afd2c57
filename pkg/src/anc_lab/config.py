"""Pipeline configuration: typed sections, YAML I/O, environment overrides.

Every section is a dataclass; :func:`from_dict` walks the type hints and
reports the dotted path of the first offending field.  ``ANC_LAB_SEED``
and ``ANC_LAB_THREADS`` set the top-level fields; any other
``ANC_LAB_A__B=value`` sets ``a.b`` (value parsed as YAML).
"""

from __future__ import annotations

import dataclasses
import math
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataset import DatasetConfig, MotionSpec, RoomConfig, SplitConfig
from .errors import ConfigError

ENV_PREFIX = "ANC_LAB_"
BUNDLED = Path(__file__).with_name("configs")


@dataclass
class SignalConfig:
    sample_rate: int = 16000
    n_refs: int = 4
    filter_length: int = 1024
    secondary_length: int = 256
    primary_length: int = 1024
    nfft: int = 1024
    hop: int = 125
    frame_seconds: float = 0.5
    n_context: int = 4

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_seconds * self.sample_rate))

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1

    @property
    def stft_frames(self) -> int:
        return math.ceil(self.frame_samples / self.hop)

    @property
    def input_seconds(self) -> float:
        return self.n_context * self.frame_seconds


# fields the implementation hardwires; anything else is rejected up front
_FIXED_SIGNAL = dict(sample_rate=16000, n_refs=4, nfft=1024, hop=125, frame_seconds=0.5, n_context=4,
                     primary_length=1024, secondary_length=256)


@dataclass
class GridConfig:
    n_directions: int = 36
    resolution: float = 10.0


@dataclass
class PlantConfig:
    dimensions: tuple[float, float, float] = (11.0, 9.0, 3.2)
    rt60: float = 0.48
    array_center: tuple[float, float, float] = (6.0, 4.0, 2.2)
    secondary_source: tuple[float, float, float] = (4.8, 4.0, 2.2)
    error_mic: tuple[float, float, float] = (4.6, 4.0, 2.2)
    radius: float = 0.4


@dataclass
class FilterConfig:
    duration: float = 30.0
    safety: float = 0.1


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    dtype: str = "float32"
    cosine: bool = True
    patience: int | None = None
    time_budget_s: float | None = None


@dataclass
class ScenarioConfig:
    """Source motion in wall-clock units: degrees, seconds, radians.

    ``constant-rate``: ``initial_doa + angular_velocity * t``.
    ``time-varying-rate``: ``initial_doa + amplitude * sin(2 pi t / period + phase)``.
    """

    name: str
    mode: str = "constant-rate"
    initial_doa: float = 0.0
    angular_velocity: float = 0.0  # deg/s
    amplitude: float = 0.0
    period: float = 20.0
    phase: float = 0.0
    duration: float = 20.0
    snr_db: float = 30.0
    seed: int = 0
    noise_cutoff: float = 2000.0
    source_peak: float | None = 1.0  # full-scale source, like a recording; None keeps unit variance

    def motion(self, frame_seconds: float = 0.5) -> MotionSpec:
        """Frame-indexed law; frame ``k`` is centred at ``(k + 1/2) * frame_seconds``."""
        n = int(round(self.duration / frame_seconds))
        half = 0.5 * frame_seconds
        if self.mode == "static":
            return MotionSpec("static", self.initial_doa, n_context=n)
        if self.mode == "constant-rate":
            return MotionSpec("constant-rate", self.initial_doa + self.angular_velocity * half,
                              angular_velocity=self.angular_velocity * frame_seconds, n_context=n)
        return MotionSpec(
            "time-varying-rate",
            self.initial_doa,
            amplitude=self.amplitude,
            phase=self.phase + 2 * math.pi * half / self.period,
            cycles=n * frame_seconds / self.period,
            n_context=n,
        )


@dataclass
class SimulateConfig:
    methods: list[str] = field(default_factory=lambda: ["pd", "dsfanc", "fxlms", "oracle"])
    mu: float = 1e-2
    crossfade: int = 256
    truth_doa: bool = False
    inference_budget_s: float | None = None
    plots: bool = False


METHODS = ("pd", "dsfanc", "fxlms", "oracle")


def scenario_presets() -> dict[str, ScenarioConfig]:
    """Moving-source test cases in the (11, 9, 3.2) m room (plant defaults)."""
    return {
        "fig4": ScenarioConfig("fig4", "constant-rate", initial_doa=0.0, angular_velocity=10.0),
        # 50 deg at t=0, 150 deg at t=10 s, back to 50 deg at 20 s
        "fig5": ScenarioConfig("fig5", "time-varying-rate", initial_doa=100.0, amplitude=50.0,
                               period=20.0, phase=-math.pi / 2),
    }


def _default_dataset() -> DatasetConfig:
    return DatasetConfig(
        rooms=[
            RoomConfig("R1", (6.0, 4.0, 3.0), [0.2, 0.3], n_positions=2),
            RoomConfig("T1", (7.0, 5.0, 3.0), [0.25], n_positions=1),
        ],
        train=SplitConfig(["R1"], 3000, snrs=[20.0, 30.0]),
        val=SplitConfig(["R1"], 300, snrs=[20.0, 30.0]),
        test=SplitConfig(["T1"], 300, snrs=[10.0, 20.0, 30.0]),
    )


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int | None = None
    output_dir: str = "anc_lab_run"
    signal: SignalConfig = field(default_factory=SignalConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    dataset: DatasetConfig = field(default_factory=_default_dataset)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    scenarios: list[ScenarioConfig] = field(default_factory=lambda: list(scenario_presets().values()))
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def validate(self) -> "PipelineConfig":
        for k, v in _FIXED_SIGNAL.items():
            if getattr(self.signal, k) != v:
                raise ConfigError(f"only {v} is supported", f"signal.{k}")
        if self.signal.filter_length <= 0:
            raise ConfigError("must be positive", "signal.filter_length")
        if self.grid.n_directions != 36 or abs(self.grid.resolution - 10.0) > 1e-12:
            raise ConfigError("the class grid is fixed at 36 x 10 deg", "grid")
        if self.plant.rt60 <= 0:
            raise ConfigError("must be positive", "plant.rt60")
        if len(self.plant.dimensions) != 3 or min(self.plant.dimensions) <= 0:
            raise ConfigError("needs three positive lengths", "plant.dimensions")
        for name in ("array_center", "secondary_source", "error_mic"):
            p = getattr(self.plant, name)
            if not all(0 < c < d for c, d in zip(p, self.plant.dimensions)):
                raise ConfigError("position outside the room", f"plant.{name}")
        if self.filters.duration <= 0 or not 0 < self.filters.safety <= 1:
            raise ConfigError("duration > 0 and 0 < safety <= 1 required", "filters")
        if self.training.epochs < 1 or self.training.batch_size < 1 or self.training.lr < 0:
            raise ConfigError("epochs, batch_size >= 1 and lr >= 0 required", "training")
        if self.training.dtype not in ("float32", "float64"):
            raise ConfigError("float32 or float64", "training.dtype")
        names = set()
        for i, sc in enumerate(self.scenarios):
            path = f"scenarios[{i}]"
            if sc.name in names:
                raise ConfigError(f"duplicate scenario name {sc.name!r}", f"{path}.name")
            names.add(sc.name)
            if sc.mode not in ("static", "constant-rate", "time-varying-rate"):
                raise ConfigError(f"unknown mode {sc.mode!r}", f"{path}.mode")
            frames = sc.duration / self.signal.frame_seconds
            if sc.duration <= 0 or abs(frames - round(frames)) > 1e-9:
                raise ConfigError("duration must be a positive multiple of the 0.5 s frame", f"{path}.duration")
            if sc.source_peak is not None and sc.source_peak <= 0:
                raise ConfigError("must be positive", f"{path}.source_peak")
            if sc.mode == "time-varying-rate" and sc.period <= 0:
                raise ConfigError("must be positive", f"{path}.period")
        for i, m in enumerate(self.simulate.methods):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}", f"simulate.methods[{i}]")
        if self.simulate.mu < 0:
            raise ConfigError("must be >= 0", "simulate.mu")
        if self.simulate.crossfade < 0 or self.simulate.crossfade > self.signal.frame_samples:
            raise ConfigError("must lie in [0, frame length]", "simulate.crossfade")
        try:
            self.dataset.validate()
        except ConfigError as exc:
            msg = str(exc)[len(exc.path) + 2:] if exc.path else str(exc)
            raise ConfigError(msg, f"dataset.{exc.path}") from None
        return self

    def scenario(self, name: str) -> ScenarioConfig:
        for sc in self.scenarios:
            if sc.name == name:
                return sc
        presets = scenario_presets()
        if name in presets:
            return presets[name]
        raise ConfigError(f"no scenario named {name!r}", "scenarios")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def section_dict(self, *names) -> dict:
        d = self.to_dict()
        return {n: d[n] for n in names}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _fail(path, msg):
    raise ConfigError(msg, path or "<root>")


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            if type(None) in args:
                return None
            _fail(path, "must not be null")
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _convert(a, value, path)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            _fail(path, f"expected a list, got {type(value).__name__}")
        if origin is list:
            return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            _fail(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            _fail(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from plain data; unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        _fail(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            _fail(f"{path}.{k}" if path else k, "unknown field")
    kwargs = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            _fail(sub, "required field missing")
    return cls(**kwargs)


def _set_path(d: dict, dotted: list[str], value):
    for key in dotted[:-1]:
        d = d.setdefault(key, {})
        if not isinstance(d, dict):
            raise ConfigError("cannot override inside a non-mapping", ".".join(dotted))
    d[dotted[-1]] = value


def apply_env(data: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    data = dict(data)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = yaml.safe_load(environ[key])
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparsable value for {key}: {exc}", ".".join(dotted)) from None
        # nested sections must be copied before mutation
        if len(dotted) > 1 and isinstance(data.get(dotted[0]), dict):
            data[dotted[0]] = _deepcopy(data[dotted[0]])
        _set_path(data, dotted, value)
    return data


def _deepcopy(x):
    if isinstance(x, dict):
        return {k: _deepcopy(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_deepcopy(v) for v in x]
    return x


def parse_config(text: str, environ=None) -> PipelineConfig:
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", "<root>") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    data = apply_env(data, environ)
    base = PipelineConfig().to_dict()
    merged = _merge(base, data)
    return from_dict(PipelineConfig, merged).validate()


def _merge(base, over):
    if not isinstance(over, dict):
        return over
    if not isinstance(base, dict):
        return over
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base.get(k), v) if isinstance(v, dict) else v
    return out


def load_config(path=None, environ=None) -> PipelineConfig:
    """Read a YAML file (``None`` = built-in defaults) and apply env overrides."""
    if path is None:
        return parse_config("", environ)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found", "<file>")
    return parse_config(p.read_text(), environ)


def bundled_config(name: str = "desk") -> Path:
    return BUNDLED / f"{name}.yaml"
