"""Run configuration: a sectioned key = value text file mapped onto the
parameter dataclasses of each module.

Every section corresponds to one dataclass; keys are its field names. Unknown
sections or keys are rejected, and each section is validated by constructing
its dataclass before any computation starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional

from .descriptors import CfogParams, HogParams, LssParams, SurfParams
from .evaluation import RADIOMETRIC, SCENES
from .imagecore import ParameterError
from .matching import HarrisParams
from .registration import TERM_COUNTS
from .similarity import MatchConfig

RASTER_FORMATS = ("png", "pgm")
BENCH_SUITES = ("quick", "paper")


@dataclass(frozen=True)
class RegistrationParams:
    order: int = 3
    rmse_threshold: float = 3.5
    min_cps: Optional[int] = None
    fill: float = 0.0

    def __post_init__(self):
        if self.order not in TERM_COUNTS:
            raise ParameterError(f"registration.order must be 1, 2 or 3, got {self.order}")
        if not self.rmse_threshold > 0:
            raise ParameterError(f"registration.rmse_threshold must be > 0, got {self.rmse_threshold}")
        if self.min_cps is not None and self.min_cps < TERM_COUNTS[self.order]:
            raise ParameterError(f"registration.min_cps must be >= {TERM_COUNTS[self.order]} "
                                 f"for order {self.order}")
        if not 0.0 <= self.fill <= 1.0:
            raise ParameterError("registration.fill must lie in [0, 1]")


@dataclass(frozen=True)
class OutputParams:
    directory: str = "out"
    prefix: str = "run"
    raster_format: str = "png"
    bits: int = 8

    def __post_init__(self):
        if not self.prefix or "/" in self.prefix:
            raise ParameterError("output.prefix must be a non-empty file name stem")
        if self.raster_format not in RASTER_FORMATS:
            raise ParameterError(f"output.raster_format must be one of {RASTER_FORMATS}")
        if self.bits not in (8, 16):
            raise ParameterError("output.bits must be 8 or 16")


@dataclass(frozen=True)
class RunParams:
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.jobs < 1:
            raise ParameterError(f"run.jobs must be >= 1, got {self.jobs}")
        if self.seed < 0:
            raise ParameterError("run.seed must be >= 0")


@dataclass(frozen=True)
class BenchParams:
    suite: str = "quick"
    size: int = 256
    count: int = 0  # 0: the suite's own pair count
    scenes: str = "shapes,filtered-noise"
    radiometric: str = "inversion,gamma,quantize,region-remap"
    max_shift: int = 5

    def __post_init__(self):
        if self.suite not in BENCH_SUITES:
            raise ParameterError(f"bench.suite must be one of {BENCH_SUITES}")
        if self.size < 128:
            raise ParameterError("bench.size must be >= 128")
        if self.count < 0:
            raise ParameterError("bench.count must be >= 0")
        if self.max_shift < 0:
            raise ParameterError("bench.max_shift must be >= 0")
        bad = [s for s in self.scene_list if s not in SCENES or s == "loaded"]
        if bad or not self.scene_list:
            raise ParameterError(f"bench.scenes: unknown or unusable {bad}; choose from "
                                 f"{[s for s in SCENES if s != 'loaded']}")
        bad = [r for r in self.radiometric_list if r not in RADIOMETRIC]
        if bad or not self.radiometric_list:
            raise ParameterError(f"bench.radiometric: unknown {bad}; choose from {list(RADIOMETRIC)}")

    @property
    def scene_list(self):
        return tuple(s.strip() for s in self.scenes.split(",") if s.strip())

    @property
    def radiometric_list(self):
        return tuple(r.strip() for r in self.radiometric.split(",") if r.strip())


# Register defaults follow the system experiment: an 80 px template (odd 81 here)
# and a search window of 80 px measured as the move range of the template
# centre, i.e. a peak-offset radius of 40. An ENVI-style "search window" of the
# same run would be 2 * 40 + 81 = 161 px. About 900 interest points: 15 x 15 chips x 4.
@dataclass(frozen=True)
class RunConfig:
    match: MatchConfig = MatchConfig(template_size=81, search_radius=40, measure="CFOG")
    harris: HarrisParams = HarrisParams(grid_n=15, k_per_chip=4)
    cfog: CfogParams = CfogParams()
    hog: HogParams = HogParams()
    lss: LssParams = LssParams()
    surf: SurfParams = SurfParams()
    registration: RegistrationParams = RegistrationParams()
    output: OutputParams = OutputParams()
    run: RunParams = RunParams()
    bench: BenchParams = BenchParams()

    def descriptor_params(self, measure: Optional[str] = None):
        measure = (measure or self.match.measure).upper()
        return {"CFOG": self.cfog, "FHOG": self.hog, "FLSS": self.lss, "FSURF": self.surf}.get(measure)

    def to_text(self) -> str:
        return format_config(self)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _section_fields(obj) -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj) if f.init}


def _parse_value(section: str, key: str, raw: str, current, optional: bool = False):
    text = raw.strip()
    where = f"{section}.{key}"
    if optional and text.lower() in ("", "auto", "none"):
        return None
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if current is None or isinstance(current, int):
            # only Optional[int] fields can hold None
            return int(text)
        if isinstance(current, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        kind = "boolean" if isinstance(current, bool) else type(current).__name__ if current is not None else "int"
        raise ParameterError(f"{where}: cannot parse {raw!r} as {kind}") from None


def _apply(base: RunConfig, values: Dict[str, Dict[str, str]]) -> RunConfig:
    updates = {}
    for section, items in values.items():
        if section not in SECTIONS:
            raise ParameterError(f"unknown config section [{section}]; known: {', '.join(SECTIONS)}")
        current = getattr(base, section)
        known = _section_fields(current)
        kwargs = {}
        for key, raw in items.items():
            if key not in known:
                raise ParameterError(f"unknown key {section}.{key}; known: {', '.join(sorted(known))}")
            optional = str(known[key].type).startswith("Optional")
            kwargs[key] = _parse_value(section, key, raw, getattr(current, key), optional)
        if kwargs:
            try:
                updates[section] = dataclasses.replace(current, **kwargs)
            except ParameterError as exc:
                raise ParameterError(f"[{section}] {exc}") from None
    return dataclasses.replace(base, **updates)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Dict[str, str]]:
    """``section.key=value`` strings into nested dicts."""
    out: Dict[str, Dict[str, str]] = {}
    for item in pairs:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or not section or not key:
            raise ParameterError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[key] = value
    return out


def load_config(path=None, overrides: Iterable[str] = (), base: RunConfig = RunConfig()) -> RunConfig:
    """Read ``path`` (if given) over ``base``, then apply ``section.key=value`` overrides."""
    cfg = base
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ParameterError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ParameterError(f"{path}: {exc}") from None
        cfg = _apply(cfg, {s: dict(parser.items(s)) for s in parser.sections()})
    return _apply(cfg, parse_overrides(overrides))


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    """Resolved configuration in the same format ``load_config`` reads."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for name in _section_fields(obj):
            lines.append(f"{name} = {_format_value(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)
