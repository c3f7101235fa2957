"""Experiment configuration files.

Flat ``key = value`` text with four sections::

    [noise]     NoiseConfig fields
    [timing]    TimingConfig fields
    [run]       seed and run-control keys
    [schedule]  per-target cycle counts, e.g. ``Up = 2000000``

Every key is listed in :data:`KEY_DOCS` with its unit. The only value that may
come from the environment is the output directory (``ENSEMBLE_TELEPORT_OUT``).
"""

from __future__ import annotations

import configparser
import hashlib
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .protocol import SIX_TARGETS, TargetState
from .simulator import DecayLaw, NoiseConfig, TimingConfig

ENV_OUT = "ENSEMBLE_TELEPORT_OUT"
DEFAULT_OUT = "results"
SEED_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Parse or validation failure, located to a line when possible."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.message = message
        self.line = line
        self.source = source
        where = source or "<config>"
        prefix = f"{where}:{line}: " if line is not None else f"{where}: "
        super().__init__(prefix + message)


# (type tag, unit, description)
KEY_DOCS: dict[str, dict[str, tuple[str, str, str]]] = {
    "noise": {
        "eta_A": ("float", "probability", "retrieval efficiency of node A (photon 2 detected per stored excitation)"),
        "eta_B": ("float", "probability", "retrieval efficiency of node B (photon 4 detected per stored excitation)"),
        "P_A": ("float", "probability", "write-out detection probability per A trial"),
        "P_B": ("float", "probability", "write-out detection probability per B trial (at the Bell measurement)"),
        "p_pair_B": ("float", "probability", "B pair creation probability per write trial"),
        "fiber_transmission": ("float", "probability", "photon-3 transmission through the connecting fibre"),
        "residual_rotation": ("angles", "rad", "uncompensated fibre rotation Rz(a) Ry(b) Rz(c) on photon 3"),
        "rsp_rotation": ("angles", "rad", "misalignment Rz(a) Ry(b) Rz(c) of the photon-1 analysis (acts on the prepared state)"),
        "dark_count_prob": ("float", "probability", "dark count per detector per gate"),
        "background_prob": ("float", "probability", "background click per detector per gate"),
        "readout_noise_factor": ("float", "dimensionless", "read-out noise photon probability in units of the write probability"),
        "double_excitation_factor": ("float", "dimensionless", "double pair probability in units of p_pair_B^2"),
        "bsm_visibility": ("float", "dimensionless", "two-photon interference visibility at the Bell measurement"),
        "pair_visibility": ("float", "dimensionless", "coherence of the B photon-spinwave pair"),
        "p_b_includes_fiber": ("bool", "-", "true: P_B is quoted after the fibre; false: before it"),
        "inject_sigma_z": ("bool", "-", "debug: apply an extra sigma_z after feed-forward"),
    },
    "timing": {
        "cycle_rate": ("float", "Hz", "experimental cycle repetition rate"),
        "trap_duration": ("float", "ms", "trap loading per cycle"),
        "window_duration": ("float", "ms", "protocol window per cycle"),
        "trial_A": ("float", "us", "duration of one A write trial"),
        "trial_B": ("float", "ns", "duration of one B write trial"),
        "hold_A": ("float", "us", "storage of the A spinwave before read-out"),
        "hold_B": ("float", "us", "storage of the B spinwave between herald and read-out"),
        "lifetime_tau": ("float", "us", "memory lifetime"),
        "decay_law": ("decay", "-", "coherence decay: exp or gauss"),
    },
    "run": {
        "seed": ("seed", "-", "base seed, 0 .. 2^64-1 (required)"),
        "prep_cycles": ("int", "cycles", "cycles per target of the preparation check; 0 = same as the schedule"),
        "workers": ("int", "-", "simulator worker processes"),
        "bootstrap": ("int", "resamples", "Poisson bootstrap resamples for error bars; 0 = off"),
        "reference_P_A": ("float", "probability", "P_A of the preparation run used as fidelity reference; empty = P_A"),
        "records": ("bool", "-", "write herald records to trials.log"),
        "out": ("path", "-", "output directory"),
    },
    "schedule": {t.value: ("int", "cycles", f"cycles with target {t.value}") for t in SIX_TARGETS},
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    prep_cycles: int = 0
    workers: int = 1
    bootstrap: int = 0
    reference_P_A: float | None = None
    records: bool = True
    out: str | None = None

    def __post_init__(self):
        if not 0 <= self.seed <= SEED_MAX:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.prep_cycles < 0 or self.bootstrap < 0:
            raise ValueError("prep_cycles and bootstrap must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.bootstrap and self.bootstrap < 100:
            raise ValueError("bootstrap needs at least 100 resamples (or 0 to disable)")
        if self.reference_P_A is not None and not 0 <= self.reference_P_A <= 1:
            raise ValueError("reference_P_A must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    noise: NoiseConfig
    timing: TimingConfig
    schedule: dict[TargetState, int]
    run: RunConfig
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.schedule or not any(n > 0 for n in self.schedule.values()):
            raise ValueError("schedule is empty")
        if any(n < 0 for n in self.schedule.values()):
            raise ValueError("schedule counts must be non-negative")

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def targets(self) -> list[TargetState]:
        return [t for t in SIX_TARGETS if self.schedule.get(t, 0) > 0]

    @property
    def prep_schedule(self) -> dict[TargetState, int]:
        n = self.run.prep_cycles
        return {t: (n or self.schedule[t]) for t in self.targets}

    @property
    def reference_noise(self) -> NoiseConfig:
        if self.run.reference_P_A is None:
            return self.noise
        return replace(self.noise, P_A=self.run.reference_P_A)

    def with_cycles(self, n: int) -> "ExperimentConfig":
        if n <= 0:
            raise ValueError("--cycles must be positive")
        return replace(self, schedule={t: n for t in self.targets})

    def output_dir(self, override: str | os.PathLike | None = None) -> Path:
        return Path(override or os.environ.get(ENV_OUT) or self.run.out or DEFAULT_OUT)

    def to_text(self, include_execution: bool = True) -> str:
        return serialize(self, include_execution)

    @property
    def hash(self) -> str:
        """sha256 of the canonical text without the execution keys (they cannot change results)."""
        return hashlib.sha256(self.to_text(include_execution=False).encode()).hexdigest()


# ------------------------------------------------------------- value codecs


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_int(raw: str) -> int:
    v = float(raw) if re.fullmatch(r"[+-]?\d+(\.0*)?[eE][+]?\d+", raw) else None
    if v is not None:
        if v != int(v):
            raise ValueError(f"{raw!r} is not an integer")
        return int(v)
    return int(raw.replace("_", ""))


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{raw!r} is not a boolean")


def _parse_angles(raw: str) -> tuple[float, float, float]:
    parts = [p for p in re.split(r"[,\s]+", raw.strip()) if p]
    if len(parts) != 3:
        raise ValueError(f"expected three angles, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_seed(raw: str) -> int:
    v = int(raw, 0)
    if not 0 <= v <= SEED_MAX:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


_PARSERS = {
    "float": _parse_float,
    "int": _parse_int,
    "bool": _parse_bool,
    "angles": _parse_angles,
    "decay": lambda raw: DecayLaw(raw.lower()),
    "seed": _parse_seed,
    "path": str,
}


def format_value(kind: str, value) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "angles":
        return ", ".join(repr(float(a)) for a in value)
    if kind == "decay":
        return DecayLaw(value).value
    return str(value)


def parse_value(section: str, key: str, raw: str):
    kind = KEY_DOCS[section][key][0]
    if section == "run" and key == "reference_P_A" and raw.strip() == "":
        return None
    if raw.strip() == "":
        raise ValueError("empty value")
    return _PARSERS[kind](raw.strip())


# ------------------------------------------------------------- parsing


def _line_index(text: str) -> tuple[dict[str, int], dict[tuple[str, str], int]]:
    sections: dict[str, int] = {}
    keys: dict[tuple[str, str], int] = {}
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, i)
            continue
        if current is not None and ("=" in stripped or ":" in stripped):
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            keys.setdefault((current, key), i)
    return sections, keys


def _blame_line(message: str, section: str, sections, keys) -> int | None:
    """Line of the first key of ``section`` named in ``message``, else the section header."""
    named = sorted(
        (k for (s, k) in keys if s == section and re.search(rf"\b{re.escape(k)}\b", message)),
        key=len,
        reverse=True,
    )
    if named:
        return keys[(section, named[0])]
    return sections.get(section)


def parse_text(text: str, source: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", e.lineno, source) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(e.message.split(": ", 1)[-1], e.lineno, source) from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", lineno, source) from None

    sections, keys = _line_index(text)
    values: dict[str, dict[str, object]] = {s: {} for s in KEY_DOCS}
    for section in cp.sections():
        if section not in KEY_DOCS:
            raise ConfigError(f"unknown section [{section}]; expected one of {list(KEY_DOCS)}", sections.get(section), source)
        for key, raw in cp.items(section):
            line = keys.get((section, key))
            name = key
            if section == "schedule":
                try:
                    name = TargetState.from_label(key).value
                except ValueError as e:
                    raise ConfigError(str(e), line, source) from None
                if name in values["schedule"]:
                    raise ConfigError(f"target {name} scheduled twice", line, source)
            elif key not in KEY_DOCS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, source)
            try:
                values[section][name] = parse_value(section, name, raw)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}", line, source) from None

    if "seed" not in values["run"]:
        raise ConfigError("[run] seed is required (no wall-clock default)", sections.get("run"), source)

    built = {}
    for section, cls in (("noise", NoiseConfig), ("timing", TimingConfig), ("run", RunConfig)):
        try:
            built[section] = cls(**values[section])
        except ValueError as e:
            raise ConfigError(str(e), _blame_line(str(e), section, sections, keys), source) from None
    schedule = {TargetState(k): v for k, v in values["schedule"].items()}
    try:
        return ExperimentConfig(built["noise"], built["timing"], schedule, built["run"], source)
    except ValueError as e:
        raise ConfigError(str(e), sections.get("schedule"), source) from None


def load(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(p)) from None
    return parse_text(text, str(p))


# ------------------------------------------------------------- serialization


EXECUTION_KEYS = ("workers", "out")


def serialize(cfg: ExperimentConfig, include_execution: bool = True) -> str:
    """Canonical text: every documented key, fixed order, exact float repr."""
    lines = []
    for section, obj in (("noise", cfg.noise), ("timing", cfg.timing)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {format_value(KEY_DOCS[section][f.name][0], getattr(obj, f.name))}")
        lines.append("")
    lines.append("[run]")
    for f in fields(RunConfig):
        v = getattr(cfg.run, f.name)
        if v is None or (f.name in EXECUTION_KEYS and not include_execution):
            continue
        lines.append(f"{f.name} = {format_value(KEY_DOCS['run'][f.name][0], v)}")
    lines.append("")
    lines.append("[schedule]")
    for t in SIX_TARGETS:
        if t in cfg.schedule:
            lines.append(f"{t.value} = {cfg.schedule[t]}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- overrides


def resolve_key(name: str) -> tuple[str, str]:
    """``section.key`` or a bare key that is unique across sections."""
    if "." in name:
        section, key = name.split(".", 1)
        if section in KEY_DOCS and key in KEY_DOCS[section]:
            return section, key
        raise KeyError(f"unknown config key {name!r}")
    hits = [(s, k) for s, ks in KEY_DOCS.items() for k in ks if k == name]
    if len(hits) != 1:
        raise KeyError(f"unknown config key {name!r}" if not hits else f"ambiguous key {name!r}; use section.key")
    return hits[0]


def with_value(cfg: ExperimentConfig, name: str, value) -> ExperimentConfig:
    section, key = resolve_key(name)
    if isinstance(value, str):
        value = parse_value(section, key, value)
    if section == "noise":
        return replace(cfg, noise=replace(cfg.noise, **{key: value}))
    if section == "timing":
        return replace(cfg, timing=replace(cfg.timing, **{key: value}))
    if section == "run":
        return replace(cfg, run=replace(cfg.run, **{key: value}))
    schedule = dict(cfg.schedule)
    schedule[TargetState(key)] = int(value)
    return replace(cfg, schedule=schedule)


def documented_keys() -> list[str]:
    return [f"{s}.{k}" for s, ks in KEY_DOCS.items() for k in ks]
