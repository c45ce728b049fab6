"""Scenario files: a YAML key tree describing one simulation/analysis setup.

Schema (all frequencies and linewidths in Hz, converted to rad/s at load)::

    membrane:      {mass [kg], omega_m [Hz], gamma_m [Hz], t_bath [K]}
    detection:     {s_xn [m^2/Hz]}
    feedback:      {gain_v, phase_eff [rad, default pi/2]}
    atoms:         {n_atoms, omega_a [Hz], gamma_a [Hz], reflectivity, finesse,
                    mass_atom [kg, default Rb-87]}                      (optional)
    decay:         {n0, tau [s]}                                        (optional)
    schedule:      list of {t [s], g_v, g_s} breakpoints                 (optional)
    sim:           {sample_rate [Hz], duration [s], seed, scheme, feedback_mode,
                    coupling_mode, bandlimit_factor, delay_samples, initial,
                    atom_temperature [K], t_start [s]}
    analysis:      {t_settle [s], zero_span_bandwidth [Hz], time_resolution [s],
                    segment_time [s], runs, export_stride, rbw_fraction} (optional)
    annotations:   free-form string map                                (optional)

``analysis.runs`` independent runs are averaged for the zero-span trace;
``export_stride`` thins the exported trajectory; ``rbw_fraction`` sets the
spectral resolution relative to the effective linewidth (default 0.2).

``schedule`` switches the run to a staged sequence: from each breakpoint the
feedback gain is ``g_v`` and the sympathetic damping ``g_s * gamma_m``.
Without a schedule, an ``effective-damping`` run takes its sympathetic rate
from the ``atoms`` block.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .model import (M_RB87, AtomCouplingParams, AtomDecayModel, DetectionParams, FeedbackParams,
                    MembraneParams)
from .sim import SimConfig

TWO_PI = 2 * math.pi

_SECTIONS = {
    "membrane": {"mass", "omega_m", "gamma_m", "t_bath"},
    "detection": {"s_xn"},
    "feedback": {"gain_v", "phase_eff"},
    "atoms": {"n_atoms", "omega_a", "gamma_a", "reflectivity", "finesse", "mass_atom"},
    "decay": {"n0", "tau"},
    "sim": {f.name for f in fields(SimConfig)} | {"t_start"},
    "analysis": {"t_settle", "zero_span_bandwidth", "time_resolution", "segment_time", "runs",
                 "export_stride", "rbw_fraction"},
}
_REQUIRED = ("membrane", "detection", "sim")
_HZ_KEYS = {("membrane", "omega_m"), ("membrane", "gamma_m"),
            ("atoms", "omega_a"), ("atoms", "gamma_a")}
_STRING_KEYS = {("sim", "scheme"), ("sim", "feedback_mode"), ("sim", "coupling_mode"),
                ("sim", "initial")}
_INT_KEYS = {("sim", "seed"), ("sim", "delay_samples"), ("analysis", "runs"),
             ("analysis", "export_stride")}


class ScenarioError(ValueError):
    """Invalid or unreadable scenario."""


@dataclass(frozen=True)
class Scenario:
    """A validated scenario with rates already in rad/s."""

    membrane: MembraneParams
    detection: DetectionParams
    feedback: FeedbackParams
    sim: SimConfig
    atoms: AtomCouplingParams | None = None
    decay: AtomDecayModel | None = None
    schedule: tuple = ()
    t_start: float = 0.0
    analysis: dict = field(default_factory=dict)
    annotations: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)
    sha256: str = ""

    @property
    def short_hash(self):
        return self.sha256[:12]

    def with_value(self, key, value):
        """Copy with the dotted ``key`` (file units) set to ``value``."""
        raw = copy.deepcopy(self.raw)
        set_dotted(raw, key, value)
        return scenario_from_dict(raw)

    def with_seed(self, seed):
        return self.with_value("sim.seed", int(seed))


def _number(section, key, value):
    if isinstance(value, bool):
        raise ScenarioError(f"{section}.{key}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        out = value
    elif isinstance(value, str):
        # YAML 1.1 reads forms like 1e-26 as strings
        try:
            out = float(value)
        except ValueError:
            raise ScenarioError(f"{section}.{key}: expected a number, got {value!r}") from None
    else:
        raise ScenarioError(f"{section}.{key}: expected a number, got {value!r}")
    if (section, key) in _INT_KEYS:
        if float(out) != int(out):
            raise ScenarioError(f"{section}.{key}: expected an integer, got {value!r}")
        return int(out)
    out = float(out)
    if not math.isfinite(out):
        raise ScenarioError(f"{section}.{key}: must be finite")
    return out


def _section(raw, name):
    sec = raw.get(name)
    if sec is None:
        return None
    if not isinstance(sec, dict):
        raise ScenarioError(f"section {name!r} must be a mapping")
    unknown = set(sec) - _SECTIONS[name]
    if unknown:
        raise ScenarioError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    out = {}
    for k, v in sec.items():
        if (name, k) in _STRING_KEYS:
            out[k] = str(v).strip().lower()
        else:
            out[k] = _number(name, k, v)
            if (name, k) in _HZ_KEYS:
                out[k] *= TWO_PI
    return out


def _build(cls, name, kwargs):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ScenarioError(f"{name}: {exc}") from None
    except ValueError as exc:
        raise ScenarioError(f"{name}: {exc}") from None


def scenario_from_dict(raw, sha256=None):
    """Validate a parsed key tree and build a :class:`Scenario`."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping at top level")
    allowed = set(_SECTIONS) | {"schedule", "annotations"}
    unknown = set(raw) - allowed
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for name in _REQUIRED:
        if name not in raw:
            raise ScenarioError(f"missing required section {name!r}")

    mem = _build(MembraneParams, "membrane", _section(raw, "membrane"))
    det = _build(DetectionParams, "detection", _section(raw, "detection"))
    fb = _build(FeedbackParams, "feedback", _section(raw, "feedback") or {"gain_v": 0.0})
    sim_kw = _section(raw, "sim")
    t_start = float(sim_kw.pop("t_start", 0.0))
    if "scheme" in sim_kw:
        sim_kw["scheme"] = sim_kw["scheme"].replace("_", "-")
    sim = _build(SimConfig, "sim", sim_kw)
    atoms_kw = _section(raw, "atoms")
    atoms = None
    if atoms_kw is not None:
        atoms_kw.setdefault("mass_atom", M_RB87)
        atoms = _build(AtomCouplingParams, "atoms", atoms_kw)
    decay_kw = _section(raw, "decay")
    decay = _build(AtomDecayModel, "decay", decay_kw) if decay_kw is not None else None
    analysis = _section(raw, "analysis") or {}
    for key in ("runs", "export_stride"):
        if analysis.get(key, 1) < 1:
            raise ScenarioError(f"analysis.{key} must be >= 1")
    for key in ("zero_span_bandwidth", "time_resolution", "segment_time", "rbw_fraction"):
        if key in analysis and not analysis[key] > 0:
            raise ScenarioError(f"analysis.{key} must be > 0")

    schedule = []
    for i, entry in enumerate(raw.get("schedule") or []):
        if not isinstance(entry, dict) or "t" not in entry:
            raise ScenarioError(f"schedule[{i}] must be a mapping with a 't' key")
        extra = set(entry) - {"t", "g_v", "g_s"}
        if extra:
            raise ScenarioError(f"schedule[{i}]: unknown key(s) {', '.join(sorted(extra))}")
        t = _number("schedule", "t", entry["t"])
        g_v = _number("schedule", "g_v", entry.get("g_v", fb.gain_v))
        g_s = _number("schedule", "g_s", entry.get("g_s", 0.0))
        if g_v < 0 or g_s < 0:
            raise ScenarioError(f"schedule[{i}]: gains must be >= 0")
        schedule.append((t, g_v, g_s))
    schedule.sort()
    if any(g_s > 0 for _, _, g_s in schedule) and sim.coupling_mode != "effective-damping":
        raise ScenarioError("schedule with g_s > 0 needs sim.coupling_mode: effective-damping")
    if sim.coupling_mode == "two-oscillator" and atoms is None:
        raise ScenarioError("two-oscillator coupling needs an atoms section")
    if sim.coupling_mode == "effective-damping" and atoms is None and not schedule:
        raise ScenarioError("effective-damping needs an atoms section or a schedule")
    omega_max = mem.omega_m if atoms is None else max(mem.omega_m, atoms.omega_a)
    try:
        sim.check_resolves(omega_max)
    except ValueError as exc:
        raise ScenarioError(f"sim: {exc}") from None

    annotations = {str(k): str(v) for k, v in (raw.get("annotations") or {}).items()}
    if sha256 is None:
        sha256 = hashlib.sha256(json.dumps(raw, sort_keys=True, default=str).encode()).hexdigest()
    return Scenario(mem, det, fb, sim, atoms, decay, tuple(schedule), t_start, analysis,
                    annotations, copy.deepcopy(raw), sha256)


def load_scenario(path):
    """Read and validate a scenario file.

    Raises
    ------
    ScenarioError
        Missing file, YAML syntax error or schema violation.
    """
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: invalid YAML: {exc}") from None
    return scenario_from_dict(raw, hashlib.sha256(text).hexdigest())


def bundled_scenario_path(name):
    """Path of a scenario shipped with the package (``thermal``, ``feedback_step``, ...)."""
    fname = name if name.endswith(".scenario") else f"{name}.scenario"
    ref = resources.files("optocool") / "scenarios" / fname
    if not ref.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return Path(str(ref))


def load_bundled(name):
    return load_scenario(bundled_scenario_path(name))


def set_dotted(raw, key, value):
    """Set ``section.field`` in a raw key tree; the field must already be numeric-capable."""
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ScenarioError(f"bad key {key!r}: expected section.field")
    section, name = parts
    if name not in _SECTIONS[section] or (section, name) in _STRING_KEYS:
        raise ScenarioError(f"bad key {key!r}: not a numeric field")
    if section not in raw or raw[section] is None:
        if section in _REQUIRED:
            raise ScenarioError(f"bad key {key!r}: section missing")
        raise ScenarioError(f"bad key {key!r}: scenario has no {section} section")
    raw[section][name] = value
