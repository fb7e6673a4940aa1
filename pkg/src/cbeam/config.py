"""Experiment configuration files.

The format is INI-like: ``[section]`` headers followed by ``key = value``
lines, ``#`` comments.  Every key is optional; an empty file yields the
full-scale defaults (64 elements, 120 beams over 60 degrees, T = 207 us,
50 MHz sampling, L = 25, K = 100, rho = 0.95).  Units are SI except angles,
which are in degrees.  See README.md for the full key list.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MODES = ("reference", "exact", "approx")


class ConfigError(ValueError):
    """Base class for configuration problems (CLI exit code 2)."""


class ConfigNotFoundError(ConfigError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConfigValueError(ConfigError):
    """A value could not be converted to the key's type."""


class ConfigValidationError(ConfigError):
    """One or more constraints are violated; ``problems`` lists every one."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class GeometryConfig:
    elements: int = 64
    pitch: float = 3.08e-4  # half a wavelength at the 2.5 MHz probe center frequency
    sound_speed: float = 1540.0


@dataclass(frozen=True)
class ScanConfig:
    beams: int = 120
    sector_deg: float = 60.0
    profile_sigma_deg: float | None = None


@dataclass(frozen=True)
class AcquisitionConfig:
    duration: float = 207e-6
    sample_rate: float = 50e6


@dataclass(frozen=True)
class PulseConfig:
    center_frequency: float = 3.4e6
    bandwidth: float = 2e6
    amplitude: float = 1.0


@dataclass(frozen=True)
class GridConfig:
    size: int = 1662


@dataclass(frozen=True)
class SparsityConfig:
    L: int = 25
    oversampling: int = 2
    K: int | None = None

    @property
    def n_fourier(self):
        return self.K if self.K is not None else 2 * self.oversampling * self.L


@dataclass(frozen=True)
class TruncationConfig:
    rho: float = 0.95
    n_max: int = 256
    oversample: int = 8


@dataclass(frozen=True)
class RecoveryConfig:
    residual_tol: float = 1e-6
    real_amplitudes: bool = False
    refine_radius: int = 2
    smooth: bool = True
    discrepancy: float | None = 1.2


DEFAULT_SCATTERERS = "0.030 -15 1.0; 0.055 -6 0.8; 0.080 0 1.0; 0.105 9 0.7; 0.130 20 0.9"


@dataclass(frozen=True)
class PhantomConfig:
    file: str | None = None
    scatterers: str = DEFAULT_SCATTERERS
    speckle_density: float = 0.0
    speckle_sigma: float = 0.05
    snr_db: float = 20.0
    noise_sigma: float | None = None
    spreading: bool = False


@dataclass(frozen=True)
class RenderConfig:
    dynamic_range_db: float = 40.0
    width: int = 512
    height: int = 512
    format: str = "pgm"


@dataclass(frozen=True)
class RunConfig:
    mode: str = "exact"
    seed: int = 0
    out: str = "out"
    threads: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    pulse: PulseConfig = field(default_factory=PulseConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def override(self, **sections):
        """Copy with some keys replaced, e.g. ``override(scan={"beams": 16})``."""
        changes = {}
        for name, updates in sections.items():
            changes[name] = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **changes)

    def problems(self):
        """Every violated constraint, as ``"section.key: message"`` strings."""
        out = []

        def need(cond, key, msg):
            if not cond:
                out.append(f"{key}: {msg}")

        g, s, a, p = self.geometry, self.scan, self.acquisition, self.pulse
        need(g.elements >= 1, "geometry.elements", "must be at least 1")
        need(g.pitch > 0, "geometry.pitch", "must be positive")
        need(g.sound_speed > 0, "geometry.sound_speed", "must be positive")
        need(s.beams >= 1, "scan.beams", "must be at least 1")
        need(0 < s.sector_deg < 180, "scan.sector_deg", "must lie in (0, 180)")
        need(s.profile_sigma_deg is None or s.profile_sigma_deg > 0, "scan.profile_sigma_deg", "must be positive")
        need(a.duration > 0, "acquisition.duration", "must be positive")
        need(a.sample_rate > 0, "acquisition.sample_rate", "must be positive")
        need(a.duration * a.sample_rate >= 1, "acquisition", "window holds no samples")
        need(p.center_frequency > 0, "pulse.center_frequency", "must be positive")
        need(p.bandwidth > 0, "pulse.bandwidth", "must be positive")
        need(p.amplitude != 0, "pulse.amplitude", "must be non-zero")
        need(
            p.center_frequency + p.bandwidth < a.sample_rate / 2,
            "pulse.center_frequency",
            "pulse band exceeds the Nyquist limit of the sample rate",
        )
        need(self.grid.size >= 1, "grid.size", "must be at least 1")
        sp = self.sparsity
        need(sp.L >= 1, "sparsity.L", "must be at least 1")
        need(sp.oversampling >= 1, "sparsity.oversampling", "must be at least 1")
        K = sp.n_fourier
        if sp.K is not None:
            need(
                sp.K == 2 * sp.oversampling * sp.L,
                "sparsity.K",
                f"K = {sp.K} is inconsistent with 2 * oversampling * L = {2 * sp.oversampling * sp.L}",
            )
        need(K >= 2 * sp.L, "sparsity.K", f"K = {K} must be at least 2L = {2 * sp.L}")
        need(sp.L <= self.grid.size, "sparsity.L", "must not exceed grid.size")
        t = self.truncation
        need(0 < t.rho < 1, "truncation.rho", "must lie strictly between 0 and 1")
        need(t.n_max >= 1, "truncation.n_max", "must be at least 1")
        need(t.oversample >= 4, "truncation.oversample", "must be at least 4")
        need(self.recovery.residual_tol >= 0, "recovery.residual_tol", "must be non-negative")
        need(self.recovery.refine_radius >= 0, "recovery.refine_radius", "must be non-negative")
        d = self.recovery.discrepancy
        need(d is None or d >= 0, "recovery.discrepancy", "must be non-negative")
        ph = self.phantom
        need(ph.speckle_density >= 0, "phantom.speckle_density", "must be non-negative")
        need(ph.speckle_sigma >= 0, "phantom.speckle_sigma", "must be non-negative")
        need(ph.noise_sigma is None or ph.noise_sigma >= 0, "phantom.noise_sigma", "must be non-negative")
        need(self.render.dynamic_range_db > 0, "render.dynamic_range_db", "must be positive")
        need(self.render.width >= 1 and self.render.height >= 1, "render", "output size must be positive")
        need(self.render.format in ("pgm", "png"), "render.format", "must be 'pgm' or 'png'")
        r = self.run
        need(r.mode in MODES, "run.mode", f"must be one of {', '.join(MODES)}")
        need(0 <= r.seed < 2**64, "run.seed", "must be an unsigned 64-bit integer")
        need(r.threads >= 1, "run.threads", "must be at least 1")
        if not out:
            out.extend(self._phantom_problems())
        return out

    def _phantom_problems(self):
        try:
            scat = scatterer_table(self)
        except ConfigError as exc:
            return [str(exc)]
        half = math.radians(self.scan.sector_deg) / 2
        r_max = self.geometry.sound_speed * self.acquisition.duration / 2
        out = []
        for i, (r, ang, _) in enumerate(scat):
            if not 0 < r <= r_max:
                out.append(f"phantom.scatterers[{i}]: range {r:.4g} m outside (0, {r_max:.4g}]")
            if abs(ang) > half + 1e-12:
                out.append(f"phantom.scatterers[{i}]: angle {math.degrees(ang):.4g} deg outside the sector")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    def beam_angles(self):
        from .geometry import sector_angles

        return sector_angles(self.scan.beams, self.scan.sector_deg)

    def grid_step(self):
        return self.acquisition.duration / self.grid.size


def _parse_token(text, key, kind):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text, 0) if text.lower().startswith(("0x", "0b", "0o")) else int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigValueError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _field_kind(f):
    ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    optional = "None" in ann
    base = ann.replace("| None", "").replace("None |", "").strip()
    return {"int": int, "float": float, "bool": bool, "str": str}[base], optional


def config_from_mapping(mapping, source="<config>"):
    """Build a :class:`PipelineConfig` from ``{section: {key: text}}``; unknown keys raise."""
    sections = {f.name: f for f in fields(PipelineConfig)}
    built = {}
    for sec_name, values in mapping.items():
        if sec_name not in sections:
            raise UnknownKeyError(f"{source}: unknown section [{sec_name}]")
        cls = sections[sec_name].default_factory
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, text in values.items():
            path = f"{sec_name}.{key}"
            if key not in known:
                raise UnknownKeyError(f"{source}: unknown key {path}")
            kind, optional = _field_kind(known[key])
            if optional and str(text).strip().lower() in ("", "none"):
                kwargs[key] = None
            else:
                kwargs[key] = _parse_token(str(text), path, kind)
        built[sec_name] = cls(**kwargs)
    return PipelineConfig(**built)


def parse_config(path=None):
    """Read, default-fill and validate a configuration file (``None`` = all defaults)."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",), strict=True
    )
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigSyntaxError(f"{path}: {exc}") from None
    mapping = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    cfg = config_from_mapping(mapping, str(path))
    if cfg.phantom.file and not Path(cfg.phantom.file).is_absolute():
        cfg = cfg.override(phantom={"file": str(path.parent / cfg.phantom.file)})
    return cfg.validate()


def _parse_range(tok, cfg, where):
    if tok[:1] in "qQ":
        q = _parse_token(tok[1:], where, int)
        return q * cfg.grid_step() * cfg.geometry.sound_speed / 2
    return _parse_token(tok, where, float)


def _parse_angle(tok, cfg, where):
    if tok[:1] in "bB":
        b = _parse_token(tok[1:], where, int)
        angles = cfg.beam_angles()
        if not 0 <= b < angles.size:
            raise ConfigValueError(f"{where}: beam index {b} out of range")
        return float(angles[b])
    return math.radians(_parse_token(tok, where, float))


def scatterer_table(cfg):
    """Point scatterers as ``(n, 3)`` rows of ``(range_m, angle_rad, reflectivity)``.

    Inline entries are ``range angle reflectivity`` separated by ``;`` or
    newlines.  A range written ``q<int>`` means that grid cell (on-grid echo
    for the reference element); an angle written ``b<int>`` means that beam.
    """
    if cfg.phantom.file:
        from .phantom import load_phantom_file

        try:
            return load_phantom_file(cfg.phantom.file)
        except OSError as exc:
            raise ConfigValueError(f"phantom.file: {exc}") from None
        except ValueError as exc:
            raise ConfigValueError(f"phantom.file: {exc}") from None
    rows = []
    text = cfg.phantom.scatterers.replace("\n", ";")
    for i, entry in enumerate(e for e in text.split(";") if e.strip()):
        where = f"phantom.scatterers[{i}]"
        parts = entry.replace(",", " ").split()
        if len(parts) != 3:
            raise ConfigValueError(f"{where}: expected 'range angle reflectivity', got {entry.strip()!r}")
        rows.append(
            (_parse_range(parts[0], cfg, where), _parse_angle(parts[1], cfg, where), _parse_token(parts[2], where, float))
        )
    return np.array(rows, dtype=float).reshape(-1, 3)
