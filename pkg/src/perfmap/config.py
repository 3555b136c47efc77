"""Flat ``key = value`` configuration files and the assembled pipeline config.

Grammar, one entry per line::

    # comment
    section.key = value

Values are integers, reals, booleans (true/false), bare or quoted strings,
or comma-separated lists of those. Unknown keys are rejected.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace

from .aif import AifConfig
from .bolus_ctc import MR_SIGNS, BolusConfig
from .deconvolution import DeconvConfig
from .errors import ConfigError
from .maps import MapsConfig
from .masking import MaskConfig
from .nifti_io import Modality
from .preprocess import PreprocessConfig
from .validation import SsimParams

_KEY = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)+$")

SECTIONS = {
    "preprocess": PreprocessConfig,
    "mask": MaskConfig,
    "bolus": BolusConfig,
    "aif": AifConfig,
    "deconv": DeconvConfig,
    "maps": MapsConfig,
    "validation": SsimParams,
}
ALIASES = {"deconv.lambda": "deconv.lam"}
CTC_KEYS = ("ctc.mr_sign", "ctc.echo_time_s")
RUN_KEYS = ("input.path", "input.modality", "input.dt_s", "output.dir", "output.debug")


def parse_scalar(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def parse_value(text: str):
    if "," in text:
        return [parse_scalar(p) for p in text.split(",")]
    return parse_scalar(text)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(value)
    return values


def read_config(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


@dataclass(frozen=True)
class PipelineConfig:
    input: str | None = None
    out_dir: str | None = None
    modality: Modality = Modality.CTP
    debug: bool = False
    dt: float | None = None
    mr_sign: str = "negated"
    echo_time: float | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    bolus: BolusConfig = field(default_factory=BolusConfig)
    aif: AifConfig = field(default_factory=AifConfig)
    deconv: DeconvConfig = field(default_factory=DeconvConfig)
    maps: MapsConfig = field(default_factory=MapsConfig)
    validation: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.mr_sign not in MR_SIGNS:
            raise ConfigError(f"ctc.mr_sign must be one of {MR_SIGNS}")
        if self.echo_time is not None and not self.echo_time > 0:
            raise ConfigError("ctc.echo_time_s must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("input.dt_s must be positive")


def _pairs(value) -> tuple:
    flat = value if isinstance(value, list) else [value]
    if len(flat) % 2:
        raise ConfigError("aif.schedule needs an even number of values (ttp_pct, auc_pct pairs)")
    return tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))


def _section_value(section: str, name: str, value):
    if section == "aif" and name == "schedule":
        return _pairs(value)
    if isinstance(value, list):
        return tuple(value)
    if name in ("weights", "lambda_grid"):
        return (value,)
    return value


def build_config(values: dict | None = None, **overrides) -> PipelineConfig:
    """Assemble and validate a PipelineConfig from parsed file values.

    ``overrides`` use PipelineConfig field names (``input``, ``modality``,
    ``method``, ``mask_path``...) and take precedence over file values;
    ``None`` overrides are ignored.
    """
    values = {ALIASES.get(k, k): v for k, v in (values or {}).items()}
    sections: dict = {s: {} for s in SECTIONS}
    top: dict = {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section in SECTIONS:
            allowed = {f.name for f in fields(SECTIONS[section])}
            if name not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
            sections[section][name] = _section_value(section, name, value)
        elif key == "ctc.mr_sign":
            top["mr_sign"] = value
        elif key == "ctc.echo_time_s":
            top["echo_time"] = value
        elif key == "input.path":
            top["input"] = value
        elif key == "input.modality":
            top["modality"] = value
        elif key == "input.dt_s":
            top["dt"] = value
        elif key == "output.dir":
            top["out_dir"] = value
        elif key == "output.debug":
            top["debug"] = bool(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    ov = {k: v for k, v in overrides.items() if v is not None}
    if "method" in ov:
        sections["deconv"]["method"] = ov.pop("method")
    if "mask_path" in ov:
        sections["mask"]["mode"] = "file"
        sections["mask"]["path"] = ov.pop("mask_path")
    top.update(ov)
    try:
        built = {s: cls(**sections[s]) for s, cls in SECTIONS.items()}
        if "modality" in top:
            top["modality"] = Modality.parse(top["modality"])
        return PipelineConfig(**top, **built)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return replace(cfg, **changes)
