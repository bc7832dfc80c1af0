"""Flat `section.key = value` configuration files bound to the tool's configs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .alignment import AlignCfg
from .evaluation import ConfigError, EvalConfig
from .pipeline import PipelineConfig
from .scene_assembly import AssemblyConfig
from .simulator import SimConfig
from .tdh import TdhConfig
from .triangles import TriConfig
from .verification import VerifyConfig


@dataclass(frozen=True)
class ToolConfig:
    sim: SimConfig = SimConfig()
    assembly: AssemblyConfig = AssemblyConfig()
    align: AlignCfg = AlignCfg()
    tdh: TdhConfig = TdhConfig()
    tri: TriConfig = TriConfig()
    verify: VerifyConfig = VerifyConfig()
    eval: EvalConfig = EvalConfig()

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(align=self.align, tdh=self.tdh, tri=self.tri, verify=self.verify)


SECTIONS = ("sim", "assembly", "align", "tdh", "tri", "verify", "eval")


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    parts = text.replace(",", " ").split()
    if len(parts) > 1:
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config(text: str, base: ToolConfig | None = None) -> ToolConfig:
    """Apply `section.key = value` lines on top of the defaults (or a base)."""
    cfg = base or ToolConfig()
    updates: dict[str, dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, field_name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        section_obj = getattr(cfg, section)
        if field_name not in {f.name for f in dataclasses.fields(section_obj)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates.setdefault(section, {})[field_name] = parse_value(value)

    replacements = {}
    for section, fields in updates.items():
        try:
            replacements[section] = dataclasses.replace(getattr(cfg, section), **fields)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {section}: {exc}") from exc
    return dataclasses.replace(cfg, **replacements)


def load_config(path, base: ToolConfig | None = None) -> ToolConfig:
    with open(path) as f:
        return parse_config(f.read(), base)


def dump_config(cfg: ToolConfig) -> str:
    """Full flat dump, suitable for run manifests and re-loading."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
