"""INI-style experiment configuration files.

A file has up to three sections: ``[experiment]`` with `ExperimentSpec`
fields, ``[preprocess]`` with the `CurveParams` time constants and
``max_missing_samples``, and ``[train]`` with `TrainConfig` fields plus
``shrinkage_a`` and ``shrinkage_c``. Unknown keys are rejected so typos do
not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from .datamodel import ValidationError
from .protocols import ExperimentSpec

_BOOL = {"true": True, "on": True, "yes": True, "1": True,
         "false": False, "off": False, "no": False, "0": False}


def _convert(raw: str, like):
    if isinstance(like, bool):
        try:
            return _BOOL[raw.strip().lower()]
        except KeyError:
            raise ValidationError(f"expected a boolean, got {raw!r}") from None
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"expected a {type(like).__name__}, got {raw!r}") from None
    return raw.strip()


def _apply(obj, section: configparser.SectionProxy, skip=()):
    names = {f.name for f in fields(obj)} - set(skip)
    updates = {}
    for key, raw in section.items():
        if key not in names:
            raise ValidationError(f"unknown key {key!r} in [{section.name}]")
        updates[key] = _convert(raw, getattr(obj, key))
    return replace(obj, **updates)


SECTIONED = ("train", "curve", "max_missing_samples")


def parse_config(text: str, base: ExperimentSpec | None = None) -> ExperimentSpec:
    """Overlay the settings in ``text`` onto ``base`` (default `ExperimentSpec()`)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - {"experiment", "preprocess", "train"}
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    spec = base or ExperimentSpec()
    train = spec.train
    if parser.has_section("train"):
        section = parser["train"]
        shrink = {k[len("shrinkage_"):]: float(section.pop(k))
                  for k in list(section) if k.startswith("shrinkage_")}
        train = _apply(train, section, skip=("shrinkage",))
        if shrink:
            train = replace(train, shrinkage=replace(train.shrinkage, **shrink))
    curve = spec.curve
    if parser.has_section("preprocess"):
        section = parser["preprocess"]
        if "max_missing_samples" in section:
            spec = replace(spec, max_missing_samples=_convert(section.pop("max_missing_samples"), 0))
        curve = _apply(curve, section)
    if parser.has_section("experiment"):
        spec = _apply(spec, parser["experiment"], skip=SECTIONED)
    return replace(spec, train=train, curve=curve)


def load_config(path: str | Path, base: ExperimentSpec | None = None) -> ExperimentSpec:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def dump_config(spec: ExperimentSpec) -> str:
    """Render a spec as a config file that `parse_config` reads back to the same spec."""
    lines = ["[experiment]"]
    for f in fields(spec):
        if f.name not in SECTIONED:
            lines.append(f"{f.name} = {_text(getattr(spec, f.name))}")
    lines += ["", "[preprocess]"]
    for f in fields(spec.curve):
        lines.append(f"{f.name} = {_text(getattr(spec.curve, f.name))}")
    lines.append(f"max_missing_samples = {spec.max_missing_samples}")
    lines += ["", "[train]"]
    for f in fields(spec.train):
        if f.name != "shrinkage":
            lines.append(f"{f.name} = {_text(getattr(spec.train, f.name))}")
    lines.append(f"shrinkage_a = {spec.train.shrinkage.a!r}")
    lines.append(f"shrinkage_c = {spec.train.shrinkage.c!r}")
    return "\n".join(lines) + "\n"


def _text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)

