"""Experiment configuration: one JSON document describing sources, model,
training, alignment and probe settings.

The JSON schema is derived from the dataclasses themselves, so a field added
to e.g. ``TrainConfig`` is immediately accepted (and documented) here.
Unknown keys are rejected; every default is written back out by ``to_dict``.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .evaluate import ProbeConfig
from .mmd import Bandwidths
from .model import VARIANTS, EncoderConfig
from .signalio import LABEL_MODES, SCHEMA_VERSION, DataError, DataSourceSpec
from .synth import SynthClassSpec, SynthSourceSpec, reference_sources, spec_to_dict
from .train import AlignConfig, KappaSchedule, TrainConfig


class ConfigError(ValueError):
    """Configuration is malformed or inconsistent."""


_SCALARS = {int: "integer", float: "number", bool: "boolean", str: "string"}
_ENUMS = {"label_mode": list(LABEL_MODES), "variant": list(VARIANTS)}


def _type_schema(tp) -> dict:
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        return {"anyOf": [_type_schema(a) for a in args]}
    if tp is type(None):
        return {"type": "null"}
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _type_schema(args[0])}
        return {"type": "array", "items": _type_schema(args[0]),
                "minItems": len(args), "maxItems": len(args)}
    if tp in _SCALARS:
        return {"type": _SCALARS[tp]}
    raise TypeError(f"no schema mapping for {tp!r}")


def _object_schema(cls, exclude=(), extra=None) -> dict:
    hints = typing.get_type_hints(cls)
    props, required = {}, []
    for f in fields(cls):
        if f.name in exclude:
            continue
        props[f.name] = _type_schema(hints[f.name])
        if f.name in _ENUMS:
            props[f.name]["enum"] = _ENUMS[f.name]
        if f.default is MISSING and f.default_factory is MISSING:
            required.append(f.name)
    props.update(extra or {})
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        out["required"] = required
    return out


def _source_branch(cls, kind: str) -> dict:
    """Applies the field schema of ``cls`` to sources of the given kind."""
    return {"if": {"properties": {"kind": {"const": kind}}},
            "then": _object_schema(cls, extra={"kind": {"const": kind}})}


def experiment_schema() -> dict:
    """JSON schema for experiment config files."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "dape experiment",
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version"],
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "seed": {"type": "integer", "minimum": 0},
            "sources": {"type": "array", "minItems": 1, "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {"kind": {"enum": ["synth", "data"]}},
                "allOf": [_source_branch(SynthSourceSpec, "synth"),
                          _source_branch(DataSourceSpec, "data")]}},
            "classes": _object_schema(SynthClassSpec),
            "model": _object_schema(EncoderConfig),
            "train": _object_schema(TrainConfig, exclude=("seed",)),
            "align": _object_schema(KappaSchedule, extra={
                "sigma": {"type": "array", "items": {"type": "number"}, "minItems": 1}}),
            "probe": _object_schema(ProbeConfig, exclude=("seed",)),
        },
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    sources: list = field(default_factory=reference_sources)
    classes: SynthClassSpec = field(default_factory=SynthClassSpec)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        # the top-level seed drives every seeded component
        self.train.seed = self.seed
        self.probe.seed = self.seed

    @property
    def synth_sources(self) -> list[SynthSourceSpec]:
        bad = [s.name for s in self.sources if not isinstance(s, SynthSourceSpec)]
        if bad:
            raise ConfigError(f"sources {bad} are not synthetic")
        return list(self.sources)

    def to_dict(self) -> dict:
        def source(s):
            kind = "synth" if isinstance(s, SynthSourceSpec) else "data"
            return {"kind": kind, **spec_to_dict(s)}

        train = asdict(self.train) | {"betas": list(self.train.betas)}
        train.pop("seed")
        probe = asdict(self.probe)
        probe.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "sources": [source(s) for s in self.sources],
            "classes": spec_to_dict(self.classes),
            "model": self.model.to_dict(),
            "train": train,
            "align": {"sigma": list(self.align.bandwidths.sigma), **asdict(self.align.schedule)},
            "probe": probe,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _build_source(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "synth":
        spec = SynthSourceSpec(**d)
        spec.validate()
        return spec
    try:
        return DataSourceSpec(**d)
    except DataError as e:
        raise ConfigError(str(e)) from e


def config_from_dict(d: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(d, experiment_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    try:
        kw = {}
        if "sources" in d:
            kw["sources"] = [_build_source(s) for s in d["sources"]]
        if "classes" in d:
            kw["classes"] = SynthClassSpec(**d["classes"])
            kw["classes"].validate()
        if "model" in d:
            kw["model"] = EncoderConfig(**d["model"])
        if "train" in d:
            kw["train"] = TrainConfig(**d["train"])
        if "align" in d:
            a = dict(d["align"])
            bw = Bandwidths(tuple(a.pop("sigma"))) if "sigma" in a else Bandwidths()
            kw["align"] = AlignConfig(bw, KappaSchedule(**a))
        if "probe" in d:
            kw["probe"] = ProbeConfig(**d["probe"])
        return ExperimentConfig(seed=d.get("seed", 0), **kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def reference_config(epochs: int = 80) -> ExperimentConfig:
    """The seeded synthetic experiment used for the acceptance table.

    The encoder is narrower than the default (filters 10/10/25/50/100) so that
    all variants train in minutes on a single CPU thread.
    """
    return ExperimentConfig(
        seed=0,
        model=EncoderConfig(filters=(10, 10, 25, 50, 100)),
        train=TrainConfig(epochs=epochs),
    )
