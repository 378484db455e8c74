"""Declarative experiment configuration (YAML or JSON), validated with pydantic.

Top-level keys::

    schema_version: 1
    experiment: eval | cma | sweep | combined | mitigate | ingest | split-baseline
    model: {...}          # ModelConfig fields, all optional
    injections: default   # or a list of {module, layer, head, alpha, target | direction}
    data:
      generate: {...}     # GenConfig fields, all optional
      # or
      external: {results, annotations, genders | captions}
    params: {...}         # experiment-specific, see the *Params models below
    output: results/      # output directory
    threads: 1

Unknown keys are rejected everywhere. External data paths are resolved
relative to the config file; ``output`` relative to the working directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model, field_validator, model_validator

from .cma import Intervention
from .mitigation import FairTarget
from .model import MODULES, BiasInjection, HeadAddress, ModelConfig, ToyVLM, default_injections
from .scenes import GenConfig

SCHEMA_VERSION = 1
EXPERIMENTS = ("eval", "cma", "sweep", "combined", "mitigate", "ingest", "split-baseline")

_STRICT = ConfigDict(extra="forbid")


def _mirror(dc: type, name: str) -> type[BaseModel]:
    """A pydantic model with the same fields and defaults as a frozen config dataclass."""
    hints = typing.get_type_hints(dc)
    fields: dict[str, Any] = {}
    for f in dataclasses.fields(dc):
        fields[f.name] = (hints[f.name], f.default)
    return create_model(name, __config__=_STRICT, **fields)


ModelSection = _mirror(ModelConfig, "ModelSection")
GenSection = _mirror(GenConfig, "GenSection")


class InjectionSpec(BaseModel):
    model_config = _STRICT

    module: Literal["TextEnc", "ImageEnc", "FusionTextPart", "FusionImagePart"]
    layer: int = Field(ge=0)
    head: int = Field(ge=0)
    alpha: float
    target: Optional[str] = None
    direction: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_way(self) -> "InjectionSpec":
        if self.target is None and self.direction is None:
            raise ValueError("give a target category or a direction")
        return self

    def build(self) -> BiasInjection:
        at = HeadAddress(self.module, self.layer, self.head)
        direction = tuple(self.direction) if self.direction is not None else None
        return BiasInjection(at, self.alpha, self.target, direction)


class ExternalSection(BaseModel):
    model_config = _STRICT

    results: Path
    annotations: Path
    genders: Optional[Path] = None
    captions: Optional[Path] = None

    @model_validator(mode="after")
    def _one_label_source(self) -> "ExternalSection":
        if (self.genders is None) == (self.captions is None):
            raise ValueError("give exactly one of 'genders' or 'captions'")
        return self


class DataSection(BaseModel):
    model_config = _STRICT

    generate: Optional[GenSection] = None  # type: ignore[valid-type]
    external: Optional[ExternalSection] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "DataSection":
        if (self.generate is None) == (self.external is None):
            raise ValueError("give exactly one data source: 'generate' or 'external'")
        return self


class MediatorSpec(BaseModel):
    """Either explicit heads, a layer prefix of one module, or a named set."""

    model_config = _STRICT

    heads: Optional[list[str]] = None  # "Module.L<layer>.H<head>"
    module: Optional[Literal["TextEnc", "ImageEnc", "FusionTextPart", "FusionImagePart"]] = None
    depth: Optional[int] = Field(default=None, ge=0)
    preset: Optional[Literal["none", "injection-heads", "all-heads"]] = None

    @model_validator(mode="after")
    def _one_form(self) -> "MediatorSpec":
        forms = [self.heads is not None, self.module is not None, self.preset is not None]
        if sum(forms) != 1:
            raise ValueError("give exactly one of 'heads', 'module' (+ 'depth') or 'preset'")
        if self.module is not None and self.depth is None:
            raise ValueError("'module' needs a 'depth'")
        if self.heads is not None:
            for h in self.heads:
                parse_head(h)
        return self


def parse_head(text: str) -> HeadAddress:
    """Parse ``Module.L<layer>.H<head>`` (the ``str`` form of a HeadAddress)."""
    parts = text.split(".")
    if len(parts) != 3 or not parts[1].startswith("L") or not parts[2].startswith("H"):
        raise ValueError(f"head {text!r} is not of the form Module.L<layer>.H<head>")
    try:
        return HeadAddress(parts[0], int(parts[1][1:]), int(parts[2][1:]))
    except ValueError as exc:
        raise ValueError(f"head {text!r}: {exc}") from None


class EvalParams(BaseModel):
    model_config = _STRICT
    n_trials: int = Field(default=20, ge=2)
    baseline_seed: int = 0
    export_detections: bool = True


class IngestParams(EvalParams):
    export_detections: bool = False


class SplitBaselineParams(BaseModel):
    model_config = _STRICT
    n_trials: int = Field(default=20, ge=2)
    baseline_seed: int = 0
    genders: list[Literal["male", "female"]] = ["male", "female"]


class CmaParams(BaseModel):
    model_config = _STRICT
    interventions: list[Intervention] = [Intervention.REPLACE_GENDER, Intervention.MASK_GENDER, Intervention.BOTH]
    mediator: MediatorSpec = MediatorSpec(preset="injection-heads")
    clamp_check: bool = True


class SweepParams(BaseModel):
    model_config = _STRICT
    modules: list[Literal["TextEnc", "ImageEnc", "FusionTextPart", "FusionImagePart"]] = list(MODULES)
    intervention: Optional[Intervention] = None  # None: each module's matched intervention
    depths: Optional[list[int]] = None


class CombinedParams(BaseModel):
    model_config = _STRICT
    fractions: list[float] = [1.0]

    @field_validator("fractions")
    @classmethod
    def _in_range(cls, v: list[float]) -> list[float]:
        if not v or any(not 0.0 < f <= 1.0 for f in v):
            raise ValueError("fractions must be a nonempty list of values in (0, 1]")
        return v


class MitigateParams(BaseModel):
    model_config = _STRICT
    methods: list[FairTarget] = [FairTarget.NONE, FairTarget.TEXT, FairTarget.IMAGE, FairTarget.BOTH]
    templates: Optional[dict[Literal["male", "female"], list[float]]] = None


PARAMS: dict[str, type[BaseModel]] = {
    "eval": EvalParams,
    "ingest": IngestParams,
    "split-baseline": SplitBaselineParams,
    "cma": CmaParams,
    "sweep": SweepParams,
    "combined": CombinedParams,
    "mitigate": MitigateParams,
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    schema_version: int
    experiment: Literal["eval", "cma", "sweep", "combined", "mitigate", "ingest", "split-baseline"]
    model: ModelSection = ModelSection()  # type: ignore[valid-type]
    injections: Union[Literal["default", "none"], list[InjectionSpec]] = "default"
    data: DataSection
    params: dict[str, Any] = {}
    output: Path = Path("results")
    threads: int = Field(default=1, ge=1)

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this build reads {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        # params are typed per experiment; validate and normalise them here
        try:
            typed = PARAMS[self.experiment].model_validate(self.params)
        except ValidationError as exc:
            lines = _messages(exc)
            raise ValueError("; ".join(f"params.{m}" if not m.startswith("params") else m for m in lines)) from None
        self.params = typed.model_dump(mode="json")
        external = self.data.external is not None
        if self.experiment == "ingest" and not external:
            raise ValueError("experiment 'ingest' needs data.external")
        if external and self.experiment not in ("ingest", "split-baseline"):
            raise ValueError(f"experiment {self.experiment!r} runs the toy model and needs data.generate")
        try:
            model_cfg = self.model_config_obj()
        except ValueError as exc:
            raise ValueError(f"model: {exc}") from None
        if not external:
            try:
                gen_cfg = self.gen_config_obj()
            except ValueError as exc:
                raise ValueError(f"data.generate: {exc}") from None
            if gen_cfg.categories != model_cfg.categories:
                raise ValueError("data.generate.categories: must equal model.categories")
            if gen_cfg.grid != model_cfg.grid:
                raise ValueError("data.generate.grid: must equal model.grid")
            try:
                ToyVLM(model_cfg, self.injection_list())
            except ValueError as exc:
                raise ValueError(f"injections: {exc}") from None
        return self

    # -- conversion to library objects ---------------------------------

    def model_config_obj(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def gen_config_obj(self) -> GenConfig:
        assert self.data.generate is not None
        return GenConfig(**self.data.generate.model_dump())

    def injection_list(self) -> list[BiasInjection]:
        if self.injections == "default":
            return default_injections()
        if self.injections == "none":
            return []
        return [spec.build() for spec in self.injections]

    def typed_params(self) -> BaseModel:
        return PARAMS[self.experiment].model_validate(self.params)

    # -- identity -------------------------------------------------------

    def canonical(self) -> dict:
        """Everything that can affect results (output dir and thread count excluded)."""
        return self.model_dump(mode="json", exclude={"output", "threads"})

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def seeds(self) -> dict[str, int]:
        out = {"model": self.model.seed}
        if self.data.generate is not None:
            out["data"] = self.data.generate.seed
        if "baseline_seed" in self.params:
            out["baseline"] = self.params["baseline_seed"]
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed (model, data generation, split baseline) set to ``seed``."""
        raw = self.model_dump(mode="json")
        raw["model"]["seed"] = seed
        if raw["data"].get("generate") is not None:
            raw["data"]["generate"]["seed"] = seed
        if "baseline_seed" in raw["params"]:
            raw["params"]["baseline_seed"] = seed
        return ExperimentConfig.model_validate(raw)


class ConfigError(Exception):
    """Unreadable or invalid config; ``messages`` are ``field: problem`` lines."""

    def __init__(self, messages: list[str]):
        super().__init__("\n".join(messages))
        self.messages = messages


def load_config(path, experiment: Optional[str] = None) -> ExperimentConfig:
    """Read and validate a config file. ``experiment`` fills in or must match the file's kind."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path} ({exc.strerror or exc})"]) from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"config: cannot parse {path}: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a mapping"])
    if experiment is not None:
        given = raw.setdefault("experiment", experiment)
        if given != experiment:
            raise ConfigError([f"experiment: file says {given!r} but the command is {experiment!r}"])
    ext = (raw.get("data") or {}).get("external") if isinstance(raw.get("data"), dict) else None
    if isinstance(ext, dict):
        # external file paths are relative to the config file
        for key in ("results", "annotations", "genders", "captions"):
            if isinstance(ext.get(key), str):
                ext[key] = str(path.parent / ext[key])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_messages(exc)) from None


def _messages(exc: ValidationError) -> list[str]:
    errors = exc.errors()
    # for a list given where a keyword or a list is allowed, the keyword branch's complaint is noise
    useful = [e for e in errors if not (e.get("type") == "literal_error" and not isinstance(e.get("input"), str))]
    out: list[str] = []
    for e in useful or errors:
        m = _format_error(e)
        if m not in out:
            out.append(m)
    return out


def _is_branch_tag(part) -> bool:
    # pydantic names union members in error locations, e.g. "list[InjectionSpec]"
    return isinstance(part, str) and ("[" in part or part.startswith(("function-", "literal")))


def _format_error(err: dict) -> str:
    loc = ".".join(str(p) for p in err.get("loc", ()) if not _is_branch_tag(p))
    msg = err.get("msg", "invalid")
    if msg.startswith("Value error, "):
        msg = msg[len("Value error, "):]
    return f"{loc}: {msg}" if loc else msg


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
