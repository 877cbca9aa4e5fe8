"""Run configuration: a flat TOML document with dotted section keys.

Example::

    seed = 7
    dataset.synth.n = 500
    train.lr0 = 0.01
    train.combo.alpha = 2.0
    output.dir = "runs/demo"
"""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import AugmentConfig, Dataset, load_binary, load_csv, load_dataset, synth_generate
from .discretize import DiscretizationSpec
from .errors import UsageError
from .losses import LOSS_NAMES
from .model import BackboneConfig
from .train import TrainConfig

logger = logging.getLogger("ComboLabConfig")

CONFIG_ECHO_NAME = "config.toml"


class SynthSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(500, ge=1)
    shape: Tuple[int, ...] = (16,)
    noise_sd: float = Field(0.1, ge=0.0)
    seed: int = 0
    projection_seed: int = 0


class DatasetSection(BaseModel):
    """Either a file (``path``) or, when no path is given, a synthetic draw."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    path: Optional[str] = None
    format: Literal["auto", "csv", "binary"] = "auto"
    synth: SynthSection = SynthSection()


class ExperimentSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = Field(5, ge=2)
    losses: Tuple[str, ...] = LOSS_NAMES
    split_seed: int = 0

    @field_validator("losses")
    @classmethod
    def _known_losses(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [name for name in value if name not in LOSS_NAMES]
        if unknown or not value:
            raise ValueError("unknown loss name(s) {0}; valid names: {1}".format(
                ", ".join(unknown) or "(none given)", ", ".join(LOSS_NAMES)))
        return value


class OutputSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dir: str = "runs/latest"


class RunConfig(BaseModel):
    """Everything a command needs to reproduce an experiment.

    The top-level ``seed`` fills every section seed not set explicitly
    (synthetic data, backbone init, shuffling, fold and split assignment).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    discretization: DiscretizationSpec = DiscretizationSpec()
    backbone: BackboneConfig = BackboneConfig()
    train: TrainConfig = TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    experiment: ExperimentSection = ExperimentSection()
    output: OutputSection = OutputSection()

    def resolved(self) -> "RunConfig":
        """Copy with unset section seeds replaced by the top-level seed."""
        seed = self.seed

        def fill(section: BaseModel, key: str = "seed") -> BaseModel:
            if key in section.model_fields_set:
                return section
            return section.model_copy(update={key: seed})

        synth = fill(self.dataset.synth)
        return self.model_copy(update={
            "dataset": self.dataset.model_copy(update={"synth": synth}),
            "backbone": fill(self.backbone),
            "train": fill(self.train),
            "experiment": fill(self.experiment, "split_seed"),
        })


def _format_errors(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(p) for p in item["loc"]) or "(root)"
        parts.append("{0}: {1}".format(key, item["msg"]))
    return "; ".join(parts)


def parse_run_config(document: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a parsed document; a relative dataset path is taken from ``base_dir``."""
    try:
        cfg = RunConfig.model_validate(document)
    except ValidationError as e:
        raise UsageError("invalid config: {0}".format(_format_errors(e)))
    if cfg.dataset.path is not None and base_dir is not None:
        path = Path(cfg.dataset.path)
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        cfg = cfg.model_copy(update={"dataset": cfg.dataset.model_copy(update={"path": str(path)})})
    return cfg.resolved()


def load_run_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a TOML config file; ``None`` gives the all-defaults config."""
    if path is None:
        return RunConfig().resolved()
    path = Path(path)
    if not path.is_file():
        raise UsageError("config file not found: {0}".format(path))
    try:
        with open(path, "rb") as fh:
            document = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise UsageError("config {0} is not valid TOML: {1}".format(path, e))
    logger.info("Loaded config {0}".format(path))
    return parse_run_config(document, path.parent.resolve())


# -- echo -------------------------------------------------------------------

def flatten(document: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested mapping to dotted keys; ``None`` values are dropped."""
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        dotted = "{0}.{1}".format(prefix, key) if prefix else key
        if isinstance(value, dict):
            flat.update(flatten(value, dotted))
        elif value is not None:
            flat[dotted] = value
    return flat


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(str(value))


def render_config(cfg: RunConfig) -> str:
    flat = flatten(cfg.model_dump(mode="json"))
    return "".join("{0} = {1}\n".format(key, _toml_value(flat[key])) for key in sorted(flat))


def write_config_echo(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / CONFIG_ECHO_NAME
    path.write_text(render_config(cfg))
    return path


# -- dataset ----------------------------------------------------------------

def load_configured_dataset(cfg: RunConfig) -> Dataset:
    section = cfg.dataset
    if section.path is None:
        synth = section.synth
        logger.info("Generating synthetic dataset n={0} shape={1} noise_sd={2} seed={3}".format(
            synth.n, synth.shape, synth.noise_sd, synth.seed))
        return synth_generate(synth.n, synth.shape, synth.noise_sd, synth.seed, synth.projection_seed)
    path = Path(section.path)
    if not path.is_file():
        raise UsageError("dataset file not found: {0}".format(path))
    if section.format == "csv":
        return load_csv(path)
    if section.format == "binary":
        return load_binary(path)
    return load_dataset(path)
