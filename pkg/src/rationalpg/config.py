"""
Configuration loader for rationalpg.

This module loads experiment settings from a TOML document. The configuration
covers the algorithm, the game, the lookahead update, advantage estimation,
convergence detection and where results are written.

The primary configuration file is `rationalpg.toml`. If it is not found, the
module looks for a `[tool.rationalpg]` table in `pyproject.toml`. Without
either, every field keeps its default. The `RATIONALPG_OUTPUT_ROOT` environment
variable overrides the output directory of the file; command-line flags
override both.

Classes:
    ExperimentConfig: Every setting of an experiment.

Functions:
    load_config: Loads the configuration from a TOML file.
    config_hash: Stable short hash of a configuration.

Example:
    config = load_config("rationalpg.toml")
    config = config.with_overrides(lookahead=4, steps=3000)
    print(config_hash(config))
"""

import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

import toml

from .algorithms import AlgorithmKind, AlgorithmSpec, Mode, TrainingOptions
from .exceptions import ConfigError, ContractViolation
from .games import BUILTIN_GAMES, PayoffGame, resolve_game
from .hograd import OptimizerKind
from .shaping import DiceMode, LookaheadConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "RATIONALPG_OUTPUT_ROOT"
CONFIG_FILE = "rationalpg.toml"

# (section, key) in the TOML document -> ExperimentConfig field
SECTIONS: Dict[str, Dict[str, str]] = {
    "experiment": {
        "algorithm": "algorithm",
        "game": "game",
        "mode": "mode",
        "steps": "steps",
        "seeds": "seeds",
        "output": "output",
        "checkpoint_interval": "checkpoint_interval",
        "batch_size": "batch_size",
        "init_scale": "init_scale",
        "horizon": "horizon",
        "discount": "discount",
    },
    "algorithm": {
        "population": "population",
        "diversity_lambda": "diversity_lambda",
        "victim": "victim",
        "sequential": "sequential",
    },
    "lookahead": {
        "steps": "lookahead",
        "lr_base_lookahead": "lr_base_lookahead",
        "lr_base": "lr_base",
        "lr_manipulator": "lr_manipulator",
        "max_grad_norm": "max_grad_norm",
        "partnerplay": "partnerplay",
        "dice_lambda": "dice_lambda",
        "dice_mode": "dice_mode",
        "optimizer": "optimizer",
    },
    "training": {
        "gae_lambda": "gae_lambda",
        "entropy_coef": "entropy_coef",
        "value_coef": "value_coef",
        "critic_lr": "critic_lr",
        "per_partner_norm": "per_partner_norm",
    },
    "convergence": {
        "window": "window",
        "threshold": "threshold",
        "log_threshold": "log_threshold",
        "stop_on_convergence": "stop_on_convergence",
    },
}

DOTTED_NAMES: Dict[str, str] = {
    name: f"{section}.{key}" for section, keys in SECTIONS.items() for key, name in keys.items()
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting of an experiment.

    Lookahead defaults mirror `LookaheadConfig`; the discount of a run is the
    game's own, set through `experiment.discount` when a game is iterated.
    """

    algorithm: str = "at-rpg"
    game: str = "fig2_coop"
    mode: str = "exact"
    steps: int = 3000
    seeds: Tuple[int, ...] = (0,)
    output: str = "runs"
    checkpoint_interval: int = 500
    batch_size: int = 128
    init_scale: float = 0.5
    horizon: Optional[int] = None
    discount: Optional[float] = None
    population: int = 2
    diversity_lambda: float = 0.25
    victim: Optional[str] = None
    sequential: bool = False
    lookahead: int = 8
    lr_base_lookahead: float = 1.0
    lr_base: float = 0.01
    lr_manipulator: float = 0.1
    max_grad_norm: float = 0.5
    partnerplay: float = 0.0
    dice_lambda: float = 0.95
    dice_mode: str = "loaded"
    optimizer: str = "sgd"
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    critic_lr: float = 1.0
    per_partner_norm: bool = False
    window: int = 200
    threshold: float = 0.01
    log_threshold: float = 0.05
    stop_on_convergence: bool = True

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with the given fields replaced; `None` values are ignored.

        Accepts field names or dotted names such as `lookahead.steps`.

        Raises:
            ConfigError: On unknown fields or invalid values.
        """
        known = {f.name for f in fields(self)}
        aliases = {dotted: name for name, dotted in DOTTED_NAMES.items()}
        changes = {}
        for name, value in overrides.items():
            if value is None:
                continue
            target = aliases.get(name, name)
            if target not in known:
                raise ConfigError("unknown configuration field", field=name)
            changes[target] = _coerce(target, value)
        config = replace(self, **changes)
        config.validate()
        return config

    def validate(self) -> None:
        """Checks values and that referenced files exist.

        Raises:
            ConfigError: Naming the offending field.
        """
        if not self.seeds:
            raise ConfigError("seed list must not be empty", field=DOTTED_NAMES["seeds"])
        for name in ("steps", "checkpoint_interval", "batch_size", "window"):
            minimum = 0 if name in ("steps", "checkpoint_interval") else 1
            if getattr(self, name) < minimum:
                raise ConfigError(f"must be at least {minimum}", field=DOTTED_NAMES[name])
        for name in ("threshold", "log_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", field=DOTTED_NAMES[name])
        if self.game not in BUILTIN_GAMES and not os.path.isfile(self.game):
            known = ", ".join(sorted(BUILTIN_GAMES))
            raise ConfigError(
                f"'{self.game}' is neither a built-in game ({known}) nor an existing file",
                field=DOTTED_NAMES["game"],
            )
        if self.victim and not os.path.isfile(self.victim):
            raise ConfigError(
                f"victim checkpoint not found: {self.victim}", field=DOTTED_NAMES["victim"]
            )
        for name, enum in (("mode", Mode), ("dice_mode", DiceMode), ("optimizer", OptimizerKind)):
            try:
                enum(getattr(self, name))
            except ValueError:
                choices = ", ".join(member.value for member in enum)
                raise ConfigError(
                    f"'{getattr(self, name)}' is not one of {choices}", field=DOTTED_NAMES[name]
                ) from None
        try:
            self.lookahead_config()
            self.algorithm_spec(self.seeds[0])
            self.training_options()
        except ContractViolation as exc:
            raise ConfigError(str(exc), field=_field_named_in(str(exc))) from None

    def lookahead_config(self) -> LookaheadConfig:
        return LookaheadConfig(
            lookahead=self.lookahead,
            lr_base_lookahead=self.lr_base_lookahead,
            lr_base=self.lr_base,
            lr_manipulator=self.lr_manipulator,
            max_grad_norm=self.max_grad_norm,
            partnerplay=self.partnerplay,
            dice_lambda=self.dice_lambda,
            dice_mode=self.dice_mode,
            gae_lambda=self.gae_lambda,
            entropy_coef=self.entropy_coef,
            value_coef=self.value_coef,
            critic_lr=self.critic_lr,
            optimizer=self.optimizer,
            per_partner_norm=self.per_partner_norm,
        )

    def algorithm_spec(self, seed: int) -> AlgorithmSpec:
        return AlgorithmSpec(
            kind=AlgorithmKind.parse(self.algorithm),
            population=self.population,
            diversity_lambda=self.diversity_lambda,
            victim=self.victim,
            seed=seed,
            partnerplay=self.partnerplay,
            sequential=self.sequential,
        )

    def training_options(self) -> TrainingOptions:
        return TrainingOptions(
            lookahead=self.lookahead_config(),
            mode=Mode(self.mode),
            batch_size=self.batch_size,
            init_scale=self.init_scale,
            checkpoint_interval=self.checkpoint_interval,
            window=self.window,
            threshold=self.threshold,
            log_threshold=self.log_threshold,
            stop_on_convergence=self.stop_on_convergence,
        )

    def resolve_game(self) -> PayoffGame:
        return resolve_game(self.game, self.horizon, self.discount)

    def to_dict(self) -> Dict[str, Any]:
        document = asdict(self)
        document["seeds"] = list(self.seeds)
        return document


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _field_named_in(message: str) -> Optional[str]:
    for name in sorted(DOTTED_NAMES, key=len, reverse=True):
        if re.search(rf"\b{name}\b", message):
            return DOTTED_NAMES[name]
    return None


def _coerce(name: str, value: Any, line: Optional[int] = None) -> Any:
    """Checks the TOML type of `value` against the field `name`."""
    dotted = DOTTED_NAMES.get(name, name)
    kind = _FIELD_TYPES[name]
    if name == "seeds":
        seeds = value if isinstance(value, (list, tuple)) else [value]
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError(f"seeds must be integers, got {value!r}", line=line, field=dotted)
        return tuple(seeds)
    if kind in (int, Optional[int]):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", line=line, field=dotted)
        return value
    if kind in (float, Optional[float]):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", line=line, field=dotted)
        return float(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", line=line, field=dotted)
        return value
    if not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", line=line, field=dotted)
    return value


def _line_of(text: str, section: str, key: str) -> Optional[int]:
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[([^\[\]]+)\]$", stripped)
        if header:
            current = header.group(1).strip().split(".")[-1]
        elif current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return number
    return None


def _from_document(document: Dict[str, Any], text: str, source: str) -> ExperimentConfig:
    values: Dict[str, Any] = {}
    for section, table in document.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in {source}", field=section)
        if not isinstance(table, dict):
            raise ConfigError(f"expected a table in {source}", field=section)
        for key, value in table.items():
            dotted = f"{section}.{key}"
            if key not in SECTIONS[section]:
                raise ConfigError(
                    f"unknown key in {source}", line=_line_of(text, section, key), field=dotted
                )
            name = SECTIONS[section][key]
            values[name] = _coerce(name, value, _line_of(text, section, key))
    return replace(ExperimentConfig(), **values)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Loads an experiment configuration.

    Args:
        path (Optional[str]): TOML file to read. Without it `rationalpg.toml` and
            then the `[tool.rationalpg]` table of `pyproject.toml` are tried.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        ConfigError: If the file is missing, malformed or holds invalid values;
            carries the line number or the dotted field name.
    """
    config_file = path
    if config_file is None:
        if os.path.exists(CONFIG_FILE):
            config_file = CONFIG_FILE
        elif os.path.exists("pyproject.toml"):
            config_file = "pyproject.toml"
    elif not os.path.exists(config_file):
        raise ConfigError(f"configuration file not found: {config_file}")

    config = ExperimentConfig()
    if config_file:
        with open(config_file, "r", encoding="utf-8") as f:
            text = f.read()
        try:
            loaded: Dict[str, Any] = toml.loads(text)
        except toml.TomlDecodeError as e:
            raise ConfigError(
                f"error decoding {config_file}: {e.msg}", line=getattr(e, "lineno", None)
            ) from None

        if os.path.basename(config_file) == "pyproject.toml":
            loaded = loaded.get("tool", {}).get("rationalpg", {})
        config = _from_document(loaded, text, config_file)
        logger.info("loaded configuration from %s", config_file)
    else:
        logger.info("no configuration file found, using defaults")

    output_root = os.environ.get(OUTPUT_ROOT_ENV)
    if output_root:
        config = replace(config, output=output_root)
    config.validate()
    return config


def config_hash(config: ExperimentConfig) -> str:
    """First 12 hex characters of SHA-256 over the canonical JSON of `config`,
    leaving out `seeds` and `output`."""
    document = {
        key: value for key, value in config.to_dict().items() if key not in ("seeds", "output")
    }
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
