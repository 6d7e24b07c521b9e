"""
Experiment files: TOML loading, JSON Schema validation, command-line overrides,
parameter sweeps and the preset covering every Table-style comparison cell.
"""
import re
import tomllib
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator
from loguru import logger

from errors import ConfigError, DegenerateRule
from fusion import MvfNoise
from harness import ExperimentConfig, FilterMode, FilterVariant, InitMode
from models import CT_STATE_DIM, CtModelConfig, SensorModel
from rules import RuleKind, RuleSpec

TABLE2_KAPPAS = (-2, -1, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10)
TABLE2_INTENSITIES = (1, 4, 8)
KAPPA_SWEEP = tuple(range(-2, 11))
INTENSITY_SWEEP = (0.5, 1, 2, 4, 8)

_NUMBER = {"type": "number"}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NONNEGATIVE = {"type": "number", "minimum": 0}
_STATE = {"type": "array", "items": _NUMBER, "minItems": CT_STATE_DIM, "maxItems": CT_STATE_DIM}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "required": ["model", "sensors", "filters", "mc"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "required": ["ts", "k_steps", "x0", "p0_diag"],
            "additionalProperties": False,
            "properties": {
                "ts": _POSITIVE,
                "k_steps": {"type": "integer", "minimum": 1},
                "q1": _NONNEGATIVE,
                "q2": _NONNEGATIVE,
                "omega_epsilon": _POSITIVE,
                "x0": _STATE,
                "x0_turn_deg": _NUMBER,
                "p0_diag": {**_STATE, "items": _NONNEGATIVE},
            },
        },
        "sensors": {
            "type": "object",
            "required": ["source", "primary"],
            "additionalProperties": False,
            "properties": {
                "source": {
                    "type": "object",
                    "required": ["iw_star"],
                    "additionalProperties": False,
                    "properties": {"sigma_r": _POSITIVE, "sigma_zeta": _POSITIVE, "iw_star": _POSITIVE},
                },
                "primary": {
                    "type": "object",
                    "required": ["iw"],
                    "additionalProperties": False,
                    "properties": {"sigma_r": _POSITIVE, "sigma_zeta": _POSITIVE, "iw": _POSITIVE},
                },
            },
        },
        "filters": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "required": ["rule"],
                "additionalProperties": False,
                "properties": {
                    "rule": {"enum": [k.value for k in RuleKind]},
                    "kappa": _NUMBER,
                    "alpha": {"type": "number", "minimum": 1e-4, "maximum": 1},
                    "modes": {
                        "type": "array",
                        "items": {"enum": [m.value for m in FilterMode]},
                        "minItems": 1,
                        "uniqueItems": True,
                    },
                },
            },
        },
        "mc": {
            "type": "object",
            "required": ["mc"],
            "additionalProperties": False,
            "properties": {
                "mc": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "init": {"enum": [m.value for m in InitMode]},
                "mvf_noise": {"enum": [m.value for m in MvfNoise]},
                "max_divergence_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}

_TOML_LINE = re.compile(r"line (\d+)")


def parse_experiment(text: str, source: str = "<string>") -> dict:
    """Parses and validates experiment TOML, returning the raw document."""
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ConfigError(f"{source}: {e}", line=int(match.group(1)) if match else None) from e

    errors = sorted(Draft202012Validator(EXPERIMENT_SCHEMA).iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        field = ".".join(str(p) for p in first.absolute_path) or None
        for extra in errors[1:]:
            logger.debug(f"Also invalid: {'.'.join(str(p) for p in extra.absolute_path)}: {extra.message}")
        raise ConfigError(f"{source}: {first.message}", field=field)
    logger.debug(f"{source} validated against the experiment schema.")
    return document


def _filter_variants(filters: dict, kappa_override: float | None) -> list[FilterVariant]:
    variants = []
    for name, entry in filters.items():
        kind = RuleKind(entry["rule"])
        kappa = entry.get("kappa")
        if kind is RuleKind.UT:
            kappa = kappa_override if kappa_override is not None else kappa
        elif kappa is not None:
            logger.warning(f"filters.{name}: kappa only applies to the unscented rule and is ignored.")
            kappa = None
        try:
            spec = RuleSpec(kind, CT_STATE_DIM, alpha=entry.get("alpha", 1.0), kappa=kappa)
        except DegenerateRule as e:
            raise ConfigError(str(e), field=f"filters.{name}") from e
        for mode in entry.get("modes", [m.value for m in FilterMode]):
            variant = FilterVariant(spec, FilterMode(mode))
            if variant not in variants:
                variants.append(variant)
    return variants


def build_config(
    document: dict,
    seed: int | None = None,
    mc: int | None = None,
    kappa: float | None = None,
    iw: float | None = None,
    init: str | None = None,
) -> ExperimentConfig:
    """Builds an ExperimentConfig from a validated document; keyword overrides win over the file."""
    model, sensors, mc_section = document["model"], document["sensors"], document["mc"]
    x0 = np.array(model["x0"], dtype=float)
    if "x0_turn_deg" in model:
        x0[4] = np.deg2rad(model["x0_turn_deg"])

    source = sensors["source"]
    primary = sensors["primary"]
    defaults = SensorModel()
    if seed is None:
        seed = mc_section.get("seed", 0)

    try:
        return ExperimentConfig(
            model=CtModelConfig(
                T_s=model["ts"],
                q1=model.get("q1", CtModelConfig.q1),
                q2=model.get("q2", CtModelConfig.q2),
                omega_epsilon=model.get("omega_epsilon", CtModelConfig.omega_epsilon),
            ),
            x0=tuple(x0),
            p0_diag=tuple(model["p0_diag"]),
            k_steps=model["k_steps"],
            mc_runs=mc if mc is not None else mc_section["mc"],
            seed=seed,
            source_sensor=SensorModel(
                source.get("sigma_r", defaults.sigma_r), source.get("sigma_zeta", defaults.sigma_zeta), source["iw_star"]
            ),
            primary_sensor=SensorModel(
                primary.get("sigma_r", defaults.sigma_r),
                primary.get("sigma_zeta", defaults.sigma_zeta),
                iw if iw is not None else primary["iw"],
            ),
            variants=tuple(_filter_variants(document["filters"], kappa)),
            init_mode=InitMode(init or mc_section.get("init", InitMode.SAMPLED.value)),
            mvf_noise=MvfNoise(mc_section.get("mvf_noise", MvfNoise.FUSED.value)),
            max_divergence_fraction=mc_section.get("max_divergence_fraction", ExperimentConfig.max_divergence_fraction),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid experiment: {e}") from e


def load_experiment(path: str | Path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read experiment file {path}: {e}") from e
    cfg = build_config(parse_experiment(text, str(path)), **overrides)
    logger.info(f"Loaded {path}: {len(cfg.variants)} variants, K={cfg.k_steps}, MC={cfg.mc_runs}")
    return cfg


def table2_variants() -> tuple[FilterVariant, ...]:
    """Every row of the comparison table: UKF at each kappa, CKF3 and CKF5, each isolated, MVF and BTLF."""
    specs = [RuleSpec(RuleKind.UT, CT_STATE_DIM, kappa=k) for k in TABLE2_KAPPAS]
    specs += [RuleSpec(RuleKind.CKF3, CT_STATE_DIM), RuleSpec(RuleKind.CKF5, CT_STATE_DIM)]
    modes = (FilterMode.ISOLATED, FilterMode.MVF, FilterMode.BTLF)
    return tuple(FilterVariant(spec, mode) for spec in specs for mode in modes)


def with_kappa(cfg: ExperimentConfig, kappa: float) -> ExperimentConfig:
    """Replaces kappa in every unscented variant; cubature variants are kept as they are."""
    variants = []
    for variant in cfg.variants:
        if variant.rule.kind is RuleKind.UT:
            try:
                rule = RuleSpec(RuleKind.UT, variant.rule.n_x, alpha=variant.rule.alpha, kappa=kappa)
            except DegenerateRule as e:
                raise ConfigError(str(e), field="kappa") from e
            variant = FilterVariant(rule, variant.mode)
        if variant not in variants:
            variants.append(variant)
    return cfg.replace(variants=tuple(variants))


def with_intensity(cfg: ExperimentConfig, iw: float) -> ExperimentConfig:
    try:
        return cfg.replace(primary_sensor=cfg.primary_sensor.with_intensity(iw))
    except ValueError as e:
        raise ConfigError(str(e), field="iw") from e


def sweep_configs(cfg: ExperimentConfig, sweep: str, values) -> list[tuple[float, ExperimentConfig]]:
    """One config per sweep point; every point reuses the same root seed and therefore the same streams."""
    values = list(values)
    if not values:
        raise ConfigError("The sweep has no values.", field="sweep")
    if sweep == "kappa":
        return [(v, with_kappa(cfg, v)) for v in values]
    if sweep == "intensity":
        return [(v, with_intensity(cfg, v)) for v in values]
    raise ConfigError(f"Unknown sweep {sweep!r}; expected 'kappa' or 'intensity'.", field="sweep")
