"""Strict experiment config files: TOML-style sections of key = value.

A config file fully determines a run given the corpus file. Parsing is
deliberately strict: unknown sections or keys are errors, because a
silently ignored typo would invalidate an ablation. Rendering a resolved
config re-parses to the identical object, which is how every command can
print a reproducible description of what it actually ran.

Supported values: quoted strings, booleans, integers, floats, and flat
lists, e.g. ``kernels = [3, 7, 15, 23]``. Comments start with ``#``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .adapters import AdapterConfig
from .data import CorpusSpec
from .encoder import ENCODER_PRESETS, EncoderConfig, encoder_preset
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig
    adapter: AdapterConfig
    train: TrainConfig
    data: CorpusSpec


# -- low-level parsing ----------------------------------------------------


def _parse_scalar(raw: str, where: str) -> Any:
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"{where}: empty value")
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        body = raw[1:-1]
        if '"' in body or "\\" in body:
            raise ConfigError(f"{where}: escapes and embedded quotes are not supported")
        return body
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {raw!r}") from None


def _parse_value(raw: str, where: str) -> Any:
    raw = raw.strip()
    if raw.startswith("["):
        if not raw.endswith("]"):
            raise ConfigError(f"{where}: unterminated list {raw!r}")
        body = raw[1:-1].strip()
        if not body:
            return []
        return [_parse_scalar(item, where) for item in body.split(",")]
    return _parse_scalar(raw, where)


def parse_sections(text: str) -> dict[str, dict[str, Any]]:
    """Raw text -> {section: {key: value}} with duplicate detection."""
    sections: dict[str, dict[str, Any]] = {}
    current: dict[str, Any] | None = None
    current_name = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"line {lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            name = stripped[1:-1].strip()
            if name in sections:
                raise ConfigError(f"{where}: duplicate section [{name}]")
            current = sections.setdefault(name, {})
            current_name = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected key = value, got {stripped!r}")
        if current is None:
            raise ConfigError(f"{where}: key outside of any [section]")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in current:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{current_name}]")
        current[key] = _parse_value(raw, f"{where} ({current_name}.{key})")
    return sections


# -- section schemas --------------------------------------------------------

_ENCODER_KEYS = {
    "layers": "num_layers",
    "model_dim": "model_dim",
    "inner_dim": "inner_dim",
    "heads": "num_heads",
    "feature_dim": "feature_dim",
    "max_seq_len": "max_seq_len",
    "pre_norm": "pre_norm",
    "positions": "positions",
}

_ADAPTER_KEYS = {
    "variant": "variant",
    "kernels": "kernels",
    "bottleneck": "bottleneck",
    "fusion": "fusion",
    "placement": "placement",
    "rank": "rank",
    "prompt_tokens": "prompt_tokens",
}

_TRAIN_KEYS = {
    "lr": "lr",
    "beta1": "beta1",
    "beta2": "beta2",
    "eps": "eps",
    "weight_decay": "weight_decay",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "mode": "mode",
    "target_dev_eer": "target_dev_eer",
}

_DATA_KEYS = {
    "seed": "seed",
    "num_records": "num_records",
    "frames": "frames",
    "features": "features",
    "p_bonafide": None,  # folded into proportions
    "p_short": None,
    "p_long": None,
    "p_mixed": None,
    "burst_amplitude": "burst_amplitude",
    "burst_count": "burst_count",
    "burst_max_len": "burst_max_len",
    "mod_depth": "mod_depth",
    "mod_period_min": None,  # folded into mod_period
    "mod_period_max": None,
}

_FLOAT_FIELDS = {"lr", "beta1", "beta2", "eps", "weight_decay", "target_dev_eer",
                 "burst_amplitude", "mod_depth", "p_bonafide", "p_short", "p_long", "p_mixed",
                 "mod_period_min", "mod_period_max"}


def _check_keys(section: str, given: dict[str, Any], allowed: dict[str, Any], extra=()) -> None:
    legal = set(allowed) | set(extra)
    for key in given:
        if key not in legal:
            raise ConfigError(
                f"[{section}] has unknown key {key!r}; allowed: {sorted(legal)}"
            )


def _coerce(key: str, value: Any) -> Any:
    if key in _FLOAT_FIELDS and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_experiment_config(sections: dict[str, dict[str, Any]]) -> ExperimentConfig:
    known_sections = {"encoder", "adapter", "train", "data"}
    for name in sections:
        if name not in known_sections:
            raise ConfigError(f"unknown section [{name}]; allowed: {sorted(known_sections)}")

    enc_raw = dict(sections.get("encoder", {}))
    _check_keys("encoder", enc_raw, _ENCODER_KEYS, extra=("preset",))
    preset = enc_raw.pop("preset", None)
    enc_kwargs = {_ENCODER_KEYS[k]: _coerce(k, v) for k, v in enc_raw.items()}
    try:
        if preset is not None:
            if preset not in ENCODER_PRESETS:
                raise ConfigError(f"[encoder] unknown preset {preset!r}")
            encoder = encoder_preset(preset, **enc_kwargs)
        else:
            encoder = EncoderConfig(**enc_kwargs)

        adp_raw = dict(sections.get("adapter", {}))
        _check_keys("adapter", adp_raw, _ADAPTER_KEYS)
        adp_kwargs = {_ADAPTER_KEYS[k]: _coerce(k, v) for k, v in adp_raw.items()}
        if "kernels" in adp_kwargs:
            adp_kwargs["kernels"] = tuple(int(k) for k in adp_kwargs["kernels"])
        adapter = AdapterConfig(**adp_kwargs)

        trn_raw = dict(sections.get("train", {}))
        _check_keys("train", trn_raw, _TRAIN_KEYS)
        train_cfg = TrainConfig(**{_TRAIN_KEYS[k]: _coerce(k, v) for k, v in trn_raw.items()})

        dat_raw = {k: _coerce(k, v) for k, v in sections.get("data", {}).items()}
        _check_keys("data", dat_raw, _DATA_KEYS)
        proportions = (
            dat_raw.pop("p_bonafide", 0.5),
            dat_raw.pop("p_short", 1 / 6),
            dat_raw.pop("p_long", 1 / 6),
            dat_raw.pop("p_mixed", 1 / 6),
        )
        period = (dat_raw.pop("mod_period_min", 40.0), dat_raw.pop("mod_period_max", 120.0))
        data = CorpusSpec(proportions=proportions, mod_period=period,
                          **{_DATA_KEYS[k]: v for k, v in dat_raw.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(encoder, adapter, train_cfg, data)


def parse_config_text(text: str) -> ExperimentConfig:
    return build_experiment_config(parse_sections(text))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


# -- rendering ----------------------------------------------------------------


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """Materialize every default; the output re-parses to an equal config."""
    enc, adp, trn, dat = cfg.encoder, cfg.adapter, cfg.train, cfg.data
    lines = ["[encoder]"]
    lines += [
        f"layers = {enc.num_layers}",
        f"model_dim = {enc.model_dim}",
        f"inner_dim = {enc.inner_dim}",
        f"heads = {enc.num_heads}",
        f"feature_dim = {enc.feature_dim}",
        f"max_seq_len = {enc.max_seq_len}",
        f"pre_norm = {_format_value(enc.pre_norm)}",
        f"positions = {_format_value(enc.positions)}",
        "",
        "[adapter]",
        f"variant = {_format_value(adp.variant)}",
        f"kernels = {_format_value(list(adp.kernels))}",
        f"bottleneck = {adp.bottleneck}",
        f"fusion = {_format_value(adp.fusion)}",
        f"placement = {_format_value(adp.placement)}",
        f"rank = {adp.rank}",
        f"prompt_tokens = {adp.prompt_tokens}",
        "",
        "[train]",
        f"lr = {_format_value(trn.lr)}",
        f"beta1 = {_format_value(trn.beta1)}",
        f"beta2 = {_format_value(trn.beta2)}",
        f"eps = {_format_value(trn.eps)}",
        f"weight_decay = {_format_value(trn.weight_decay)}",
        f"epochs = {trn.epochs}",
        f"batch_size = {trn.batch_size}",
        f"seed = {trn.seed}",
        f"mode = {_format_value(trn.mode)}",
    ]
    if trn.target_dev_eer is not None:
        lines.append(f"target_dev_eer = {_format_value(trn.target_dev_eer)}")
    lines += [
        "",
        "[data]",
        f"seed = {dat.seed}",
        f"num_records = {dat.num_records}",
        f"frames = {dat.frames}",
        f"features = {dat.features}",
        f"p_bonafide = {_format_value(dat.proportions[0])}",
        f"p_short = {_format_value(dat.proportions[1])}",
        f"p_long = {_format_value(dat.proportions[2])}",
        f"p_mixed = {_format_value(dat.proportions[3])}",
        f"burst_amplitude = {_format_value(dat.burst_amplitude)}",
        f"burst_count = {dat.burst_count}",
        f"burst_max_len = {dat.burst_max_len}",
        f"mod_depth = {_format_value(dat.mod_depth)}",
        f"mod_period_min = {_format_value(dat.mod_period[0])}",
        f"mod_period_max = {_format_value(dat.mod_period[1])}",
        "",
    ]
    return "\n".join(lines)


def default_experiment_config() -> ExperimentConfig:
    return ExperimentConfig(EncoderConfig(), AdapterConfig(), TrainConfig(), CorpusSpec())


def with_overrides(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentConfig:
    """Apply CLI-level overrides (currently just the seed) everywhere relevant."""
    if seed is None:
        return cfg
    return ExperimentConfig(
        cfg.encoder,
        cfg.adapter,
        replace(cfg.train, seed=seed),
        replace(cfg.data, seed=seed),
    )
