"""Flat `key = value` run configuration.

One file drives every CLI command. Lines are `key = value`, `#` starts a
comment, keys are taken from a fixed schema and anything else is rejected
by name. Values keep their canonical textual form in the echo file that
every run writes next to its outputs.
"""

from __future__ import annotations

import dataclasses

from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_text",
           "render_echo"]


class ConfigError(ValueError):
    """Bad key, bad value, or unusable combination; carries the key name."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected true or false")


def _opt_float(text: str):
    return None if text == "none" else float(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data: str | None = None
    cache: str | None = None
    checkpoint: str | None = None
    outdir: str = "."
    eval_split: str = "test"
    synth_users: int = 200
    synth_items: int = 60
    synth_genres: int = 5
    synth_seq_len: int = 20
    synth_p_stay: float = 0.8
    synth_concentration: float = 1.0
    synth_popularity_skew: float = 1.0


# key -> (target, attribute, caster); target "train" hits TrainConfig,
# "run" hits RunConfig itself.
_SCHEMA = {
    "data": ("run", "data", str),
    "cache": ("run", "cache", str),
    "checkpoint": ("run", "checkpoint", str),
    "outdir": ("run", "outdir", str),
    "eval_split": ("run", "eval_split", str),
    "synth_users": ("run", "synth_users", int),
    "synth_items": ("run", "synth_items", int),
    "synth_genres": ("run", "synth_genres", int),
    "synth_seq_len": ("run", "synth_seq_len", int),
    "synth_p_stay": ("run", "synth_p_stay", float),
    "synth_concentration": ("run", "synth_concentration", float),
    "synth_popularity_skew": ("run", "synth_popularity_skew", float),
    "window": ("train", "window", int),
    "cap": ("train", "cap", int),
    "basket": ("train", "basket", int),
    "embed_dim": ("train", "embed_dim", int),
    "channels": ("train", "channels", int),
    "attn_dim": ("train", "attn_dim", int),
    "latent_dim": ("train", "latent_dim", int),
    "heads": ("train", "heads", int),
    "context_min": ("train", "context_min", int),
    "context_max": ("train", "context_max", int),
    "target_size": ("train", "target_size", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "learning_rate", float),
    "adam_beta1": ("train", "adam_beta1", float),
    "adam_beta2": ("train", "adam_beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "max_epochs": ("train", "max_epochs", int),
    "patience": ("train", "patience", int),
    "min_improve": ("train", "min_improve", float),
    "seed": ("train", "seed", int),
    "feedback": ("train", "feedback", str),
    "rating_max": ("train", "rating_max", _opt_float),
    "use_dilation": ("train", "use_dilation", _bool),
    "use_attention": ("train", "use_attention", _bool),
    "use_np": ("train", "use_np", _bool),
    "use_wasserstein": ("train", "use_wasserstein", _bool),
    "wass_impl": ("train", "wass_impl", str),
    "sinkhorn_samples": ("train", "sinkhorn_samples", int),
    "sinkhorn_lam": ("train", "sinkhorn_lam", float),
    "sinkhorn_iters": ("train", "sinkhorn_iters", int),
    "train_ratio": ("train", "train_ratio", float),
    "val_ratio": ("train", "val_ratio", float),
    "test_ratio": ("train", "test_ratio", float),
    "cutoffs": ("train", "cutoffs", _int_tuple),
    "eval_context_mode": ("train", "eval_context_mode", str),
    "eval_context_size": ("train", "eval_context_size", int),
    "exclude_seen": ("train", "exclude_seen", _bool),
    "new_user_embedding": ("train", "new_user_embedding", str),
    "workers": ("train", "workers", int),
}


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig(train=TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0],
                              f"{source}:{lineno}: expected `key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        target, attr, cast = _SCHEMA[key]
        try:
            typed = cast(value)
        except ValueError as exc:
            raise ConfigError(
                key, f"{source}:{lineno}: bad value {value!r} ({exc})") from exc
        obj = cfg.train if target == "train" else cfg
        setattr(obj, attr, typed)
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError("configuration", str(exc)) from exc
    return cfg


def parse_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read(), source=str(path))


def _render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_echo(cfg: RunConfig) -> str:
    """Fully resolved config text; parsing it back reproduces the run."""
    lines = []
    for key in sorted(_SCHEMA):
        target, attr, _ = _SCHEMA[key]
        obj = cfg.train if target == "train" else cfg
        value = getattr(obj, attr)
        if value is None and key in ("data", "cache", "checkpoint"):
            continue
        lines.append(f"{key} = {_render_value(value)}")
    return "\n".join(lines) + "\n"
