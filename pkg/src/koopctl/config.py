"""Flat key = value run configuration.

One `key = value` per line, `#` starts a comment. Precedence:
command-line override > config file > built-in default. Unknown keys and
out-of-range values are rejected with the offending field named (the CLI
maps that to exit code 2).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .envs import ENV_NAMES


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"config field {field_name!r}: {message}")


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_interval(v):
    return 0.0 <= v <= 1.0


@dataclass
class Config:
    env: str = "pendulum"
    seed: int = 0
    latent_dim: int = 50
    control_dim: int = 1
    steps: int = 100_000
    dare_iters: int = 5            # unrolled Riccati iterations while training
    dare_iters_eval: int = 200     # converged solves for evaluation/analysis
    noise_scale: float = 0.1       # augmentation half-width, relative
    ema_tau: float = 0.95          # key-encoder EMA
    critic_tau: float = 0.99      # critic-target EMA
    lr_critic: float = 1e-3
    lr_actor: float = 3e-4         # cost diagonals + log_std
    lr_encoder: float = 3e-4
    lr_koopman: float = 3e-4
    lr_alpha: float = 1e-3
    batch_size: int = 128
    gamma: float = 0.99
    buffer_capacity: int = 1_000_000
    warmup_steps: int = 1000
    checkpoint_every: int = 50_000
    eval_episodes: int = 10
    z_ref_mode: str = "goal-encode"   # or "zero"
    baseline: bool = False
    baseline_q_diag: float = 1.0   # fixed uniform cost diagonals, stage 2
    baseline_r_diag: float = 1.0
    baseline_data_steps: int = 20_000
    baseline_train_iters: int = 5000
    baseline_use_cst: bool = True
    perturb_scale: float = 0.0     # relative Frobenius perturbation of A, B
    out: str = ""                  # resolved by the CLI when empty


_VALIDATORS = {
    "env": (lambda v: v in ENV_NAMES, f"must be one of {ENV_NAMES}"),
    "seed": (_non_negative, "must be >= 0"),
    "latent_dim": (_positive, "must be >= 1"),
    "control_dim": (_positive, "must be >= 1"),
    "steps": (_non_negative, "must be >= 0"),
    "dare_iters": (_positive, "must be >= 1"),
    "dare_iters_eval": (_positive, "must be >= 1"),
    "noise_scale": (_non_negative, "must be >= 0"),
    "ema_tau": (_unit_interval, "must be in [0, 1]"),
    "critic_tau": (_unit_interval, "must be in [0, 1]"),
    "lr_critic": (_non_negative, "must be >= 0"),
    "lr_actor": (_non_negative, "must be >= 0"),
    "lr_encoder": (_non_negative, "must be >= 0"),
    "lr_koopman": (_non_negative, "must be >= 0"),
    "lr_alpha": (_non_negative, "must be >= 0"),
    "batch_size": (lambda v: v >= 2, "must be >= 2"),
    "gamma": (lambda v: 0.0 < v < 1.0, "must be in (0, 1)"),
    "buffer_capacity": (_positive, "must be >= 1"),
    "warmup_steps": (_non_negative, "must be >= 0"),
    "checkpoint_every": (_positive, "must be >= 1"),
    "eval_episodes": (_positive, "must be >= 1"),
    "z_ref_mode": (lambda v: v in ("goal-encode", "zero"),
                   "must be goal-encode or zero"),
    "baseline_q_diag": (_positive, "must be > 0"),
    "baseline_r_diag": (_positive, "must be > 0"),
    "baseline_data_steps": (_positive, "must be >= 1"),
    "baseline_train_iters": (_non_negative, "must be >= 0"),
    "perturb_scale": (_non_negative, "must be >= 0"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(name, raw):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind}: {err}") from err


def parse_config_text(text):
    """Key/value pairs from config-file text; values still raw strings."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides=None):
    """Build a validated Config from defaults, an optional file, overrides.

    `overrides` values may be already-typed (from argparse) or strings.
    """
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError("config", f"cannot read {path}: {err}") from err
        for key, raw in parse_config_text(text).items():
            if key not in _FIELD_TYPES:
                raise ConfigError(key, "unknown key")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    cfg = Config(**values)
    validate(cfg)
    return cfg


def validate(cfg):
    for name, (check, message) in _VALIDATORS.items():
        if not check(getattr(cfg, name)):
            raise ConfigError(name, f"{message}, got {getattr(cfg, name)!r}")
    if cfg.warmup_steps < cfg.batch_size and cfg.steps > cfg.warmup_steps:
        # the first update must have a sampleable buffer
        raise ConfigError("warmup_steps", "must be >= batch_size when training")
    return cfg


def config_lines(cfg):
    """Canonical `key = value` lines (sorted) for snapshots and run dirs."""
    out = []
    for f in sorted(_FIELD_TYPES):
        v = getattr(cfg, f)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f} = {v}")
    return out


def config_from_lines(lines):
    values = {}
    for key, raw in parse_config_text("\n".join(lines)).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown key in snapshot")
        values[key] = _coerce(key, raw)
    return validate(Config(**values))
