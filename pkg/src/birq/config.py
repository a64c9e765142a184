"""Flat key = value run configuration.

One schema drives parsing, validation, resolution, and serialization, so
a resolved config written to disk re-reads to exactly itself. Unknown and
duplicate keys are rejected rather than ignored; typos in a training run
should fail loudly before any compute is spent.

Resolution materializes the derived values: ``k = auto`` becomes the
concrete tap layer for the configured depth, and an optional base seed
fans out to the per-stream seeds (data, mask, gumbel, init, quantizer,
synth) as base+0 .. base+5.
"""
from __future__ import annotations

from .encoder import EncoderConfig, default_k
from .errors import ConfigError
from .features import SynthSpec
from .masking import MaskPolicy
from .objectives import PenaltyWeights
from .trainer import TrainConfig

_BOOL = "bool"
_INT = "int"
_FLOAT = "float"
_AUTO_INT = "auto_int"   # literal "auto" or an integer

# key -> (type tag, default, allowed choices or None)
SCHEMA = {
    "layers": (_INT, 5, None),
    "hidden_dim": (_INT, 64, None),
    "heads": (_INT, 4, None),
    "ff_dim": (_INT, 128, None),
    "pos_encoding": (_BOOL, True, None),
    "codebook_size": (_INT, 16, None),
    "code_dim": (_INT, 16, None),
    "tau": (_FLOAT, 0.5, None),
    "codebook_l2_normalize": (_BOOL, False, None),
    "num_codebooks": (_INT, 1, None),
    "w1": (_FLOAT, 0.1, None),
    "w2": (_FLOAT, 2.4, None),
    "k": (_AUTO_INT, "auto", None),
    "stop_label_grad": (_BOOL, False, None),
    "gumbel_noise": (_BOOL, True, None),
    "mask_start_prob": (_FLOAT, 0.02, None),
    "mask_span": (_INT, 20, None),
    "mask_noise_mean": (_FLOAT, 0.0, None),
    "mask_noise_std": (_FLOAT, 0.1, None),
    "mask_exact_count": (_BOOL, False, None),
    "epochs": (_INT, 2, None),
    "batch_size": (_INT, 4, None),
    "lr": (_FLOAT, 0.0002, None),
    "optimizer": ("choice", "adamw", ("sgd", "adamw")),
    "adam_beta1": (_FLOAT, 0.9, None),
    "adam_beta2": (_FLOAT, 0.999, None),
    "adam_eps": (_FLOAT, 1e-8, None),
    "weight_decay": (_FLOAT, 0.01, None),
    "warmup_steps": (_INT, 0, None),
    "clip_norm": (_FLOAT, 0.0, None),
    "dtype": ("choice", "float32", ("float32", "float64")),
    "stack_factor": (_INT, 2, None),
    "seed_data": (_INT, 0, None),
    "seed_mask": (_INT, 1, None),
    "seed_gumbel": (_INT, 2, None),
    "seed_init": (_INT, 3, None),
    "seed_quantizer": (_INT, 4, None),
    "synth_seed": (_INT, 1000, None),
    "synth_num_sequences": (_INT, 16, None),
    "synth_frames": (_INT, 120, None),
    "synth_dim": (_INT, 16, None),
    "synth_clusters": (_INT, 4, None),
    "synth_spread": (_FLOAT, 0.05, None),
    "synth_self_transition": (_FLOAT, 0.8, None),
}

_SEED_FANOUT = ("seed_data", "seed_mask", "seed_gumbel", "seed_init",
                "seed_quantizer", "synth_seed")


def default_config() -> dict:
    return {key: spec[1] for key, spec in SCHEMA.items()}


def _parse_value(key: str, raw: str):
    kind, _, choices = SCHEMA[key]
    if kind == _BOOL:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{key} must be true or false, got {raw!r}")
    if kind == _INT:
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if kind == _FLOAT:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None
        return value
    if kind == _AUTO_INT:
        if raw == "auto":
            return "auto"
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{key} must be 'auto' or an integer, "
                              f"got {raw!r}") from None
    if kind == "choice":
        if raw not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {raw!r}")
        return raw
    raise AssertionError(kind)


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    cfg = default_config()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, "
                              f"got {line.strip()!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        seen.add(key)
        cfg[key] = _parse_value(key, raw)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def resolve(cfg: dict, base_seed: int | None = None) -> dict:
    """Materialize derived values. Idempotent for a fixed base_seed.

    base_seed, when given, overrides the six seed keys as base+0..base+5
    in schema order.
    """
    out = dict(cfg)
    if base_seed is not None:
        for offset, key in enumerate(_SEED_FANOUT):
            out[key] = int(base_seed) + offset
    if out["k"] == "auto":
        out["k"] = default_k(out["layers"])
    return out


def serialize(cfg: dict) -> str:
    """Render in schema order; parse_config(serialize(c)) == c."""
    lines = []
    for key, (kind, _, _) in SCHEMA.items():
        value = cfg[key]
        if kind == _BOOL:
            text = "true" if value else "false"
        elif kind == _FLOAT:
            text = repr(float(value))
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# builders for the typed objects the rest of the package consumes

def to_encoder_config(cfg: dict, dim_in: int) -> EncoderConfig:
    return EncoderConfig(num_layers=cfg["layers"], dim_in=dim_in,
                         dim_hidden=cfg["hidden_dim"], num_heads=cfg["heads"],
                         dim_ff=cfg["ff_dim"], num_codes=cfg["codebook_size"],
                         seed=cfg["seed_init"],
                         pos_encoding=cfg["pos_encoding"])


def to_mask_policy(cfg: dict) -> MaskPolicy:
    return MaskPolicy(start_prob=cfg["mask_start_prob"], span=cfg["mask_span"],
                      noise_mean=cfg["mask_noise_mean"],
                      noise_std=cfg["mask_noise_std"],
                      stack_factor=cfg["stack_factor"],
                      exact_count=cfg["mask_exact_count"])


def to_train_config(cfg: dict, dim_in: int) -> TrainConfig:
    k = cfg["k"]
    return TrainConfig(
        encoder=to_encoder_config(cfg, dim_in),
        policy=to_mask_policy(cfg),
        weights=PenaltyWeights(w1=cfg["w1"], w2=cfg["w2"]),
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        optimizer=cfg["optimizer"], adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"], adam_eps=cfg["adam_eps"],
        weight_decay=cfg["weight_decay"], warmup_steps=cfg["warmup_steps"],
        clip_norm=cfg["clip_norm"], tau=cfg["tau"],
        k=0 if k == "auto" else k,
        num_codes=cfg["codebook_size"], code_dim=cfg["code_dim"],
        stack_factor=cfg["stack_factor"], num_codebooks=cfg["num_codebooks"],
        seed_data=cfg["seed_data"], seed_mask=cfg["seed_mask"],
        seed_gumbel=cfg["seed_gumbel"], seed_quantizer=cfg["seed_quantizer"],
        dtype=cfg["dtype"], gumbel_noise=cfg["gumbel_noise"],
        stop_label_grad=cfg["stop_label_grad"],
        l2_normalize=cfg["codebook_l2_normalize"])


def to_synth_spec(cfg: dict) -> SynthSpec:
    return SynthSpec(seed=cfg["synth_seed"],
                     num_sequences=cfg["synth_num_sequences"],
                     num_frames=cfg["synth_frames"], dim=cfg["synth_dim"],
                     num_clusters=cfg["synth_clusters"],
                     cluster_spread=cfg["synth_spread"],
                     self_transition=cfg["synth_self_transition"])
