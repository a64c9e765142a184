"""K-layer transformer-style sequence encoder.

Post-norm blocks: a_l = LayerNorm(z_{l-1} + SelfAttn(z_{l-1})), then
z_l = LayerNorm(a_l + FF(a_l)), with an input projection d_in -> d_h,
sinusoidal position encodings (optional), and a per-frame N-way logit
head. The layer-k activation can be tapped and per-frame standardized to
feed a quantizer. All arithmetic goes through the autodiff graph so every
parameter is trainable.

Public matrices follow the column-frame convention (frame t is column t);
graph internals are row-frame (T x d).

Parameter layout and the closed-form count (see param_count):
  in_proj.w (d_in x d_h), in_proj.b (d_h)
  per layer i in 0..K-1:
    layers.i.attn.{wq,wk,wv,wo} (d_h x d_h), .bo (d_h)
    layers.i.ln1.g, layers.i.ln1.b (d_h)
    layers.i.ff.w1 (d_h x d_ff), .b1 (d_ff), .w2 (d_ff x d_h), .b2 (d_h)
    layers.i.ln2.g, layers.i.ln2.b (d_h)
  head.w (d_h x N), head.b (N)
total = d_in*d_h + d_h + K*(4*d_h^2 + 2*d_h*d_ff + 6*d_h + d_ff) + d_h*N + N

The q/k/v projections carry no biases. A key bias is exactly invisible to
the softmax (it shifts every score in a row equally), so it would be an
untrainable-in-effect parameter that gradient verification cannot
distinguish from noise; dropping q/v biases as well follows the common
convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff, seeding
from .autodiff import Tensor, layer_norm, gelu, no_grad
from .errors import ConfigError, NumericError
from .validation import check_matrix

MAX_LAYERS = 64


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    dim_in: int
    dim_hidden: int
    num_heads: int
    dim_ff: int
    num_codes: int
    seed: int = 0
    pos_encoding: bool = True

    def __post_init__(self):
        if not 1 <= self.num_layers <= MAX_LAYERS:
            raise ConfigError(f"num_layers must be in [1, {MAX_LAYERS}], "
                              f"got {self.num_layers}")
        if self.dim_in < 1 or self.dim_hidden < 1 or self.dim_ff < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.num_heads < 1 or self.dim_hidden % self.num_heads != 0:
            raise ConfigError(f"dim_hidden={self.dim_hidden} must be divisible "
                              f"by num_heads={self.num_heads}")
        if self.num_codes < 2:
            raise ConfigError(f"num_codes must be >= 2, got {self.num_codes}")


@dataclass
class ForwardTrace:
    """Per-layer activations (d_h x T each, layers 1..K) and logits (N x T)."""

    layers: list
    logits: np.ndarray

    def __post_init__(self):
        for z in self.layers:
            if not np.all(np.isfinite(z)):
                raise NumericError("non-finite encoder activation")
        if not np.all(np.isfinite(self.logits)):
            raise NumericError("non-finite encoder logits")


def default_k(num_layers: int) -> int:
    """Tap layer rule of thumb: seven tenths of the depth, at least 1.

    Nearest integer to 0.7 * num_layers with exact-half ties rounding
    down (depth 5 taps layer 3, depth 10 taps layer 7). Integer
    arithmetic so no binary-float artifact can flip a tie.
    """
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    return max(1, (7 * num_layers + 4) // 10)


def param_names(cfg: EncoderConfig) -> list[str]:
    """Canonical parameter order; initialization draws follow it."""
    names = ["in_proj.w", "in_proj.b"]
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        names += [f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv",
                  f"{p}.attn.wo", f"{p}.attn.bo",
                  f"{p}.ln1.g", f"{p}.ln1.b",
                  f"{p}.ff.w1", f"{p}.ff.b1", f"{p}.ff.w2", f"{p}.ff.b2",
                  f"{p}.ln2.g", f"{p}.ln2.b"]
    names += ["head.w", "head.b"]
    return names


def _tensor_spec(cfg: EncoderConfig, name: str):
    """(shape, kind) per tensor; kind is weight / zero / one."""
    d, f, n = cfg.dim_hidden, cfg.dim_ff, cfg.num_codes
    if name == "in_proj.w":
        return (cfg.dim_in, d), "weight"
    if name == "head.w":
        return (d, n), "weight"
    if name == "head.b":
        return (n,), "zero"
    if name == "in_proj.b":
        return (d,), "zero"
    leaf = name.split(".", 2)[2]
    if leaf.startswith("attn.w"):
        return (d, d), "weight"
    if leaf.startswith("attn.b"):
        return (d,), "zero"
    if leaf == "ff.w1":
        return (d, f), "weight"
    if leaf == "ff.b1":
        return (f,), "zero"
    if leaf == "ff.w2":
        return (f, d), "weight"
    if leaf == "ff.b2":
        return (d,), "zero"
    if leaf.endswith(".g"):
        return (d,), "one"
    if leaf.endswith(".b"):
        return (d,), "zero"
    raise ValueError(f"unknown parameter {name}")


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form trainable parameter count (formula in module docstring)."""
    d, f = cfg.dim_hidden, cfg.dim_ff
    per_layer = 4 * d * d + 2 * d * f + 6 * d + f
    return (cfg.dim_in * d + d + cfg.num_layers * per_layer
            + d * cfg.num_codes + cfg.num_codes)


def init_encoder(cfg: EncoderConfig, dtype=np.float32) -> dict:
    """Seeded init: weights N(0, 1/fan_in), norm gains 1, all biases 0."""
    gen = seeding.rng(cfg.seed, seeding.ROLE_INIT)
    params = {}
    for name in param_names(cfg):
        shape, kind = _tensor_spec(cfg, name)
        if kind == "weight":
            fan_in = shape[0]
            arr = gen.standard_normal(shape) / np.sqrt(fan_in)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def params_to_tensors(params: dict) -> dict:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def sinusoidal_positions(num_frames: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table, (T x d)."""
    pos = np.arange(num_frames, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def _attention(z: Tensor, p: dict, prefix: str, num_heads: int) -> Tensor:
    b, t, d = z.shape
    hd = d // num_heads
    q = z @ p[f"{prefix}.wq"]
    k = z @ p[f"{prefix}.wk"]
    v = z @ p[f"{prefix}.wv"]
    # (B, T, d) -> (B, H, T, hd)
    q = q.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)
    k = k.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)
    v = v.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = autodiff.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def forward_graph(p: dict, x: Tensor, cfg: EncoderConfig):
    """Row-frame graph forward -> (z list, logits).

    x is one sequence (T x d_in) or a batch (B x T x d_in); outputs keep
    the input's leading shape. z list holds the K post-block activations,
    each (.. x T x d_h), still on the graph so taps keep gradients
    flowing. Sequences in a batch never attend across each other.
    """
    single = len(x.shape) == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, t = x.shape[0], x.shape[1]
    z = x @ p["in_proj.w"] + p["in_proj.b"]
    if cfg.pos_encoding:
        z = z + Tensor(sinusoidal_positions(t, cfg.dim_hidden, dtype=z.dtype))
    zs = []
    for i in range(cfg.num_layers):
        prefix = f"layers.{i}"
        a = layer_norm(z + _attention(z, p, f"{prefix}.attn", cfg.num_heads),
                       p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        z = layer_norm(a + (gelu(a @ p[f"{prefix}.ff.w1"] + p[f"{prefix}.ff.b1"])
                            @ p[f"{prefix}.ff.w2"] + p[f"{prefix}.ff.b2"]),
                       p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        zs.append(z)
    logits = z @ p["head.w"] + p["head.b"]
    if single:
        zs = [zz.reshape(t, cfg.dim_hidden) for zz in zs]
        logits = logits.reshape(t, cfg.num_codes)
    return zs, logits


def tap_graph(zs: list, k: int) -> Tensor:
    """Per-frame standardized layer-k activation, (T x d_h), on the graph."""
    if not 1 <= k <= len(zs):
        raise ValueError(f"tap layer {k} out of range [1, {len(zs)}]")
    return autodiff.standardize_rows(zs[k - 1])


def forward(params: dict, x: np.ndarray, cfg: EncoderConfig) -> ForwardTrace:
    """Column-frame forward: x is (d_in x T) -> ForwardTrace."""
    x = check_matrix(x, "x")
    if x.shape[0] != cfg.dim_in:
        raise ValueError(f"input has {x.shape[0]} rows, config expects {cfg.dim_in}")
    with no_grad():
        tensors = {k: Tensor(v) for k, v in params.items()}
        dtype = next(iter(params.values())).dtype
        zs, logits = forward_graph(tensors, Tensor(x.T.astype(dtype)), cfg)
    return ForwardTrace([z.data.T for z in zs], logits.data.T)


def tap(trace: ForwardTrace, k: int) -> np.ndarray:
    """Per-frame standardization of z^(k): each column gets mean 0, std 1."""
    if not 1 <= k <= len(trace.layers):
        raise ValueError(f"tap layer {k} out of range [1, {len(trace.layers)}]")
    z = trace.layers[k - 1].astype(np.float64)
    mu = z.mean(axis=0, keepdims=True)
    centered = z - mu
    sd = np.sqrt((centered * centered).mean(axis=0, keepdims=True))
    return centered / sd
