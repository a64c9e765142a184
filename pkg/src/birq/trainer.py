"""Single-loop first-order training.

Each step: assemble a batch (crop to the batch-minimum length, draw
masks, noise fills, Gumbel noise), build the two-loss graph, backprop F
and G separately, combine gradients literally as w1*gF + w2*gG, and apply
the optimizer update. With w1 = 0 the F backward pass is skipped entirely
and the update reduces to the plain masked-prediction step.

Determinism: every draw is keyed by (seed, role, step-or-epoch, position)
so the metrics CSV is a pure function of config plus dataset, and a run
resumed from any epoch checkpoint reproduces the uninterrupted run's
remaining rows exactly. The per-epoch sequence order comes from a seeded
shuffle keyed by epoch.

Checkpoints hold float32 payloads; training in float64 works but resumes
only approximately (state is rounded through the file format).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _binio
from . import seeding
from .autodiff import Tensor, no_grad
from .encoder import (EncoderConfig, default_k, forward_graph, init_encoder,
                      param_names, params_to_tensors, tap_graph)
from .errors import DataError, FormatError, NumericError
from .features import FeatureSequence, prepare
from .masking import MaskPolicy
from .objectives import (PenaltyWeights, anchor_labels, assemble_batch,
                         build_step_graph, make_bundle)
from .quantizer import codebook_utilization
from .validation import check_matrix

CKPT_MAGIC = b"BIRQCKPT"
CKPT_VERSION = 1

METRICS_FIELDS = ("step", "epoch", "loss_total", "loss_F", "loss_G",
                  "mask_acc_anchor", "mask_acc_enh", "codebook_util_anchor",
                  "codebook_util_enh", "label_agreement", "grad_norm", "lr")
METRICS_HEADER = ",".join(METRICS_FIELDS)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig
    policy: MaskPolicy = field(default_factory=MaskPolicy)
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    epochs: int = 2
    batch_size: int = 4
    lr: float = 2e-4
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    clip_norm: float = 0.0
    tau: float = 0.5
    k: int = 0                   # 0 means default_k(num_layers)
    num_codes: int = 16
    code_dim: int = 16
    stack_factor: int = 2
    num_codebooks: int = 1
    seed_data: int = 0
    seed_mask: int = 1
    seed_gumbel: int = 2
    seed_quantizer: int = 4
    dtype: str = "float32"
    gumbel_noise: bool = True
    stop_label_grad: bool = False
    l2_normalize: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.warmup_steps < 0 or self.clip_norm < 0:
            raise ValueError("warmup_steps and clip_norm must be >= 0")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.num_codebooks < 1:
            raise ValueError("num_codebooks must be >= 1")
        k = self.resolved_k
        if not 1 <= k <= self.encoder.num_layers:
            raise ValueError(f"k={k} outside [1, {self.encoder.num_layers}]")

    @property
    def resolved_k(self) -> int:
        return self.k if self.k else default_k(self.encoder.num_layers)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class OptimizerState:
    """Adam moment buffers; empty dicts for sgd."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    epoch: int
    loss_total: float
    loss_f: float
    loss_g: float
    mask_acc_anchor: float
    mask_acc_enh: float
    codebook_util_anchor: float
    codebook_util_enh: float
    label_agreement: float
    grad_norm: float
    lr: float

    def to_csv_row(self) -> str:
        vals = [str(self.step), str(self.epoch)]
        vals += [repr(float(v)) for v in
                 (self.loss_total, self.loss_f, self.loss_g,
                  self.mask_acc_anchor, self.mask_acc_enh,
                  self.codebook_util_anchor, self.codebook_util_enh,
                  self.label_agreement, self.grad_norm, self.lr)]
        return ",".join(vals)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup_steps, then constant."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.lr * step / cfg.warmup_steps


def make_bundles(cfg: TrainConfig, dim_in: int) -> list:
    if cfg.num_codebooks == 1:
        return [make_bundle(cfg.seed_quantizer, cfg.num_codes, cfg.code_dim,
                            dim_in, cfg.encoder.dim_hidden, tau=cfg.tau,
                            l2_normalize=cfg.l2_normalize)]
    return [make_bundle(cfg.seed_quantizer, cfg.num_codes, cfg.code_dim,
                        dim_in, cfg.encoder.dim_hidden, tau=cfg.tau,
                        l2_normalize=cfg.l2_normalize, index=li)
            for li in range(cfg.num_codebooks)]


# ----------------------------------------------------------------------
# one step

def train_step(params_t: dict, opt: OptimizerState, batch: list,
               cfg: TrainConfig, bundles: list, step: int, epoch: int,
               anchors_full=None, util_anchor: float = 0.0):
    """One combined-gradient update. Mutates params_t and opt in place.

    ``batch`` is a list of prepared (T x d_in) arrays. ``anchors_full``
    optionally carries cached full-length anchor labels (per bundle, per
    batch item); otherwise they are recomputed. Returns (params_t, opt,
    MetricsRecord).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    w1, w2 = cfg.weights.w1, cfg.weights.w2
    x_clean, x_masked, mask_idx, gumbels = assemble_batch(
        batch, cfg.policy, cfg.num_codes, cfg.seed_mask, cfg.seed_gumbel,
        step, cfg.gumbel_noise, num_bundles=len(bundles))
    t_min = x_clean.shape[1]
    if anchors_full is not None:
        anchors = [[a[:t_min] for a in per_bundle] for per_bundle in anchors_full]
    else:
        anchors = [[anchor_labels(x, bu) for x in x_clean] for bu in bundles]

    sg = build_step_graph(params_t, cfg.encoder, bundles, x_clean, x_masked,
                          mask_idx, anchors, gumbels, cfg.resolved_k,
                          stop_label_grad=cfg.stop_label_grad)
    f_val = sg.loss_f.item()
    g_val = sg.loss_g.item()
    if not (math.isfinite(f_val) and math.isfinite(g_val)):
        raise NumericError(f"non-finite loss at step {step}")

    names = param_names(cfg.encoder)
    grad_f = None
    if w1 != 0.0:
        sg.loss_f.backward()
        grad_f = {n: _grad_or_zero(params_t[n]) for n in names}
    grad_g = None
    if w2 != 0.0:
        sg.loss_g.backward()
        grad_g = {n: _grad_or_zero(params_t[n]) for n in names}

    combined = {}
    for n in names:
        if grad_f is None:
            combined[n] = w2 * grad_g[n]
        elif grad_g is None:
            combined[n] = w1 * grad_f[n]
        else:
            combined[n] = w1 * grad_f[n] + w2 * grad_g[n]

    for n in names:
        if not np.all(np.isfinite(combined[n])):
            raise NumericError(f"non-finite gradient in {n} at step {step}")

    sq_sum = 0.0
    for n in names:
        g = combined[n]
        sq_sum += float(np.dot(g.ravel().astype(np.float64),
                               g.ravel().astype(np.float64)))
    grad_norm = math.sqrt(sq_sum)
    if cfg.clip_norm > 0 and grad_norm > cfg.clip_norm:
        scale = cfg.clip_norm / grad_norm
        for n in names:
            combined[n] = combined[n] * scale

    lr = lr_schedule(step, cfg)
    _apply_update(params_t, opt, combined, names, cfg, lr)

    rec = MetricsRecord(
        step=step, epoch=epoch,
        loss_total=w1 * f_val + w2 * g_val, loss_f=f_val, loss_g=g_val,
        mask_acc_anchor=sg.mask_acc_anchor, mask_acc_enh=sg.mask_acc_enhanced,
        codebook_util_anchor=util_anchor,
        codebook_util_enh=codebook_utilization(sg.enhanced_argmax, cfg.num_codes),
        label_agreement=sg.label_agreement, grad_norm=grad_norm, lr=lr)
    return params_t, opt, rec


def _grad_or_zero(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _apply_update(params_t: dict, opt: OptimizerState, grads: dict,
                  names: list, cfg: TrainConfig, lr: float) -> None:
    if cfg.optimizer == "sgd":
        opt.step += 1
        for n in names:
            t = params_t[n]
            t.data = t.data - lr * grads[n]
        return
    # adamw, decoupled weight decay
    opt.step += 1
    b1, b2, eps, wd = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for n in names:
        t = params_t[n]
        g = grads[n]
        if n not in opt.m:
            opt.m[n] = np.zeros_like(t.data)
            opt.v[n] = np.zeros_like(t.data)
        opt.m[n] = b1 * opt.m[n] + (1.0 - b1) * g
        opt.v[n] = b2 * opt.v[n] + (1.0 - b2) * (g * g)
        m_hat = opt.m[n] / bc1
        v_hat = opt.v[n] / bc2
        t.data = t.data - lr * (m_hat / (np.sqrt(v_hat) + eps)) - (lr * wd) * t.data


# ----------------------------------------------------------------------
# checkpoint format

def save_checkpoint(path, params: dict, opt: OptimizerState | None = None,
                    meta: dict | None = None) -> None:
    """Write all tensors (params, "opt.*" state, "meta.*" scalars), sorted
    by name, as float32."""
    flat = dict(params)
    if opt is not None:
        flat["opt.step"] = np.asarray(float(opt.step), dtype=np.float32)
        for n, arr in opt.m.items():
            flat[f"opt.m.{n}"] = arr
        for n, arr in opt.v.items():
            flat[f"opt.v.{n}"] = arr
    if meta:
        for key, value in meta.items():
            flat[f"meta.{key}"] = np.asarray(float(value), dtype=np.float32)
    with open(path, "wb") as fh:
        _binio.write_magic(fh, CKPT_MAGIC, CKPT_VERSION)
        fh.write(np.uint32(len(flat)).tobytes())
        for name in sorted(flat):
            arr = np.asarray(flat[name])
            raw = name.encode("utf-8")
            fh.write(np.uint16(len(raw)).tobytes())
            fh.write(raw)
            fh.write(np.uint8(arr.ndim).tobytes())
            for dim in arr.shape:
                fh.write(np.uint64(dim).tobytes())
            _binio.write_f32_array(fh, arr)


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into a flat {name: float32 array} dict."""
    flat = {}
    with open(path, "rb") as fh:
        _binio.check_magic(fh, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
        count = _binio.read_u32(fh, "checkpoint tensor count")
        for _ in range(count):
            (name_len,) = np.frombuffer(
                _binio.read_exact(fh, 2, "checkpoint name length"), dtype="<u2")
            name = _binio.read_exact(fh, int(name_len), "checkpoint name").decode("utf-8")
            rank = _binio.read_u8(fh, "checkpoint rank")
            dims = tuple(_binio.read_u64(fh, "checkpoint dim") for _ in range(rank))
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            arr = _binio.read_f32_array(fh, size, f"checkpoint tensor {name}")
            flat[name] = arr.reshape(dims)
        _binio.expect_eof(fh, "checkpoint")
    if not flat:
        raise FormatError("checkpoint holds no tensors")
    return flat


def split_checkpoint(flat: dict):
    """Separate a flat checkpoint dict into (params, OptimizerState, meta)."""
    params, meta = {}, {}
    opt = OptimizerState()
    for name, arr in flat.items():
        if name == "opt.step":
            opt.step = int(arr)
        elif name.startswith("opt.m."):
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr
        elif name.startswith("meta."):
            meta[name[5:]] = float(arr)
        else:
            params[name] = arr
    return params, opt, meta


# ----------------------------------------------------------------------
# full run

@dataclass
class RunResult:
    params: dict
    opt: OptimizerState
    records: list
    checkpoint_paths: list
    bundles: list


def _prepare_dataset(features: list, cfg: TrainConfig) -> list:
    if not features:
        raise DataError("dataset is empty")
    prepared = []
    for f in features:
        if not isinstance(f, FeatureSequence):
            f = FeatureSequence(check_matrix(f, "sequence"))
        prepared.append(prepare(f, cfg.stack_factor).data.astype(cfg.np_dtype))
    d_in = prepared[0].shape[1]
    for x in prepared:
        if x.shape[1] != d_in:
            raise DataError("sequences disagree on feature dimension")
    if d_in != cfg.encoder.dim_in:
        raise ValueError(f"encoder expects dim_in={cfg.encoder.dim_in}, "
                         f"stacked features have {d_in}")
    return prepared


def run_pretrain(cfg: TrainConfig, features: list, out_dir=None,
                 resume_from=None) -> RunResult:
    """Train for cfg.epochs over the dataset.

    Writes metrics.csv and per-epoch checkpoints under ``out_dir`` when
    given. ``resume_from`` continues from an epoch checkpoint; subsequent
    metrics rows are bit-identical to the uninterrupted run's.
    """
    prepared = _prepare_dataset(features, cfg)
    d_in = prepared[0].shape[1]
    bundles = make_bundles(cfg, d_in)
    anchors_cache = [[anchor_labels(x, bu) for x in prepared] for bu in bundles]
    util_anchor = codebook_utilization(np.concatenate(anchors_cache[0]),
                                       cfg.num_codes)

    start_epoch = 0
    global_step = 0
    opt = OptimizerState()
    if resume_from is not None:
        params, opt, meta = split_checkpoint(load_checkpoint(resume_from))
        template = init_encoder(cfg.encoder, dtype=cfg.np_dtype)
        for name, arr in template.items():
            if name not in params:
                raise ValueError(f"checkpoint is missing tensor {name}")
            if params[name].shape != arr.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {params[name].shape}, "
                    f"config expects {arr.shape}")
        params = {n: params[n].astype(cfg.np_dtype) for n in template}
        opt.m = {n: opt.m[n].astype(cfg.np_dtype) for n in opt.m}
        opt.v = {n: opt.v[n].astype(cfg.np_dtype) for n in opt.v}
        start_epoch = int(meta.get("epochs_done", 0))
        global_step = int(meta.get("global_step", 0))
    else:
        params = init_encoder(cfg.encoder, dtype=cfg.np_dtype)
    params_t = params_to_tensors(params)

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w",
                          encoding="utf-8", newline="\n")
        metrics_fh.write(METRICS_HEADER + "\n")

    records = []
    ckpt_paths = []
    n = len(prepared)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = seeding.rng(cfg.seed_data, seeding.ROLE_SHUFFLE,
                                epoch).permutation(n)
            for lo in range(0, n, cfg.batch_size):
                sel = order[lo: lo + cfg.batch_size]
                batch = [prepared[i] for i in sel]
                anchors_full = [[cache[i] for i in sel] for cache in anchors_cache]
                _, _, rec = train_step(params_t, opt, batch, cfg, bundles,
                                       global_step, epoch,
                                       anchors_full=anchors_full,
                                       util_anchor=util_anchor)
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(rec.to_csv_row() + "\n")
                    metrics_fh.flush()
                global_step += 1
            if out_dir is not None:
                path = os.path.join(out_dir, f"checkpoint_epoch_{epoch:04d}.ckpt")
                save_checkpoint(path, {n_: t.data for n_, t in params_t.items()},
                                opt, meta={"epochs_done": epoch + 1,
                                           "global_step": global_step})
                ckpt_paths.append(path)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    return RunResult(params={n_: t.data for n_, t in params_t.items()},
                     opt=opt, records=records, checkpoint_paths=ckpt_paths,
                     bundles=bundles)


def read_metrics(path) -> list:
    """Parse a metrics CSV back into a list of per-step dicts."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"bad metrics header in {path}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(METRICS_FIELDS):
            raise FormatError(f"bad metrics row in {path}: {ln!r}")
        row = {"step": int(parts[0]), "epoch": int(parts[1])}
        for name, val in zip(METRICS_FIELDS[2:], parts[2:]):
            row[name] = float(val)
        rows.append(row)
    return rows


# ----------------------------------------------------------------------
# estimator wrapper

class BiRQPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pretrainer with a scikit-learn surface.

    fit(X) trains the encoder on a list of raw (T x d) feature sequences
    (stacking and per-sequence standardization happen internally).
    transform(X) returns the standardized layer-k representation;
    predict(X) the per-frame argmax code of the logit head.
    """

    def __init__(self, epochs: int = 2, batch_size: int = 4, lr: float = 2e-4,
                 optimizer: str = "adamw", w1: float = 0.1, w2: float = 2.4,
                 tau: float = 0.5, k: int = 0, num_codes: int = 16,
                 code_dim: int = 16, num_layers: int = 5, hidden_dim: int = 64,
                 num_heads: int = 4, ff_dim: int = 128, stack_factor: int = 2,
                 mask_start_prob: float = 0.02, mask_span: int = 20,
                 mask_noise_std: float = 0.1, warmup_steps: int = 0,
                 seed: int = 0, dtype: str = "float32"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.w1 = w1
        self.w2 = w2
        self.tau = tau
        self.k = k
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.ff_dim = ff_dim
        self.stack_factor = stack_factor
        self.mask_start_prob = mask_start_prob
        self.mask_span = mask_span
        self.mask_noise_std = mask_noise_std
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.dtype = dtype

    def _sequences(self, X) -> list:
        if isinstance(X, (list, tuple)):
            return [check_matrix(x, "X[i]") for x in X]
        return [check_matrix(X, "X")]

    def _config(self, dim_in: int) -> TrainConfig:
        enc = EncoderConfig(num_layers=self.num_layers, dim_in=dim_in,
                            dim_hidden=self.hidden_dim, num_heads=self.num_heads,
                            dim_ff=self.ff_dim, num_codes=self.num_codes,
                            seed=self.seed + 3)
        return TrainConfig(
            encoder=enc,
            policy=MaskPolicy(start_prob=self.mask_start_prob, span=self.mask_span,
                              noise_std=self.mask_noise_std,
                              stack_factor=self.stack_factor),
            weights=PenaltyWeights(self.w1, self.w2),
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            optimizer=self.optimizer, warmup_steps=self.warmup_steps,
            tau=self.tau, k=self.k, num_codes=self.num_codes,
            code_dim=self.code_dim, stack_factor=self.stack_factor,
            seed_data=self.seed, seed_mask=self.seed + 1,
            seed_gumbel=self.seed + 2, seed_quantizer=self.seed + 4,
            dtype=self.dtype)

    def fit(self, X, y=None):
        seqs = self._sequences(X)
        dim_in = seqs[0].shape[1] * self.stack_factor
        cfg = self._config(dim_in)
        result = run_pretrain(cfg, seqs, out_dir=None)
        self.config_ = cfg
        self.encoder_params_ = result.params
        self.bundles_ = result.bundles
        self.metrics_ = result.records
        return self

    def _check_fitted(self):
        if not hasattr(self, "encoder_params_"):
            raise ValueError("pretrainer is not fitted; call fit first")

    def _forward_one(self, x: np.ndarray):
        cfg = self.config_
        prep = prepare(FeatureSequence(x), cfg.stack_factor).data.astype(cfg.np_dtype)
        with no_grad():
            params_t = {n: Tensor(v) for n, v in self.encoder_params_.items()}
            zs, logits = forward_graph(params_t, Tensor(prep), cfg.encoder)
            tapped = tap_graph(zs, cfg.resolved_k)
        return tapped.data, logits.data

    def transform(self, X):
        self._check_fitted()
        if isinstance(X, (list, tuple)):
            return [self._forward_one(check_matrix(x, "X[i]"))[0] for x in X]
        return self._forward_one(check_matrix(X, "X"))[0]

    def predict(self, X):
        self._check_fitted()
        if isinstance(X, (list, tuple)):
            return [np.argmax(self._forward_one(check_matrix(x, "X[i]"))[1], axis=1)
                    for x in X]
        return np.argmax(self._forward_one(check_matrix(X, "X"))[1], axis=1)
