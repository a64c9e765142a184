"""Masked cross-entropy and the two-level training objectives.

Three paths feed each training step:

  * prediction path: encoder forward on the masked input; its logits at
    masked positions are what both losses score
  * anchoring path: hard labels from quantizing the clean (unmasked,
    stacked, standardized) input; fixed for the whole run
  * enhanced path: encoder forward on the clean input, layer-k tap,
    per-frame standardization, projection, Gumbel-softmax assignment;
    differentiable, so gradients flow through the labels themselves

The lower loss G is masked cross-entropy against the anchors (the plain
masked-prediction objective). The upper loss F is masked cross-entropy
against the enhanced soft labels. Training minimizes w1*F + w2*G, the
penalty form of "minimize F subject to near-optimal G". Per sequence the
loss is a sum over masked frames; across a batch, per-sequence sums are
averaged. Masks are shared between F and G within a step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeding
from .autodiff import Tensor, log_softmax, no_grad
from .encoder import EncoderConfig, forward_graph, tap_graph
from .masking import MaskPolicy, MaskSpec, apply_mask, sample_mask
from .quantizer import (Codebook, RandomProjection, assign_hard, init_codebook,
                        init_projection, project, sample_gumbel, soft_assign_graph)
from .validation import check_nonnegative_float


@dataclass(frozen=True)
class PenaltyWeights:
    """Loss combination weights; w2/w1 is the implied penalty constant."""

    w1: float = 0.1
    w2: float = 2.4

    def __post_init__(self):
        check_nonnegative_float(self.w1, "w1")
        check_nonnegative_float(self.w2, "w2")
        if self.w1 + self.w2 <= 0:
            raise ValueError("w1 + w2 must be positive")

    @property
    def gamma(self) -> float:
        return self.w2 / self.w1 if self.w1 > 0 else math.inf


@dataclass(frozen=True)
class LossBreakdown:
    f_value: float
    g_value: float
    combined: float
    masked_count: int
    mask_acc_anchor: float
    mask_acc_enhanced: float

    def __post_init__(self):
        if self.masked_count < 1:
            raise ValueError("masked_count must be >= 1")


@dataclass(frozen=True)
class QuantizerBundle:
    """Frozen quantization state: one codebook, two projections.

    proj_anchor maps raw input frames (dim d_in), proj_enhance maps tapped
    encoder frames (dim d_h); both land in the codebook space.
    """

    codebook: Codebook
    proj_anchor: RandomProjection
    proj_enhance: RandomProjection
    tau: float = 0.5
    l2_normalize: bool = False

    def __post_init__(self):
        if self.proj_anchor.dim_code != self.codebook.code_dim:
            raise ValueError("anchor projection width does not match codebook dim")
        if self.proj_enhance.dim_code != self.codebook.code_dim:
            raise ValueError("enhance projection width does not match codebook dim")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def num_codes(self) -> int:
        return self.codebook.num_codes


def make_bundle(seed: int, num_codes: int, code_dim: int, dim_in: int,
                dim_hidden: int, tau: float = 0.5, l2_normalize: bool = False,
                index: int | None = None) -> QuantizerBundle:
    """Build the frozen quantizer state from one seed.

    ``index`` derives independent state for multi-codebook variants; None
    and 0 give different streams on purpose (None is the canonical
    single-codebook key).
    """
    key = (seed,) if index is None else (seed, index)
    return QuantizerBundle(
        codebook=init_codebook(key, num_codes, code_dim),
        proj_anchor=init_projection(key, dim_in, code_dim,
                                    role=seeding.ROLE_PROJ_ANCHOR),
        proj_enhance=init_projection(key, dim_hidden, code_dim,
                                     role=seeding.ROLE_PROJ_ENHANCE),
        tau=tau,
        l2_normalize=l2_normalize,
    )


def anchor_labels(x_rows: np.ndarray, bundle: QuantizerBundle) -> np.ndarray:
    """Hard labels for one prepared sequence given row-frame (T x d) input."""
    u = project(bundle.proj_anchor, np.asarray(x_rows).T)
    return assign_hard(u, bundle.codebook, l2_normalize=bundle.l2_normalize)


# ----------------------------------------------------------------------
# masked cross-entropy

def _mask_indices(m) -> np.ndarray:
    idx = m.indices if isinstance(m, MaskSpec) else np.asarray(m, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mask is empty; masked cross-entropy needs at least one frame")
    return idx


def masked_ce(logits: np.ndarray, labels: np.ndarray, m) -> float:
    """Sum over masked frames of cross-entropy, for (N x T) logits.

    ``labels`` is either a length-T index vector (treated as one-hot) or a
    (T x N) matrix of soft rows. Log-softmax subtracts the column max
    first. Returns the sum, not the mean; batch averaging is the caller's
    job.
    """
    idx = _mask_indices(m)
    z = np.asarray(logits, dtype=np.float64).T[idx]         # (|M|, N)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.asarray(labels)
    if labels.ndim == 1:
        picked = logp[np.arange(idx.size), labels[idx].astype(np.int64)]
        return float(-picked.sum())
    if labels.ndim == 2:
        return float(-(labels[idx].astype(np.float64) * logp).sum())
    raise ValueError("labels must be a 1-D index vector or a T x N matrix")


def masked_ce_graph(logits_rows: Tensor, labels, idx: np.ndarray) -> Tensor:
    """Graph version on row-frame logits (R x N); returns the scalar sum.

    ``labels`` may be a 1-D numpy index vector of length R, a numpy (R x N)
    soft matrix, or a Tensor of soft rows (gradients then flow into the
    label path as well).
    """
    idx = _mask_indices(idx)
    logp = log_softmax(logits_rows.take_rows(idx), axis=-1)
    n = logits_rows.shape[-1]
    if isinstance(labels, Tensor):
        y = labels.take_rows(idx)
    else:
        labels = np.asarray(labels)
        if labels.ndim == 1:
            onehot = np.zeros((idx.size, n), dtype=logp.dtype)
            onehot[np.arange(idx.size), labels[idx].astype(np.int64)] = 1.0
            y = Tensor(onehot)
        else:
            y = Tensor(labels[idx].astype(logp.dtype))
    return (y * logp).sum() * (-1.0)


# ----------------------------------------------------------------------
# batched two-loss graph

@dataclass
class StepGraph:
    """Everything train_step needs from one batch forward."""

    loss_f: Tensor                  # scalar, mean over batch of masked sums
    loss_g: Tensor
    masked_count: int
    mask_acc_anchor: float
    mask_acc_enhanced: float
    label_agreement: float
    enhanced_argmax: np.ndarray     # all frames, bundle 0, shape (B*T,)


def build_step_graph(params_t: dict, cfg: EncoderConfig, bundles: list,
                     x_clean: np.ndarray, x_masked: np.ndarray,
                     mask_idx: list, anchors: list, gumbels,
                     k: int, stop_label_grad: bool = False,
                     _stop_pred_grad: bool = False) -> StepGraph:
    """Build F and G for one batch on the autodiff graph.

    x_clean/x_masked: (B x T x d_in) float arrays (equal T, already
    cropped). mask_idx: per-sequence masked index arrays. anchors: per
    bundle, per sequence hard labels (length T each). gumbels: per bundle,
    per sequence (T x N) noise or None. Losses are averaged over bundles.

    ``_stop_pred_grad`` detaches the prediction-path logits inside F; it
    exists so tests can isolate the label-path gradient.
    """
    b, t, _ = x_clean.shape
    dtype = next(iter(params_t.values())).dtype
    flat_idx = np.concatenate([np.asarray(mask_idx[i], dtype=np.int64) + i * t
                               for i in range(b)])
    if flat_idx.size == 0:
        raise ValueError("batch has no masked frames")

    _, logits_m = forward_graph(params_t, Tensor(x_masked.astype(dtype)), cfg)
    logits_flat = logits_m.reshape(b * t, cfg.num_codes)
    zs_c, _ = forward_graph(params_t, Tensor(x_clean.astype(dtype)), cfg)
    tapped = tap_graph(zs_c, k).reshape(b * t, cfg.dim_hidden)

    pred_logits = logits_flat.detach() if _stop_pred_grad else logits_flat

    f_terms = []
    g_terms = []
    soft_first = None
    for li, bundle in enumerate(bundles):
        anchor_flat = np.concatenate(anchors[li])
        g_terms.append(masked_ce_graph(logits_flat, anchor_flat, flat_idx))
        u = tapped @ Tensor(bundle.proj_enhance.matrix.astype(dtype))
        gum = None
        if gumbels is not None:
            gum = np.concatenate(gumbels[li], axis=0)
        soft = soft_assign_graph(u, bundle.codebook, bundle.tau, gumbel=gum,
                                 l2_normalize=bundle.l2_normalize)
        if stop_label_grad:
            soft = soft.detach()
        if soft_first is None:
            soft_first = soft
        f_terms.append(masked_ce_graph(pred_logits, soft, flat_idx))

    scale = 1.0 / (b * len(bundles))
    loss_f = f_terms[0] if len(f_terms) == 1 else _sum_tensors(f_terms)
    loss_g = g_terms[0] if len(g_terms) == 1 else _sum_tensors(g_terms)
    loss_f = loss_f * scale
    loss_g = loss_g * scale

    pred_idx = np.argmax(logits_flat.data[flat_idx], axis=1)
    anchor_masked = np.concatenate(anchors[0])[flat_idx]
    enh_all = np.argmax(soft_first.data, axis=1)
    enh_masked = enh_all[flat_idx]
    return StepGraph(
        loss_f=loss_f,
        loss_g=loss_g,
        masked_count=int(flat_idx.size),
        mask_acc_anchor=float(np.mean(pred_idx == anchor_masked)),
        mask_acc_enhanced=float(np.mean(pred_idx == enh_masked)),
        label_agreement=float(np.mean(anchor_masked == enh_masked)),
        enhanced_argmax=enh_all,
    )


def _sum_tensors(ts: list) -> Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total


# ----------------------------------------------------------------------
# batch assembly shared by the trainer and the evaluation wrappers

def assemble_batch(batch: list, policy: MaskPolicy, num_codes: int,
                   seed_mask: int, seed_gumbel: int, step: int,
                   gumbel_noise: bool, num_bundles: int = 1):
    """Crop a batch to equal length and draw its masks, fills, and noise.

    Per-sequence draws are keyed by (seed, step, position-in-batch), so a
    resumed run regenerates them identically. Returns (x_clean, x_masked,
    mask_idx, gumbels).
    """
    t_min = min(np.asarray(x).shape[0] for x in batch)
    xs = [np.asarray(x)[:t_min] for x in batch]
    x_clean = np.stack(xs, axis=0)
    masks = []
    masked_rows = []
    for i, x in enumerate(xs):
        m = sample_mask(policy, t_min, (seed_mask, step, i))
        masks.append(m.indices)
        masked_rows.append(apply_mask(x.T, m, policy, (seed_mask, step, i)).T)
    x_masked = np.stack(masked_rows, axis=0)
    gumbels = None
    if gumbel_noise:
        gumbels = []
        for li in range(num_bundles):
            per_seq = []
            for i in range(len(xs)):
                key = (seed_gumbel, step, i) if li == 0 else (seed_gumbel, step, i, li)
                per_seq.append(sample_gumbel(key, t_min, num_codes))
            gumbels.append(per_seq)
    return x_clean, x_masked, masks, gumbels


def _evaluate(params: dict, cfg: EncoderConfig, bundles, batch, policy: MaskPolicy,
              k: int, seed_mask: int, seed_gumbel: int, step: int,
              gumbel_noise: bool, stop_label_grad: bool) -> StepGraph:
    bundles = list(bundles) if isinstance(bundles, (list, tuple)) else [bundles]
    x_clean, x_masked, mask_idx, gumbels = assemble_batch(
        batch, policy, bundles[0].num_codes, seed_mask, seed_gumbel, step,
        gumbel_noise, num_bundles=len(bundles))
    anchors = [[anchor_labels(x, bu) for x in x_clean] for bu in bundles]
    with no_grad():
        params_t = {name: Tensor(v) for name, v in params.items()}
        return build_step_graph(params_t, cfg, bundles, x_clean, x_masked,
                                mask_idx, anchors, gumbels, k,
                                stop_label_grad=stop_label_grad)


def lower_loss(params: dict, cfg: EncoderConfig, bundles, batch,
               policy: MaskPolicy, k: int = 1, seed_mask: int = 1,
               seed_gumbel: int = 2, step: int = 0,
               gumbel_noise: bool = True) -> float:
    """Batch-mean masked cross-entropy against anchoring labels."""
    sg = _evaluate(params, cfg, bundles, batch, policy, k, seed_mask,
                   seed_gumbel, step, gumbel_noise, False)
    return float(sg.loss_g.item())


def upper_loss(params: dict, cfg: EncoderConfig, bundles, batch,
               policy: MaskPolicy, k: int, seed_mask: int = 1,
               seed_gumbel: int = 2, step: int = 0,
               gumbel_noise: bool = True) -> float:
    """Batch-mean masked cross-entropy against enhanced soft labels."""
    sg = _evaluate(params, cfg, bundles, batch, policy, k, seed_mask,
                   seed_gumbel, step, gumbel_noise, False)
    return float(sg.loss_f.item())


def combined_loss(params: dict, cfg: EncoderConfig, bundles, batch,
                  weights: PenaltyWeights, policy: MaskPolicy, k: int,
                  seed_mask: int = 1, seed_gumbel: int = 2, step: int = 0,
                  gumbel_noise: bool = True) -> LossBreakdown:
    """Evaluate w1*F + w2*G with its diagnostic breakdown."""
    sg = _evaluate(params, cfg, bundles, batch, policy, k, seed_mask,
                   seed_gumbel, step, gumbel_noise, False)
    f = float(sg.loss_f.item())
    g = float(sg.loss_g.item())
    return LossBreakdown(
        f_value=f,
        g_value=g,
        combined=weights.w1 * f + weights.w2 * g,
        masked_count=sg.masked_count,
        mask_acc_anchor=sg.mask_acc_anchor,
        mask_acc_enhanced=sg.mask_acc_enhanced,
    )
