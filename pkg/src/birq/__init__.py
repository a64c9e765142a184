"""Self-supervised masked prediction with two label streams.

A small transformer encoder is trained to predict, at masked positions,
codebook assignments of the input frames. Two assignment streams are
combined through a weighted penalty objective:

  * anchor labels: hard nearest-code assignments of randomly projected
    input frames. Fixed for the whole run, independent of the model.
  * enhanced labels: soft assignments of a randomly projected encoder
    layer tap, with seeded perturbation noise and temperature. They move
    with the model and carry gradient.

Everything is numpy: features, quantizers, the encoder with its own
reverse-mode autodiff, training, and the verification oracles.
"""
from .autodiff import Tensor, no_grad
from .encoder import EncoderConfig, default_k, forward, init_encoder, tap
from .errors import (BirqError, ConfigError, DataError, FormatError,
                     NumericError)
from .features import (FeatureSequence, FrameStacker, LogMelFeaturizer,
                       SequenceNormalizer, SynthSpec, Waveform,
                       compute_logmel, load_features, normalize, prepare,
                       save_features, stack_frames, synth_dataset)
from .masking import MaskPolicy, MaskSpec, apply_mask, sample_mask
from .objectives import (LossBreakdown, PenaltyWeights, QuantizerBundle,
                         anchor_labels, combined_loss, lower_loss, make_bundle,
                         masked_ce, upper_loss)
from .quantizer import (Codebook, RandomProjection, RandomProjectionQuantizer,
                        assign_hard, assign_soft, codebook_utilization,
                        init_codebook, init_projection, load_labels, project,
                        sample_gumbel, save_labels)
from .trainer import (BiRQPretrainer, MetricsRecord, RunResult, TrainConfig,
                      load_checkpoint, read_metrics, run_pretrain,
                      save_checkpoint, split_checkpoint)
from .verify import (GradCheckReport, QuadraticForm, ToyBilevelProblem,
                     default_toy_problem, dual_impl_loss_check, finite_diff_grad,
                     gradcheck_birq, lower_only_pretrain, run_penalty_demo,
                     solve_toy_oracle)

__version__ = "0.1.0"

__all__ = [
    "BiRQPretrainer", "BirqError", "Codebook", "ConfigError", "DataError",
    "EncoderConfig", "FeatureSequence", "FormatError", "FrameStacker",
    "GradCheckReport", "LogMelFeaturizer", "LossBreakdown", "MaskPolicy",
    "MaskSpec", "MetricsRecord", "NumericError", "PenaltyWeights",
    "QuadraticForm", "QuantizerBundle", "RandomProjection",
    "RandomProjectionQuantizer", "RunResult", "SequenceNormalizer",
    "SynthSpec", "Tensor", "ToyBilevelProblem", "TrainConfig", "Waveform",
    "anchor_labels", "apply_mask", "assign_hard", "assign_soft",
    "codebook_utilization", "combined_loss", "compute_logmel", "default_k",
    "default_toy_problem", "dual_impl_loss_check", "finite_diff_grad",
    "forward", "gradcheck_birq", "init_codebook", "init_encoder",
    "init_projection", "load_checkpoint", "load_features", "load_labels",
    "lower_loss", "lower_only_pretrain", "make_bundle", "masked_ce",
    "no_grad", "normalize", "prepare", "project", "read_metrics",
    "run_penalty_demo", "run_pretrain", "sample_gumbel", "sample_mask",
    "save_checkpoint", "save_features", "save_labels", "solve_toy_oracle",
    "split_checkpoint", "stack_frames", "synth_dataset", "tap", "upper_loss",
]
