"""Span masking with Gaussian-noise fill.

Frames are masked in contiguous spans: every frame is a span start with
probability ``start_prob``, and each start masks ``span_eff`` frames
(clipped at the end). ``span`` counts unstacked frames; after stacking by
``stack_factor`` the effective span shrinks accordingly, keeping the
masked temporal extent constant. Masked positions are filled with
i.i.d. Gaussian noise, never with a learned embedding.

Training needs a nonempty mask, so an empty draw is retried a bounded
number of times and then one span is forced at a random start.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .validation import check_matrix

MAX_RESAMPLE = 10


@dataclass(frozen=True)
class MaskPolicy:
    start_prob: float = 0.02
    span: int = 20              # in unstacked frames
    noise_mean: float = 0.0
    noise_std: float = 0.1
    stack_factor: int = 2
    exact_count: bool = False   # pick exactly round(start_prob*T) starts instead

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must be in [0, 1], got {self.start_prob}")
        if self.span < 1:
            raise ValueError(f"span must be >= 1, got {self.span}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.stack_factor < 1:
            raise ValueError(f"stack_factor must be >= 1, got {self.stack_factor}")

    @property
    def span_eff(self) -> int:
        """Span in stacked frames."""
        return max(1, round(self.span / self.stack_factor))


@dataclass(frozen=True)
class MaskSpec:
    """Masked frame indices M within a length-T sequence."""

    indices: np.ndarray
    num_frames: int

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.num_frames):
            raise ValueError("mask index out of range")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return self.indices.size

    def bools(self) -> np.ndarray:
        b = np.zeros(self.num_frames, dtype=bool)
        b[self.indices] = True
        return b


def _spans_to_indices(starts: np.ndarray, span_eff: int, num_frames: int) -> np.ndarray:
    b = np.zeros(num_frames, dtype=bool)
    for s in starts:
        b[s: s + span_eff] = True
    return np.flatnonzero(b)


def sample_mask(policy: MaskPolicy, num_frames: int, seed) -> MaskSpec:
    """Draw span starts and return the union of their spans, never empty.

    ``seed`` is an int or tuple key; the same key always yields the same
    mask. Empty draws are resampled up to MAX_RESAMPLE times, after which
    a single span at a random start is forced.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    key = seed if isinstance(seed, tuple) else (seed,)
    gen = seeding.rng(key[0], seeding.ROLE_MASK, *key[1:])
    span_eff = policy.span_eff

    if policy.exact_count:
        n_starts = max(1, round(policy.start_prob * num_frames))
        n_starts = min(n_starts, num_frames)
        starts = gen.choice(num_frames, size=n_starts, replace=False)
        return MaskSpec(_spans_to_indices(starts, span_eff, num_frames), num_frames)

    for _ in range(1 + MAX_RESAMPLE):
        starts = np.flatnonzero(gen.random(num_frames) < policy.start_prob)
        if starts.size:
            return MaskSpec(_spans_to_indices(starts, span_eff, num_frames),
                            num_frames)
    forced = int(gen.integers(0, num_frames))
    return MaskSpec(_spans_to_indices(np.array([forced]), span_eff, num_frames),
                    num_frames)


def apply_mask(x: np.ndarray, m: MaskSpec, policy: MaskPolicy, seed) -> np.ndarray:
    """Replace masked columns of (d x T) input with Gaussian noise.

    Unmasked columns are copied bit-identically. Deterministic given the
    seed key.
    """
    x = check_matrix(x, "x")
    if x.shape[1] != m.num_frames:
        raise ValueError(f"input has {x.shape[1]} frames, mask covers {m.num_frames}")
    out = x.copy()
    if m.count == 0:
        return out
    key = seed if isinstance(seed, tuple) else (seed,)
    gen = seeding.rng(key[0], seeding.ROLE_NOISE_FILL, *key[1:])
    noise = gen.normal(policy.noise_mean, policy.noise_std, size=(x.shape[0], m.count))
    out[:, m.indices] = noise
    return out


def expected_masked_fraction(policy: MaskPolicy, num_frames: int,
                             num_samples: int, seed) -> float:
    """Monte-Carlo estimate of the masked fraction under the policy."""
    total = 0
    for i in range(num_samples):
        total += sample_mask(policy, num_frames, (seed, i)).count
    return total / (num_samples * num_frames)
