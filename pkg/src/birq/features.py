"""Acoustic feature pipeline.

Turns raw 16 kHz waveforms into log-mel feature sequences, stacks
consecutive frames for temporal downsampling, standardizes per dimension,
and generates seeded synthetic corpora with planted cluster structure for
desk-scale experiments. Also owns the FEATS binary format.

Pipeline conventions (fixed so results are bit-reproducible):
  * 80 triangular mel filters on the HTK mel scale, 0-8000 Hz
  * 25 ms periodic Hann window, 10 ms shift, 512-point FFT
  * log flooring at 1e-10 so silence maps to log(1e-10), not -inf
  * feature payloads are float32; intermediate math runs in float64
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _binio, seeding
from .errors import FormatError, NumericError
from .validation import check_matrix, check_positive_int

SAMPLE_RATE = 16000
WIN_LENGTH = 400        # 25 ms at 16 kHz
HOP_LENGTH = 160        # 10 ms at 16 kHz
N_FFT = 512
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10

FEATS_MAGIC = b"BIRQFEAT"
FEATS_VERSION = 1


@dataclass
class Waveform:
    """Mono PCM signal. Only 16 kHz input is supported."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")


@dataclass
class FeatureSequence:
    """T x d matrix of frame features plus provenance metadata."""

    data: np.ndarray
    frame_shift: float = 0.01
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("feature data must be a T x d matrix with T >= 1")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("feature data contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic clustered-feature generator."""

    seed: int = 0
    num_sequences: int = 16
    num_frames: int = 120
    dim: int = 16
    num_clusters: int = 4
    cluster_spread: float = 0.05
    self_transition: float = 0.8

    def __post_init__(self):
        if self.num_clusters < 2:
            raise ValueError(f"num_clusters must be >= 2, got {self.num_clusters}")
        if self.cluster_spread < 0:
            raise ValueError(f"cluster_spread must be >= 0, got {self.cluster_spread}")
        check_positive_int(self.num_sequences, "num_sequences")
        check_positive_int(self.num_frames, "num_frames")
        check_positive_int(self.dim, "dim")
        if not 0.0 <= self.self_transition <= 1.0:
            raise ValueError("self_transition must be in [0, 1]")


# ----------------------------------------------------------------------
# log-mel extraction

def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular mel filterbank, peak height 1, shape (n_mels, n_fft//2+1)."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        left, center, right = points[i], points[i + 1], points[i + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels: int = N_MELS,
                           fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return points[1:-1]


def compute_logmel(w: Waveform) -> FeatureSequence:
    """Log-mel filterbank energies of a waveform.

    Returns a T x 80 sequence with T = 1 + floor((len - 400) / 160).
    Output is not yet normalized.
    """
    x = w.samples
    if x.size < WIN_LENGTH:
        raise ValueError(f"waveform too short: {x.size} samples "
                         f"(need at least {WIN_LENGTH})")
    if not np.all(np.isfinite(x)):
        raise NumericError("waveform contains non-finite samples")

    num_frames = 1 + (x.size - WIN_LENGTH) // HOP_LENGTH
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)
    offsets = HOP_LENGTH * np.arange(num_frames)[:, None] + np.arange(WIN_LENGTH)[None, :]
    frames = x[offsets] * window

    spectrum = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ mel_filterbank().T
    logmel = np.log(energies + LOG_FLOOR)
    return FeatureSequence(logmel.astype(np.float32), frame_shift=HOP_LENGTH / SAMPLE_RATE,
                           normalized=False)


# ----------------------------------------------------------------------
# frame stacking and normalization

def stack_frames(f: FeatureSequence, factor: int) -> FeatureSequence:
    """Concatenate every ``factor`` consecutive frames into one row.

    Output is floor(T/factor) x (d*factor); trailing remainder frames are
    dropped. ``factor=1`` is the identity.
    """
    check_positive_int(factor, "factor")
    t, d = f.data.shape
    t_out = t // factor
    if t_out < 1:
        raise ValueError(f"cannot stack {t} frames by factor {factor}")
    stacked = f.data[: t_out * factor].reshape(t_out, d * factor)
    return FeatureSequence(stacked.copy(), frame_shift=f.frame_shift * factor,
                           normalized=False)


def normalize(f: FeatureSequence) -> FeatureSequence:
    """Per-dimension standardization over the sequence.

    Uses the population standard deviation. Dimensions that are constant
    over the sequence map to exactly zero. Idempotent up to 1e-6.
    """
    if f.num_frames < 2:
        raise ValueError(f"normalization needs at least 2 frames, got {f.num_frames}")
    x = f.data.astype(np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    # constant columns: centered values are pure rounding noise, zero them
    constant = sd <= 1e-8 * np.maximum(1.0, np.abs(mu))
    out = (x - mu) / np.where(constant, 1.0, sd)
    out[:, constant] = 0.0
    return FeatureSequence(out.astype(f.data.dtype), frame_shift=f.frame_shift,
                           normalized=True)


def prepare(f: FeatureSequence, stack_factor: int) -> FeatureSequence:
    """Stack then standardize: the canonical encoder/quantizer input."""
    return normalize(stack_frames(f, stack_factor))


# ----------------------------------------------------------------------
# synthetic corpus

def _markov_states(gen: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    states = np.empty(spec.num_frames, dtype=np.int64)
    stay = gen.random(spec.num_frames)
    jump = gen.integers(0, spec.num_clusters - 1, size=spec.num_frames)
    states[0] = gen.integers(0, spec.num_clusters)
    for t in range(1, spec.num_frames):
        if stay[t] < spec.self_transition:
            states[t] = states[t - 1]
        else:
            # uniform over the other clusters
            j = jump[t]
            states[t] = j + (j >= states[t - 1])
    return states


def synth_dataset(spec: SynthSpec) -> list[FeatureSequence]:
    """Seeded clustered corpus: centroid per frame plus isotropic noise.

    Frame-to-frame cluster assignment follows a Markov chain with
    self-transition ``spec.self_transition`` (uniform over the remaining
    clusters otherwise), so labels come in temporal spans. Pure function
    of the spec: the same spec always yields bit-identical data.
    """
    centroids = seeding.rng(spec.seed, seeding.ROLE_SYNTH_CENTROIDS).standard_normal(
        (spec.num_clusters, spec.dim))
    out = []
    for i in range(spec.num_sequences):
        gen = seeding.rng(spec.seed, seeding.ROLE_SYNTH_SEQ, i)
        states = _markov_states(gen, spec)
        noise = gen.standard_normal((spec.num_frames, spec.dim))
        data = centroids[states] + spec.cluster_spread * noise
        out.append(FeatureSequence(data.astype(np.float32), frame_shift=0.01,
                                   normalized=False))
    return out


def synth_states(spec: SynthSpec, index: int) -> np.ndarray:
    """Cluster-assignment path of sequence ``index`` (for diagnostics)."""
    gen = seeding.rng(spec.seed, seeding.ROLE_SYNTH_SEQ, index)
    return _markov_states(gen, spec)


# ----------------------------------------------------------------------
# FEATS file format

def save_features(f: FeatureSequence, path) -> None:
    """Write the FEATS format: magic, version, T, d, float32 payload."""
    t, d = f.data.shape
    with open(path, "wb") as fh:
        _binio.write_magic(fh, FEATS_MAGIC, FEATS_VERSION)
        fh.write(np.uint64(t).tobytes())
        fh.write(np.uint64(d).tobytes())
        _binio.write_f32_array(fh, f.data)


def load_features(path) -> FeatureSequence:
    """Read a FEATS file. Round-trips float32 payloads bit-exactly."""
    with open(path, "rb") as fh:
        _binio.check_magic(fh, FEATS_MAGIC, FEATS_VERSION, "FEATS")
        t = _binio.read_u64(fh, "FEATS frame count")
        d = _binio.read_u64(fh, "FEATS feature dim")
        if t < 1 or d < 1:
            raise FormatError(f"invalid FEATS shape {t} x {d}")
        data = _binio.read_f32_array(fh, t * d, "FEATS payload").reshape(t, d)
        _binio.expect_eof(fh, "FEATS")
    return FeatureSequence(data, normalized=False)


# ----------------------------------------------------------------------
# estimator wrappers

class LogMelFeaturizer(TransformerMixin, BaseEstimator):
    """Waveform -> T x 80 log-mel matrix, as a stateless transformer."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        w = X if isinstance(X, Waveform) else Waveform(np.asarray(X))
        return compute_logmel(w).data


class FrameStacker(TransformerMixin, BaseEstimator):
    """Stack every ``factor`` consecutive frames of a T x d matrix."""

    def __init__(self, factor: int = 2):
        self.factor = factor

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        return stack_frames(FeatureSequence(X), self.factor).data


class SequenceNormalizer(TransformerMixin, BaseEstimator):
    """Per-dimension standardization of a single sequence."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_matrix(X, "X")
        return normalize(FeatureSequence(X)).data
