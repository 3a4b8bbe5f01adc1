"""Temporal feature fusion and the frequency-aware aligner.

Two 1-D feature sequences describe a clip: a high-rate synchronization
sequence and a low-rate semantic sequence.  The semantic sequence is
averaged over time into a global vector and added to every sync frame.
The fused [t, d] sequence is then pushed through a projection block (1-D
convolution over time, then adaptive average pooling down to the grid's T
columns) and finally replicated across the F frequency rows, giving an
[F, T, D] control grid whose columns are frequency-constant by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

# Fixed entropy prefix so the projection block is a reproducible function of
# (d, D, k) alone; any dataset/model pair with the same dims shares it.
_ALIGNER_ENTROPY = 0x46474C41


@dataclass
class ControlFeatureSequence:
    """A [t, d] real feature matrix sampled at ``frame_rate`` Hz."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ShapeError(f"feature sequence must be [t>=1, d], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("feature sequence contains non-finite entries")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class ProjectionBlockParams:
    """1-D conv (kernel [k, d, D], zero padding) followed by adaptive pooling to ``target_len``."""

    kernel: np.ndarray
    bias: np.ndarray
    target_len: int

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 3:
            raise ShapeError(f"conv kernel must be [k, d, D], got {self.kernel.shape}")
        if self.kernel.shape[0] % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {self.kernel.shape[0]}")
        if self.bias.shape != (self.kernel.shape[2],):
            raise ShapeError("conv bias must match the output channel count")
        if self.target_len < 1:
            raise ConfigError(f"target length must be >= 1, got {self.target_len}")


def make_projection_params(in_dim: int, out_dim: int, target_len: int, kernel_size: int = 3) -> ProjectionBlockParams:
    """Seeded random projection block; deterministic given (d, D, k).

    The block is a fixed feature map, not a trainable module: the control
    branch's input projector learns on top of it.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([_ALIGNER_ENTROPY, in_dim, out_dim, kernel_size])
    )
    std = 1.0 / np.sqrt(kernel_size * in_dim)
    kernel = rng.normal(0.0, std, size=(kernel_size, in_dim, out_dim))
    bias = np.zeros(out_dim)
    return ProjectionBlockParams(kernel, bias, target_len)


def fuse_semantic(
    sync: ControlFeatureSequence, semantic_seq: ControlFeatureSequence
) -> ControlFeatureSequence:
    """Add the time-average of the semantic sequence to every sync frame."""
    if sync.dim != semantic_seq.dim:
        raise ShapeError(
            f"feature dims differ: sync {sync.dim} vs semantic {semantic_seq.dim}"
        )
    global_sem = semantic_seq.data.mean(axis=0)
    return ControlFeatureSequence(sync.data + global_sem[None, :], sync.frame_rate)


def _conv1d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Length-preserving 1-D convolution over time: [t, d] -> [t, D]."""
    k = kernel.shape[0]
    half = (k - 1) // 2
    t = x.shape[0]
    padded = np.zeros((t + k - 1, x.shape[1]))
    padded[half : half + t] = x
    out = np.tile(bias, (t, 1))
    for j in range(k):
        out += padded[j : j + t] @ kernel[j]
    return out


def adaptive_avg_pool(x: np.ndarray, target_len: int) -> np.ndarray:
    """Pool [t, D] down (or up) to [target_len, D].

    Output bin i averages input rows [floor(i*t/T), ceil((i+1)*t/T)).
    """
    t = x.shape[0]
    out = np.empty((target_len, x.shape[1]))
    for i in range(target_len):
        lo = (i * t) // target_len
        hi = -(-((i + 1) * t) // target_len)  # ceil
        out[i] = x[lo:hi].mean(axis=0)
    return out


def project(seq: ControlFeatureSequence, params: ProjectionBlockParams) -> np.ndarray:
    """Projection block: conv then adaptive pooling; returns a [T, D] matrix."""
    if seq.dim != params.kernel.shape[1]:
        raise ShapeError(
            f"sequence dim {seq.dim} != kernel input dim {params.kernel.shape[1]}"
        )
    conved = _conv1d_same(seq.data, params.kernel, params.bias)
    return adaptive_avg_pool(conved, params.target_len)


def lift_to_grid(seq: np.ndarray, freq_tokens: int) -> np.ndarray:
    """Repeat a [T, D] sequence across ``freq_tokens`` frequency rows -> [F, T, D]."""
    if freq_tokens < 1:
        raise ShapeError(f"freq_tokens must be >= 1, got {freq_tokens}")
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise ShapeError(f"expected a [T, D] matrix, got shape {seq.shape}")
    return np.repeat(seq[None, :, :], freq_tokens, axis=0)


def is_frequency_constant(grid: np.ndarray) -> bool:
    """True when every (time, channel) column is identical across frequency rows."""
    return bool(np.all(grid == grid[0:1]))


def align_control(
    sync: ControlFeatureSequence,
    semantic: ControlFeatureSequence,
    params: ProjectionBlockParams,
    freq_tokens: int,
) -> np.ndarray:
    """Full aligner: fuse, project, lift.  Returns the [F, T, D] control grid."""
    fused = fuse_semantic(sync, semantic)
    return lift_to_grid(project(fused, params), freq_tokens)
