"""Token-grid geometry, masking, and the cosine unmasking schedule.

The generative target is an F x T grid of discrete codebook ids.  F and T
come from dividing a mel-bins x frames spectrogram into square patches.
Masked positions carry a reserved sentinel id equal to the vocabulary size,
so a serialized grid needs no side-channel mask array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeError


@dataclass(frozen=True)
class PatchGeometry:
    """Spectrogram-to-grid geometry: square patches over mel bins x frames."""

    mel_bins: int = 80
    frames: int = 848
    patch: int = 16

    def __post_init__(self):
        if self.mel_bins < 1 or self.frames < 1 or self.patch < 1:
            raise GeometryError(f"geometry must be positive, got {self}")
        if self.mel_bins % self.patch or self.frames % self.patch:
            raise GeometryError(
                f"patch {self.patch} must divide mel_bins {self.mel_bins} "
                f"and frames {self.frames} exactly"
            )

    @property
    def freq_tokens(self) -> int:
        return self.mel_bins // self.patch

    @property
    def time_tokens(self) -> int:
        return self.frames // self.patch

    @property
    def num_tokens(self) -> int:
        return self.freq_tokens * self.time_tokens


def patch_grid(geometry: PatchGeometry) -> tuple[int, int]:
    """Return (F, T): token counts along the frequency and time axes."""
    return geometry.freq_tokens, geometry.time_tokens


@dataclass
class TokenMap:
    """F x T grid of codebook ids in [0, vocab); ``vocab`` itself is the mask sentinel."""

    grid: np.ndarray
    vocab: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2:
            raise ShapeError(f"token grid must be 2-D, got shape {self.grid.shape}")
        if self.vocab < 1:
            raise ShapeError(f"vocab must be >= 1, got {self.vocab}")
        if self.grid.min(initial=0) < 0 or self.grid.max(initial=0) > self.vocab:
            raise ShapeError("token ids must lie in [0, vocab] (vocab = mask sentinel)")

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def copy(self) -> "TokenMap":
        return TokenMap(self.grid.copy(), self.vocab)


@dataclass
class MaskedTokenMap:
    """A token map plus its boolean hide-mask (True = hidden).

    Invariant: hidden positions hold the sentinel, visible positions hold
    valid ids.  Enforced at construction.
    """

    tokens: TokenMap
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.tokens.shape:
            raise ShapeError(
                f"mask shape {self.mask.shape} != grid shape {self.tokens.shape}"
            )
        grid = self.tokens.grid
        if not np.all(grid[self.mask] == self.tokens.mask_id):
            raise ShapeError("masked positions must hold the mask sentinel")
        if self.mask.size and not np.all(grid[~self.mask] < self.tokens.vocab):
            raise ShapeError("unmasked positions must hold valid token ids")

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def mask_fraction(u: float) -> float:
    """Cosine schedule: fraction of the grid still masked at progress u in [0, 1].

    f(0) = 1, f(1) = 0, monotone non-increasing.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"schedule progress must be in [0, 1], got {u}")
    return math.cos(u * math.pi / 2.0)


def unmask_plan(total: int, steps: int) -> list[int]:
    """Per-step reveal counts for decoding ``total`` tokens in ``steps`` steps.

    After step k (0-based) the number of still-masked tokens is
    floor(total * mask_fraction((k + 1) / steps)); the final step reveals
    every remaining token.  Counts are >= 0 and sum to ``total``.
    """
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    counts = []
    remaining = total
    for k in range(steps):
        if k == steps - 1:
            target = 0
        else:
            target = math.floor(total * mask_fraction((k + 1) / steps))
        target = min(target, remaining)
        counts.append(remaining - target)
        remaining = target
    return counts


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_random_mask(
    token_map: TokenMap, fraction: float, rng: np.random.Generator
) -> MaskedTokenMap:
    """Hide round(F*T*fraction) uniformly chosen positions (half-up rounding)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must be in [0, 1], got {fraction}")
    f, t = token_map.shape
    n_mask = _round_half_up(f * t * fraction)
    flat_choice = rng.permutation(f * t)[:n_mask]
    mask = np.zeros(f * t, dtype=bool)
    mask[flat_choice] = True
    mask = mask.reshape(f, t)
    grid = token_map.grid.copy()
    grid[mask] = token_map.mask_id
    return MaskedTokenMap(TokenMap(grid, token_map.vocab), mask)


def fully_masked(geometry: PatchGeometry, vocab: int) -> MaskedTokenMap:
    """An all-hidden map: the starting state of generation."""
    f, t = patch_grid(geometry)
    grid = np.full((f, t), vocab, dtype=np.int64)
    return MaskedTokenMap(TokenMap(grid, vocab), np.ones((f, t), dtype=bool))


# ---------------------------------------------------------------------------
# Serialization: CSV grid (rows = frequency) and PGM visualization
# ---------------------------------------------------------------------------


def write_csv(path, token_map: TokenMap) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in token_map.grid:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_csv(path, vocab: int) -> TokenMap:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) for v in line.split(",")])
    return TokenMap(np.array(rows, dtype=np.int64), vocab)


def write_pgm(path, token_map: TokenMap) -> None:
    """Binary PGM with token ids scaled onto [0, 255]; the sentinel maps to 255."""
    f, t = token_map.shape
    gray = np.rint(token_map.grid * (255.0 / token_map.vocab)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{t} {f}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
