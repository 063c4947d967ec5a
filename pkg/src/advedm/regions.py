"""Patch selection: which patches to erase or to inject into.

Masks follow one convention throughout the package: bit 0 marks a patch
that is attacked (erased or injected), bit 1 marks a patch to preserve.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from advedm._ops import as_tensor
from advedm.encoders.base import as_image
from advedm.errors import DimensionMismatchError, EmptySelectionError, GeometryError, ZeroVectorError

SELECTION_MODES = ("threshold", "top_fraction", "manual_window")
DEFAULT_TOP_FRACTION = 0.20


@dataclass(frozen=True)
class RegionSpec:
    """An m x m window of patches whose top-left patch is (row, col)."""

    row: int
    col: int
    m: int

    def check(self, grid_side: int) -> None:
        if self.m < 1 or self.m > grid_side:
            raise GeometryError(f"window side {self.m} does not fit a {grid_side}x{grid_side} patch grid")
        if not (0 <= self.row <= grid_side - self.m and 0 <= self.col <= grid_side - self.m):
            raise GeometryError(f"window {self} leaves the {grid_side}x{grid_side} patch grid")

    def indices(self, grid_side: int) -> np.ndarray:
        """Row-major patch indices covered by the window."""
        self.check(grid_side)
        rows = np.arange(self.row, self.row + self.m)
        cols = np.arange(self.col, self.col + self.m)
        return (rows[:, None] * grid_side + cols[None, :]).ravel()


@dataclass(frozen=True)
class PatchMask:
    bits: np.ndarray
    selection_mode: str = "threshold"

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be a 1-d vector over {0, 1}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")
        object.__setattr__(self, "bits", bits.astype(np.int8))

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        if not isinstance(other, PatchMask):
            return NotImplemented
        return self.selection_mode == other.selection_mode and np.array_equal(self.bits, other.bits)

    @property
    def selected(self) -> np.ndarray:
        """Indices of the attacked (zero-bit) patches, ascending."""
        return np.flatnonzero(self.bits == 0)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 1)

    def to_grid_text(self, grid_side: int | None = None) -> str:
        side = grid_side or math.isqrt(len(self.bits))
        rows = self.bits.reshape(-1, side)
        return "\n".join("".join(str(int(b)) for b in row) for row in rows)

    @classmethod
    def from_grid_text(cls, text: str, selection_mode: str = "threshold") -> "PatchMask":
        bits = [int(ch) for line in text.strip().splitlines() for ch in line.strip()]
        return cls(np.array(bits), selection_mode)


def patch_similarity(patches, text_embedding) -> np.ndarray:
    """Cosine similarity of every patch embedding with a text embedding."""
    p = as_tensor(patches)
    t = as_tensor(text_embedding, like=p)
    if p.ndim != 2 or t.ndim != 1 or p.shape[1] != t.shape[0]:
        raise DimensionMismatchError(f"patches {tuple(p.shape)} and text {tuple(t.shape)} do not agree")
    row_norms = torch.linalg.vector_norm(p, dim=1)
    t_norm = torch.linalg.vector_norm(t)
    if t_norm == 0 or bool(torch.any(row_norms == 0)):
        raise ZeroVectorError("zero-norm patch or text embedding")
    sims = (p @ t) / (row_norms * t_norm)
    return sims.clamp(-1.0, 1.0).detach().cpu().numpy().astype(np.float64)


def top_fraction_count(n: int, fraction: float) -> int:
    # guard against 0.2 * 15 = 3.0000000000000004 style round-up
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def build_removal_mask(similarity, mode: str = "top_fraction", parameter: float = DEFAULT_TOP_FRACTION) -> PatchMask:
    """Zero the patches most similar to the target text.

    ``threshold`` zeroes every patch with similarity strictly above
    ``parameter``; ``top_fraction`` zeroes the ceil(parameter * n) most
    similar patches, breaking ties toward lower patch index.
    """
    s = np.asarray(similarity, dtype=np.float64)
    n = len(s)
    bits = np.ones(n, dtype=np.int8)
    if mode == "threshold":
        if not -1.0 < parameter < 1.0:
            raise ValueError(f"threshold must lie in (-1, 1), got {parameter}")
        hit = s > parameter
        if not hit.any():
            raise EmptySelectionError(f"no patch similarity exceeds threshold {parameter} (max {s.max():.4f})")
        bits[hit] = 0
    elif mode == "top_fraction":
        if not 0.0 < parameter <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {parameter}")
        k = top_fraction_count(n, parameter)
        order = np.lexsort((np.arange(n), -s))
        bits[order[:k]] = 0
    else:
        raise ValueError(f"removal masks support 'threshold' or 'top_fraction', not {mode!r}")
    return PatchMask(bits, mode)


def window_mask(region: RegionSpec, grid_side: int) -> PatchMask:
    bits = np.ones(grid_side * grid_side, dtype=np.int8)
    bits[region.indices(grid_side)] = 0
    return PatchMask(bits, "manual_window")


def window_size_from_pixels(region_pixels: int, patch_size: int, grid_side: int) -> int:
    """Whole-patch window side for a square pixel region; warns when rounding."""
    m = region_pixels // patch_size
    if region_pixels % patch_size:
        warnings.warn(
            f"{region_pixels}px region is not a multiple of the {patch_size}px patch; using {m} patches "
            f"({m * patch_size}px)",
            stacklevel=2,
        )
    if m < 1 or m > grid_side:
        raise GeometryError(f"{region_pixels}px region gives a {m}-patch window on a {grid_side}-patch grid")
    return m


def select_injection_region(
    patches,
    foreground_embeddings: Sequence,
    m: int,
    region: RegionSpec | None = None,
) -> tuple[RegionSpec, PatchMask]:
    """Choose the m x m window least similar to the foreground objects.

    Each patch scores its maximum similarity over the foreground texts; the
    window with the smallest summed score wins, first in row-major order on
    ties.  A manual ``region`` bypasses the search.
    """
    p = as_tensor(patches)
    n = p.shape[0]
    side = math.isqrt(n)
    if side * side != n:
        raise GeometryError(f"{n} patches do not form a square grid")
    if region is not None:
        if region.m != m:
            raise GeometryError(f"manual window side {region.m} differs from requested {m}")
        return region, window_mask(region, side)
    if m < 1 or m > side:
        raise GeometryError(f"window side {m} does not fit a {side}x{side} patch grid")
    if not foreground_embeddings:
        raise ValueError("automatic region selection needs at least one foreground text embedding")
    scores = np.max(np.stack([patch_similarity(p, t) for t in foreground_embeddings]), axis=0)
    grid = scores.reshape(side, side)
    sums = np.lib.stride_tricks.sliding_window_view(grid, (m, m)).sum(axis=(2, 3))
    r, c = np.unravel_index(np.argmin(sums), sums.shape)
    best = RegionSpec(int(r), int(c), m)
    return best, window_mask(best, side)


def make_masked_image(image, mask: PatchMask, patch_size: int) -> np.ndarray:
    """Copy of ``image`` with every zero-bit patch set to black."""
    img = as_image(image)
    h, w, _ = img.shape
    gh, gw = h // patch_size, w // patch_size
    if h % patch_size or w % patch_size or gh * gw != len(mask):
        raise DimensionMismatchError(f"mask of length {len(mask)} does not match a {h}x{w} image with patch {patch_size}")
    keep = np.repeat(np.repeat(mask.bits.reshape(gh, gw), patch_size, 0), patch_size, 1)
    out = img.copy()
    out[keep == 0] = 0.0
    return out
