"""Attention-based patch saliency and thumbnail overlays.

A trace stores, for every generated token, the attention paid to each
visual position per layer and head. Saliency averages those rows (after
renormalizing each over the visual positions, unless disabled) and ranks
patches by mean weight, ties going to the lower patch index. The top-k
patches are drawn onto the slide thumbnail with rank-colored borders.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import UsageError, load_checkpoint, save_checkpoint
from .slide_io import PatchGrid, Raster

__all__ = [
    "AttentionTrace",
    "PatchSaliency",
    "saliency",
    "render_overlay",
    "save_trace",
    "load_trace",
    "saliency_csv",
]


@dataclass
class AttentionTrace:
    """Raw generated-token attention over visual positions.

    values: [gen_tokens, layers, heads, n_patches], each row the LM's
    attention restricted to the visual span (mass on text positions
    discarded, rows not renormalized). coords maps patch index to the
    grid's (row, col); tokens names the generating tokens.
    """

    values: np.ndarray
    coords: list[tuple[int, int]] | None = None
    tokens: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise UsageError("trace must be [tokens, layers, heads, patches]")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise UsageError("attention weights must lie in [0, 1]")
        if self.coords is not None and len(self.coords) != self.n_patches:
            raise UsageError("one coordinate per patch required")

    @property
    def n_patches(self) -> int:
        return self.values.shape[3]


@dataclass
class PatchSaliency:
    """Ranked (patch index, score) pairs, scores non-increasing."""

    entries: list[tuple[int, float]]
    k: int
    coords: list[tuple[int, int]] | None = None
    tokens: list[str] | None = None

    def __post_init__(self):
        scores = [s for _, s in self.entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise UsageError("saliency scores must be non-increasing")
        if len({i for i, _ in self.entries}) != len(self.entries):
            raise UsageError("duplicate patch index in saliency")


def saliency(trace: AttentionTrace, k: int = 5, renormalize: bool = True) -> PatchSaliency:
    """Mean attention per patch across tokens, layers, and heads, top-k.

    With renormalize each (token, layer, head) row is scaled to sum to 1
    over the visual positions before averaging, so tokens that put most
    of their mass on text count equally.
    """
    if trace.values.shape[0] == 0:
        raise UsageError("empty trace: no generated tokens")
    n = trace.n_patches
    if k > n:
        warnings.warn(f"k={k} clamped to {n} patches", stacklevel=2)
        k = n
    rows = trace.values.reshape(-1, n)
    if renormalize:
        sums = rows.sum(axis=1, keepdims=True)
        rows = rows / np.where(sums == 0.0, 1.0, sums)
    scores = rows.mean(axis=0)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    entries = [(i, float(scores[i])) for i in order[:k]]
    return PatchSaliency(entries, k=k, coords=trace.coords, tokens=trace.tokens)


# Border/tint colors by rank: red, orange, yellow, green, blue, repeating.
_RANK_COLORS = [
    (214, 40, 40),
    (244, 140, 6),
    (252, 208, 18),
    (56, 176, 80),
    (58, 110, 230),
]

# 3x5 bitmaps for digits 0-9, drawn as rank labels.
_DIGITS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}


def _draw_digit(pixels: np.ndarray, digit: str, x: int, y: int, scale: int, color) -> None:
    rows = _DIGITS[digit]
    h, w = pixels.shape[:2]
    for dy, row in enumerate(rows):
        for dx, bit in enumerate(row):
            if bit != "1":
                continue
            y0, x0 = y + dy * scale, x + dx * scale
            y1, x1 = min(y0 + scale, h), min(x0 + scale, w)
            if y0 < h and x0 < w:
                pixels[y0:y1, x0:x1] = color


def _thumb_geometry(grid: PatchGrid, thumb_side: int) -> tuple[float, float, int, int]:
    """Scale and offset mapping slide pixels onto the letterboxed thumbnail."""
    long_side = max(grid.width, grid.height)
    out_w = max(1, round(grid.width * thumb_side / long_side))
    out_h = max(1, round(grid.height * thumb_side / long_side))
    x0 = (thumb_side - out_w) // 2
    y0 = (thumb_side - out_h) // 2
    return out_w / grid.width, out_h / grid.height, x0, y0


def render_overlay(thumb: Raster, grid: PatchGrid, sal: PatchSaliency) -> Raster:
    """Mark top-k patches on a copy of the thumbnail.

    Each ranked patch gets a 3-pixel border and a 30% tint in its rank
    color plus a small numeric rank label. k=0 returns an identical copy.
    """
    if thumb.width != thumb.height:
        raise UsageError("overlay expects a square thumbnail")
    if sal.entries and sal.coords is None:
        raise UsageError("saliency carries no patch coordinates")
    pixels = thumb.pixels.copy()
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    sx, sy, x_off, y_off = _thumb_geometry(grid, thumb.width)
    ps = grid.patch_size
    by_coord = {(e.row, e.col): e for e in grid.entries}
    for rank, (patch_idx, _score) in enumerate(sal.entries, start=1):
        if patch_idx >= len(sal.coords):
            raise UsageError(f"patch index {patch_idx} has no coordinate")
        coord = tuple(sal.coords[patch_idx])
        if coord not in by_coord:
            raise UsageError(f"patch {coord} not in grid")
        entry = by_coord[coord]
        x1 = x_off + int(round(entry.x * sx))
        y1 = y_off + int(round(entry.y * sy))
        x2 = x_off + int(round((entry.x + ps) * sx))
        y2 = y_off + int(round((entry.y + ps) * sy))
        color = np.array(_RANK_COLORS[(rank - 1) % len(_RANK_COLORS)], dtype=np.float64)
        region = pixels[y1:y2, x1:x2].astype(np.float64)
        pixels[y1:y2, x1:x2] = np.clip(
            np.rint(0.7 * region + 0.3 * color), 0, 255
        ).astype(np.uint8)
        border = color.astype(np.uint8)
        b = 3
        pixels[y1 : min(y1 + b, y2), x1:x2] = border
        pixels[max(y2 - b, y1) : y2, x1:x2] = border
        pixels[y1:y2, x1 : min(x1 + b, x2)] = border
        pixels[y1:y2, max(x2 - b, x1) : x2] = border
        label_x, label_y, scale = x1 + b + 2, y1 + b + 2, 2
        for ch in str(rank):
            _draw_digit(pixels, ch, label_x, label_y, scale, (255, 255, 255))
            label_x += 4 * scale
    return Raster(thumb.width, thumb.height, 3, pixels)


def saliency_csv(sal: PatchSaliency) -> str:
    """CSV body `rank,patch_index,row,col,score`."""
    lines = ["rank,patch_index,row,col,score"]
    for rank, (idx, score) in enumerate(sal.entries, start=1):
        row, col = (sal.coords[idx] if sal.coords is not None else (-1, -1))
        lines.append(f"{rank},{idx},{row},{col},{score!r}")
    return "\n".join(lines) + "\n"


def save_trace(path, trace: AttentionTrace) -> None:
    meta = {
        "kind": "attention-trace",
        "coords": trace.coords,
        "tokens": trace.tokens,
    }
    save_checkpoint(path, {"trace": trace.values}, meta)


def load_trace(path) -> AttentionTrace:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "attention-trace" or "trace" not in tensors:
        raise UsageError(f"{path}: not an attention trace file")
    coords = meta.get("coords")
    if coords is not None:
        coords = [tuple(c) for c in coords]
    return AttentionTrace(tensors["trace"], coords=coords, tokens=meta.get("tokens"))
