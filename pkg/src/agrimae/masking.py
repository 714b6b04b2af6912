"""Patch and window masks, and the K-run inference schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class MaskError(ConfigError):
    pass


def masked_window_count(window_count: int, ratio: float) -> int:
    """Number of mask-windows hidden per run: ``ceil(ratio * window_count)``."""
    # guard against 0.75 * 16 landing a hair above 12 in floating point
    return min(window_count, math.ceil(round(ratio * window_count, 9)))


def _check(rows: int, cols: int, mask_window: int, ratio: float) -> tuple[int, int]:
    if not 0 <= ratio < 1:
        raise MaskError(f"mask ratio must lie in [0, 1), got {ratio}")
    if mask_window < 1 or rows % mask_window or cols % mask_window:
        raise MaskError(f"grid {rows}x{cols} not divisible by mask window {mask_window}")
    return rows // mask_window, cols // mask_window


def expand_windows(window_mask: np.ndarray, mask_window: int) -> np.ndarray:
    """Window-level boolean grid -> flattened per-patch mask."""
    return np.kron(window_mask.astype(np.uint8), np.ones((mask_window, mask_window), np.uint8)) \
        .astype(bool).reshape(-1)


def window_mask(rows: int, cols: int, mask_window: int, ratio: float,
                rng: np.random.Generator) -> np.ndarray:
    """Hide whole ``mask_window x mask_window`` groups of patches.

    Returns a flat boolean per-patch mask (row-major, True = masked).
    """
    wr, wc = _check(rows, cols, mask_window, ratio)
    total = wr * wc
    chosen = rng.permutation(total)[:masked_window_count(total, ratio)]
    grid = np.zeros(total, dtype=bool)
    grid[chosen] = True
    return expand_windows(grid.reshape(wr, wc), mask_window)


def patch_mask(rows: int, cols: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    return window_mask(rows, cols, 1, ratio, rng)


def batch_masks(count: int, rows: int, cols: int, mask_window: int, ratio: float,
                rng: np.random.Generator) -> np.ndarray:
    """Independent window masks for ``count`` images, shape ``(count, rows*cols)``."""
    if count == 0:
        return np.zeros((0, rows * cols), dtype=bool)
    return np.stack([window_mask(rows, cols, mask_window, ratio, rng) for _ in range(count)])


@dataclass
class MaskPlan:
    """K masks over a ``rows x cols`` patch grid, aligned to ``mask_window`` groups."""

    rows: int
    cols: int
    mask_window: int
    ratio: float
    runs: np.ndarray  # (K, rows*cols) bool

    @property
    def k(self) -> int:
        return self.runs.shape[0]

    def window_hits(self) -> np.ndarray:
        """How many runs mask each window, shape ``(rows/mw, cols/mw)``."""
        mw = self.mask_window
        grid = self.runs.reshape(self.k, self.rows // mw, mw, self.cols // mw, mw)
        return grid[:, :, 0, :, 0].sum(axis=0)


def inference_schedule(rows: int, cols: int, mask_window: int, ratio: float, k: int,
                       rng: np.random.Generator, stratified: bool = True) -> MaskPlan:
    """Build K masks for averaged-error inference.

    Stratified plans deal windows cyclically from successive shuffles, which
    guarantees every window is masked at least once and keeps per-window
    counts balanced.  Independent plans draw each run with :func:`window_mask`.
    """
    if k < 1:
        raise MaskError(f"K must be >= 1, got {k}")
    wr, wc = _check(rows, cols, mask_window, ratio)
    total = wr * wc
    per_run = masked_window_count(total, ratio)
    if not stratified or k == 1:
        runs = np.stack([window_mask(rows, cols, mask_window, ratio, rng) for _ in range(k)])
        return MaskPlan(rows, cols, mask_window, ratio, runs)
    if k * per_run < total:
        raise MaskError(f"stratified schedule infeasible: {k} runs x {per_run} windows < {total} windows")

    # Windows are dealt from a stream of fresh shuffles, so counts stay within
    # one of K*per_run/total.  A window repeated inside one run is deferred to
    # the next run.  The first shuffle is consumed in full, so every window
    # gets masked.
    stream: list[int] = []
    deferred: list[int] = []
    runs = []
    for _ in range(k):
        picked = np.zeros(total, dtype=bool)
        taken = 0
        pending, deferred = deferred, []
        while taken < per_run:
            if not pending:
                if not stream:
                    stream = [int(w) for w in rng.permutation(total)]
                pending = [stream.pop(0)]
            w = pending.pop(0)
            if picked[w]:
                deferred.append(w)
                continue
            picked[w] = True
            taken += 1
        deferred = pending + deferred
        runs.append(expand_windows(picked.reshape(wr, wc), mask_window))
    return MaskPlan(rows, cols, mask_window, ratio, np.stack(runs))


def never_masked_probability(ratio: float, k: int) -> float:
    """Chance a given window escapes all K independent draws, ``(1 - ratio) ** K``."""
    return (1.0 - ratio) ** k
