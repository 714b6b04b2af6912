"""Vision building blocks: patch embedding, (shifted-)window and global attention,
patch merging/expanding and the learnable mask token.

Token tensors are batched: ``(N, rows*cols, dim)`` in row-major grid order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import Parameter, ShapeError, Tensor


@dataclass
class PatchGrid:
    """Tokens laid out on a ``rows x cols`` grid, shape ``(N, rows*cols, dim)``."""

    rows: int
    cols: int
    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.rows * self.cols:
            raise ShapeError(
                f"PatchGrid: tokens {self.tokens.shape} do not fit a {self.rows}x{self.cols} grid")

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens: Tensor) -> "PatchGrid":
        return PatchGrid(self.rows, self.cols, tokens)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Minimal container that names the parameters of its attributes recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        """All parameters, each renamed to its dotted path inside this module."""
        out = []
        for name, p in self.named_parameters():
            p.name = name
            out.append(p)
        return out


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(nc.trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, dim: int, ratio: int = 4):
        self.fc1 = Linear(rng, dim, ratio * dim)
        self.fc2 = Linear(rng, ratio * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class AttentionWeights(Module):
    """Query/key/value/output projections for multi-head attention."""

    def __init__(self, rng: np.random.Generator, dim: int, head_count: int):
        if head_count < 1 or dim % head_count:
            raise ShapeError(f"head_count {head_count} must divide dim {dim}")
        self.head_count = head_count
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.output = Linear(rng, dim, dim)

    @property
    def dim(self) -> int:
        return self.query.weight.shape[0]


class MaskToken(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.vector = Parameter(nc.trunc_normal(rng, (dim,)))


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------

def _as_batched_image(image) -> tuple[Tensor, bool]:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if t.ndim == 3:
        return nc.reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"expected an H x W x B image or a batch of them, got {t.shape}")
    return t, False


def patchify(image, patch: int) -> PatchGrid:
    """Split ``(N,) H x W x B`` images into row-major patches of raw length ``patch*patch*B``."""
    x, _ = _as_batched_image(image)
    n, h, w, b = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch {patch}")
    r, c = h // patch, w // patch
    x = nc.reshape(x, (n, r, patch, c, patch, b))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    return PatchGrid(r, c, nc.reshape(x, (n, r * c, patch * patch * b)))


def unpatchify(grid: PatchGrid, patch: int, bands: int) -> Tensor:
    """Inverse of :func:`patchify`; returns ``(N, H, W, B)``."""
    n = grid.batch
    if grid.dim != patch * patch * bands:
        raise ShapeError(f"unpatchify: token length {grid.dim} != {patch}*{patch}*{bands}")
    x = nc.reshape(grid.tokens, (n, grid.rows, grid.cols, patch, patch, bands))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    return nc.reshape(x, (n, grid.rows * patch, grid.cols * patch, bands))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def multi_head_attention(x: Tensor, w: AttentionWeights) -> Tensor:
    """softmax(QK^T / sqrt(d)) V per head over the token axis of ``x`` (G, T, D)."""
    g, t, dim = x.shape
    h = w.head_count
    d = dim // h

    def heads(proj: Linear) -> Tensor:
        return nc.transpose(nc.reshape(proj(x), (g, t, h, d)), (0, 2, 1, 3))

    q, k, v = heads(w.query), heads(w.key), heads(w.value)
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = nc.softmax_lastdim(scores)
    out = nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3))
    return w.output(nc.reshape(out, (g, t, dim)))


def window_attention(grid: PatchGrid, w: AttentionWeights, window: int, shift: int = 0) -> PatchGrid:
    """Attention inside non-overlapping ``window x window`` groups.

    For ``shift > 0`` the grid is cyclically shifted so window (i, j) covers
    the tokens of (i + shift, j + shift), attended, then shifted back.
    Wrapped-around pairs are not masked.
    """
    r, c = grid.rows, grid.cols
    if window < 1 or r % window or c % window:
        raise ShapeError(f"window_attention: grid {r}x{c} not divisible by window {window}")
    if not 0 <= shift < window:
        raise ShapeError(f"window_attention: shift {shift} must lie in [0, {window})")
    n, dim = grid.batch, grid.dim
    x = nc.reshape(grid.tokens, (n, r, c, dim))
    if shift:
        x = nc.roll(x, (-shift, -shift), axis=(1, 2))
    x = nc.reshape(x, (n, r // window, window, c // window, window, dim))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nc.reshape(x, (n * (r // window) * (c // window), window * window, dim))
    x = multi_head_attention(x, w)
    x = nc.reshape(x, (n, r // window, c // window, window, window, dim))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    x = nc.reshape(x, (n, r, c, dim))
    if shift:
        x = nc.roll(x, (shift, shift), axis=(1, 2))
    return grid.with_tokens(nc.reshape(x, (n, r * c, dim)))


class TransformerLayer(Module):
    """Pre-norm attention + MLP with residuals.

    ``window=None`` attends globally over all tokens; otherwise attention is
    restricted to (optionally shifted) windows of the token grid.
    """

    def __init__(self, rng: np.random.Generator, dim: int, head_count: int,
                 window: int | None = None, shift: int = 0, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionWeights(rng, dim, head_count)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)
        self.window = window
        self.shift = shift

    def __call__(self, grid: PatchGrid) -> PatchGrid:
        z = grid.tokens
        normed = grid.with_tokens(self.norm1(z))
        if self.window is None:
            attended = multi_head_attention(normed.tokens, self.attn)
        else:
            attended = window_attention(normed, self.attn, self.window, self.shift).tokens
        z = nc.add(attended, z)
        z = nc.add(self.mlp(self.norm2(z)), z)
        return grid.with_tokens(z)


def global_attention_layer(tokens: Tensor, layer: TransformerLayer) -> Tensor:
    """One global transformer layer on ``(N, T, D)`` or ``(T, D)`` tokens."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = nc.reshape(tokens, (1,) + tokens.shape)
    n, t, d = tokens.shape
    z = tokens
    z = nc.add(multi_head_attention(layer.norm1(z), layer.attn), z)
    z = nc.add(layer.mlp(layer.norm2(z)), z)
    return nc.reshape(z, (t, d)) if squeeze else z


# ---------------------------------------------------------------------------
# merging / expanding
# ---------------------------------------------------------------------------

def patch_merge(grid: PatchGrid, w: Tensor) -> PatchGrid:
    """Fuse each 2x2 neighbourhood into one token: ``rows/2 x cols/2``, dim ``w.shape[1]``.

    Children are concatenated in the order (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
    """
    r, c, n, d = grid.rows, grid.cols, grid.batch, grid.dim
    if r % 2 or c % 2:
        raise ShapeError(f"patch_merge: grid {r}x{c} must be even on both sides")
    if w.shape[0] != 4 * d:
        raise ShapeError(f"patch_merge: weight {w.shape} expects input dim {4 * d}")
    x = nc.reshape(grid.tokens, (n, r // 2, 2, c // 2, 2, d))
    # -> (n, i, j, dc, dr, d) so the flattened child index is 2*dc + dr
    x = nc.transpose(x, (0, 1, 3, 4, 2, 5))
    x = nc.reshape(x, (n, (r // 2) * (c // 2), 4 * d))
    return PatchGrid(r // 2, c // 2, nc.linear(x, w))


def patch_expand(grid: PatchGrid, w: Tensor) -> PatchGrid:
    """Project each token to ``2*dim`` and unfold it into a 2x2 block of ``dim/2`` tokens.

    The child layout matches :func:`patch_merge`.
    """
    r, c, n, d = grid.rows, grid.cols, grid.batch, grid.dim
    if d % 2:
        raise ShapeError(f"patch_expand: dim {d} must be even")
    if w.shape != (d, 2 * d):
        raise ShapeError(f"patch_expand: weight {w.shape} must be ({d}, {2 * d})")
    x = nc.linear(grid.tokens, w)
    x = nc.reshape(x, (n, r, c, 2, 2, d // 2))          # (n, i, j, dc, dr, d/2)
    x = nc.transpose(x, (0, 1, 4, 2, 3, 5))             # (n, i, dr, j, dc, d/2)
    return PatchGrid(2 * r, 2 * c, nc.reshape(x, (n, 4 * r * c, d // 2)))


def apply_mask_tokens(grid: PatchGrid, mask, token: MaskToken) -> PatchGrid:
    """Replace masked positions by the shared learnable vector; token count is unchanged."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (grid.batch, mask.size))
    if mask.shape != (grid.batch, grid.rows * grid.cols):
        raise ShapeError(f"apply_mask_tokens: mask {mask.shape} vs {grid.batch} x {grid.rows * grid.cols} tokens")
    if token.vector.shape != (grid.dim,):
        raise ShapeError(f"apply_mask_tokens: token {token.vector.shape} vs dim {grid.dim}")
    return grid.with_tokens(nc.masked_select(grid.tokens, token.vector, mask))
