"""SwinMAE and ViT-MAE reconstruction models."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .blocks import (
    Linear,
    LayerNorm,
    MaskToken,
    Module,
    PatchGrid,
    TransformerLayer,
    apply_mask_tokens,
    patch_expand,
    patch_merge,
    patchify,
    unpatchify,
)
from .errors import ConfigError
from .numcore import Parameter, ShapeError, Tensor

VARIANTS = ("swin-mae", "vit-mae")


@dataclass
class ModelConfig:
    image_size: int = 32
    bands: int = 4
    patch_size: int = 4
    embed_dim: int = 16
    stages: int = 3
    heads_per_stage: tuple[int, ...] = (2, 2, 4)
    window: int = 2
    mask_ratio: float = 0.75
    variant: str = "swin-mae"
    depth: int = 1
    decoder_depth: int = 1
    mlp_ratio: int = 4
    mask_window: int | None = None
    vit_encoder_layers: int = 2
    vit_decoder_layers: int = 1
    # per-band input statistics; empty tuples leave pixels untouched
    band_mean: tuple[float, ...] = ()
    band_scale: tuple[float, ...] = ()

    def __post_init__(self):
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)
        self.band_mean = tuple(float(v) for v in self.band_mean)
        self.band_scale = tuple(float(v) for v in self.band_scale)

    def with_band_stats(self, images) -> "ModelConfig":
        """Copy of this config carrying the per-band mean and std of ``images`` (N, H, W, B)."""
        mean, scale = band_statistics(images)
        return dataclasses.replace(self, band_mean=tuple(mean.tolist()), band_scale=tuple(scale.tolist()))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_len(self) -> int:
        return self.patch_size ** 2 * self.bands

    @property
    def effective_mask_window(self) -> int:
        if self.mask_window is not None:
            return self.mask_window
        return 2 if self.variant == "swin-mae" else 1

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2 ** s for s in range(self.stages)]

    def stage_grids(self) -> list[int]:
        return [self.grid // 2 ** s for s in range(self.stages)]

    def problems(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("image_size", "bands", "patch_size", "embed_dim", "stages", "window",
                     "depth", "decoder_depth", "mlp_ratio", "vit_encoder_layers", "vit_decoder_layers"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if not 0 <= self.mask_ratio < 1:
            out.append(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.image_size >= 1 and self.patch_size >= 1 and self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.band_mean) != len(self.band_scale) or len(self.band_mean) not in (0, self.bands):
            out.append(f"band_mean and band_scale need {self.bands} entries each (or none), "
                       f"got {len(self.band_mean)} and {len(self.band_scale)}")
        elif any(not v > 0 or not np.isfinite(v) for v in self.band_scale):
            out.append("band_scale entries must be finite and positive")
        if out:
            # grid-level checks below need a sane token grid
            return out
        if len(self.heads_per_stage) != self.stages:
            out.append(f"heads_per_stage has {len(self.heads_per_stage)} entries for {self.stages} stages")
        mw = self.effective_mask_window
        if mw < 1 or self.grid % mw:
            out.append(f"token grid {self.grid} not divisible by mask_window {mw}")
        if self.variant == "swin-mae":
            for s, g in enumerate(self.stage_grids()):
                if g < 1 or self.grid % 2 ** s:
                    out.append(f"stage {s}: token grid {self.grid}/2^{s} is not an integer")
                    break
                if g % self.window:
                    out.append(f"stage {s}: token grid {g} not divisible by window {self.window}")
            for s, (h, d) in enumerate(zip(self.heads_per_stage, self.stage_dims())):
                if h < 1 or d % h:
                    out.append(f"stage {s}: heads {h} do not divide dim {d}")
        else:
            h = self.heads_per_stage[0] if self.heads_per_stage else 0
            if h < 1 or self.embed_dim % h:
                out.append(f"heads {h} do not divide embed_dim {self.embed_dim}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self


def band_statistics(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and standard deviation over every pixel of ``images``.

    Bands with (near) zero spread get scale 1 so standardising never divides by zero.
    """
    a = np.asarray(images, dtype=np.float64)
    flat = a.reshape(-1, a.shape[-1])
    mean = flat.mean(axis=0)
    scale = flat.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, values: dict[str, str], source: str = "<config>") -> dict:
    """Convert string values to the types of dataclass ``cls``'s fields."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"{source}: unknown key {key!r}")
        default = fields[key].default
        if default is dataclasses.MISSING and fields[key].default_factory is not dataclasses.MISSING:
            default = fields[key].default_factory()
        try:
            out[key] = _coerce(raw, default, fields[key].type)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r} ({exc})") from exc
    return out


def _coerce(raw: str, default, annotation: str):
    if raw.lower() in ("none", "null") and "None" in str(annotation):
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, tuple):
        kind = float if "float" in str(annotation) else int
        return tuple(kind(p) for p in raw.replace(",", " ").split())
    if isinstance(default, int) or "int" in str(annotation):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def format_key_values(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str, source: str = "<config>") -> ModelConfig:
    return ModelConfig(**coerce_fields(ModelConfig, parse_key_values(text, source), source)).validate()


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class _Stage(Module):
    def __init__(self, layers: list[TransformerLayer], resample: Parameter | None):
        self.layers = layers
        self.resample = resample


class MaskedAutoencoder(Module):
    config: ModelConfig

    def __call__(self, images, mask) -> Tensor:
        return self.forward(images, mask)

    def forward(self, images, mask) -> Tensor:
        raise NotImplementedError

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_inputs(self, images, mask) -> tuple[Tensor, np.ndarray, bool]:
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        single = x.ndim == 3
        if single:
            x = nc.reshape(x, (1,) + x.shape)
        expected = (cfg.image_size, cfg.image_size, cfg.bands)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"image shape {x.shape} does not match config {expected}")
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = np.broadcast_to(mask, (x.shape[0], mask.size))
        elif mask.ndim == 3:
            mask = mask.reshape(mask.shape[0], -1)
        if mask.shape != (x.shape[0], cfg.tokens):
            raise ShapeError(f"mask shape {mask.shape} does not match {x.shape[0]} x {cfg.tokens} patches")
        if cfg.band_mean:
            mean, scale = np.asarray(cfg.band_mean), np.asarray(cfg.band_scale)
            x = nc.mul(nc.add_bias(x, Tensor(-mean)), Tensor(np.broadcast_to(1.0 / scale, x.shape)))
        return x, mask, single

    def _restore(self, out: Tensor, single: bool) -> Tensor:
        """Map a reconstruction in standardised units back to pixel units."""
        cfg = self.config
        if cfg.band_mean:
            out = nc.add_bias(nc.mul(out, Tensor(np.broadcast_to(np.asarray(cfg.band_scale), out.shape))),
                              Tensor(np.asarray(cfg.band_mean)))
        return nc.reshape(out, out.shape[1:]) if single else out

    def save(self, path: str | Path, include_moments: bool = True) -> None:
        nc.save_checkpoint(path, self.parameters(), include_moments)

    def load(self, path: str | Path) -> None:
        nc.load_checkpoint(path, self.parameters())


class SwinMAE(MaskedAutoencoder):
    """Encoder: embed, mask-token replacement, position, [Swin blocks + merge] per stage.
    Decoder: [Swin blocks + expand] per stage, norm, projection back to pixels.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = cfg = config
        dims, grids = cfg.stage_dims(), cfg.stage_grids()
        self.embed = Linear(rng, cfg.patch_len, cfg.embed_dim)
        self.mask_token = MaskToken(rng, cfg.embed_dim)
        self.pos_embed = Parameter(nc.trunc_normal(rng, (cfg.tokens, cfg.embed_dim)))
        counter = 0

        def make_layers(stage: int, depth: int) -> list[TransformerLayer]:
            nonlocal counter
            win = min(cfg.window, grids[stage])
            out = []
            for _ in range(depth):
                shift = win // 2 if (counter % 2 and win < grids[stage]) else 0
                out.append(TransformerLayer(rng, dims[stage], cfg.heads_per_stage[stage],
                                            window=win, shift=shift, mlp_ratio=cfg.mlp_ratio))
                counter += 1
            return out

        self.encoder = []
        for s in range(cfg.stages):
            layers = make_layers(s, cfg.depth)
            merge = None
            if s < cfg.stages - 1:
                merge = Parameter(nc.trunc_normal(rng, (4 * dims[s], 2 * dims[s])))
            self.encoder.append(_Stage(layers, merge))
        self.decoder = []
        for s in reversed(range(cfg.stages)):
            layers = make_layers(s, cfg.decoder_depth)
            expand = None
            if s > 0:
                expand = Parameter(nc.trunc_normal(rng, (dims[s], 2 * dims[s])))
            self.decoder.append(_Stage(layers, expand))
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(rng, cfg.embed_dim, cfg.patch_len)

    def encode(self, x: Tensor, mask: np.ndarray) -> PatchGrid:
        cfg = self.config
        grid = patchify(x, cfg.patch_size)
        grid = grid.with_tokens(self.embed(grid.tokens))
        grid = apply_mask_tokens(grid, mask, self.mask_token)
        grid = grid.with_tokens(nc.add_bias(grid.tokens, self.pos_embed))
        for stage in self.encoder:
            for layer in stage.layers:
                grid = layer(grid)
            if stage.resample is not None:
                grid = patch_merge(grid, stage.resample)
        return grid

    def decode(self, grid: PatchGrid) -> Tensor:
        cfg = self.config
        for stage in self.decoder:
            for layer in stage.layers:
                grid = layer(grid)
            if stage.resample is not None:
                grid = patch_expand(grid, stage.resample)
        grid = grid.with_tokens(self.head(self.norm(grid.tokens)))
        return unpatchify(grid, cfg.patch_size, cfg.bands)

    def forward(self, images, mask) -> Tensor:
        x, mask, single = self._check_inputs(images, mask)
        return self._restore(self.decode(self.encode(x, mask)), single)


class ViTMAE(MaskedAutoencoder):
    """Plain MAE: the encoder sees visible tokens only, the decoder re-inserts mask tokens."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = cfg = config
        d, h = cfg.embed_dim, cfg.heads_per_stage[0]
        self.embed = Linear(rng, cfg.patch_len, d)
        self.pos_embed = Parameter(nc.trunc_normal(rng, (cfg.tokens, d)))
        self.encoder = [TransformerLayer(rng, d, h, mlp_ratio=cfg.mlp_ratio)
                        for _ in range(cfg.vit_encoder_layers)]
        self.encoder_norm = LayerNorm(d)
        self.decoder_embed = Linear(rng, d, d)
        self.mask_token = MaskToken(rng, d)
        self.decoder_pos_embed = Parameter(nc.trunc_normal(rng, (cfg.tokens, d)))
        self.decoder = [TransformerLayer(rng, d, h, mlp_ratio=cfg.mlp_ratio)
                        for _ in range(cfg.vit_decoder_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(rng, d, cfg.patch_len)

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        """Run the encoder stack on already embedded and positioned tokens (N, n, D)."""
        grid = PatchGrid(1, tokens.shape[1], tokens)
        for layer in self.encoder:
            grid = layer(grid)
        return self.encoder_norm(grid.tokens)

    def forward(self, images, mask) -> Tensor:
        cfg = self.config
        x, mask, single = self._check_inputs(images, mask)
        n, t = mask.shape
        counts = mask.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ShapeError("ViT-MAE needs the same number of masked patches in every image of a batch")
        n_mask = int(counts[0])
        # stable sort puts visible patches first, each group in grid order
        order = np.argsort(mask, axis=1, kind="stable")
        restore = np.argsort(order, axis=1, kind="stable")
        visible = order[:, :t - n_mask]

        grid = patchify(x, cfg.patch_size)
        z = nc.add_bias(self.embed(grid.tokens), self.pos_embed)
        z = self.encode_tokens(nc.gather_rows(z, visible))
        z = self.decoder_embed(z)
        if n_mask:
            filler = nc.broadcast_rows(self.mask_token.vector, (n, n_mask))
            z = nc.concat([z, filler], axis=1)
        z = nc.gather_rows(z, restore)
        z = nc.add_bias(z, self.decoder_pos_embed)
        g = PatchGrid(grid.rows, grid.cols, z)
        for layer in self.decoder:
            g = layer(g)
        g = g.with_tokens(self.head(self.norm(g.tokens)))
        return self._restore(unpatchify(g, cfg.patch_size, cfg.bands), single)


def build(config: ModelConfig, seed: int = 0) -> MaskedAutoencoder:
    """Construct a model with parameters drawn deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    model = SwinMAE(config, rng) if config.variant == "swin-mae" else ViTMAE(config, rng)
    params = model.parameters()
    names = [p.name for p in params]
    assert len(set(names)) == len(names), "duplicate parameter names"
    return model


def forward(model: MaskedAutoencoder, image, mask) -> Tensor:
    return model.forward(image, mask)


def reconstruction_error(image, reconstruction) -> np.ndarray:
    """Per-pixel squared error summed over bands: ``(..., H, W, B) -> (..., H, W)``."""
    a = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    b = reconstruction.data if isinstance(reconstruction, Tensor) else np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction_error: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return (d * d).sum(axis=-1)


def pixel_error(image: Tensor, reconstruction: Tensor) -> Tensor:
    """Differentiable per-pixel error map ``(N, H, W)``."""
    return nc.sum_axis(nc.square(nc.sub(reconstruction, image)), -1)
