"""Training with plain MSE or the anomaly-suppression loss, K-run inference and
knee-point thresholding."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .masking import MaskPlan, batch_masks, inference_schedule
from .models import (
    ConfigError,
    MaskedAutoencoder,
    ModelConfig,
    coerce_fields,
    format_key_values,
    parse_key_values,
    pixel_error,
    reconstruction_error,
)
from .numcore import OptimConfig, ShapeError, Tensor

logger = logging.getLogger(__name__)

KNEE_FLOOR = 1e-9


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# anomaly-suppression weights and loss
# ---------------------------------------------------------------------------

@dataclass
class WeightMap:
    values: np.ndarray
    source_epoch: int = -1


def asl_weight_map(errors: np.ndarray, rescale: bool = True, source_epoch: int = -1) -> WeightMap:
    """``w = max(E) - e`` per map (the last two axes), optionally divided by ``mean(w)``."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("asl_weight_map: empty error map")
    peak = e.max(axis=(-2, -1), keepdims=True) if e.ndim >= 2 else e.max()
    w = peak - e
    if rescale:
        m = w.mean(axis=(-2, -1), keepdims=True) if e.ndim >= 2 else w.mean()
        w = np.divide(w, m, out=np.zeros_like(w), where=m > 0)
    return WeightMap(w, source_epoch)


def weighted_loss(errors: Tensor, weights: np.ndarray | None = None, support: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Sum of ``w * e`` over ``support`` (all pixels when absent).

    ``errors`` is a (N,) H x W tensor; weights are treated as constants.
    ``reduction="mean"`` divides by the support size (per image, then averaged
    over the batch); ``"sum"`` returns the raw total.
    """
    if not isinstance(errors, Tensor):
        errors = Tensor(errors)
    shape = errors.shape
    if len(shape) < 2:
        raise ShapeError(f"weighted_loss: expected (N,) H x W maps, got {shape}")
    w = np.ones(shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ShapeError(f"weighted_loss: weights {w.shape} vs errors {shape}")
    s = np.ones(shape) if support is None else np.asarray(support, dtype=np.float64)
    if s.shape != shape:
        raise ShapeError(f"weighted_loss: support {s.shape} vs errors {shape}")
    w = w * s
    if reduction == "sum":
        coef = w
    elif reduction == "mean":
        count = s.sum(axis=(-2, -1), keepdims=True)
        if np.any(count == 0):
            raise ValueError("weighted_loss: empty support")
        coef = w / (count * max(count.size, 1))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return nc.sum_all(nc.mul(errors, Tensor(coef)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"      # constant | cosine
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    asl: bool = True
    warmup_epochs: int | None = None   # default: 10% of epochs
    refresh_every: int = 5
    loss_support: str = "masked"       # masked | all
    loss_reduction: str = "mean"       # mean | sum
    weight_rescale: bool = True
    weight_source: str = "unmasked"    # unmasked | masked
    weight_runs: int = 8
    standardize: bool = True           # fill band statistics from the training set
    seed: int = 0

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return max(1, self.epochs // 10)

    def learning_rate_at(self, epoch: int) -> float:
        """Per-epoch rate: constant, or half-cosine from ``learning_rate`` towards zero."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.refresh_every < 1:
            out.append("refresh_every must be >= 1")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            out.append("warmup_epochs must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            out.append("lr_schedule must be 'cosine' or 'constant'")
        if self.loss_support not in ("masked", "all"):
            out.append("loss_support must be 'masked' or 'all'")
        if self.loss_reduction not in ("mean", "sum"):
            out.append("loss_reduction must be 'mean' or 'sum'")
        if self.weight_source not in ("unmasked", "masked"):
            out.append("weight_source must be 'unmasked' or 'masked'")
        if self.weight_runs < 1:
            out.append("weight_runs must be >= 1")
        try:
            self.optim()
        except ValueError as exc:
            out.append(str(exc))
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid training config: " + "; ".join(problems))
        return self

    def optim(self) -> OptimConfig:
        return OptimConfig(self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon)


@dataclass
class TrainState:
    model: MaskedAutoencoder
    config: TrainConfig
    optim: OptimConfig
    epoch: int = 0
    weight_maps: WeightMap | None = None
    loss_history: list[float] = field(default_factory=list)
    mse_history: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None

    @classmethod
    def create(cls, model: MaskedAutoencoder, config: TrainConfig) -> "TrainState":
        config.validate()
        return cls(model, config, config.optim(), rng=np.random.default_rng(config.seed))


def load_run_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Read a key = value file holding model and training keys."""
    path = Path(path)
    values = parse_key_values(path.read_text(), str(path))
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    model_part = {k: v for k, v in values.items() if k in model_keys}
    train_part = {k: v for k, v in values.items() if k not in model_keys}
    mcfg = ModelConfig(**coerce_fields(ModelConfig, model_part, str(path))).validate()
    tcfg = TrainConfig(**coerce_fields(TrainConfig, train_part, str(path))).validate()
    return mcfg, tcfg


def prepare_model_config(mcfg: ModelConfig, tcfg: TrainConfig, images) -> ModelConfig:
    """Attach training-set band statistics unless disabled or already present."""
    if tcfg.standardize and not mcfg.band_mean:
        return mcfg.with_band_stats(images).validate()
    return mcfg


def format_run_config(mcfg: ModelConfig, tcfg: TrainConfig | None = None) -> str:
    text = format_key_values(mcfg)
    if tcfg is not None:
        text += format_key_values(tcfg)
    return text


def pixel_mask(patch_mask: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Expand (N, T) patch masks to (N, H, W) pixel masks."""
    n = patch_mask.shape[0]
    g = patch_mask.reshape(n, cfg.grid, cfg.grid).astype(np.float64)
    return np.repeat(np.repeat(g, cfg.patch_size, axis=1), cfg.patch_size, axis=2)


def masked_mse(model: MaskedAutoencoder, images: np.ndarray, masks: np.ndarray) -> float:
    """Mean per-pixel error over masked pixels (no gradient)."""
    rec = model(images, masks).data
    err = reconstruction_error(images, rec)
    sup = pixel_mask(masks, model.config)
    return float((err * sup).sum() / sup.sum())


def compute_weight_maps(model: MaskedAutoencoder, images: np.ndarray, config: TrainConfig,
                        epoch: int, batch_size: int = 64) -> WeightMap:
    """Error maps for every training image turned into ASL weights.

    ``weight_source="unmasked"`` reconstructs from the full image;
    ``"masked"`` averages ``weight_runs`` stratified masked runs per image.
    """
    cfg = model.config
    errs = []
    if config.weight_source == "unmasked":
        zero = np.zeros((0, cfg.tokens), dtype=bool)
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            mask = np.zeros((len(chunk), cfg.tokens), dtype=bool) if len(chunk) else zero
            errs.append(reconstruction_error(chunk, model(chunk, mask).data))
        errors = np.concatenate(errs)
    else:
        rng = np.random.default_rng([config.seed, epoch, 7])
        errors = np.stack([
            infer(model, img, inference_schedule(cfg.grid, cfg.grid, cfg.effective_mask_window,
                                                 cfg.mask_ratio, config.weight_runs, rng))
            for img in images])
    return asl_weight_map(errors, rescale=config.weight_rescale, source_epoch=epoch)


def train(state: TrainState, images: np.ndarray, epochs: int | None = None,
          progress: bool = False) -> TrainState:
    """Run ``epochs`` epochs (default: the remaining configured ones) over ``images`` (N, H, W, B).

    Weight maps are first computed once warmup ends and then refreshed every
    ``refresh_every`` epochs; until then (or with ``asl`` off) the loss is the
    plain masked MSE.
    """
    cfg, model, mcfg = state.config, state.model, state.model.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"train needs a non-empty (N, H, W, B) array, got {images.shape}")
    params = model.parameters()
    rng = state.rng if state.rng is not None else np.random.default_rng(cfg.seed)
    state.rng = rng
    stop = cfg.epochs if epochs is None else state.epoch + epochs
    warmup = cfg.effective_warmup
    n = len(images)
    mw = mcfg.effective_mask_window
    while state.epoch < stop:
        epoch = state.epoch
        if cfg.asl and epoch >= warmup and (epoch - warmup) % cfg.refresh_every == 0:
            state.weight_maps = compute_weight_maps(model, images, cfg, epoch)
        use_asl = cfg.asl and state.weight_maps is not None
        state.optim.learning_rate = cfg.learning_rate_at(epoch)
        order = rng.permutation(n)
        masks = batch_masks(n, mcfg.grid, mcfg.grid, mw, mcfg.mask_ratio, rng)
        total, total_mse, count = 0.0, 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = images[idx]
            m = masks[idx]
            rec = model(x, m)
            err = pixel_error(Tensor(x), rec)
            support = pixel_mask(m, mcfg) if cfg.loss_support == "masked" else None
            weights = state.weight_maps.values[idx] if use_asl else None
            loss = weighted_loss(err, weights, support, cfg.loss_reduction)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            nc.zero_grad(params)
            nc.backward(loss)
            nc.adamw_step(params, state.optim)
            sup = pixel_mask(m, mcfg)
            total_mse += float((err.data * sup).sum() / sup.sum()) * len(idx)
            total += value * len(idx)
            count += len(idx)
        state.loss_history.append(total / count)
        state.mse_history.append(total_mse / count)
        state.epoch += 1
        if progress and (state.epoch % 10 == 0 or state.epoch == stop):
            logger.info("epoch %d loss %.5f masked-mse %.5f%s", state.epoch, state.loss_history[-1],
                        state.mse_history[-1], " (asl)" if use_asl else "")
    return state


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def canonical_order(plan: MaskPlan) -> np.ndarray:
    """Run indices sorted by mask content, making averages independent of run order."""
    keys = [r.tobytes() for r in np.packbits(plan.runs, axis=1)]
    return np.array(sorted(range(plan.k), key=lambda i: keys[i]), dtype=int)


def infer(model: MaskedAutoencoder, image: np.ndarray, plan: MaskPlan, batch_size: int = 64) -> np.ndarray:
    """Average of the K per-run error maps for one ``H x W x B`` image."""
    cfg = model.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_size, cfg.image_size, cfg.bands):
        raise ShapeError(f"infer: image {image.shape} does not match model config")
    if (plan.rows, plan.cols) != (cfg.grid, cfg.grid):
        raise ShapeError(f"infer: plan grid {plan.rows}x{plan.cols} vs model grid {cfg.grid}")
    runs = plan.runs[canonical_order(plan)]
    total = np.zeros(image.shape[:2])
    for start in range(0, len(runs), batch_size):
        chunk = runs[start:start + batch_size]
        batch = np.broadcast_to(image, (len(chunk),) + image.shape)
        errs = reconstruction_error(batch, model(batch, chunk).data)
        for e in errs:
            total += e
    return total / plan.k


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def knee_index(sorted_values: np.ndarray) -> int | None:
    """Index of the knee of an ascending curve, or None when it is flat or straight.

    x = rank / (n - 1) and y are both scaled to [0, 1]; the knee maximises
    x - y, the gap below the chord of a convex increasing curve.
    """
    y = np.asarray(sorted_values, dtype=np.float64)
    n = y.size
    if n < 2:
        return None
    span = y[-1] - y[0]
    if not span > 0:
        return None
    x = np.arange(n) / (n - 1)
    diff = x - (y - y[0]) / span
    i = int(np.argmax(diff))
    if diff[i] <= KNEE_FLOOR:
        return None
    return i


def knee_threshold(values) -> float:
    """Knee point of the sorted error distribution; ``max`` when there is no knee."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("knee_threshold: no values")
    i = knee_index(v)
    return float(v[-1]) if i is None else float(v[i])


def empty_threshold(values) -> float:
    """Smallest threshold above every value (selects nothing under ``>=``)."""
    return float(np.nextafter(np.max(values), np.inf))


@dataclass
class AnomalyMap:
    values: np.ndarray
    threshold_used: float


def binarize(errors: np.ndarray, theta: float) -> AnomalyMap:
    return AnomalyMap((np.asarray(errors) >= theta).astype(np.uint8), float(theta))


def threshold_map(errors: np.ndarray) -> AnomalyMap:
    """Knee-point threshold and binarise; maps without a knee come out empty."""
    v = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    i = knee_index(v)
    theta = empty_threshold(v) if i is None else float(v[i])
    return binarize(errors, theta)
