"""Quick gradient and oracle checks run by ``agrimae selftest``.

Each check returns ``(name, passed, detail)``.  The suite takes a few seconds,
so whole-model gradchecks probe a random sample of coordinates per parameter.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import anomaly, blocks, masking, metrics, models
from . import numcore as nc
from .numcore import Tensor

Check = tuple[str, bool, str]

GRAD_TOL = 1e-4


def _ops_gradcheck() -> Check:
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = nc.Parameter(rng.normal(size=(4, 4)), "w")
    b = nc.Parameter(rng.normal(size=4), "b")
    gain = nc.Parameter(1 + 0.1 * rng.normal(size=4), "gain")
    beta = nc.Parameter(0.1 * rng.normal(size=4), "beta")

    def f():
        h = nc.layer_norm(nc.linear(x, w, b), gain, beta)
        a = nc.softmax_lastdim(nc.matmul(h, nc.transpose(h, (0, 2, 1))))
        return nc.sum_all(nc.square(nc.gelu(nc.matmul(a, h))))

    rep = nc.gradcheck(f, [x, w, b, gain, beta])
    worst = max(rep.values())
    return "gradcheck: fused ops", worst < 1e-6, f"max rel err {worst:.2e}"


def _model_gradcheck(variant: str) -> Check:
    cfg = models.ModelConfig(image_size=16, bands=2, patch_size=4, embed_dim=8, stages=2,
                             heads_per_stage=(2, 2), window=2, variant=variant)
    model = models.build(cfg, 1)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data += rng.normal(0, 0.1, p.shape)
    x = rng.random((2, 16, 16, 2))
    mask = masking.batch_masks(2, cfg.grid, cfg.grid, cfg.effective_mask_window, 0.5, rng)

    def f():
        return nc.mean_all(models.pixel_error(Tensor(x), model(x, mask)))

    rep = nc.gradcheck(f, model.parameters(), max_coords=4, rng=rng)
    name, worst = max(rep.items(), key=lambda kv: kv[1])
    return f"gradcheck: {variant} (sampled)", worst < GRAD_TOL, f"max rel err {worst:.2e} at {name}"


def _window_vs_global() -> Check:
    rng = np.random.default_rng(2)
    layer = blocks.TransformerLayer(rng, 8, 2, window=4)
    grid = blocks.PatchGrid(4, 4, Tensor(rng.normal(size=(1, 16, 8))))
    windowed = layer(grid).tokens.data
    glob = blocks.global_attention_layer(grid.tokens, layer).data
    gap = float(np.abs(windowed - glob).max())
    return "oracle: full-grid window == global attention", gap < 1e-10, f"max gap {gap:.1e}"


def _iou_oracle() -> Check:
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(200):
        p = rng.random((6, 7)) < rng.random()
        g = rng.random((6, 7)) < rng.random()
        inter = sum(bool(a and b) for a, b in zip(p.flat, g.flat))
        union = sum(bool(a or b) for a, b in zip(p.flat, g.flat))
        expected = 1.0 if union == 0 else inter / union
        bad += metrics.iou(p, g) != expected
    return "oracle: IoU vs pixel counting", bad == 0, f"{bad} mismatches / 200"


def _auroc_oracle() -> Check:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        s = rng.integers(0, 5, 40).astype(float)
        g = np.zeros(40, bool)
        g[rng.choice(40, 12, replace=False)] = True
        pos, neg = s[g], s[~g]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        worst = max(worst, abs(metrics.pixel_auroc(s, g) - pairs / (pos.size * neg.size)))
    return "oracle: AUROC vs pair counting", worst < 1e-12, f"max gap {worst:.1e}"


def _knee_oracle() -> Check:
    # piecewise-linear curve: flat at 0 then a steep ramp; the knee is the corner
    y = np.concatenate([np.zeros(80), np.linspace(0, 1, 21)[1:]])
    i = anomaly.knee_index(y)
    return "oracle: knee of a hinge curve", i == 79, f"index {i}, expected 79"


def _mask_counts() -> Check:
    rng = np.random.default_rng(5)
    ok = True
    for rows, mw, ratio in [(8, 2, 0.75), (8, 1, 0.5), (4, 4, 0.3), (6, 3, 0.6)]:
        m = masking.window_mask(rows, rows, mw, ratio, rng)
        windows = (rows // mw) ** 2
        ok &= int(m.sum()) == masking.masked_window_count(windows, ratio) * mw * mw
        plan = masking.inference_schedule(rows, rows, mw, ratio, 8, rng, stratified=True)
        ok &= bool(plan.window_hits().min() >= 1) if 8 * masking.masked_window_count(windows, ratio) >= windows else True
    return "masking: window counts and stratified coverage", ok, ""


def _asl_ordering() -> Check:
    e = np.random.default_rng(6).random((5, 5))
    w = anomaly.asl_weight_map(e, rescale=False).values
    order_ok = np.all(np.argsort(e, axis=None, kind="stable") == np.argsort(-w, axis=None, kind="stable"))
    return "asl: weights reverse the error order", bool(order_ok) and w.min() == 0.0, ""


CHECKS: list[Callable[[], Check]] = [
    _ops_gradcheck,
    lambda: _model_gradcheck("swin-mae"),
    lambda: _model_gradcheck("vit-mae"),
    _window_vs_global,
    _iou_oracle,
    _auroc_oracle,
    _knee_oracle,
    _mask_counts,
    _asl_ordering,
]


def run_all() -> list[Check]:
    results = []
    for check in CHECKS:
        try:
            results.append(check())
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            results.append((getattr(check, "__name__", "check"), False, f"raised {exc!r}"))
    return results
