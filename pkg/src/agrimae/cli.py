"""Command-line interface: gen-data, train, infer, eval, selftest.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
The ``AGRIMAE_SEED`` environment variable overrides every ``--seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import anomaly, data, metrics
from .errors import ConfigError
from .masking import inference_schedule
from .models import ModelConfig, build, parse_key_values

logger = logging.getLogger("agrimae")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _seed(value: int) -> int:
    env = os.environ.get("AGRIMAE_SEED")
    if env is None or env == "":
        return value
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"AGRIMAE_SEED must be an integer, got {env!r}") from exc


def fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def config_path_for(ckpt: str | Path) -> Path:
    """Sidecar holding the model and training config of a checkpoint."""
    return Path(str(ckpt) + ".cfg")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = data.GenSpec(count=args.n, image_size=args.size, bands=args.bands,
                        anomaly_fraction=args.anomaly_frac, seed=_seed(args.seed),
                        classes=tuple(args.classes.split(",")) if args.classes else data.ANOMALY_CLASSES,
                        id_prefix=args.prefix)
    spec.validate()
    out = data.generate(spec, args.out)
    print(f"wrote {spec.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config:
        mcfg, tcfg = anomaly.load_run_config(args.config)
    else:
        mcfg, tcfg = ModelConfig(), anomaly.TrainConfig()
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError(f"--epochs must be >= 1, got {args.epochs}")
        tcfg.epochs = args.epochs
    if args.asl is not None:
        tcfg.asl = args.asl == "on"
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    tcfg.seed = _seed(args.seed if args.seed is not None else tcfg.seed)
    tcfg.validate()
    mcfg.validate()

    samples = data.load_dataset(args.data, data.SplitSpec(exclude_anomalous=args.exclude_anomalous))
    if not samples:
        raise ConfigError(f"{args.data}: no training samples")
    images = data.stack_images(samples)
    if images.shape[1:] != (mcfg.image_size, mcfg.image_size, mcfg.bands):
        raise ConfigError(f"dataset images {images.shape[1:]} do not match model config "
                          f"{(mcfg.image_size, mcfg.image_size, mcfg.bands)}")
    mcfg = anomaly.prepare_model_config(mcfg, tcfg, images)
    model = build(mcfg, tcfg.seed)
    state = anomaly.TrainState.create(model, tcfg)
    anomaly.train(state, images, progress=True)
    out = Path(args.out_ckpt)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    config_path_for(out).write_text(anomaly.format_run_config(mcfg, tcfg))
    if args.weights_dir and state.weight_maps is not None:
        wdir = Path(args.weights_dir)
        wdir.mkdir(parents=True, exist_ok=True)
        for s, w in zip(samples, state.weight_maps.values):
            data.write_raster(wdir / f"{s.id}_weight.aten", w)
    print(f"trained {tcfg.epochs} epochs on {len(samples)} images; "
          f"final loss {state.loss_history[-1]:.6f}; checkpoint {out}")
    return EXIT_OK


def _load_model(ckpt: str | Path):
    cfg_path = config_path_for(ckpt)
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{cfg_path}: config sidecar missing")
    mcfg, tcfg = anomaly.load_run_config(cfg_path)
    model = build(mcfg, 0)
    model.load(ckpt)
    return model, mcfg, cfg_path.read_text()


def _image_sources(path: Path) -> list[tuple[str, Path]]:
    if path.is_dir():
        folder = path / "images" if (path / "images").is_dir() else path
        files = sorted(folder.glob("*.aten"))
        if not files:
            raise FileNotFoundError(f"{path}: no .aten images")
        return [(f.stem, f) for f in files]
    return [(path.stem, path)]


def cmd_infer(args) -> int:
    model, mcfg, cfg_text = _load_model(args.ckpt)
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    seed = _seed(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for ident, path in _image_sources(Path(args.image)):
        image = data.normalize(data.read_raster(path))
        if image.ndim == 2:
            image = image[:, :, None]
        if image.shape[0] != mcfg.image_size:
            image = data.resize_bilinear(image, mcfg.image_size, mcfg.image_size)
        rng = np.random.default_rng([seed, int(hashlib.sha256(ident.encode()).hexdigest()[:8], 16)])
        plan = inference_schedule(mcfg.grid, mcfg.grid, mcfg.effective_mask_window, mcfg.mask_ratio,
                                  args.k, rng, stratified=args.stratified)
        err = anomaly.infer(model, image, plan)
        amap = anomaly.threshold_map(err)
        data.write_raster(out / f"{ident}_error.aten", err)
        data.write_raster(out / f"{ident}_anomaly.aten", amap.values.astype(np.uint8))
        data.write_pgm(out / f"{ident}_anomaly.pgm", amap.values.astype(bool))
        data.write_pgm(out / f"{ident}_error.pgm", err)
        lines.append(f"{ident}\t{amap.threshold_used!r}")
    (out / "thresholds.tsv").write_text("\n".join(lines) + "\n")
    (out / "meta.txt").write_text(
        f"config_fingerprint = {fingerprint(cfg_text)}\nseed = {seed}\nk = {args.k}\n"
        f"stratified = {int(args.stratified)}\n")
    print(f"wrote {len(lines)} anomaly maps to {out}")
    return EXIT_OK


def _gt_layout(gt_dir: Path) -> tuple[Path, dict[str, str]]:
    """Label folder plus id -> class tag (from a sibling or contained index.txt)."""
    labels = gt_dir / "labels" if (gt_dir / "labels").is_dir() else gt_dir
    tags = {}
    for index in (gt_dir / "index.txt", labels.parent / "index.txt"):
        if index.is_file():
            tags = {e.id: e.class_tag for e in data.read_index(index)}
            break
    return labels, tags


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    labels, tags = _gt_layout(Path(args.gt_dir))
    preds, gts, scores, tag_list = [], [], [], []
    files = sorted(pred_dir.glob("*_anomaly.aten"))
    if not files:
        raise FileNotFoundError(f"{pred_dir}: no *_anomaly.aten files")
    for f in files:
        ident = f.name[: -len("_anomaly.aten")]
        gt_path = labels / f"{ident}.aten"
        if not gt_path.is_file():
            raise FileNotFoundError(f"{gt_path}: ground truth missing for {ident}")
        pred = data.read_raster(f)
        gt = data.read_raster(gt_path)
        if pred.shape != gt.shape:
            raise ConfigError(f"{ident}: prediction {pred.shape} vs label {gt.shape}")
        err_path = pred_dir / f"{ident}_error.aten"
        preds.append(pred)
        gts.append(gt)
        tag_list.append(tags.get(ident, "unlabelled" if gt.any() else ""))
        if err_path.is_file():
            scores.append(data.read_raster(err_path))
    meta = {}
    if (pred_dir / "meta.txt").is_file():
        meta = parse_key_values((pred_dir / "meta.txt").read_text())
    report = metrics.evaluate(preds, gts, tag_list,
                              scores=scores if len(scores) == len(preds) else None,
                              per_image=args.per_image, include_normal=args.include_normal,
                              config_fingerprint=meta.get("config_fingerprint", ""),
                              seed=int(meta["seed"]) if "seed" in meta else None)
    text = report.format()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agrimae", description="Masked-autoencoder anomaly segmentation for multi-band rasters.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic field dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--bands", type=int, default=4)
    g.add_argument("--anomaly-frac", type=float, default=0.0)
    g.add_argument("--classes", default="", help="comma-separated subset of " + ",".join(data.ANOMALY_CLASSES))
    g.add_argument("--prefix", default="img", help="sample id prefix")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--exclude-anomalous", action="store_true")
    t.add_argument("--asl", choices=("on", "off"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--weights-dir", help="write the final ASL weight maps here")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="K-run averaged error maps and knee-thresholded anomaly maps")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, help=".aten image, a folder of them, or a dataset root")
    i.add_argument("--k", type=int, default=32)
    i.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score anomaly maps against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True, help="label folder or dataset root")
    e.add_argument("--report")
    e.add_argument("--per-image", action="store_true", help="average per-image IoU instead of pooling")
    e.add_argument("--include-normal", action="store_true", help="score untagged images as a 'normal' class")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="gradient checks and oracle comparisons")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
