"""Synthetic field imagery, the ``.aten`` raster format and dataset loading."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

RASTER_MAGIC = b"ATEN"
RASTER_VERSION = 1
DTYPE_F64 = 0
DTYPE_U8 = 1
ANOMALY_CLASSES = ("blob", "stripe-break", "bright-patch")


class RasterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster file format
# ---------------------------------------------------------------------------

def encode_raster(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        code, payload = DTYPE_U8, arr.tobytes(order="C")
    elif arr.dtype == np.bool_:
        code, payload = DTYPE_U8, arr.astype(np.uint8).tobytes(order="C")
    else:
        code, payload = DTYPE_F64, np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if arr.ndim > 255:
        raise RasterError("too many dimensions")
    header = RASTER_MAGIC + struct.pack("<BBB", RASTER_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_raster(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 7 or blob[:4] != RASTER_MAGIC:
        raise RasterError(f"{source}: not an ATEN raster")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != RASTER_VERSION:
        raise RasterError(f"{source}: unsupported version {version}")
    if code not in (DTYPE_F64, DTYPE_U8):
        raise RasterError(f"{source}: unknown dtype code {code}")
    if len(blob) < 7 + 4 * ndim:
        raise RasterError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 7)
    start = 7 + 4 * ndim
    dtype = np.dtype("<f8") if code == DTYPE_F64 else np.dtype(np.uint8)
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - start != count * dtype.itemsize:
        raise RasterError(f"{source}: payload is {len(blob) - start} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr.astype(np.float64) if code == DTYPE_F64 else arr.copy()


def write_raster(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_raster(array))


def read_raster(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise RasterError(f"{path}: {exc.strerror or exc}") from exc
    return decode_raster(blob, str(path))


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255).  Floats are min-max scaled; booleans map to 0/255."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise RasterError(f"PGM needs a 2-D array, got {a.shape}")
    Path(path).write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + _to_u8(a).tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6) from the first three bands of an ``H x W x B`` image in [0, 1] or u8."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] < 3:
        raise RasterError(f"PPM needs H x W x >=3 bands, got {a.shape}")
    rgb = a[:, :, :3]
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + rgb.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    magic, w, h, maxval, payload = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise RasterError(f"{path}: unsupported PNM header")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def _to_u8(a: np.ndarray) -> np.ndarray:
    if a.dtype == np.bool_:
        return a.astype(np.uint8) * 255
    if a.dtype == np.uint8:
        return a
    lo, hi = float(np.min(a)), float(np.max(a))
    if hi <= lo:
        return np.zeros(a.shape, np.uint8)
    return np.clip(np.rint((a - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``H x W (x B)`` raster."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    extra = (1,) * (img.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

# soil and vegetation reflectance for R, G, B, NIR
_SOIL = np.array([0.55, 0.45, 0.35, 0.40])
_VEG = np.array([0.20, 0.45, 0.18, 0.80])


@dataclass
class GenSpec:
    count: int = 100
    image_size: int = 32
    bands: int = 4
    anomaly_fraction: float = 0.0
    classes: tuple[str, ...] = ANOMALY_CLASSES
    blob_size: tuple[int, int] = (5, 9)
    noise: float = 0.02
    seed: int = 0
    id_prefix: str = "img"

    def problems(self) -> list[str]:
        out = []
        if self.count < 0:
            out.append("count must be >= 0")
        if self.image_size < 8:
            out.append("image_size must be >= 8")
        if self.bands < 1:
            out.append("bands must be >= 1")
        if not 0 <= self.anomaly_fraction <= 1:
            out.append("anomaly_fraction must lie in [0, 1]")
        bad = [c for c in self.classes if c not in ANOMALY_CLASSES]
        if bad or not self.classes:
            out.append(f"classes must be a non-empty subset of {ANOMALY_CLASSES}")
        lo, hi = self.blob_size
        if not 1 <= lo <= hi < self.image_size:
            out.append("blob_size must satisfy 1 <= low <= high < image_size")
        if self.noise < 0:
            out.append("noise must be >= 0")
        return out

    def validate(self) -> "GenSpec":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid generator spec: " + "; ".join(problems))
        return self


@dataclass
class Sample:
    image: np.ndarray                 # H x W x B in [0, 1]
    label: np.ndarray | None = None   # H x W uint8 {0, 1}
    class_tag: str = ""
    id: str = ""

    @property
    def has_anomaly(self) -> bool:
        return self.label is not None and bool(self.label.any())


def _band_colors(bands: int) -> tuple[np.ndarray, np.ndarray]:
    if bands <= 4:
        return _SOIL[:bands], _VEG[:bands]
    extra = bands - 4
    return (np.concatenate([_SOIL, np.full(extra, 0.4)]),
            np.concatenate([_VEG, np.linspace(0.5, 0.7, extra)]))


def _smooth_noise(rng: np.random.Generator, size: int, bands: int, cells: int = 4) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells, bands))
    return resize_bilinear(coarse, size, size)


def _normal_field(rng: np.random.Generator, size: int, bands: int, noise: float) -> tuple[np.ndarray, dict]:
    soil, veg = _band_colors(bands)
    period = int(rng.integers(4, 7))
    phase = float(rng.uniform(0, period))
    width = float(rng.uniform(0.35, 0.6))
    rows = np.arange(size)[:, None] + np.zeros((1, size))
    frac = ((rows + phase) % period) / period
    # soft-edged crop rows; cover = vegetation fraction
    cover = np.clip(1.0 - np.abs(frac - 0.5) / (width / 2 + 1e-9) * 0.5, 0, 1) ** 2
    vigor = 0.85 + 0.15 * _smooth_noise(rng, size, 1)[:, :, 0]
    cover = np.clip(cover * vigor, 0, 1)
    tint = 1.0 + 0.05 * rng.standard_normal(bands)
    img = (soil * (1 - cover[..., None]) + veg * cover[..., None]) * tint
    img += 0.03 * _smooth_noise(rng, size, bands)
    img += noise * rng.standard_normal(img.shape)
    return img, {"cover": cover, "soil": soil * tint, "veg": veg * tint}


def _blob_region(rng: np.random.Generator, size: int, lo: int, hi: int) -> np.ndarray:
    ry, rx = rng.uniform(lo / 2, hi / 2, size=2)
    cy, cx = rng.uniform(ry, size - ry), rng.uniform(rx, size - rx)
    yy, xx = np.mgrid[0:size, 0:size]
    wobble = 1.0 + 0.15 * np.sin(3 * np.arctan2(yy - cy, xx - cx) + rng.uniform(0, 2 * np.pi))
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= wobble ** 2


def _rect_region(rng: np.random.Generator, size: int, lo: int, hi: int) -> np.ndarray:
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    y = int(rng.integers(0, size - h + 1))
    x = int(rng.integers(0, size - w + 1))
    region = np.zeros((size, size), dtype=bool)
    region[y:y + h, x:x + w] = True
    return region


def _plant_anomaly(rng: np.random.Generator, img: np.ndarray, parts: dict, kind: str,
                   spec: GenSpec) -> np.ndarray:
    size, lo, hi = spec.image_size, *spec.blob_size
    if kind == "blob":
        # dry-down style patch: bare, bright, stripe-free soil
        region = _blob_region(rng, size, lo, hi)
        dry = parts["soil"] * np.array([1.35, 1.25, 1.1, 0.55] + [1.0] * (img.shape[2] - 4))[:img.shape[2]]
        img[region] = dry + spec.noise * rng.standard_normal((int(region.sum()), img.shape[2]))
    elif kind == "stripe-break":
        # planter skip: rows go missing, replaced by soil running across the stripes
        # only vegetated pixels change, so only those are labelled
        region = np.zeros((size, size), dtype=bool)
        while not region.any():
            region = _rect_region(rng, size, lo, hi) & (parts["cover"] > 0.15)
        img[region] = parts["soil"] + spec.noise * rng.standard_normal((int(region.sum()), img.shape[2]))
    elif kind == "bright-patch":
        region = _rect_region(rng, size, lo, hi)
        bright = np.full(img.shape[2], 0.95)
        img[region] = bright + spec.noise * rng.standard_normal((int(region.sum()), img.shape[2]))
    else:
        raise ValueError(f"unknown anomaly class {kind!r}")
    return region


def generate_samples(spec: GenSpec) -> list[Sample]:
    """Build the samples of ``spec`` in memory (images quantised to u8 levels)."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(spec.count)
    n_anom = int(round(spec.anomaly_fraction * spec.count))
    order_rng = np.random.default_rng(root.spawn(1)[0])
    anomalous = np.zeros(spec.count, dtype=bool)
    anomalous[order_rng.permutation(spec.count)[:n_anom]] = True
    width = len(str(max(spec.count - 1, 0)))
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng(children[i])
        img, parts = _normal_field(rng, spec.image_size, spec.bands, spec.noise)
        label = np.zeros((spec.image_size, spec.image_size), dtype=np.uint8)
        tag = ""
        if anomalous[i]:
            tag = spec.classes[i % len(spec.classes)]
            region = _plant_anomaly(rng, img, parts, tag, spec)
            label[region] = 1
            if not region.any():
                tag = ""
        u8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
        out.append(Sample(u8.astype(np.float64) / 255.0, label, tag, f"{spec.id_prefix}{i:0{width}d}"))
    return out


def write_dataset(samples: list[Sample], out_dir: str | Path) -> Path:
    """Write ``images/``, ``labels/`` and ``index.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        u8 = np.clip(np.rint(s.image * 255), 0, 255).astype(np.uint8)
        write_raster(out / "images" / f"{s.id}.aten", u8)
        label = s.label if s.label is not None else np.zeros(s.image.shape[:2], np.uint8)
        write_raster(out / "labels" / f"{s.id}.aten", label.astype(np.uint8))
        lines.append(f"{s.id}\t{int(s.has_anomaly)}\t{s.class_tag}")
    (out / "index.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return out


def generate(spec: GenSpec, out_dir: str | Path) -> Path:
    return write_dataset(generate_samples(spec), out_dir)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass
class IndexEntry:
    id: str
    has_anomaly: bool
    class_tag: str


def read_index(path: str | Path) -> list[IndexEntry]:
    path = Path(path)
    if not path.is_file():
        raise RasterError(f"{path}: index file missing")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2 or parts[1] not in ("0", "1"):
            raise RasterError(f"{path}:{lineno}: malformed record {line!r}")
        out.append(IndexEntry(parts[0], parts[1] == "1", parts[2] if len(parts) > 2 else ""))
    return out


def normalize(array: np.ndarray) -> np.ndarray:
    if array.dtype == np.uint8:
        return array.astype(np.float64) / 255.0
    return np.asarray(array, dtype=np.float64)


@dataclass
class SplitSpec:
    exclude_anomalous: bool = False
    only_anomalous: bool = False
    ids: tuple[str, ...] | None = None
    resize: int | None = None


def load_dataset(root: str | Path, split: SplitSpec | None = None) -> list[Sample]:
    """Load every indexed sample, sorted by id."""
    split = split or SplitSpec()
    root = Path(root)
    entries = sorted(read_index(root / "index.txt"), key=lambda e: e.id)
    out = []
    for e in entries:
        if split.exclude_anomalous and e.has_anomaly:
            continue
        if split.only_anomalous and not e.has_anomaly:
            continue
        if split.ids is not None and e.id not in split.ids:
            continue
        image = normalize(read_raster(root / "images" / f"{e.id}.aten"))
        if image.ndim == 2:
            image = image[:, :, None]
        label_path = root / "labels" / f"{e.id}.aten"
        label = read_raster(label_path).astype(np.uint8) if label_path.exists() else None
        if label is not None and label.shape != image.shape[:2]:
            raise RasterError(f"{label_path}: label {label.shape} does not match image {image.shape[:2]}")
        if split.resize and image.shape[0] != split.resize:
            image = resize_bilinear(image, split.resize, split.resize)
            if label is not None:
                label = (resize_bilinear(label.astype(float), split.resize, split.resize) >= 0.5).astype(np.uint8)
        out.append(Sample(image, label, e.class_tag, e.id))
    return out


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]) if samples else np.zeros((0, 0, 0, 0))
