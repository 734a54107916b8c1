"""Raster/CSV I/O and the synthetic segmentation dataset."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .objsize import MaskImage
from .tensor import Tensor


class PgmError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{message}{at}")


class UnsupportedFormatError(PgmError):
    pass


# --------------------------------------------------------------- file writes


def atomic_write(path: str, payload: bytes):
    """Write via a temp file in the same directory and rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(rows: Iterable[Sequence], path: str, header: Sequence[str]):
    atomic_write(path, csv_text(rows, header).encode())


# ------------------------------------------------------------------------ PGM


def encode_pgm(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {raster.shape}")
    if raster.dtype != np.uint8:
        if raster.size and (raster.min() < 0 or raster.max() > 255):
            raise ValueError("PGM raster values must lie in 0..255")
        raster = raster.astype(np.uint8)
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(raster).tobytes()


def decode_pgm(data: bytes, path: Optional[str] = None) -> np.ndarray:
    """Parse a binary (P5) 8-bit PGM."""
    pos = 0
    n = len(data)

    def token() -> tuple:
        nonlocal pos
        while pos < n:
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        if pos >= n:
            raise PgmError("truncated header", pos, path)
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        return data[start:pos], start

    magic, _ = token()
    if magic != b"P5":
        raise UnsupportedFormatError(f"unsupported PGM variant {magic[:8]!r}; only binary P5 is read", 0, path)
    fields = []
    for name in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit():
            raise PgmError(f"malformed {name} {tok[:16]!r}", at, path)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"non-positive dimensions {width}x{height}", None, path)
    if maxval > 255:
        raise UnsupportedFormatError(f"16-bit PGM (maxval {maxval}) is not supported", None, path)
    if maxval < 1:
        raise PgmError(f"invalid maxval {maxval}", None, path)
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PgmError("missing whitespace after maxval", pos, path)
    pos += 1
    need = width * height
    if n - pos < need:
        raise PgmError(f"truncated raster: expected {need} bytes, found {n - pos}", n, path)
    if n - pos > need:
        raise PgmError(f"{n - pos - need} trailing bytes after the {width}x{height} raster", pos + need, path)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), path)


def write_pgm(path: str, raster: np.ndarray):
    atomic_write(path, encode_pgm(raster))


def read_raw(path: str) -> np.ndarray:
    """8-bit raw raster with a ``<stem>.dims`` sidecar holding ``width height``."""
    dims_path = os.path.splitext(path)[0] + ".dims"
    try:
        with open(dims_path) as fh:
            parts = fh.read().split()
        width, height = int(parts[0]), int(parts[1])
    except (OSError, ValueError, IndexError) as exc:
        raise PgmError(f"cannot read dimensions sidecar {dims_path}: {exc}", None, path) from None
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != width * height:
        raise PgmError(f"raw raster holds {len(data)} bytes, sidecar declares {width}x{height}", len(data), path)
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def list_rasters(directory: str) -> list:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"not a directory: {directory}")
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith((".pgm", ".raw")))
    return [os.path.join(directory, f) for f in names]


def read_raster(path: str) -> np.ndarray:
    return read_raw(path) if path.lower().endswith(".raw") else read_pgm(path)


def read_mask_dir(directory: str) -> list:
    """All masks in a directory (PGM or raw+dims), ordered by filename."""
    return [MaskImage(read_raster(p)) for p in list_rasters(directory)]


# -------------------------------------------------------------------- dataset


@dataclass
class SegSample:
    image: Tensor          # (1, C, H, W), values in [0, 1]
    mask: MaskImage
    id: str
    valid_size: Optional[tuple] = None    # (H, W) before the loader's padding

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.labels.shape:
            raise ValueError(f"{self.id}: image {self.image.shape[2:]} and mask {self.mask.labels.shape} differ")


def reflect_pad(arr: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad the last two axes up to a multiple of ``multiple``."""
    h, w = arr.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad, mode="reflect" if min(h, w) > max(ph, pw) else "edge")


def load_dataset(directory: str, multiple: int = 1) -> list:
    """``images/*.pgm`` and ``masks/*.pgm`` paired by filename stem."""
    img_dir = os.path.join(directory, "images")
    mask_dir = os.path.join(directory, "masks")
    images = {os.path.splitext(os.path.basename(p))[0]: p for p in list_rasters(img_dir)}
    masks = {os.path.splitext(os.path.basename(p))[0]: p for p in list_rasters(mask_dir)}
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise ValueError(f"images and masks do not pair up: {unmatched[:5]}")
    samples = []
    for stem in sorted(images):
        img = read_raster(images[stem]).astype(np.float64) / 255.0
        lab = read_raster(masks[stem])
        if img.shape != lab.shape:
            raise ValueError(f"{stem}: image {img.shape} and mask {lab.shape} differ in size")
        valid = img.shape
        img, lab = reflect_pad(img, multiple), reflect_pad(lab, multiple)
        samples.append(SegSample(Tensor(img[None, None]), MaskImage(lab), stem, valid))
    return samples


def save_dataset(samples: Sequence[SegSample], directory: str):
    for s in samples:
        if s.image.shape[1] != 1:
            raise ValueError("only single-channel images can be stored as PGM")
        raster = np.rint(np.clip(s.image.data[0, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
        write_pgm(os.path.join(directory, "images", f"{s.id}.pgm"), raster)
        write_pgm(os.path.join(directory, "masks", f"{s.id}.pgm"), s.mask.labels.astype(np.uint8))


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticConfig:
    count: int = 200
    size: int = 64
    kinds: tuple = ("blob",)
    min_radius: float = 6.0
    max_radius: float = 12.0
    min_objects: int = 1
    max_objects: int = 3
    noise: float = 0.05
    contrast: tuple = (0.25, 0.45)
    seed: int = 0

    def __post_init__(self):
        if self.max_radius >= self.size / 2:
            raise ValueError(f"max radius {self.max_radius} must be below half the image size {self.size}")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        bad = set(self.kinds) - {"disc", "ellipse", "blob"}
        if bad or not self.kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")


def _shape_field(kind: str, r: float, yy: np.ndarray, xx: np.ndarray, rng: np.random.Generator) -> tuple:
    """``(normalized radius map, max extent)``; a pixel is inside where the map is <= 1."""
    if kind == "disc":
        return np.hypot(yy, xx) / r, r
    if kind == "ellipse":
        ratio = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        return np.hypot(u / r, v / (r * ratio)), r
    # star-shaped blob with a few smooth harmonics on the boundary radius
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    ang = np.arctan2(yy, xx)
    bound = r * (1.0 + sum(a * np.cos((k + 2) * ang + p) for k, (a, p) in enumerate(zip(amps, phases))))
    return np.hypot(yy, xx) / bound, r * (1.0 + amps.sum())


def generate_synthetic(config: SyntheticConfig) -> list:
    """Deterministic grayscale images with non-overlapping shaded shapes and exact masks."""
    rng = np.random.default_rng(config.seed)
    S = config.size
    grid_y, grid_x = np.mgrid[0:S, 0:S].astype(np.float64)
    samples = []
    for idx in range(config.count):
        # smooth background: tilted plane plus one low-frequency ripple
        gy, gx = rng.uniform(-1, 1, size=2)
        freq, phase = rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)
        img = (
            0.35
            + 0.12 * (gy * (grid_y / S - 0.5) + gx * (grid_x / S - 0.5))
            + 0.05 * np.sin(2 * np.pi * freq * grid_x / S + phase)
        )
        labels = np.zeros((S, S), dtype=np.uint8)
        occupied = np.zeros((S, S), dtype=bool)
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        placed = 0
        for _ in range(n_obj):
            kind = config.kinds[int(rng.integers(len(config.kinds)))]
            r = rng.uniform(config.min_radius, config.max_radius)
            for _attempt in range(100):
                cy, cx = rng.uniform(0, S, size=2)
                field_, extent = _shape_field(kind, r, grid_y - cy, grid_x - cx, rng)
                if cy - extent < 1 or cx - extent < 1 or cy + extent > S - 2 or cx + extent > S - 2:
                    continue
                inside = field_ <= 1.0
                # keep a 2 px gap so objects stay separate components
                grown = inside.copy()
                for dy in (-2, -1, 0, 1, 2):
                    for dx in (-2, -1, 0, 1, 2):
                        grown |= np.roll(np.roll(inside, dy, axis=0), dx, axis=1)
                if (grown & occupied).any() or not inside.any():
                    continue
                contrast = rng.uniform(*config.contrast)
                if kind == "blob":
                    contrast *= 0.6
                shade = contrast * (1.0 - 0.35 * np.clip(field_, 0, 1))
                img = np.where(inside, img + shade, img)
                labels[inside] = 1
                occupied |= inside
                placed += 1
                break
        if config.noise > 0:
            img = img + rng.normal(0.0, config.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        samples.append(SegSample(Tensor(img[None, None]), MaskImage(labels), f"synth_{idx:04d}"))
    return samples
