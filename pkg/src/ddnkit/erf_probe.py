"""Layer-wise effective receptive field (LERF) measurement.

Each trial re-draws the encoder weights and a unit-Gaussian input, seeds a
one-hot gradient at the centre node of conv layer ``h`` (channel 0) and
reads back ``|d q / d p|`` at the input. The LERF of the trial is the square
root of the number of pixels in the smallest, largest-first set carrying a
``mass`` fraction of the total gradient magnitude.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .netspec import ComputeGraph, Encoder, center_rf_box, layer_output_size, theoretical_rf
from .tensor import Tape, Tensor, seed_gradient_at

GAUSSIAN_2SIGMA_MASS = 0.9545
DEFAULT_TRIALS = 20
MAX_DEAD_RETRIES = 5
PROBE_MARGIN = 8          # pixels of slack beyond the analytic RF


class ProbeError(RuntimeError):
    pass


@dataclass
class LerfEntry:
    layer: int
    theoretical_rf: int
    lerf_mean: float
    lerf_std: float
    trials: int
    per_trial: list = field(default_factory=list)


@dataclass
class LerfReport:
    entries: list
    mass: float = GAUSSIAN_2SIGMA_MASS
    trials: int = DEFAULT_TRIALS
    input_size: int = 0

    @property
    def network_lerf(self) -> float:
        return self.entries[-1].lerf_mean

    @property
    def lerf_means(self) -> list:
        return [e.lerf_mean for e in self.entries]

    def entry(self, layer: int) -> LerfEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(layer)

    def csv_rows(self) -> list:
        return [
            [e.layer, e.theoretical_rf, repr(float(e.lerf_mean)), repr(float(e.lerf_std))]
            for e in self.entries
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(self.csv_rows())
        return buf.getvalue()


CSV_HEADER = ["layer", "theoretical_rf", "lerf_mean", "lerf_std"]


def report_from_csv(text: str) -> LerfReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError(f"expected header {','.join(CSV_HEADER)}, got {header}")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            entries.append(LerfEntry(int(row[0]), int(row[1]), float(row[2]), float(row[3]), 0))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if not entries:
        raise ValueError("report has no rows")
    return LerfReport(entries, trials=0)


# ------------------------------------------------------------- thresholding


def kept_pixels(gmap: np.ndarray, mass: float) -> np.ndarray:
    """Boolean mask of the smallest largest-first pixel set holding ``mass`` of the total.

    ``mass >= 1`` keeps every nonzero pixel, which is the exact answer
    in real arithmetic and immune to rounding in the cumulative sum.
    """
    if not 0.0 < mass:
        raise ValueError(f"mass must be positive, got {mass}")
    flat = gmap.reshape(-1)
    if mass >= 1.0:
        return gmap != 0
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    if csum[-1] <= 0.0:
        return np.zeros(gmap.shape, dtype=bool)
    count = int(np.searchsorted(csum, mass * csum[-1], side="left")) + 1
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:count]] = True
    return keep.reshape(gmap.shape)


def lerf_from_map(gmap: np.ndarray, mass: float) -> float:
    return float(np.sqrt(kept_pixels(gmap, mass).sum()))


# ------------------------------------------------------------------ probing


def _encoder_of(graph) -> Encoder:
    if isinstance(graph, ComputeGraph):
        return graph.encoder
    if isinstance(graph, Encoder):
        return graph
    raise TypeError(f"expected a ComputeGraph or Encoder, got {type(graph).__name__}")


def _probe_copy(enc: Encoder) -> Encoder:
    """Same topology, private weights, no parameter gradients."""
    probe = Encoder(enc.convs, enc.channels, enc.input_channels, np.random.default_rng(0))
    probe.linear = enc.linear
    for _, p in probe.named_parameters():
        p.requires_grad = False
    return probe


def check_probe_size(enc: Encoder, layer: int, input_size: int):
    lo, hi = center_rf_box(enc, layer, input_size)
    if lo < 0 or hi >= input_size:
        raise ValueError(
            f"input size {input_size} clips the receptive field of layer {layer} "
            f"(centre node sees rows {lo}..{hi}); use a larger input"
        )
    need = theoretical_rf(enc)[layer - 1] + PROBE_MARGIN
    if input_size < need:
        raise ValueError(f"input size {input_size} is below {need} (RF of layer {layer} plus {PROBE_MARGIN} px margin)")


def min_probe_size(enc: Encoder, layer: int, multiple: Optional[int] = None) -> int:
    """Smallest input side (a multiple of the pooling factor) that passes ``check_probe_size``."""
    step = multiple or 2 ** (enc.num_stages - 1)
    size = step
    while True:
        try:
            check_probe_size(enc, layer, size)
            return size
        except ValueError:
            size += step


def _base_seed(rng) -> int:
    if rng is None:
        return 0
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


def _gradient_maps(probe: Encoder, layers: Sequence[int], input_size: int, seed: int, trial: int) -> dict:
    """One trial: fresh weights and input, one backward per requested layer."""
    for retry in range(MAX_DEAD_RETRIES):
        rng = np.random.default_rng([seed, trial, retry])
        probe.reset(rng)
        x = Tensor(rng.normal(size=(1, probe.input_channels, input_size, input_size)), requires_grad=True)
        with Tape() as tape:
            passed = probe.forward(x, training=False, upto=max(layers))
        maps = {}
        for h in layers:
            out = passed.conv_outputs[h - 1]
            ci, cj = out.shape[2] // 2, out.shape[3] // 2
            x.grad = None
            seed_gradient_at(tape, out, 0, ci, cj)
            g = np.zeros((input_size, input_size)) if x.grad is None else np.abs(x.grad[0]).max(axis=0)
            maps[h] = g
        if all(m.sum() > 0 for m in maps.values()):
            return maps
    raise ProbeError(f"trial {trial}: all-zero gradient map after {MAX_DEAD_RETRIES} redraws")


def analyze_rf(
    graph,
    input_size: int,
    trials: int = DEFAULT_TRIALS,
    mass: float = GAUSSIAN_2SIGMA_MASS,
    rng=0,
    layers: Optional[Iterable[int]] = None,
    keep_maps: bool = False,
):
    """Measure the LERF of every encoder layer; returns ``LerfReport`` (and maps).

    With ``keep_maps`` the per-trial gradient maps are returned as a second
    value: ``{(layer, trial): map}``.
    """
    enc = _encoder_of(graph)
    layers = list(range(1, enc.num_layers + 1)) if layers is None else sorted(set(layers))
    if trials < 1:
        raise ValueError("need at least one trial")
    for h in layers:
        if not 1 <= h <= enc.num_layers:
            raise IndexError(f"encoder has layers 1..{enc.num_layers}, asked for {h}")
        check_probe_size(enc, h, input_size)
    seed = _base_seed(rng)
    probe = _probe_copy(enc)
    rf = theoretical_rf(enc)
    values = {h: [] for h in layers}
    kept = {}
    for t in range(trials):
        maps = _gradient_maps(probe, layers, input_size, seed, t)
        for h in layers:
            values[h].append(lerf_from_map(maps[h], mass))
            if keep_maps:
                kept[(h, t)] = maps[h]
    entries = [
        LerfEntry(h, rf[h - 1], float(np.mean(values[h])), float(np.std(values[h])), trials, values[h])
        for h in layers
    ]
    report = LerfReport(entries, mass=mass, trials=trials, input_size=input_size)
    return (report, kept) if keep_maps else report


def measure_lerf(
    graph,
    layer: int,
    input_size: int,
    trials: int = DEFAULT_TRIALS,
    mass: float = GAUSSIAN_2SIGMA_MASS,
    rng=0,
) -> tuple:
    """``(mean, std)`` of the LERF of one encoder layer over ``trials`` trials."""
    entry = analyze_rf(graph, input_size, trials, mass, rng, layers=[layer]).entries[0]
    return entry.lerf_mean, entry.lerf_std


def gradient_map(graph, layer: int, input_size: int, rng=0, trial: int = 0) -> np.ndarray:
    """The magnitude map of a single trial, as used by ``measure_lerf``."""
    enc = _encoder_of(graph)
    check_probe_size(enc, layer, input_size)
    return _gradient_maps(_probe_copy(enc), [layer], input_size, _base_seed(rng), trial)[layer]


def extended_lerf(graph, extra: int, trials: int = DEFAULT_TRIALS, mass: float = GAUSSIAN_2SIGMA_MASS, rng=0, input_size: Optional[int] = None) -> float:
    """Mean LERF of the encoder tail grown by ``extra`` channel-preserving 3x3 conv blocks."""
    enc = _encoder_of(graph)
    convs = list(enc.convs)
    convs[-1] += extra
    grown = Encoder(convs, enc.channels, enc.input_channels, np.random.default_rng(0))
    grown.linear = enc.linear
    size = max(input_size or 0, min_probe_size(grown, grown.num_layers))
    mult = 2 ** (grown.num_stages - 1)
    size = -(-size // mult) * mult
    if center_rf_box(grown, grown.num_layers, size)[0] < 0:
        size = min_probe_size(grown, grown.num_layers)
    return measure_lerf(grown, grown.num_layers, size, trials, mass, rng)[0]


# ------------------------------------------------------------ brute force


@dataclass
class Support:
    count: int
    bbox: tuple          # (row0, col0, row1, col1), inclusive
    mask: np.ndarray

    @property
    def bbox_size(self) -> tuple:
        r0, c0, r1, c1 = self.bbox
        return r1 - r0 + 1, c1 - c0 + 1


def _collapsed_chain(enc: Encoder, weights: Optional[list] = None) -> list:
    """Single-channel positive chain with the same spatial support.

    With every weight positive and no nonlinearity, an input pixel reaches an
    output node iff some spatial path of kernel taps connects them; summing
    |W| over channel pairs preserves exactly that. Kernels are scaled so the
    smallest tap is 1, which keeps every path product well above the
    detection threshold.
    """
    chain = []
    for h, block in enumerate(enc.blocks, start=1):
        if enc.pool_before(h):
            chain.append(("pool", None))
        w = block.conv.weight.data if weights is None else weights[h - 1]
        k = np.abs(w).sum(axis=(0, 1))
        chain.append(("conv", k / k.min()))
    return chain


def _conv_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = k.shape[0] // 2
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros_like(x)
    for dy in range(k.shape[0]):
        for dx in range(k.shape[1]):
            out += k[dy, dx] * xp[:, dy : dy + H, dx : dx + W]
    return out


def _center_responses(chain: list, batch: np.ndarray, layers: Sequence[int]) -> dict:
    """Layer -> (B,) value of that conv layer's centre node for each image in the batch."""
    out = {}
    h = 0
    x = batch
    last = max(layers)
    for kind, k in chain:
        if kind == "pool":
            b, H, W = x.shape
            x = x.reshape(b, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
            continue
        x = _conv_same(x, k)
        h += 1
        if h in layers:
            out[h] = x[:, x.shape[1] // 2, x.shape[2] // 2].copy()
        if h == last:
            break
    return out


def brute_force_rf_all(
    graph,
    input_size: int,
    layers: Optional[Iterable[int]] = None,
    delta: float = 1e-3,
    tol: float = 1e-9,
    block: int = 8,
    batch: int = 16,
) -> dict:
    """Exact influence region of each layer's centre node by single-pixel perturbation.

    Works on the linearized copy (positive weights, identity activations,
    average pooling) starting from an all-zero input. Blocks of pixels are
    screened first: with nonnegative responses a silent block cannot hide a
    responsive pixel, so only pixels inside responsive blocks are perturbed
    one at a time.

    Single precision is exact for this purpose: every term is positive, the
    smallest path product stays far above ``tol`` and far below overflow, and
    a pixel with no path contributes exact zeros.
    """
    enc = _encoder_of(graph)
    layers = list(range(1, enc.num_layers + 1)) if layers is None else sorted(set(layers))
    for h in layers:
        layer_output_size(enc, h, input_size)
    chain = [(kind, None if k is None else k.astype(np.float32)) for kind, k in _collapsed_chain(enc)]
    S = input_size

    def run(pixel_sets: list) -> dict:
        res = {h: np.zeros(len(pixel_sets)) for h in layers}
        for start in range(0, len(pixel_sets), batch):
            chunk = pixel_sets[start : start + batch]
            imgs = np.zeros((len(chunk), S, S), dtype=np.float32)
            for b, (rows, cols) in enumerate(chunk):
                imgs[b, rows, cols] = delta
            got = _center_responses(chain, imgs, layers)
            for h in layers:
                res[h][start : start + len(chunk)] = got[h]
        return res

    blocks = [(r, c) for r in range(0, S, block) for c in range(0, S, block)]
    screen = run([(slice(r, r + block), slice(c, c + block)) for r, c in blocks])
    live = [i for i in range(len(blocks)) if any(screen[h][i] > tol for h in layers)]
    pixels = [
        (r, c)
        for i in live
        for r in range(blocks[i][0], min(blocks[i][0] + block, S))
        for c in range(blocks[i][1], min(blocks[i][1] + block, S))
    ]
    single = run([(r, c) for r, c in pixels])
    out = {}
    for h in layers:
        mask = np.zeros((S, S), dtype=bool)
        for (r, c), v in zip(pixels, single[h]):
            if v > tol:
                mask[r, c] = True
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        bbox = (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])) if rows.size else (0, 0, -1, -1)
        out[h] = Support(int(mask.sum()), bbox, mask)
    return out


def brute_force_rf(graph, layer: int, input_size: int, **kwargs) -> Support:
    return brute_force_rf_all(graph, input_size, layers=[layer], **kwargs)[layer]


def linearized(graph, rng=0) -> Encoder:
    """Linearized copy of the graph's encoder (positive weights, no ReLU, average pooling)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return _encoder_of(graph).linearized(rng)


# --------------------------------------------------------------- heatmaps


def emit_heatmap(gmap: np.ndarray) -> tuple:
    """8-bit raster scaled so the largest magnitude is 255, plus full-precision CSV text."""
    peak = float(gmap.max()) if gmap.size else 0.0
    if peak > 0:
        raster = np.rint(gmap / peak * 255.0).astype(np.uint8)
    else:
        raster = np.zeros(gmap.shape, dtype=np.uint8)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", "magnitude"])
    for (r, c), v in np.ndenumerate(gmap):
        writer.writerow([r, c, repr(float(v))])
    return raster, buf.getvalue()


def write_heatmaps(maps: dict, out_dir: str):
    from .data_io import atomic_write, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    for (h, t), gmap in sorted(maps.items()):
        raster, text = emit_heatmap(gmap)
        stem = os.path.join(out_dir, f"layer{h:02d}_trial{t:02d}")
        write_pgm(stem + ".pgm", raster)
        atomic_write(stem + ".csv", text.encode())
