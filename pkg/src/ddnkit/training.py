"""Losses, Adam, augmentation, the training loop, segmentation metrics and checkpoints."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .ads import AdsPlacement, attach_aux_branch, parse_directive, placement_from_directive, total_loss
from .data_io import SegSample, atomic_write, csv_text
from .netspec import SPEC_KEYS, ComputeGraph, build_graph, iter_directives, spec_from_directives, SpecSyntaxError
from .objsize import MaskImage
from .tensor import Tensor

PROB_FLOOR = 1e-12
OVERLAP_SMOOTH = 1.0
LOSSES = ("ce", "dice", "jaccard")


# ------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    main_loss: str = "ce"
    seed: int = 0
    augment: bool = True
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.main_loss not in LOSSES:
            raise ValueError(f"main_loss must be one of {'|'.join(LOSSES)}, got {self.main_loss!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _config_value(name: str, raw: str):
    kind = _CONFIG_TYPES[name]
    if kind == "bool":
        if raw in ("on", "true", "yes", "1"):
            return True
        if raw in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"{name} expects on|off, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, base: Optional[TrainConfig] = None) -> tuple:
    """Parse a training document: network directives plus ``key value`` lines.

    Returns ``(spec or None, TrainConfig, ads directive or None)``.
    """
    spec_lines, values, ads = [], {}, None
    for d in iter_directives(text):
        if d.key in SPEC_KEYS:
            spec_lines.append(d)
            continue
        if d.key != "ads" and d.key not in _CONFIG_TYPES:
            raise SpecSyntaxError(d.line, 1, f"unknown directive {d.key!r}")
        if len(d.args) != 1:
            raise SpecSyntaxError(d.line, d.column(0), f"{d.key} takes exactly one value")
        if d.key in values or (d.key == "ads" and ads is not None):
            raise SpecSyntaxError(d.line, 1, f"{d.key!r} declared twice")
        if d.key == "ads":
            try:
                parse_directive(d.args[0])
            except ValueError as exc:
                raise SpecSyntaxError(d.line, d.column(1), str(exc)) from None
            ads = d.args[0]
            continue
        try:
            values[d.key] = _config_value(d.key, d.args[0])
        except ValueError as exc:
            raise SpecSyntaxError(d.line, d.column(1), f"bad value for {d.key}: {exc}") from None
    spec = spec_from_directives(spec_lines) if spec_lines else None
    merged = {f.name: getattr(base, f.name) for f in fields(TrainConfig)} if base else {}
    merged.update(values)
    return spec, TrainConfig(**merged), ads


# ------------------------------------------------------------------- losses


def target_tensor(masks: Sequence[MaskImage], num_classes: int) -> np.ndarray:
    """Binary (N,1,H,W) foreground target, or (N,C,H,W) one-hot for C > 1."""
    labels = np.stack([m.labels for m in masks])
    if num_classes == 1:
        return (labels != 0).astype(np.float64)[:, None]
    if labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} outside 0..{num_classes - 1}")
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def _check_pair(op: str, p: Tensor, t: np.ndarray):
    if p.shape != t.shape:
        raise T.ShapeError(op, "prediction/target", p.shape, t.shape)


def ce_loss(p: Tensor, t: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; a single channel is read as a sigmoid output."""
    _check_pair("ce_loss", p, t)
    n_pix = p.shape[0] * p.shape[2] * p.shape[3]
    if p.shape[1] == 1:
        pc = np.maximum(p.data, PROB_FLOOR)
        qc = np.maximum(1.0 - p.data, PROB_FLOOR)
        value = -(t * np.log(pc) + (1 - t) * np.log(qc)).sum() / n_pix

        def grad_fn(g):
            dp = -t / pc * (p.data > PROB_FLOOR) + (1 - t) / qc * (1.0 - p.data > PROB_FLOOR)
            return (g.item() * dp / n_pix,)

    else:
        pc = np.maximum(p.data, PROB_FLOOR)
        value = -(t * np.log(pc)).sum() / n_pix

        def grad_fn(g):
            return (g.item() * (-t / pc) * (p.data > PROB_FLOOR) / n_pix,)

    return T.record("ce_loss", (p,), np.full((1, 1, 1, 1), value), grad_fn)


def dice_loss(p: Tensor, t: np.ndarray, smooth: float = OVERLAP_SMOOTH) -> Tensor:
    _check_pair("dice_loss", p, t)
    num = 2.0 * float((p.data * t).sum()) + smooth
    den = float(p.data.sum() + t.sum()) + smooth

    def grad_fn(g):
        return (-g.item() * (2.0 * t * den - num) / den**2,)

    return T.record("dice_loss", (p,), np.full((1, 1, 1, 1), 1.0 - num / den), grad_fn)


def jaccard_loss(p: Tensor, t: np.ndarray, smooth: float = OVERLAP_SMOOTH) -> Tensor:
    _check_pair("jaccard_loss", p, t)
    inter = float((p.data * t).sum()) + smooth
    union = float(p.data.sum() + t.sum() - (p.data * t).sum()) + smooth

    def grad_fn(g):
        return (-g.item() * (t * union - inter * (1.0 - t)) / union**2,)

    return T.record("jaccard_loss", (p,), np.full((1, 1, 1, 1), 1.0 - inter / union), grad_fn)


LOSS_FUNCTIONS: dict = {"ce": ce_loss, "dice": dice_loss, "jaccard": jaccard_loss}


# ---------------------------------------------------------------------- adam


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState, config: TrainConfig, names=None):
    """Bias-corrected Adam update applied in place; a missing grad counts as zero."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradient(f"non-finite gradient in {label}: {bad} of {np.size(g)} entries (step {state.t + 1})")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


class Adam:
    def __init__(self, named_params: Sequence[tuple], config: TrainConfig):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.config = config
        self.state = AdamState.zeros([p.data for p in self.params])

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.config, self.names)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ------------------------------------------------------------- augmentation


def augment(sample: SegSample, rng: np.random.Generator) -> SegSample:
    """Random h/v flips (50% each) and a rotation by a uniform multiple of 90 degrees."""
    img = sample.image.data[0]
    lab = sample.mask.labels
    if img.shape[1] != img.shape[2]:
        raise ValueError(f"{sample.id}: rotation augmentation needs square images, got {img.shape[1:]}")
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(4))
    if hflip:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    if vflip:
        img, lab = img[:, ::-1, :], lab[::-1, :]
    if k:
        img, lab = np.rot90(img, k, axes=(1, 2)), np.rot90(lab, k)
    return SegSample(Tensor(img[None].copy()), MaskImage(lab.copy(), sample.mask.num_classes), sample.id, sample.valid_size)


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsRecord:
    jaccard: float
    dice: float
    precision: float
    recall: float
    specificity: float
    mean_iu: float
    per_image: list = field(default_factory=list, repr=False)

    NAMES = ("jaccard", "dice", "precision", "recall", "specificity", "mean_iu")

    @property
    def f1(self) -> float:
        return self.dice

    @property
    def sensitivity(self) -> float:
        return self.recall

    def values(self) -> list:
        return [getattr(self, n) for n in self.NAMES]


def _ratio(num: float, den: float) -> float:
    # an empty denominator means nothing could go wrong: count it as perfect
    return 1.0 if den == 0 else num / den


def confusion(pred: np.ndarray, target: np.ndarray) -> tuple:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise T.ShapeError("confusion", "shape", target.shape, pred.shape)
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, tn, fn


def metrics_from_confusion(tp: int, fp: int, tn: int, fn: int) -> MetricsRecord:
    jac = _ratio(tp, tp + fp + fn)
    iou_bg = _ratio(tn, tn + fp + fn)
    return MetricsRecord(
        jaccard=jac,
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        mean_iu=(jac + iou_bg) / 2.0,
    )


def mask_metrics(pred: np.ndarray, target: np.ndarray) -> MetricsRecord:
    return metrics_from_confusion(*confusion(pred, target))


def aggregate(records: Sequence[MetricsRecord]) -> MetricsRecord:
    if not records:
        raise ValueError("no records to aggregate")
    means = [float(np.mean([r.values()[i] for r in records])) for i in range(len(MetricsRecord.NAMES))]
    return MetricsRecord(*means, per_image=list(records))


def predict_foreground(graph: ComputeGraph, images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean (N,H,W) foreground: p >= threshold for one class, else argmax != background."""
    probs, _ = graph.forward(Tensor(images), "eval")
    if probs.shape[1] == 1:
        return probs.data[:, 0] >= threshold
    return probs.data.argmax(axis=1) != 0


def predict_labels(graph: ComputeGraph, images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    probs, _ = graph.forward(Tensor(images), "eval")
    if probs.shape[1] == 1:
        return (probs.data[:, 0] >= threshold).astype(np.uint8)
    return probs.data.argmax(axis=1).astype(np.uint8)


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _stack_images(samples: Sequence[SegSample]) -> np.ndarray:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples in a batch must share one shape, got {sorted(shapes)}")
    return np.concatenate([s.image.data for s in samples], axis=0)


def evaluate(graph: ComputeGraph, dataset: Sequence[SegSample], threshold: float = 0.5, batch_size: int = 16) -> MetricsRecord:
    """Per-image binary metrics (foreground vs background) and their mean."""
    records = []
    for chunk in _batches(list(dataset), batch_size):
        pred = predict_foreground(graph, _stack_images(chunk), threshold)
        for s, p in zip(chunk, pred):
            h, w = s.valid_size or p.shape
            records.append(mask_metrics(p[:h, :w], s.mask.labels[:h, :w] != 0))
    return aggregate(records)


# --------------------------------------------------------------- checkpoint

MAGIC = b"DDNK1"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(graph: ComputeGraph, ads: str = "off") -> bytes:
    """``DDNK1``, u32 length + spec text, u32 array count, then per array:
    u16 name length, name, u8 ndim, u32 dims, little-endian f64 payload."""
    text = graph.spec.to_text().rstrip("\n") + f"\nads {ads}\n"
    state = graph.state_dict()
    parts = [MAGIC, struct.pack("<I", len(text.encode())), text.encode(), struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple:
    """Return ``(spec text, {name: array})``."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated while reading {what} at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (tlen,) = struct.unpack("<I", take(4, "spec length"))
    text = take(tlen, "spec text").decode()
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n, f"{name} data"), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last array")
    return text, arrays


def save_checkpoint(path: str, graph: ComputeGraph, ads: str = "off"):
    atomic_write(path, encode_checkpoint(graph, ads))


def graph_from_checkpoint(data: bytes) -> tuple:
    """Rebuild the graph (including any aux branch) and load its weights; returns ``(graph, ads)``."""
    text, arrays = decode_checkpoint(data)
    spec, _, ads = parse_config(text)
    if spec is None:
        raise CheckpointError("checkpoint carries no network spec")
    graph = build_graph(spec, np.random.default_rng(0))
    ads = ads or "off"
    directive = parse_directive(ads)
    if directive is not None:
        if directive == ("auto",):
            raise CheckpointError("checkpoint must record a resolved ADS placement, not 'auto'")
        attach_aux_branch(graph, placement_from_directive(graph, *directive))
    try:
        graph.load_state_dict(arrays)
    except (KeyError, T.ShapeError) as exc:
        raise CheckpointError(f"checkpoint weights do not fit its spec: {exc}") from None
    return graph, ads


def load_checkpoint(path: str) -> tuple:
    with open(path, "rb") as fh:
        return graph_from_checkpoint(fh.read())


# --------------------------------------------------------------------- train

LOG_HEADER = ("epoch", "train_loss", "val_jac", "val_dice", "val_precision", "val_recall", "val_specificity", "val_meaniu")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, epoch: int, checkpoint_path: Optional[str] = None):
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


@dataclass
class TrainResult:
    history: list                  # one dict per epoch, keys = LOG_HEADER
    best_epoch: int
    best_dice: float
    best_state: dict
    train_ids: list
    val_ids: list

    def log_csv(self) -> str:
        return csv_text(([h[k] for k in LOG_HEADER] for h in self.history), LOG_HEADER)


def init_rng(seed: int) -> np.random.Generator:
    """Weight-initialisation stream, independent of the streams ``train`` uses."""
    return np.random.default_rng([seed, 0])


def split_dataset(dataset: Sequence[SegSample], fraction: float, seed: int) -> tuple:
    n = len(dataset)
    n_val = int(round(fraction * n)) if n > 1 else 0
    order = np.random.default_rng([seed, 1]).permutation(n)
    val = sorted(order[:n_val].tolist())
    tr = sorted(order[n_val:].tolist())
    return [dataset[i] for i in tr], [dataset[i] for i in val]


def _snapshot(graph: ComputeGraph) -> dict:
    return {k: v.copy() for k, v in graph.state_dict().items()}


def train(
    graph: ComputeGraph,
    dataset: Sequence[SegSample],
    config: TrainConfig,
    val: Optional[Sequence[SegSample]] = None,
    log_path: Optional[str] = None,
    checkpoint_path: Optional[str] = None,
    ads: str = "off",
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Minibatch Adam on ``total_loss``; validates every epoch and keeps the best state.

    Without an explicit ``val`` set a ``val_fraction`` share of ``dataset`` is
    held out. With nothing held out the training set itself is scored.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    if val is None:
        train_set, val_set = split_dataset(dataset, config.val_fraction, config.seed)
    else:
        train_set, val_set = list(dataset), list(val)
    scored = val_set or train_set
    shuffle_rng = np.random.default_rng([config.seed, 2])
    augment_rng = np.random.default_rng([config.seed, 3])
    dropout_rng = np.random.default_rng([config.seed, 4])
    loss_fn = LOSS_FUNCTIONS[config.main_loss]
    opt = Adam(graph.named_parameters(), config)
    weights = graph.conv_weights()
    num_classes = graph.spec.num_classes

    history: list = []
    best_dice, best_epoch, best_state = -1.0, 0, _snapshot(graph)
    for epoch in range(1, config.epochs + 1):
        last_good = _snapshot(graph)
        order = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        try:
            for idx in _batches(order, config.batch_size):
                batch = [train_set[i] for i in idx]
                if config.augment:
                    batch = [augment(s, augment_rng) for s in batch]
                x = Tensor(_stack_images(batch))
                target = target_tensor([s.mask for s in batch], num_classes)
                opt.zero_grad()
                with T.Tape() as tape:
                    probs, outs = graph.forward(x, "train", dropout_rng)
                    main = loss_fn(probs, target)
                    aux = loss_fn(outs["aux"], target) if "aux" in outs else None
                    loss = total_loss(main, aux, weights, config.weight_decay)
                    T.backward(tape, loss)
                opt.step()
                loss_sum += loss.item() * len(batch)
        except FloatingPointError as exc:
            graph.load_state_dict(last_good)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, graph, ads)
            raise TrainingDiverged(
                f"training diverged in epoch {epoch}: {exc}; restored the state from the end of epoch {epoch - 1}",
                epoch,
                checkpoint_path,
            ) from exc

        metrics = evaluate(graph, scored)
        row = {"epoch": epoch, "train_loss": loss_sum / len(train_set)}
        for key, value in zip(LOG_HEADER[2:], metrics.values()):
            row[key] = value
        history.append(row)
        if metrics.dice > best_dice:
            best_dice, best_epoch, best_state = metrics.dice, epoch, _snapshot(graph)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, graph, ads)
        if log_path:
            atomic_write(log_path, csv_text(([h[k] for k in LOG_HEADER] for h in history), LOG_HEADER).encode())
        if on_epoch:
            on_epoch(row)

    if config.epochs == 0 and checkpoint_path:
        save_checkpoint(checkpoint_path, graph, ads)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_dice=best_dice,
        best_state=best_state,
        train_ids=[s.id for s in train_set],
        val_ids=[s.id for s in val_set],
    )


def placement_label(placement: Optional[AdsPlacement]) -> str:
    return "off" if placement is None else placement.directive()
