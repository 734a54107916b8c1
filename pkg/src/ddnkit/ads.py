"""Adaptive deep supervision: pick the layer whose LERF best matches Obj and wire an aux loss there."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .erf_probe import DEFAULT_TRIALS, GAUSSIAN_2SIGMA_MASS, LerfReport, analyze_rf, extended_lerf, min_probe_size
from .netspec import ComputeGraph, ConvBlock, Conv2d
from .tensor import Tensor

MAX_STACKED = 64


@dataclass
class AdsPlacement:
    case: int                           # 1: existing layer, 2: stacked extension
    obj: float
    network_lerf: float
    match_residual: float
    target_layer: Optional[int] = None  # Case-1 argmin layer
    linked_layer: Optional[int] = None  # first layer >= target with a decoder link
    stacked_layers: int = 0             # Case-2 k
    attachment: str = ""                # "occ:<m>" or "tail"
    probes: dict = field(default_factory=dict)   # Case-2: k -> LERF_{N+k}

    CSV_HEADER = ("case", "target_layer", "linked_layer", "stacked_layers", "attachment", "match_residual", "obj", "network_lerf")

    def csv_row(self) -> list:
        return [
            self.case,
            "" if self.target_layer is None else self.target_layer,
            "" if self.linked_layer is None else self.linked_layer,
            self.stacked_layers,
            self.attachment,
            repr(float(self.match_residual)),
            repr(float(self.obj)),
            repr(float(self.network_lerf)),
        ]

    def rationale(self) -> str:
        if self.case == 1:
            text = (
                f"network LERF {self.network_lerf:.2f} >= Obj {self.obj:.2f}: Case-1, "
                f"layer {self.target_layer} minimises |Obj - LERF| ({self.match_residual:.2f})"
            )
            if self.linked_layer is not None and self.linked_layer != self.target_layer:
                text += f"; supervised through layer {self.linked_layer}, the next one with a decoder link"
            return text
        return (
            f"network LERF {self.network_lerf:.2f} < Obj {self.obj:.2f}: Case-2, "
            f"stack {self.stacked_layers} extra conv layers on the encoder tail "
            f"(|Obj - LERF| = {self.match_residual:.2f})"
        )

    def directive(self) -> str:
        if self.case == 1:
            return f"case1:{self.target_layer}"
        return f"case2:{self.stacked_layers}"


def place_ads(
    report: LerfReport,
    obj: float,
    probe_extended: Optional[Callable[[int], float]] = None,
    graph: Optional[ComputeGraph] = None,
    max_stacked: int = MAX_STACKED,
) -> AdsPlacement:
    """Route to Case-1 or Case-2 and choose the layer / stack depth.

    ``probe_extended(k)`` must return the mean LERF of the encoder grown by k
    conv layers; it is only called in Case-2. With ``graph`` the Case-1
    attachment point is resolved as well.
    """
    if not (isinstance(obj, (int, float, np.floating)) and math.isfinite(obj)):
        raise ValueError(f"Obj must be a finite number, got {obj!r}")
    if obj <= 0:
        raise ValueError(f"Obj must be positive, got {obj}")
    if not report.entries:
        raise ValueError("empty LERF report")
    means = np.array(report.lerf_means, dtype=float)
    network = float(means[-1])

    if network >= obj:
        resid = np.abs(obj - means)
        best = int(np.argmin(resid))  # first minimum -> shallower layer on ties
        placement = AdsPlacement(
            case=1,
            obj=float(obj),
            network_lerf=network,
            match_residual=float(resid[best]),
            target_layer=report.entries[best].layer,
        )
        if graph is not None:
            linked, stage = resolve_link(graph, placement.target_layer)
            placement.linked_layer = linked
            placement.attachment = f"occ:{stage}"
        return placement

    if probe_extended is None:
        raise ValueError("Case-2 placement needs a probe for the extended encoder")
    probes: dict = {}

    def residual(k: int) -> float:
        if k not in probes:
            probes[k] = float(probe_extended(k))
        return abs(obj - probes[k])

    k = 1
    while residual(k) > residual(k + 1):
        k += 1
        if k >= max_stacked:
            break
    return AdsPlacement(
        case=2,
        obj=float(obj),
        network_lerf=network,
        match_residual=residual(k),
        stacked_layers=k,
        attachment="tail",
        probes=dict(sorted(probes.items())),
    )


def extended_probe(graph, trials: int = DEFAULT_TRIALS, mass: float = GAUSSIAN_2SIGMA_MASS, seed: int = 0, input_size: Optional[int] = None):
    """``k -> LERF`` of the graph's encoder grown by k layers, as ``place_ads`` expects."""
    return lambda k: extended_lerf(graph, k, trials, mass, seed, input_size)


def default_probe_size(graph) -> int:
    enc = graph.encoder if isinstance(graph, ComputeGraph) else graph
    return min_probe_size(enc, enc.num_layers)


def auto_place(
    graph: ComputeGraph,
    obj: float,
    trials: int = DEFAULT_TRIALS,
    mass: float = GAUSSIAN_2SIGMA_MASS,
    seed: int = 0,
    input_size: Optional[int] = None,
) -> tuple:
    """Probe the encoder and place the aux branch for ``obj``; returns ``(placement, report)``."""
    size = input_size or default_probe_size(graph)
    report = analyze_rf(graph, size, trials, mass, seed)
    placement = place_ads(report, obj, extended_probe(graph, trials, mass, seed, size), graph)
    return placement, report


def resolve_link(graph: ComputeGraph, layer: int) -> tuple:
    """First layer ``>= layer`` whose output reaches the decoder, and that decoder stage.

    Only the last conv of an encoder stage feeds decoder connections, so a
    mid-stage target advances to its stage's last conv; a stage with no
    outgoing connection advances to the next deeper stage.
    """
    idx = graph.encoder_layer_index
    if layer not in idx:
        raise ValueError(f"layer {layer} is not an encoder layer (1..{len(idx)})")
    M = graph.spec.M
    stage = idx[layer][0]
    while True:
        targets = sorted(m for i, m in graph.icc_edges if i == stage)
        if targets or stage == M:
            break
        stage += 1
    linked = max(h for h, (s, _) in idx.items() if s == stage)
    if stage in targets:
        decoder_stage = stage
    elif targets:
        decoder_stage = max(targets)
    else:
        decoder_stage = M
    return linked, decoder_stage


class HeadAux:
    """Aux loss read from decoder stage m's class head (reused when it already exists)."""

    def __init__(self, graph: ComputeGraph, stage: int, rng: np.random.Generator):
        self.stage = stage
        self.head = None
        if stage not in graph.occ_heads:
            self.head = Conv2d(graph.stage_width(stage), graph.spec.num_classes, 1, rng)

    def logits(self, graph, outs, training, size):
        if self.head is None:
            return outs[f"occ{self.stage}"]
        return self.head(T.resize_bilinear(outs[f"y{self.stage}"], *size))

    def layers(self):
        return [] if self.head is None else [("aux.head", self.head)]


class StackAux:
    """k channel-preserving conv blocks on the deepest encoder output, then a class head."""

    def __init__(self, graph: ComputeGraph, k: int, rng: np.random.Generator):
        if k < 1:
            raise ValueError("Case-2 needs at least one stacked layer")
        c = graph.stage_width(graph.spec.M)
        self.blocks = [ConvBlock(c, c, rng) for _ in range(k)]
        self.head = Conv2d(c, graph.spec.num_classes, 1, rng)

    def logits(self, graph, outs, training, size):
        h = outs["tail"]
        for block in self.blocks:
            h = block(h, training)[1]
        return T.resize_bilinear(self.head(h), *size)

    def layers(self):
        return [(f"aux.stack.{j}", b) for j, b in enumerate(self.blocks, start=1)] + [("aux.head", self.head)]


def attach_aux_branch(graph: ComputeGraph, placement: AdsPlacement, rng: Optional[np.random.Generator] = None):
    """Attach the side branch described by ``placement``; returns the branch."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if placement.case == 1:
        if placement.target_layer is None:
            raise ValueError("Case-1 placement without a target layer")
        linked, stage = resolve_link(graph, placement.target_layer)
        placement.linked_layer = linked
        placement.attachment = f"occ:{stage}"
        branch = HeadAux(graph, stage, rng)
    elif placement.case == 2:
        branch = StackAux(graph, placement.stacked_layers, rng)
        placement.attachment = "tail"
    else:
        raise ValueError(f"unknown ADS case {placement.case}")
    graph.aux = branch
    return branch


def detach_aux_branch(graph: ComputeGraph):
    graph.aux = None


def parse_directive(text: str) -> Optional[tuple]:
    """``off`` | ``auto`` | ``case1:<h>`` | ``case2:<k>`` -> None | ("auto",) | (case, n)."""
    if text == "off":
        return None
    if text == "auto":
        return ("auto",)
    kind, _, num = text.partition(":")
    if kind in ("case1", "case2") and num.isdigit() and int(num) >= 1:
        return (1 if kind == "case1" else 2, int(num))
    raise ValueError(f"ADS directive must be off, auto, case1:<h> or case2:<k>; got {text!r}")


def placement_from_directive(graph: ComputeGraph, case: int, n: int) -> AdsPlacement:
    """Manual placement (no Obj/LERF matching involved)."""
    if case == 1:
        p = AdsPlacement(case=1, obj=math.nan, network_lerf=math.nan, match_residual=math.nan, target_layer=n)
        p.linked_layer, stage = resolve_link(graph, n)
        p.attachment = f"occ:{stage}"
        return p
    return AdsPlacement(case=2, obj=math.nan, network_lerf=math.nan, match_residual=math.nan, stacked_layers=n, attachment="tail")


def total_loss(main: Tensor, aux: Optional[Tensor], weights: Sequence[Tensor], weight_decay: float) -> Tensor:
    """``main + aux + weight_decay * sum(w^2)``; the aux term is never down-weighted."""
    for name, t in (("main", main), ("aux", aux)):
        if t is not None and not math.isfinite(t.item()):
            raise FloatingPointError(f"{name} loss is not finite: {t.item()}")
    loss = main if aux is None else T.add(main, aux)
    if weight_decay:
        loss = T.add(loss, T.scale(T.sum_squares(weights), weight_decay))
    return loss
