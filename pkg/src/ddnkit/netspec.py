"""Architecture description, DDN graph construction and analytic receptive fields.

A network is described by a small line-oriented text format::

    # reference densely decoded network
    stages 5
    stage 1 convs=2 channels=64
    stage 2 convs=2 channels=128
    ...
    classes 1
    icc full            # full | commensurate | none
    occ all             # all | last
    input_channels 1

``stages`` must be the first directive; the rest may appear in any order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ICC_MODES = ("full", "commensurate", "none")
OCC_MODES = ("all", "last")
DROPOUT_RATE = 0.5


class SpecError(ValueError):
    pass


class SpecSyntaxError(SpecError):
    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class SpecSemanticError(SpecError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class StageSpec:
    index: int
    convs: int
    channels: int

    @property
    def downsample(self) -> str:
        return "none" if self.index == 1 else "pool"


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple
    num_classes: int = 1
    icc_mode: str = "full"
    occ_mode: str = "all"
    input_channels: int = 1

    def __post_init__(self):
        if len(self.stages) < 2:
            raise SpecSemanticError("stages", f"need at least 2 stages, got {len(self.stages)}")
        for pos, st in enumerate(self.stages, start=1):
            if st.index != pos:
                raise SpecSemanticError("stage", f"stages must be numbered 1..M, found {st.index} at position {pos}")
            if st.convs < 1:
                raise SpecSemanticError(f"stage {st.index} convs", "must be positive")
            if st.channels < 1:
                raise SpecSemanticError(f"stage {st.index} channels", "must be positive")
        if self.num_classes < 1:
            raise SpecSemanticError("classes", "must be positive")
        if self.input_channels < 1:
            raise SpecSemanticError("input_channels", "must be positive")
        if self.icc_mode not in ICC_MODES:
            raise SpecSemanticError("icc", f"expected one of {ICC_MODES}")
        if self.occ_mode not in OCC_MODES:
            raise SpecSemanticError("occ", f"expected one of {OCC_MODES}")

    @property
    def M(self) -> int:
        return len(self.stages)

    @property
    def num_encoder_convs(self) -> int:
        return sum(st.convs for st in self.stages)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.M - 1)

    def icc_sources(self, m: int) -> list[int]:
        """Encoder stages feeding decoder stage ``m``."""
        if self.icc_mode == "full":
            return list(range(m, self.M + 1))
        if self.icc_mode == "commensurate":
            return [m]
        return []

    def occ_stages(self) -> list[int]:
        return list(range(1, self.M + 1)) if self.occ_mode == "all" else [1]

    def to_text(self) -> str:
        lines = [f"stages {self.M}"]
        lines += [f"stage {st.index} convs={st.convs} channels={st.channels}" for st in self.stages]
        lines += [
            f"classes {self.num_classes}",
            f"icc {self.icc_mode}",
            f"occ {self.occ_mode}",
            f"input_channels {self.input_channels}",
        ]
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ parsing


@dataclass
class Directive:
    key: str
    args: list
    line: int
    columns: list = field(default_factory=list)

    def column(self, i: int) -> int:
        """1-based column of token ``i`` (0 is the key)."""
        return self.columns[min(i, len(self.columns) - 1)]

    def end_column(self) -> int:
        last = self.args[-1] if self.args else self.key
        return self.columns[-1] + len(last)


def iter_directives(text: str) -> Iterator[Directive]:
    """Split a document into directives, dropping blank lines and ``#`` comments."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        tokens, cols = [], []
        pos = 0
        for tok in body.split():
            pos = body.index(tok, pos)
            tokens.append(tok)
            cols.append(pos + 1)
            pos += len(tok)
        if tokens:
            yield Directive(tokens[0], tokens[1:], lineno, cols)


SPEC_KEYS = ("stages", "stage", "classes", "icc", "occ", "input_channels")


def _int_arg(d: Directive, i: int, what: str) -> int:
    if i >= len(d.args):
        raise SpecSyntaxError(d.line, d.end_column(), f"missing {what}")
    try:
        return int(d.args[i])
    except ValueError:
        raise SpecSyntaxError(d.line, d.column(i + 1), f"{what} must be an integer, got {d.args[i]!r}") from None


def _one_word(d: Directive, choices: Iterable[str]) -> str:
    choices = tuple(choices)
    if len(d.args) != 1:
        raise SpecSyntaxError(d.line, d.column(0), f"{d.key} takes exactly one of {'|'.join(choices)}")
    if d.args[0] not in choices:
        raise SpecSyntaxError(d.line, d.column(1), f"{d.key} must be one of {'|'.join(choices)}, got {d.args[0]!r}")
    return d.args[0]


def spec_from_directives(directives: list) -> NetworkSpec:
    """Build a NetworkSpec from already-tokenized spec directives."""
    if not directives:
        raise SpecSemanticError("stages", "document declares no network")
    first = directives[0]
    if first.key != "stages":
        raise SpecSyntaxError(first.line, 1, f"first directive must be 'stages', got {first.key!r}")
    M = _int_arg(first, 0, "stage count")
    if len(first.args) > 1:
        raise SpecSyntaxError(first.line, first.column(2), "unexpected token after stage count")
    if M < 2:
        raise SpecSemanticError("stages", f"need at least 2 stages, got {M}")

    stage_lines: dict[int, StageSpec] = {}
    settings: dict[str, object] = {}
    for d in directives[1:]:
        if d.key == "stages":
            raise SpecSyntaxError(d.line, 1, "'stages' declared twice")
        if d.key == "stage":
            m = _int_arg(d, 0, "stage index")
            if not 1 <= m <= M:
                raise SpecSemanticError("stage", f"index {m} outside 1..{M} (line {d.line})")
            if m in stage_lines:
                raise SpecSemanticError("stage", f"stage {m} declared twice (line {d.line})")
            kv = {}
            for i, tok in enumerate(d.args[1:], start=2):
                name, eq, value = tok.partition("=")
                if not eq or name not in ("convs", "channels"):
                    raise SpecSyntaxError(d.line, d.column(i), f"expected convs=<n> or channels=<c>, got {tok!r}")
                try:
                    kv[name] = int(value)
                except ValueError:
                    raise SpecSyntaxError(d.line, d.column(i) + len(name) + 1, f"{name} must be an integer") from None
            for name in ("convs", "channels"):
                if name not in kv:
                    raise SpecSyntaxError(d.line, d.end_column(), f"stage {m} is missing {name}=")
            stage_lines[m] = StageSpec(m, kv["convs"], kv["channels"])
            continue
        if d.key in settings:
            raise SpecSyntaxError(d.line, 1, f"{d.key!r} declared twice")
        if d.key == "classes":
            settings[d.key] = _int_arg(d, 0, "class count")
        elif d.key == "input_channels":
            settings[d.key] = _int_arg(d, 0, "channel count")
        elif d.key == "icc":
            settings[d.key] = _one_word(d, ICC_MODES)
        elif d.key == "occ":
            settings[d.key] = _one_word(d, OCC_MODES)
        else:
            raise SpecSyntaxError(d.line, 1, f"unknown directive {d.key!r}")

    missing = [m for m in range(1, M + 1) if m not in stage_lines]
    if missing:
        raise SpecSemanticError("stage", f"missing definitions for stages {missing}")
    return NetworkSpec(
        stages=tuple(stage_lines[m] for m in range(1, M + 1)),
        num_classes=settings.get("classes", 1),
        icc_mode=settings.get("icc", "full"),
        occ_mode=settings.get("occ", "all"),
        input_channels=settings.get("input_channels", 1),
    )


def parse_spec(text: str) -> NetworkSpec:
    return spec_from_directives(list(iter_directives(text)))


def reference_spec(unet: bool = False, num_classes: int = 1, input_channels: int = 1) -> NetworkSpec:
    """Five stages of two 3x3 convs with U-Net widths 64..1024."""
    stages = tuple(StageSpec(m, 2, 64 * 2 ** (m - 1)) for m in range(1, 6))
    return NetworkSpec(
        stages,
        num_classes=num_classes,
        icc_mode="commensurate" if unet else "full",
        occ_mode="last" if unet else "all",
        input_channels=input_channels,
    )


# ------------------------------------------------------------------- layers


def he_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, name: str = "conv"):
        self.k = k
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        self.reset(rng)

    def reset(self, rng: np.random.Generator, positive: bool = False):
        shape = self.weight.shape
        if positive:
            # bounded below so long positive chains never underflow
            self.weight.data[...] = rng.uniform(0.5, 1.5, size=shape) / np.prod(shape[1:])
        else:
            self.weight.data[...] = he_normal(rng, shape)
        self.bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, padding=self.k // 2)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]

    def named_buffers(self, prefix: str):
        return []


class BatchNorm2d:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def reset(self):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean), (f"{prefix}.running_var", self.running_var)]


class ConvBlock:
    """3x3 conv followed by batch norm and ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor, training: bool, linear: bool = False):
        """Return ``(conv_output, block_output)``."""
        pre = self.conv(x)
        if linear:
            return pre, pre
        return pre, T.relu(self.bn(pre, training))

    def reset(self, rng, positive: bool = False):
        self.conv.reset(rng, positive)
        self.bn.reset()

    def named_parameters(self, prefix: str):
        return self.conv.named_parameters(f"{prefix}.conv") + self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        return self.bn.named_buffers(f"{prefix}.bn")


@dataclass
class EncoderPass:
    conv_outputs: list          # index h-1 -> raw conv output of layer h
    stage_outputs: list         # index m-1 -> E_m (before dropout)


class Encoder:
    """VGG-style chain: stage m = [pool if m > 1] + convs_per_stage conv blocks.

    ``linear=True`` turns the chain into its linearized copy: ReLU and batch
    norm become identities and max pooling becomes average pooling.
    """

    def __init__(self, convs: list, channels: list, input_channels: int, rng: np.random.Generator):
        self.convs = list(convs)
        self.channels = list(channels)
        self.input_channels = input_channels
        self.linear = False
        self.blocks: list[ConvBlock] = []
        self.stage_of: list[int] = []
        cin = input_channels
        for m, (n, c) in enumerate(zip(convs, channels), start=1):
            for _ in range(n):
                self.blocks.append(ConvBlock(cin, c, rng))
                self.stage_of.append(m)
                cin = c

    @classmethod
    def from_spec(cls, spec: NetworkSpec, rng: np.random.Generator, extra_convs: int = 0) -> "Encoder":
        convs = [st.convs for st in spec.stages]
        convs[-1] += extra_convs
        return cls(convs, [st.channels for st in spec.stages], spec.input_channels, rng)

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def num_stages(self) -> int:
        return len(self.convs)

    def pool_before(self, h: int) -> bool:
        """Whether a 2x2 pool precedes conv layer ``h`` (1-based)."""
        return h > 1 and self.stage_of[h - 1] != self.stage_of[h - 2]

    def reset(self, rng: np.random.Generator):
        for b in self.blocks:
            b.reset(rng, positive=self.linear)

    def linearized(self, rng: np.random.Generator) -> "Encoder":
        """Fresh copy with the same topology, positive weights and no nonlinearities."""
        enc = Encoder(self.convs, self.channels, self.input_channels, rng)
        enc.linear = True
        enc.reset(rng)
        return enc

    def forward(self, x: Tensor, training: bool = False, upto: Optional[int] = None) -> EncoderPass:
        upto = self.num_layers if upto is None else upto
        if not 1 <= upto <= self.num_layers:
            raise IndexError(f"encoder has layers 1..{self.num_layers}, asked for {upto}")
        conv_outs, stage_outs = [], []
        h = x
        for idx in range(upto):
            if self.pool_before(idx + 1):
                stage_outs.append(h)
                h = T.avg_pool2d(h) if self.linear else T.max_pool2d(h)
            pre, h = self.blocks[idx](h, training, linear=self.linear)
            conv_outs.append(pre)
        if upto == self.num_layers or self.stage_of[upto] != self.stage_of[upto - 1]:
            stage_outs.append(h)
        return EncoderPass(conv_outs, stage_outs)

    def named_parameters(self, prefix: str = "enc"):
        out = []
        for h, b in enumerate(self.blocks, start=1):
            out += b.named_parameters(f"{prefix}.{h}")
        return out

    def named_buffers(self, prefix: str = "enc"):
        out = []
        for h, b in enumerate(self.blocks, start=1):
            out += b.named_buffers(f"{prefix}.{h}")
        return out


# -------------------------------------------------------------------- graph


class ComputeGraph:
    """Executable DDN: encoder, ICC-fed decoder stages and summed OCC heads."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        M = spec.M
        width = {st.index: st.channels for st in spec.stages}
        self.encoder = Encoder.from_spec(spec, rng)
        self.dropout_rate = DROPOUT_RATE
        self.encoder_layer_index = {}
        h = 0
        for st in spec.stages:
            for pos in range(1, st.convs + 1):
                h += 1
                self.encoder_layer_index[h] = (st.index, pos)

        self.icc_edges = [(i, m) for m in range(1, M + 1) for i in spec.icc_sources(m)]
        self.occ_edges = spec.occ_stages()

        self.up: dict[int, ConvBlock] = {}
        self.icc_proj: dict[tuple, Conv2d] = {}
        self.dec: dict[int, list] = {}
        self.occ_heads: dict[int, Conv2d] = {}
        for m in range(M, 0, -1):
            c = width[m]
            if m < M:
                self.up[m] = ConvBlock(width[m + 1], c, rng)
            main = width[M] if m == M else c
            for i in spec.icc_sources(m):
                self.icc_proj[(i, m)] = Conv2d(width[i], c, 1, rng)
            cin = main + c * len(spec.icc_sources(m))
            blocks = []
            for _ in range(spec.stages[m - 1].convs):
                blocks.append(ConvBlock(cin, c, rng))
                cin = c
            self.dec[m] = blocks
        for m in self.occ_edges:
            self.occ_heads[m] = Conv2d(width[m], spec.num_classes, 1, rng)
        self.aux = None

    # -- structure

    def stage_width(self, m: int) -> int:
        return self.spec.stages[m - 1].channels

    def icc_in_edges(self, m: int) -> list:
        return [(i, mm) for i, mm in self.icc_edges if mm == m]

    def layers(self) -> list:
        """Ordered ``(name, layer)`` pairs covering every parameterized layer."""
        out = [(f"enc.{h}", b) for h, b in enumerate(self.encoder.blocks, start=1)]
        for m in range(self.spec.M, 0, -1):
            if m in self.up:
                out.append((f"up.{m}", self.up[m]))
            for (i, mm), conv in self.icc_proj.items():
                if mm == m:
                    out.append((f"icc.{i}to{m}", conv))
            out += [(f"dec.{m}.{j}", b) for j, b in enumerate(self.dec[m], start=1)]
        out += [(f"occ.{m}", self.occ_heads[m]) for m in self.occ_edges]
        if self.aux is not None:
            out += self.aux.layers()
        return out

    def named_parameters(self) -> list:
        out = []
        for name, layer in self.layers():
            out += layer.named_parameters(name)
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def conv_weights(self) -> list:
        return [p for name, p in self.named_parameters() if name.endswith(".weight")]

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, layer in self.layers():
            for bname, buf in layer.named_buffers(name):
                state[bname] = buf
        return state

    def load_state_dict(self, state: dict):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ShapeError("load_state_dict", name, arr.shape, state[name].shape)
            arr[...] = state[name]

    # -- execution

    def check_input(self, x: Tensor):
        n, c, h, w = x.shape
        if c != self.spec.input_channels:
            raise ShapeError("forward", "channels", self.spec.input_channels, c)
        mult = self.spec.size_multiple
        if h % mult or w % mult:
            raise ShapeError("forward", "spatial size", f"multiples of {mult} (pad the input)", (h, w))

    def forward(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None):
        """Return ``(probabilities, stage_outputs)``.

        ``stage_outputs`` holds ``E<m>`` (encoder stage outputs, ``E<M>`` after
        dropout), ``y<m>`` (decoder stage outputs), ``occ<m>`` (per-stage class
        logits at full resolution), ``logits`` and, with an aux branch
        attached, ``aux_logits``/``aux``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        self.check_input(x)
        M = self.spec.M
        _, _, H, W = x.shape
        outs: dict[str, Tensor] = {}

        enc = self.encoder.forward(x, training)
        outs["tail"] = enc.stage_outputs[-1]
        E = {m: e for m, e in enumerate(enc.stage_outputs, start=1)}
        E[M] = T.dropout(E[M], self.dropout_rate, training, rng)
        for m in range(1, M + 1):
            outs[f"E{m}"] = E[m]

        y: dict[int, Tensor] = {}
        for m in range(M, 0, -1):
            hm, wm = E[m].shape[2:]
            if m == M:
                main = E[M]
            else:
                main = self.up[m](T.upsample_bilinear(y[m + 1], 2), training)[1]
            parts = [main]
            for i, _ in self.icc_in_edges(m):
                parts.append(self.icc_proj[(i, m)](T.resize_bilinear(E[i], hm, wm)))
            h = T.concat_channels(parts) if len(parts) > 1 else main
            for block in self.dec[m]:
                h = block(h, training)[1]
            y[m] = h
            outs[f"y{m}"] = h

        logits = None
        for m in self.occ_edges:
            head = self.occ_heads[m](T.resize_bilinear(y[m], H, W))
            outs[f"occ{m}"] = head
            logits = head if logits is None else T.add(logits, head)
        outs["logits"] = logits
        if self.aux is not None:
            aux_logits = self.aux.logits(self, outs, training, (H, W))
            outs["aux_logits"] = aux_logits
            outs["aux"] = self.activate(aux_logits)
        return self.activate(logits), outs

    def activate(self, logits: Tensor) -> Tensor:
        return T.sigmoid(logits) if self.spec.num_classes == 1 else T.softmax_channels(logits)


def build_graph(spec: NetworkSpec, rng: np.random.Generator) -> ComputeGraph:
    return ComputeGraph(spec, rng)


def forward(graph: ComputeGraph, x: Tensor, mode: str = "eval", rng=None):
    return graph.forward(x, mode, rng)


def parameter_count(obj) -> int:
    """Number of learnable scalars (running statistics excluded).

    Accepts a ComputeGraph, an Encoder, a single layer or a list of layers.
    """
    if isinstance(obj, ComputeGraph):
        params = obj.named_parameters()
    elif isinstance(obj, (list, tuple)):
        params = [p for layer in obj for p in layer.named_parameters("x")]
    else:
        params = obj.named_parameters("x")
    return int(sum(p.data.size for _, p in params))


# ------------------------------------------------------------ receptive field


def _encoder_of(graph) -> Encoder:
    return graph.encoder if isinstance(graph, ComputeGraph) else graph


def theoretical_rf(graph) -> list:
    """Analytic RF side length of every encoder conv layer h = 1..N.

    ``r_h = r_{h-1} + (k_h - 1) * jump`` with pools contributing ``k=2`` and
    doubling the jump.
    """
    enc = _encoder_of(graph)
    r, jump, out = 1, 1, []
    for h, block in enumerate(enc.blocks, start=1):
        if enc.pool_before(h):
            r += jump
            jump *= 2
        r += (block.conv.k - 1) * jump
        out.append(r)
    return out


def layer_output_size(graph, h: int, input_size: int) -> int:
    enc = _encoder_of(graph)
    size = input_size
    for i in range(1, h + 1):
        if enc.pool_before(i):
            if size % 2:
                raise ShapeError("layer_output_size", "spatial size", "even", size)
            size //= 2
    return size


def center_rf_box(graph, h: int, input_size: int) -> tuple:
    """Unclipped input interval ``(lo, hi)`` (inclusive) seen by layer h's centre node.

    The same interval applies to both axes for a square input.
    """
    enc = _encoder_of(graph)
    c = layer_output_size(enc, h, input_size) // 2
    lo = hi = c
    for i in range(h, 0, -1):
        half = enc.blocks[i - 1].conv.k // 2
        lo, hi = lo - half, hi + half
        if enc.pool_before(i):
            lo, hi = 2 * lo, 2 * hi + 1
    return lo, hi
