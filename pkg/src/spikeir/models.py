"""Spiking U-shaped restoration network and its non-spiking twin.

Both networks share one layer list, so features tapped at the same stage have
identical shapes. With ``L`` levels there are ``2L - 1`` stages: encoder levels
``1..L-1``, the bottleneck ``L``, then decoder levels ``L+1..2L-1`` from the
coarsest back to full resolution.

Student layout (every convolution except the tail feeds a LIF layer)::

    head:    conv -> norm -> LIF
    encoder: [conv -> norm -> LIF -> attention] x blocks, stride-2 conv -> norm -> LIF
    middle:  [block] x blocks
    decoder: conv -> bilinear 2x -> norm -> LIF, + encoder skip, [block] x blocks
    tail:    conv per step, averaged over time, plus the input image

The teacher replaces ``norm -> LIF -> attention`` with ReLU and has no time axis.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError
from .neuron import LifParams, encode_direct, lif_sequence
from .tensor import TensorRec

DECODER_STAGES = (4, 5, 6, 7)


@dataclass(frozen=True)
class StudentConfig:
    levels: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_level: int = 2
    T: int = 4
    lif: LifParams = field(default_factory=LifParams)
    kernel: int = 3
    image_channels: int = 1
    attention: bool = True
    norm: bool = True
    norm_init: float = 2.0
    zero_tail: bool = True

    def __post_init__(self):
        _check_shape_config(self)
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")


@dataclass(frozen=True)
class TeacherConfig:
    levels: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_level: int = 2
    kernel: int = 3
    image_channels: int = 1
    zero_tail: bool = True

    def __post_init__(self):
        _check_shape_config(self)

    @classmethod
    def mirror(cls, s: StudentConfig) -> "TeacherConfig":
        return cls(levels=s.levels, channels=s.channels, blocks_per_level=s.blocks_per_level,
                   kernel=s.kernel, image_channels=s.image_channels, zero_tail=s.zero_tail)


def _check_shape_config(cfg):
    object.__setattr__(cfg, "channels", tuple(int(c) for c in cfg.channels))
    if cfg.levels < 1:
        raise ConfigError(f"levels must be >= 1, got {cfg.levels}")
    if len(cfg.channels) != cfg.levels:
        raise ConfigError(f"{len(cfg.channels)} channel counts for {cfg.levels} levels")
    if any(c < 1 for c in cfg.channels):
        raise ConfigError(f"channel counts must be >= 1: {cfg.channels}")
    if cfg.blocks_per_level < 0:
        raise ConfigError("blocks_per_level must be >= 0")
    if cfg.kernel < 1 or cfg.kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {cfg.kernel}")
    if cfg.image_channels < 1:
        raise ConfigError("image_channels must be >= 1")


@dataclass
class Layer:
    """One node of the layer list.

    ``res`` is the level index, so the layer's spatial size is
    ``input / 2**res``. ``sources`` names the layers whose outputs are summed
    to form this layer's input (``"input"`` for the image).
    """

    name: str
    kind: str
    cin: int
    cout: int
    res: int
    kernel: int = 0
    stride: int = 1
    stage: int | None = None
    sources: tuple[str, ...] = ()
    params: tuple[str, ...] = ()


@dataclass
class ModelGraph:
    kind: str = "student"
    config: StudentConfig | TeacherConfig | None = None
    layers: list[Layer] = field(default_factory=list)
    params: dict[str, TensorRec] = field(default_factory=dict)

    def layer(self, name: str) -> Layer:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    @property
    def stages(self) -> tuple[int, ...]:
        return tuple(sorted(lay.stage for lay in self.layers if lay.stage is not None))

    def clone(self) -> "ModelGraph":
        g = copy.copy(self)
        g.layers = list(self.layers)
        g.params = {k: TensorRec(v.data.copy(), requires_grad=v.requires_grad)
                    for k, v in self.params.items()}
        return g

    def astype(self, dtype) -> "ModelGraph":
        g = self.clone()
        for p in g.params.values():
            p.data = p.data.astype(dtype)
        return g

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise ContractError(f"missing parameter {k}")
            if state[k].shape != p.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False


def param_count(g: ModelGraph) -> int:
    """Exact number of learnable scalars."""
    return int(sum(p.data.size for p in g.params.values()))


# --- construction ----------------------------------------------------------

class _Builder:
    def __init__(self, g: ModelGraph, rng: np.random.Generator, dtype=np.float32):
        self.g = g
        self.rng = rng
        self.dtype = dtype

    def _param(self, name, arr):
        self.g.params[name] = TensorRec(arr.astype(self.dtype), requires_grad=True)
        return name

    def conv(self, name, cin, cout, k, res, sources, stride=1, zero=False):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = self.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        p = (self._param(f"{name}.weight", w),
             self._param(f"{name}.bias", np.zeros((1, cout, 1, 1))))
        self.g.layers.append(Layer(name, "conv", cin, cout, res, k, stride, None, tuple(sources), p))
        return name

    def norm(self, name, c, res, init):
        p = (self._param(f"{name}.scale", np.full((1, c, 1, 1), init)),
             self._param(f"{name}.shift", np.zeros((1, c, 1, 1))))
        self.g.layers.append(Layer(name, "norm", c, c, res, params=p))

    def act(self, kind, name, c, res, sources=()):
        self.g.layers.append(Layer(name, kind, c, c, res, sources=tuple(sources)))
        return name

    def attention(self, name, c, res):
        p = (self._param(f"{name}.ch_w", np.zeros((1, c, 1, 1))),
             self._param(f"{name}.ch_b", np.zeros((1, c, 1, 1))),
             self._param(f"{name}.sp.weight", np.zeros((1, c, 1, 1))),
             self._param(f"{name}.sp.bias", np.zeros((1, 1, 1, 1))),
             self._param(f"{name}.t_w", np.zeros((1, 1, 1, 1))),
             self._param(f"{name}.t_b", np.zeros((1, 1, 1, 1))))
        self.g.layers.append(Layer(name, "attention", c, c, res, params=p))
        return name


def _build(kind: str, cfg, seed: int) -> ModelGraph:
    g = ModelGraph(kind=kind, config=cfg)
    b = _Builder(g, np.random.default_rng(seed))
    spiking = kind == "student"
    L, ch, k = cfg.levels, cfg.channels, cfg.kernel

    def unit(name, cin, cout, res, sources, stride=1, block=False, upsample=False):
        """conv then norm/LIF(/attention) or ReLU; returns the output layer name.

        With ``upsample`` the conv runs at the coarser level and its output is
        bilinearly doubled, so the conv still consumes spikes.
        """
        b.conv(f"{name}.conv", cin, cout, k, res + 1 if upsample else res, sources, stride=stride)
        if upsample:
            b.act("upsample", f"{name}.upsample", cout, res)
        if not spiking:
            return b.act("relu", f"{name}.relu", cout, res)
        if cfg.norm:
            b.norm(f"{name}.norm", cout, res, cfg.norm_init)
        out = b.act("lif", f"{name}.lif", cout, res)
        if block and cfg.attention:
            out = b.attention(f"{name}.attn", cout, res)
        return out

    def blocks(prefix, c, res, src, stage):
        for j in range(cfg.blocks_per_level):
            src = unit(f"{prefix}.block{j + 1}", c, c, res, (src,), block=True)
        g.layer(src).stage = stage
        return src

    src = unit("head", cfg.image_channels, ch[0], 0, ("input",))
    skips = []
    for lv in range(L - 1):
        src = blocks(f"enc{lv + 1}", ch[lv], lv, src, lv + 1)
        skips.append(src)
        src = unit(f"enc{lv + 1}.down", ch[lv], ch[lv + 1], lv + 1, (src,), stride=2)
    src = blocks("mid", ch[L - 1], L - 1, src, L)
    for lv in reversed(range(L - 1)):
        name = f"dec{lv + 1}"
        up = unit(f"{name}.up", ch[lv + 1], ch[lv], lv, (src,), upsample=True)
        b.act("skip_add", f"{name}.skip", ch[lv], lv, sources=(up, skips[lv]))
        src = blocks(name, ch[lv], lv, f"{name}.skip", 2 * L - 1 - lv)
    b.conv("tail.conv", ch[0], cfg.image_channels, k, 0, (src,), zero=cfg.zero_tail)
    return g


def build_student(cfg: StudentConfig | None = None, seed: int = 0) -> ModelGraph:
    return _build("student", cfg or StudentConfig(), seed)


def build_teacher(cfg: TeacherConfig | None = None, seed: int = 0) -> ModelGraph:
    return _build("teacher", cfg or TeacherConfig(), seed)


# --- forward -----------------------------------------------------------------

class StudentOutput(NamedTuple):
    restored: TensorRec
    taps: dict[int, TensorRec]
    firing_rates: dict[str, float]
    v_traces: dict[str, TensorRec]


class TeacherOutput(NamedTuple):
    restored: TensorRec
    taps: dict[int, TensorRec]


def _pad_input(g: ModelGraph, x: TensorRec) -> tuple[TensorRec, int, int]:
    mult = 2 ** (g.config.levels - 1)
    h, w = x.shape[2], x.shape[3]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        if ph >= h or pw >= w:
            raise DimensionError(f"image {h}x{w} too small for {g.config.levels} levels")
        x = TensorRec(np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"))
    return x, h, w


def _run(g: ModelGraph, x: TensorRec, keep_traces: bool):
    cfg = g.config
    P = g.params
    spiking = g.kind == "student"
    T = cfg.T if spiking else 1
    if x.shape[1] != cfg.image_channels:
        raise DimensionError(f"model expects {cfg.image_channels} image channels, got {x.shape[1]}")
    x, h0, w0 = _pad_input(g, x)
    outs: dict[str, TensorRec] = {}
    traces: dict[str, TensorRec] = {}
    rates: dict[str, float] = {}
    taps: dict[int, TensorRec] = {}
    cur = None
    last_v = None

    def gather(sources):
        acc = None
        for s in sources:
            t = encode_direct(x, T) if s == "input" else outs[s]
            acc = t if acc is None else tn.add(acc, t)
        return acc

    for lay in g.layers:
        if lay.kind == "conv":
            inp = gather(lay.sources)
            cur = tn.conv2d(inp, P[lay.params[0]], P[lay.params[1]], stride=lay.stride)
        elif lay.kind == "norm":
            cur = tn.add_broadcast(tn.mul(cur, P[lay.params[0]]), P[lay.params[1]])
        elif lay.kind == "relu":
            cur = tn.relu(cur)
        elif lay.kind == "lif":
            res = lif_sequence(cur, cfg.lif, T)
            cur = res.spikes
            rates[lay.name] = res.firing_rate
            last_v = res.v_trace
            if keep_traces:
                traces[lay.name] = res.v_trace
        elif lay.kind == "attention":
            cur = _attention(P, lay, cur, last_v, T)
        elif lay.kind == "upsample":
            cur = tn.bilinear_resize(cur, cur.shape[2] * 2, cur.shape[3] * 2)
        elif lay.kind == "skip_add":
            cur = gather(lay.sources)
        else:
            raise ContractError(f"unknown layer kind {lay.kind!r}")
        outs[lay.name] = cur
        if lay.stage is not None:
            taps[lay.stage] = tn.time_mean(cur, T) if spiking else cur

    restored = tn.time_mean(cur, T) if spiking else cur
    restored = tn.add(restored, x)
    if restored.shape[2] != h0 or restored.shape[3] != w0:
        restored = tn.crop(restored, h0, w0)
    return restored, taps, rates, traces


def _attention(P, lay, s, v_trace, T):
    """Three multiplicative gates in (0, 2), each exactly 1 at zero parameters."""
    n = lay.name

    def gate(z):
        return tn.scale(tn.sigmoid(z), 2.0)

    m = tn.time_mean(tn.reduce_mean(s, (2, 3)), T)
    gc = gate(tn.add_broadcast(tn.mul(m, P[f"{n}.ch_w"]), P[f"{n}.ch_b"]))
    avg = tn.time_mean(s, T)
    gs = gate(tn.conv2d(avg, P[f"{n}.sp.weight"], P[f"{n}.sp.bias"]))
    vm = v_trace.data.mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64).astype(s.dtype)
    gt = gate(tn.add_broadcast(tn.mul(TensorRec(vm), P[f"{n}.t_w"]), P[f"{n}.t_b"]))
    out = tn.mul(s, tn.time_tile(gc, T))
    out = tn.mul(out, tn.time_tile(gs, T))
    return tn.mul(out, gt)


def forward_student(g: ModelGraph, x: TensorRec, keep_traces: bool = False) -> StudentOutput:
    """Restore ``x`` ([B, C, H, W]) with the spiking network.

    Taps are time-averaged stage outputs; ``firing_rates`` is keyed by LIF
    layer name. Inputs whose sides are not multiples of ``2**(levels-1)`` are
    reflect-padded and the output cropped back.
    """
    if g.kind != "student":
        raise ContractError("forward_student needs a student graph")
    restored, taps, rates, traces = _run(g, x, keep_traces)
    return StudentOutput(restored, taps, rates, traces)


def forward_teacher(g: ModelGraph, x: TensorRec) -> TeacherOutput:
    if g.kind != "teacher":
        raise ContractError("forward_teacher needs a teacher graph")
    restored, taps, _, _ = _run(g, x, False)
    return TeacherOutput(restored, taps)


# --- reporting ---------------------------------------------------------------

def io_shape(lay: Layer, h: int, w: int) -> tuple[int, int, int]:
    f = 2 ** lay.res
    return lay.cout, h // f, w // f


def summary(g: ModelGraph, h: int = 32, w: int = 32) -> str:
    """Text table of layers with output shapes, stage tags and parameter counts."""
    rows = [("layer", "kind", "out shape", "stage", "params")]
    for lay in g.layers:
        c, oh, ow = io_shape(lay, h, w)
        n = sum(g.params[p].data.size for p in lay.params)
        rows.append((lay.name, lay.kind, f"{c}x{oh}x{ow}", str(lay.stage or ""), str(n)))
    rows.append(("total", "", "", "", str(param_count(g))))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
