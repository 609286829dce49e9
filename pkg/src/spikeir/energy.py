"""Firing-rate energy model: per-block AC/MAC counts and SNN vs ANN reports.

Per block ``E_b = T * (fr * E_AC * OP_AC + E_MAC * OP_MAC)`` and the network
energy is the sum over blocks. Counts are per time step.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .models import Layer, ModelGraph, forward_student, io_shape
from .tensor import TensorRec

COUNTING_RULES = (
    "conv on analog input: Cout*H'*W'*Cin*kh*kw MAC (fr reported as 1)",
    "conv on spike input: same count as AC, gated by the source firing rate",
    "conv fed by a skip sum: split by linearity into one AC row per spiking source",
    "conv bias: Cout*H'*W' AC, attached to the conv's first row",
    "normalization: 1 MAC per element",
    "attention: 6 MAC per element (3 gate products, spatial 1x1 gate, channel and membrane means) + 2C+2 gate affines",
    "bilinear 2x upsample: 4 MAC per output element",
    "output: time averaging and input residual, 1 MAC per output element",
    "LIF membrane updates, ReLU and the skip sum itself: not counted",
    "equivalent ANN: every operation above is a MAC (including bias and skip adds), T=1",
)


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = 4.6
    e_ac: float = 0.9

    def __post_init__(self):
        if not (self.e_mac > 0 and self.e_ac > 0):
            raise ConfigError("energy constants must be positive")


@dataclass(frozen=True)
class BlockOpCount:
    block: str
    kind: str
    op_ac: int = 0
    op_mac: int = 0

    def __post_init__(self):
        if self.op_ac < 0 or self.op_mac < 0:
            raise ContractError(f"{self.block}: negative op count")


def block_energy(c: BlockOpCount, fr: float, T: int, k: EnergyConstants = EnergyConstants()) -> float:
    """Energy of one block in pJ."""
    if not 0.0 <= fr <= 1.0:
        raise ContractError(f"{c.block}: firing rate {fr} outside [0, 1]")
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    return T * (fr * k.e_ac * c.op_ac + k.e_mac * c.op_mac)


def count_ops(layer: Layer, h: int, w: int, input_kind: str = "spike",
              all_mac: bool = False) -> BlockOpCount:
    """Per-step operation count of ``layer`` in a network fed ``h x w`` images.

    ``input_kind`` (``"analog"`` or ``"spike"``) only matters for convolutions.
    With ``all_mac`` every operation is counted as a MAC.
    """
    if input_kind not in ("analog", "spike"):
        raise ContractError(f"unknown input kind {input_kind!r}")
    c, oh, ow = io_shape(layer, h, w)
    n = c * oh * ow
    ac = mac = 0
    if layer.kind == "conv":
        dense = layer.cout * oh * ow * layer.cin * layer.kernel * layer.kernel
        bias = layer.cout * oh * ow if len(layer.params) > 1 else 0
        if all_mac:
            mac = dense + bias
        elif input_kind == "analog":
            mac, ac = dense, bias
        else:
            ac = dense + bias
    elif layer.kind == "norm":
        mac = n
    elif layer.kind == "attention":
        mac = 6 * n + 2 * c + 2
    elif layer.kind == "upsample":
        mac = 4 * n
    elif layer.kind == "skip_add":
        mac = n if all_mac else 0
    elif layer.kind in ("lif", "relu"):
        pass
    else:
        raise ContractError(f"unknown layer kind {layer.kind!r}")
    return BlockOpCount(layer.name, layer.kind, ac, mac)


@dataclass(frozen=True)
class BlockEnergy:
    block: str
    kind: str
    op_ac: int
    op_mac: int
    fr: float
    energy_pj: float


@dataclass
class EnergyReport:
    network: str
    T: int
    rows: list[BlockEnergy] = field(default_factory=list)
    constants: EnergyConstants = field(default_factory=EnergyConstants)
    image_size: tuple[int, int] = (0, 0)
    ratio_vs_ann: float | None = None

    @property
    def total_pj(self) -> float:
        return sum(r.energy_pj for r in self.rows)

    @property
    def total_uj(self) -> float:
        return self.total_pj * 1e-6

    def block(self, name: str) -> BlockEnergy:
        for r in self.rows:
            if r.block == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "kind", "op_ac", "op_mac", "fr", "energy_pj"])
        for r in self.rows:
            w.writerow([r.block, r.kind, r.op_ac, r.op_mac, f"{r.fr:.6f}", f"{r.energy_pj:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"total_pj": self.total_pj, "total_uj": self.total_uj, "T": self.T,
                "ratio_vs_ann": self.ratio_vs_ann}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2) + "\n"

    def to_text(self) -> str:
        k = self.constants
        h, w = self.image_size
        lines = [
            f"energy report: {self.network}, T={self.T}, input {h}x{w}",
            f"E_MAC = {k.e_mac} pJ, E_AC = {k.e_ac} pJ (32-bit float, 45nm)",
            "E_block = T * (fr * E_AC * OP_AC + E_MAC * OP_MAC), counts per time step",
            "counting rules:",
        ]
        lines += [f"  - {rule}" for rule in COUNTING_RULES]
        head = ("block", "kind", "op_ac", "op_mac", "fr", "energy_pj")
        body = [(r.block, r.kind, str(r.op_ac), str(r.op_mac), f"{r.fr:.4f}", f"{r.energy_pj:.1f}")
                for r in self.rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(6)]
        lines.append("")
        lines.append("  ".join(c.ljust(wd) for c, wd in zip(head, widths)).rstrip())
        lines += ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in body]
        lines.append("")
        lines.append(f"total: {self.total_pj:.1f} pJ = {self.total_uj:.6f} uJ")
        if self.ratio_vs_ann is not None:
            lines.append(f"ratio vs equivalent ANN: {self.ratio_vs_ann:.4f}")
        return "\n".join(lines) + "\n"


# --- graph profiling -------------------------------------------------------------

def _predecessors(g: ModelGraph) -> dict[str, tuple[str, ...]]:
    """Input layers of every layer; sourceless layers read the previous layer."""
    prev = {}
    last = None
    for lay in g.layers:
        prev[lay.name] = lay.sources if lay.sources else ((last,) if last else ())
        last = lay.name
    return prev


def spike_sources(g: ModelGraph, name: str, prev=None) -> list[str]:
    """LIF layers whose spikes feed ``name``'s input, or ``["analog"]``.

    Attention only rescales spikes (gates are strictly positive) and a skip
    sum is split by linearity, so both are looked through.
    """
    prev = prev or _predecessors(g)
    out: list[str] = []
    for src in prev[name]:
        if src == "input":
            return ["analog"]
        kind = g.layer(src).kind
        if kind == "lif":
            out.append(src)
        elif kind in ("attention", "skip_add"):
            inner = spike_sources(g, src, prev)
            if inner == ["analog"]:
                return inner
            out.extend(inner)
        else:
            return ["analog"]
    return out


def _padded_size(g: ModelGraph, h: int, w: int) -> tuple[int, int]:
    mult = 2 ** (g.config.levels - 1)
    return h + (-h) % mult, w + (-w) % mult


def _image_channels_rows(g: ModelGraph, h: int, w: int) -> BlockOpCount:
    return BlockOpCount("output", "residual", 0, g.config.image_channels * h * w)


def _as_batch(samples) -> TensorRec:
    if isinstance(samples, TensorRec):
        return samples
    arrs = [np.asarray(getattr(s, "values", s), dtype=np.float32) for s in samples]
    if not arrs:
        raise ConfigError("need at least one sample image")
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise DimensionError(f"samples must share one shape, got {sorted(shapes)}")
    return TensorRec(np.stack(arrs))


def measure_firing_rates(g: ModelGraph, samples, batch_size: int = 8) -> dict[str, float]:
    """Per-LIF firing rate averaged over every sample."""
    x = _as_batch(samples)
    n = x.shape[0]
    if n < 1:
        raise ConfigError("need at least one sample image")
    acc: dict[str, float] = {}
    for i in range(0, n, batch_size):
        chunk = TensorRec(x.data[i:i + batch_size])
        rates = forward_student(g, chunk).firing_rates
        for k, v in rates.items():
            acc[k] = acc.get(k, 0.0) + v * chunk.shape[0]
    return {k: v / n for k, v in acc.items()}


def profile_snn(g: ModelGraph, samples, k: EnergyConstants = EnergyConstants(),
                rates: dict[str, float] | None = None) -> EnergyReport:
    """Energy of the spiking network at the firing rates measured on ``samples``."""
    if g.kind != "student":
        raise ContractError("profile_snn needs a student graph")
    x = _as_batch(samples)
    if rates is None:
        rates = measure_firing_rates(g, x)
    h, w = _padded_size(g, x.shape[2], x.shape[3])
    T = g.config.T
    prev = _predecessors(g)
    rep = EnergyReport("snn", T, constants=k, image_size=(x.shape[2], x.shape[3]))
    for lay in g.layers:
        if lay.kind == "conv":
            srcs = spike_sources(g, lay.name, prev)
            if srcs == ["analog"]:
                c = count_ops(lay, h, w, "analog")
                rep.rows.append(BlockEnergy(lay.name, "conv/analog", c.op_ac, c.op_mac, 1.0,
                                            block_energy(c, 1.0, T, k)))
                continue
            full = count_ops(lay, h, w, "spike")
            weights_only = count_ops(replace(lay, params=lay.params[:1]), h, w, "spike")
            for j, s in enumerate(srcs):
                op_ac = full.op_ac if j == 0 else weights_only.op_ac
                name = lay.name if len(srcs) == 1 else f"{lay.name}<{s}"
                c = BlockOpCount(name, "conv/spike", op_ac, 0)
                fr = rates[s]
                rep.rows.append(BlockEnergy(name, c.kind, c.op_ac, 0, fr, block_energy(c, fr, T, k)))
        else:
            c = count_ops(lay, h, w)
            if c.op_ac or c.op_mac:
                rep.rows.append(BlockEnergy(lay.name, lay.kind, c.op_ac, c.op_mac, 1.0,
                                            block_energy(c, 1.0, T, k)))
    c = _image_channels_rows(g, h, w)
    rep.rows.append(BlockEnergy(c.block, c.kind, 0, c.op_mac, 1.0, block_energy(c, 1.0, T, k)))
    return rep


def profile_ann(g: ModelGraph, samples, k: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Energy of a network evaluated densely: every op a MAC, one time step.

    Works on either graph kind; for a student it prices the non-spiking twin.
    """
    x = _as_batch(samples)
    h, w = _padded_size(g, x.shape[2], x.shape[3]) if g.layers else (x.shape[2], x.shape[3])
    rep = EnergyReport("ann", 1, constants=k, image_size=(x.shape[2], x.shape[3]))
    if not g.layers:
        return rep
    for lay in g.layers:
        c = count_ops(lay, h, w, "analog", all_mac=True)
        if c.op_mac:
            rep.rows.append(BlockEnergy(lay.name, lay.kind, 0, c.op_mac, 1.0, block_energy(c, 1.0, 1, k)))
    c = _image_channels_rows(g, h, w)
    rep.rows.append(BlockEnergy(c.block, c.kind, 0, c.op_mac, 1.0, block_energy(c, 1.0, 1, k)))
    return rep


def compare(snn: EnergyReport, ann: EnergyReport) -> float:
    """Set and return the SNN/ANN energy ratio on the SNN report."""
    if ann.total_pj <= 0:
        raise ContractError("ANN energy must be positive to form a ratio")
    snn.ratio_vs_ann = snn.total_pj / ann.total_pj
    return snn.ratio_vs_ann
