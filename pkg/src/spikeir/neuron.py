"""Leaky integrate-and-fire neurons with an arctan surrogate gradient.

Per step the membrane integrates ``v_pre = beta * v + I``, fires where
``v_pre >= v_th`` and resets (soft: subtract ``v_th``; hard: zero). The backward
pass swaps the step function's derivative for the arctan surrogate and does not
propagate through the reset term.
"""
from __future__ import annotations

import csv
import math
import os
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import TensorRec, record, time_tile


# When set, every hard-threshold forward asserts its spikes are exactly 0 or 1.
CHECK_BINARY = os.environ.get("SPIKEIR_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class LifParams:
    beta: float = 0.5
    v_th: float = 1.0
    reset: str = "soft"
    surrogate_alpha: float = 2.0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if not self.v_th > 0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")
        if self.reset not in ("soft", "hard"):
            raise ConfigError(f"reset must be 'soft' or 'hard', got {self.reset!r}")
        if not self.surrogate_alpha > 0:
            raise ConfigError(f"surrogate_alpha must be positive, got {self.surrogate_alpha}")


@dataclass
class LifState:
    v: TensorRec

    @classmethod
    def zeros_like(cls, t: TensorRec) -> "LifState":
        return cls(TensorRec(np.zeros_like(t.data)))


def encode_direct(image: TensorRec, steps: int = 4) -> TensorRec:
    """Repeat a static image as the input of every time step."""
    if steps < 1:
        raise ConfigError(f"need at least one time step, got {steps}")
    return time_tile(image, steps)


def surrogate_grad(v_pre, p: LifParams):
    """Arctan surrogate of dS/dv; peaks at ``alpha / 2`` on the threshold."""
    a = p.surrogate_alpha
    z = (math.pi / 2) * a * (np.asarray(v_pre) - p.v_th)
    return a / (2 * (1 + z * z))


def surrogate_primitive(v_pre, p: LifParams):
    """Smooth step whose derivative is :func:`surrogate_grad`."""
    a = p.surrogate_alpha
    return np.arctan((math.pi / 2) * a * (np.asarray(v_pre) - p.v_th)) / math.pi + 0.5


def lif_step(current: TensorRec, state: LifState, p: LifParams) -> tuple[TensorRec, LifState]:
    """Advance one step. No gradient is recorded; see :func:`lif_sequence`."""
    if current.shape != state.v.shape:
        raise DimensionError(f"current {current.shape} and membrane {state.v.shape} differ")
    v_pre = p.beta * state.v.data + current.data
    spikes = (v_pre >= p.v_th).astype(current.dtype)
    if p.reset == "soft":
        v = v_pre - p.v_th * spikes
    else:
        v = v_pre * (1 - spikes)
    return TensorRec(spikes), LifState(TensorRec(v.astype(current.dtype)))


class LifOutput(NamedTuple):
    spikes: TensorRec
    firing_rate: float
    v_trace: TensorRec


class SurrogateForward:
    """Context that makes LIF forwards output the smooth surrogate primitive.

    Reset decisions are frozen: the first pass under a given instance records
    the hard-threshold reset masks in call order; later passes replay them.
    The forward map is then smooth in every input, and its exact gradient is
    the one the surrogate backward computes, so finite differences can check
    the whole backward path.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self._cursor = 0
        self._recording = True

    def __enter__(self):
        self._cursor = 0
        _smooth_stack().append(self)
        return self

    def __exit__(self, *exc):
        _smooth_stack().pop()
        if self.masks:
            self._recording = False
        return False

    def reset_mask(self, v_pre: np.ndarray, v_th: float) -> np.ndarray:
        if self._recording:
            mask = (v_pre >= v_th).astype(v_pre.dtype)
            self.masks.append(mask)
        else:
            mask = self.masks[self._cursor]
        self._cursor += 1
        return mask


_local = threading.local()


def _smooth_stack() -> list[SurrogateForward]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def lif_sequence(currents: TensorRec, p: LifParams, steps: int | None = None) -> LifOutput:
    """Run LIF dynamics from a zero membrane over the time axis.

    ``currents`` is ``[T * B, C, H, W]`` in time-major order; ``steps`` defaults
    to the full leading extent (B = 1). ``v_trace`` holds the pre-reset membrane
    of every step in the same layout.
    """
    n = currents.shape[0]
    if steps is None:
        steps = n
    if steps < 1 or n % steps:
        raise DimensionError(f"axis 0 ({n}) is not a multiple of T={steps}")
    b = n // steps
    cur = currents.data.reshape(steps, b, *currents.shape[1:])
    dtype = currents.dtype
    beta = dtype.type(p.beta)
    v_th = dtype.type(p.v_th)
    smooth = _smooth_stack()[-1] if _smooth_stack() else None

    v = np.zeros(cur.shape[1:], dtype=dtype)
    v_pre = np.empty_like(cur)
    out = np.empty_like(cur)
    keep = np.empty_like(cur) if p.reset == "hard" else None
    for t in range(steps):
        vp = beta * v + cur[t]
        v_pre[t] = vp
        if smooth is None:
            s = (vp >= v_th).astype(dtype)
            mask = s
        else:
            s = surrogate_primitive(vp, p).astype(dtype)
            mask = smooth.reset_mask(vp, p.v_th)
        out[t] = s
        if p.reset == "soft":
            v = vp - v_th * mask
        else:
            keep[t] = 1 - mask
            v = vp * keep[t]

    if CHECK_BINARY and smooth is None and not np.all((out == 0) | (out == 1)):
        raise ContractError("non-binary spike emitted")
    sg = surrogate_grad(v_pre, p).astype(dtype)

    def bw(g):
        g = g.reshape(out.shape)
        gi = np.empty_like(g)
        carry = np.zeros(g.shape[1:], dtype=g.dtype)
        for t in range(steps - 1, -1, -1):
            gt = g[t] * sg[t]
            gt += carry if keep is None else carry * keep[t]
            gi[t] = gt
            carry = beta * gt
        return (gi.reshape(currents.shape),)

    spikes = record("lif", (currents,), out.reshape(currents.shape), bw)
    rate = float(out.mean(dtype=np.float64))
    return LifOutput(spikes, rate, TensorRec(v_pre.reshape(currents.shape)))


# --- membrane statistics -------------------------------------------------

def voltage_density(v_trace, p: LifParams) -> float:
    """Fraction of neuron-steps whose membrane magnitude exceeds 1% of threshold."""
    v = v_trace.data if isinstance(v_trace, TensorRec) else np.asarray(v_trace)
    if v.size == 0:
        return 0.0
    return float(np.mean(np.abs(v) > 0.01 * p.v_th))


def membrane_histogram(v_trace, steps: int, p: LifParams, bins: int = 32):
    """Per-step histogram over ``[-2 v_th, 2 v_th]``; outliers land in the edge bins.

    Returns ``(edges, counts)`` with ``counts`` shaped ``[steps, bins]``.
    """
    v = v_trace.data if isinstance(v_trace, TensorRec) else np.asarray(v_trace)
    edges = np.linspace(-2 * p.v_th, 2 * p.v_th, bins + 1)
    v = v.reshape(steps, -1)
    lo, hi = edges[0], edges[-1]
    counts = np.stack([
        np.histogram(np.clip(v[t], lo, hi), bins=edges)[0] for t in range(steps)
    ])
    return edges, counts


def write_histogram_csv(path, traces: dict, steps: int, p: LifParams, bins: int = 32) -> None:
    """Write ``step,layer,bin_lo,bin_hi,count`` rows for each traced layer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer", "bin_lo", "bin_hi", "count"])
        for layer, trace in traces.items():
            edges, counts = membrane_histogram(trace, steps, p, bins)
            for t in range(steps):
                for k in range(bins):
                    w.writerow([t, layer, f"{edges[k]:.6g}", f"{edges[k + 1]:.6g}", int(counts[t, k])])
