"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from spikeir import tensor as tn
from spikeir.tensor import Tape, TensorRec

H = 1e-3


def leaf(arr) -> TensorRec:
    return TensorRec(np.asarray(arr, dtype=np.float64), requires_grad=True)


def weighted_sum(out: TensorRec, w: np.ndarray) -> TensorRec:
    """Scalar loss sum(out * w) built from engine ops."""
    prod = tn.mul(out, TensorRec(w))
    return tn.scale(tn.reduce_mean(prod), float(prod.data.size))


def analytic_and_numeric(fn, arrays, seed=0, h=H):
    """Gradients of ``sum(fn(*inputs) * w)`` by backward and by central differences.

    ``fn`` maps 64-bit leaves to a tensor or a tuple of tensors.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def outputs(ts):
        out = fn(*ts)
        return out if isinstance(out, tuple) else (out,)

    probe = outputs([TensorRec(a) for a in arrays])
    weights = [rng.standard_normal(o.shape) for o in probe]

    def value(arrs):
        outs = outputs([TensorRec(a) for a in arrs])
        return float(sum(np.sum(o.data.astype(np.float64) * w) for o, w in zip(outs, weights)))

    leaves = [leaf(a) for a in arrays]
    with Tape() as tape:
        outs = outputs(leaves)
        loss = None
        for o, w in zip(outs, weights):
            term = weighted_sum(o, w)
            loss = term if loss is None else tn.add(loss, term)
    tn.backward(tape, loss)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    numeric = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (value(plus) - value(minus)) / (2 * h)
        numeric.append(g)
    return analytic, numeric


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def ulp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Units in the last place between two float32 arrays."""
    ia = np.asarray(a, dtype=np.float32).view(np.int32).astype(np.int64)
    ib = np.asarray(b, dtype=np.float32).view(np.int32).astype(np.int64)
    ia = np.where(ia < 0, -(ia & 0x7FFFFFFF), ia)
    ib = np.where(ib < 0, -(ib & 0x7FFFFFFF), ib)
    return np.abs(ia - ib)


def conv_oracle(x, k, b, stride, pad):
    """Direct nested-loop cross-correlation with zero padding, summed in Python floats."""
    n, cin, hh, ww = x.shape
    cout, _, kh, kw = k.shape
    ho = (hh + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy = y * stride + dy - pad
                                xx = z * stride + dx - pad
                                if 0 <= yy < hh and 0 <= xx < ww:
                                    acc += float(x[i, c, yy, xx]) * float(k[o, c, dy, dx])
                    out[i, o, y, z] = acc
    return out


def direct_dft2(x: np.ndarray) -> np.ndarray:
    """Full 2-D DFT by explicit summation over every pixel."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for y in range(h):
                for z in range(w):
                    acc += x[y, z] * np.exp(-2j * np.pi * (u * y / h + v * z / w))
            out[u, v] = acc
    return out


def bilinear_scalar(img: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """Half-pixel-centre bilinear sampling evaluated point by point."""
    hi, wi = img.shape
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            sy = max((i + 0.5) * hi / ho - 0.5, 0.0)
            sx = max((j + 0.5) * wi / wo - 0.5, 0.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, hi - 1), min(x0 + 1, wi - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out
