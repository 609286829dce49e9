"""Restoration loss, ANN-to-SNN feature distillation, and the training loops.

The student objective is ``restoration_loss + kd_loss``: pixel L1 plus a
weighted L1 on the half spectrum, and a weighted MSE between the student's
time-averaged stage features and the frozen teacher's features at the same
stages.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import tensor as tn
from .data import PatchPair, augment_flip
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .metrics import psnr, ssim
from .models import ModelGraph, forward_student, forward_teacher
from .neuron import voltage_density
from .optim import CosineSchedule, OptimState, adamw_step, lr_at
from .tensor import Tape, TensorRec

STAGE_SETS = {
    "all": (1, 2, 3, 4, 5, 6, 7),
    "mid": (3, 4, 5),
    "decoder": (4, 5, 6, 7),
    "none": (),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_freq: float = 0.1

    def __post_init__(self):
        if self.lambda_freq < 0:
            raise ConfigError("lambda_freq must be >= 0")


@dataclass(frozen=True)
class KdConfig:
    gamma: float = 0.12
    stages: tuple[int, ...] = STAGE_SETS["decoder"]
    teacher_checkpoint: str | None = None
    sum_stages: bool = False

    def __post_init__(self):
        if isinstance(self.stages, str):
            if self.stages not in STAGE_SETS:
                raise ConfigError(f"unknown stage set {self.stages!r}")
            object.__setattr__(self, "stages", STAGE_SETS[self.stages])
        object.__setattr__(self, "stages", tuple(sorted(set(int(s) for s in self.stages))))
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if any(not 1 <= s <= 7 for s in self.stages):
            raise ConfigError(f"stages must lie in 1..7, got {self.stages}")

    @property
    def active(self) -> bool:
        return bool(self.stages)


def _scalar(value: float, dtype=np.float32) -> TensorRec:
    return TensorRec(np.full((1, 1, 1, 1), value, dtype=dtype))


def restoration_loss(pred: TensorRec, target: TensorRec, w: LossWeights = LossWeights()) -> TensorRec:
    """Mean pixel L1 plus ``lambda`` times the mean L1 over the real and
    imaginary parts of the half-spectrum difference."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    loss = tn.l1(pred, target)
    if w.lambda_freq == 0:
        return loss
    pr, pi = tn.rdft2(pred)
    tr, ti = tn.rdft2(target)
    freq = tn.scale(tn.add(tn.l1(pr, tr), tn.l1(pi, ti)), 0.5)
    return tn.add(loss, tn.scale(freq, w.lambda_freq))


def align_feature(student_tap: TensorRec, teacher_tap: TensorRec) -> TensorRec:
    """Resize then channel-pool a teacher feature to the student's shape (no gradient)."""
    t = teacher_tap.detach()
    _, cs, hs, ws = student_tap.shape
    if t.shape[2:] != (hs, ws):
        t = tn.bilinear_resize(t, hs, ws)
    if t.shape[1] != cs:
        t = tn.channel_avg_pool(t, cs)
    return t.detach()


def kd_loss(student_taps: dict[int, TensorRec], teacher_taps: dict[int, TensorRec],
            cfg: KdConfig) -> TensorRec:
    """``gamma`` times the stage-averaged (or summed) feature MSE."""
    if not cfg.stages:
        return _scalar(0.0)
    total = None
    for s in cfg.stages:
        if s not in student_taps or s not in teacher_taps:
            raise ContractError(f"stage {s} missing from feature taps")
        st = student_taps[s]
        term = tn.mse(st, align_feature(st, teacher_taps[s]))
        total = term if total is None else tn.add(total, term)
    if not cfg.sum_stages:
        total = tn.scale(total, 1.0 / len(cfg.stages))
    return tn.scale(total, cfg.gamma)


# --- training ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_restore: float
    loss_kd: float
    val_psnr: float
    val_ssim: float
    mean_fr: float
    volt_density: float
    seconds: float


CSV_FIELDS = ("epoch", "loss_restore", "loss_kd", "val_psnr", "val_ssim",
              "mean_fr", "volt_density", "seconds")


@dataclass
class TrainRun:
    records: list[EpochRecord] = field(default_factory=list)
    noisy_psnr: float = float("nan")

    def append(self, rec: EpochRecord) -> None:
        expected = len(self.records)
        if rec.epoch != expected:
            raise ContractError(f"epoch {rec.epoch} recorded out of order (expected {expected})")
        self.records.append(rec)

    def epochs_to_reach(self, target_psnr: float) -> int | None:
        """Number of epochs trained when validation PSNR first reached ``target_psnr``."""
        for r in self.records:
            if r.val_psnr >= target_psnr:
                return r.epoch + 1
        return None

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow([r.epoch, f"{r.loss_restore:.8g}", f"{r.loss_kd:.8g}", f"{r.val_psnr:.6f}",
                            f"{r.val_ssim:.6f}", f"{r.mean_fr:.6f}", f"{r.volt_density:.6f}",
                            f"{r.seconds:.3f}"])


class TrainData(NamedTuple):
    train: list[PatchPair]
    val: list[PatchPair]


def stack(pairs: Iterable[PatchPair]) -> tuple[TensorRec, TensorRec]:
    pairs = list(pairs)
    noisy = np.stack([p.noisy for p in pairs]).astype(np.float32)
    clean = np.stack([p.clean for p in pairs]).astype(np.float32)
    return TensorRec(noisy), TensorRec(clean)


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def restore(g: ModelGraph, noisy: TensorRec, keep_traces: bool = False):
    """Inference forward for either network; returns (restored, rates, traces)."""
    if g.kind == "student":
        out = forward_student(g, noisy, keep_traces=keep_traces)
        return out.restored, out.firing_rates, out.v_traces
    return forward_teacher(g, noisy).restored, {}, {}


@dataclass
class Evaluation:
    psnr: float
    ssim: float
    noisy_psnr: float
    firing_rates: dict[str, float]
    volt_density: float

    @property
    def mean_fr(self) -> float:
        if not self.firing_rates:
            return 0.0
        return float(np.mean(list(self.firing_rates.values())))


def evaluate(g: ModelGraph, pairs: list[PatchPair], batch_size: int = 8) -> Evaluation:
    """PSNR/SSIM of restored pairs; firing rates are averaged over batches."""
    ps, ss, ns = [], [], []
    rates: dict[str, list[float]] = {}
    dens = []
    for sl in _batches(len(pairs), batch_size):
        chunk = pairs[sl]
        noisy, clean = stack(chunk)
        out, r, traces = restore(g, noisy, keep_traces=g.kind == "student")
        for k, p in enumerate(chunk):
            ps.append(psnr(out.data[k], p.clean))
            ns.append(psnr(p.noisy, p.clean))
            if min(p.clean.shape[1:]) >= 11:
                ss.append(ssim(np.clip(out.data[k], 0, 1), p.clean))
        for name, v in r.items():
            rates.setdefault(name, []).append(v)
        if traces:
            lif = g.config.lif
            dens.append(np.mean([voltage_density(t, lif) for t in traces.values()]))
    return Evaluation(float(np.mean(ps)), float(np.mean(ss)) if ss else float("nan"),
                      float(np.mean(ns)), {k: float(np.mean(v)) for k, v in rates.items()},
                      float(np.mean(dens)) if dens else 0.0)


def _check_finite(value: float, epoch: int, step: int, what: str):
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite at epoch {epoch}, step {step}")


def _train(model: ModelGraph, data: TrainData, w: LossWeights, epochs: int, seed: int,
           teacher: ModelGraph | None, kd: KdConfig | None, batch_size: int,
           wall_clock: bool, stop_at_psnr: float | None,
           on_epoch: Callable[[EpochRecord], None] | None) -> TrainRun:
    if not data.train:
        raise ConfigError("training set is empty")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    use_kd = teacher is not None and kd is not None and kd.active
    sched = CosineSchedule(epochs)
    state = OptimState()
    run = TrainRun()
    for p in model.params.values():
        p.requires_grad = True
    n = len(data.train)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = lr_at(sched, epoch)
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        sum_restore = sum_kd = 0.0
        steps = 0
        for step, sl in enumerate(_batches(n, batch_size)):
            batch = [augment_flip(data.train[i], rng) for i in order[sl]]
            noisy, clean = stack(batch)
            with Tape() as tape:
                if model.kind == "student":
                    out = forward_student(model, noisy)
                    pred, taps = out.restored, out.taps
                else:
                    out = forward_teacher(model, noisy)
                    pred, taps = out.restored, out.taps
                loss_r = restoration_loss(pred, clean, w)
                loss = loss_r
                loss_k = 0.0
                if use_kd:
                    kd_term = kd_loss(taps, forward_teacher(teacher, noisy).taps, kd)
                    loss_k = kd_term.item()
                    loss = tn.add(loss_r, kd_term)
            _check_finite(loss.item(), epoch, step, "loss")
            tn.backward(tape, loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adamw_step(model.params, grads, state, lr)
            model.zero_grad()
            sum_restore += loss_r.item()
            sum_kd += loss_k
            steps += 1
        ev = evaluate(model, data.val, batch_size) if data.val else None
        rec = EpochRecord(
            epoch=epoch,
            loss_restore=sum_restore / steps,
            loss_kd=sum_kd / steps,
            val_psnr=ev.psnr if ev else float("nan"),
            val_ssim=ev.ssim if ev else float("nan"),
            mean_fr=ev.mean_fr if ev else 0.0,
            volt_density=ev.volt_density if ev else 0.0,
            seconds=time.perf_counter() - t0 if wall_clock else 0.0,
        )
        if ev:
            run.noisy_psnr = ev.noisy_psnr
        run.append(rec)
        if on_epoch:
            on_epoch(rec)
        if stop_at_psnr is not None and rec.val_psnr >= stop_at_psnr:
            break
    return run


def train_student(student: ModelGraph, teacher: ModelGraph | None, data: TrainData,
                  kd: KdConfig, w: LossWeights = LossWeights(), epochs: int = 51,
                  seed: int = 0, batch_size: int = 8, wall_clock: bool = True,
                  stop_at_psnr: float | None = None,
                  on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train the spiking student in place; the teacher is frozen throughout.

    Each update averages the loss over ``batch_size`` flipped patches; the
    learning rate follows the cosine schedule per epoch. ``stop_at_psnr``
    ends training after the first epoch whose validation PSNR reaches it.
    """
    if student.kind != "student":
        raise ContractError("train_student needs a student graph")
    if kd.active:
        if teacher is None:
            raise ConfigError("distillation stages selected but no teacher given")
        missing = set(kd.stages) - set(teacher.stages)
        if missing:
            raise ConfigError(f"teacher lacks stages {sorted(missing)}")
    if teacher is not None:
        teacher.freeze()
    run = _train(student, data, w, epochs, seed, teacher, kd, batch_size,
                 wall_clock, stop_at_psnr, on_epoch)
    return student, run


def train_teacher(teacher: ModelGraph, data: TrainData, w: LossWeights = LossWeights(),
                  epochs: int = 51, seed: int = 0, batch_size: int = 8,
                  wall_clock: bool = True, stop_at_psnr: float | None = None,
                  on_epoch: Callable[[EpochRecord], None] | None = None):
    if teacher.kind != "teacher":
        raise ContractError("train_teacher needs a teacher graph")
    run = _train(teacher, data, w, epochs, seed, None, None, batch_size,
                 wall_clock, stop_at_psnr, on_epoch)
    teacher.freeze()
    return teacher, run
