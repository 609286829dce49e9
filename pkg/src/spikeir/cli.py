"""Command-line entry point: ``spikeir <command> --config PATH [flags]``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, apply_overrides, load_config
from .data import (DegradationSpec, ImageBuffer, SplitManifest, degrade, load_image, read_manifest,
                   sample_patches, save_image, write_synthetic_corpus)
from .distill import TrainData, restore, train_student, train_teacher
from .energy import compare, profile_ann, profile_snn
from .errors import ConfigError, SpikeIRError
from .metrics import psnr, ssim
from .models import ModelGraph, TeacherConfig, build_student, build_teacher, forward_student
from .neuron import voltage_density, write_histogram_csv
from .tensor import TensorRec

SWEEP_ARMS = ("all", "mid", "decoder", "none")
SWEEP_SIGMAS = (15.0, 25.0, 50.0)
ARM_LABELS = {"all": "1->7", "mid": "3->5", "decoder": "4->7", "none": "none"}


# --- data -------------------------------------------------------------------------

def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _manifests(cfg: RunConfig) -> SplitManifest:
    if not cfg.train_manifest or not cfg.val_manifest:
        raise ConfigError("train_manifest and val_manifest must be set")
    for p in (cfg.train_manifest, cfg.val_manifest):
        if not Path(p).is_file():
            raise ConfigError(f"manifest {p!r} does not exist")
    return SplitManifest(read_manifest(cfg.train_manifest), read_manifest(cfg.val_manifest),
                         cfg.patch_size, cfg.patches_per_image)


def degradation_for(sigma: float, split: int, index: int) -> DegradationSpec:
    """Noise realisation per (sigma, split, image), independent of the run seed."""
    return DegradationSpec("gaussian", sigma, _derived_seed(round(sigma * 1000), split, index))


def prepare_data(cfg: RunConfig, sigma: float | None = None) -> TrainData:
    """Patch pairs for training and validation at the configured noise level.

    Patch corners and noise depend only on the image index, split and sigma,
    so every run seed sees the same data.
    """
    sigma = cfg.noise_sigma if sigma is None else sigma
    m = _manifests(cfg)
    out = []
    for split, paths in enumerate((m.train, m.val)):
        pairs = []
        for k, path in enumerate(paths):
            img = load_image(path)
            if img.channels != cfg.image_channels:
                raise ConfigError(f"{path}: {img.channels} channels, config expects {cfg.image_channels}")
            pairs += sample_patches(img, m, _derived_seed(split, k), degradation_for(sigma, split, k))
        out.append(pairs)
    if not out[0]:
        raise ConfigError("training manifest lists no images")
    return TrainData(out[0], out[1])


# --- helpers ----------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_teacher(cfg: RunConfig) -> ModelGraph:
    if not cfg.teacher_checkpoint:
        raise ConfigError("distillation needs teacher_checkpoint (or --teacher); use --kd none to train without")
    if not Path(cfg.teacher_checkpoint).is_file():
        raise ConfigError(f"teacher checkpoint {cfg.teacher_checkpoint!r} does not exist")
    g = build_teacher(cfg.teacher_config())
    ckpt.load_into(g, cfg.teacher_checkpoint)
    g.freeze()
    return g


def _load_model(path) -> ModelGraph:
    if not path or not Path(path).is_file():
        raise ConfigError(f"checkpoint {path!r} does not exist")
    return ckpt.graph_from_checkpoint(path)


def _progress(tag: str):
    def cb(r):
        print(f"[{tag}] epoch {r.epoch}: loss {r.loss_restore:.5f} kd {r.loss_kd:.5f} "
              f"val PSNR {r.val_psnr:.3f} dB fr {r.mean_fr:.3f}", file=sys.stderr, flush=True)
    return cb


def _vmem_export(g: ModelGraph, pairs, path) -> float:
    """Write membrane histograms on up to 8 validation patches; return density."""
    chunk = pairs[:8]
    x = TensorRec(np.stack([p.noisy for p in chunk]))
    out = forward_student(g, x, keep_traces=True)
    lif = g.config.lif
    write_histogram_csv(path, out.v_traces, g.config.T, lif)
    return float(np.mean([voltage_density(v, lif) for v in out.v_traces.values()]))


# --- commands ---------------------------------------------------------------------

def cmd_make_data(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    tr, va = write_synthetic_corpus(out, n_train=args.train_images, n_val=args.val_images,
                                    size=args.size, seed=cfg.seed, channels=cfg.image_channels)
    (out / "run.cfg").write_text(f"train_manifest = {tr.name}\nval_manifest = {va.name}\n")
    print(f"wrote {tr} and {va}")
    return 0


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    data = prepare_data(cfg)
    out = _out_dir(cfg)
    g = build_teacher(cfg.teacher_config(), seed=cfg.seed)
    g, run = train_teacher(g, data, cfg.loss_weights(), cfg.n_epochs, cfg.seed, cfg.batch_size,
                           wall_clock=cfg.wall_clock, on_epoch=_progress("teacher"))
    run.write_csv(out / "teacher_run.csv")
    ckpt.save_checkpoint(g, out / "teacher.ckpt")
    print(f"teacher: val PSNR {run.final.val_psnr:.3f} dB (noisy {run.noisy_psnr:.3f} dB)")
    return 0


def cmd_train_student(cfg: RunConfig, args) -> int:
    kd = cfg.kd_config()
    teacher = _load_teacher(cfg) if kd.active else None
    data = prepare_data(cfg)
    out = _out_dir(cfg)
    g = build_student(cfg.student_config(), seed=cfg.seed)
    g, run = train_student(g, teacher, data, kd, cfg.loss_weights(), cfg.n_epochs, cfg.seed,
                           cfg.batch_size, wall_clock=cfg.wall_clock, on_epoch=_progress("student"))
    run.write_csv(out / "student_run.csv")
    ckpt.save_checkpoint(g, out / "student.ckpt")
    if data.val:
        dens = _vmem_export(g, data.val, out / "student_vmem.csv")
        print(f"membrane density {dens:.6f}")
    print(f"student: val PSNR {run.final.val_psnr:.3f} dB (noisy {run.noisy_psnr:.3f} dB)")
    return 0


def _eval_rows(pred: list[ImageBuffer], ref: list[ImageBuffer], names: list[str]):
    rows = []
    for name, a, b in zip(names, pred, ref):
        s = ssim(a, b) if min(a.height, a.width) >= 11 else float("nan")
        rows.append((name, psnr(a, b), s))
    return rows


def cmd_eval(cfg: RunConfig, args) -> int:
    m = _manifests(cfg)
    clean = [load_image(p) for p in m.val]
    names = [Path(p).name for p in m.val]
    if args.pred:
        pred_paths = read_manifest(args.pred)
        if len(pred_paths) != len(clean):
            raise ConfigError(f"{len(pred_paths)} predictions for {len(clean)} references")
        pred = [load_image(p) for p in pred_paths]
    else:
        g = _load_model(args.checkpoint or cfg.student_checkpoint)
        pred = []
        for k, img in enumerate(clean):
            noisy = degrade(img, degradation_for(cfg.noise_sigma, 1, k))
            out, _, _ = restore(g, TensorRec(noisy.values[None]))
            pred.append(ImageBuffer(np.clip(out.data[0], 0, 1)))
    rows = _eval_rows(pred, clean, names)
    out = _out_dir(cfg)
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    with open(out / "eval.csv", "w") as fh:
        fh.write("image,psnr,ssim\n")
        for name, p, s in rows:
            fh.write(f"{name},{p:.6f},{s:.6f}\n")
        fh.write(f"mean,{mean_p:.6f},{mean_s:.6f}\n")
    print(f"mean PSNR {mean_p:.3f} dB, SSIM {mean_s:.4f}")
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    path = args.checkpoint or cfg.student_checkpoint
    g = _load_model(path) if path else build_student(cfg.student_config(), seed=cfg.seed)
    if g.kind != "student":
        raise ConfigError("profile needs a student checkpoint")
    m = _manifests(cfg)
    p = m.patch_size
    samples = []
    for k, img_path in enumerate(m.val[:8]):
        img = degrade(load_image(img_path), degradation_for(cfg.noise_sigma, 1, k))
        samples.append(img.values[:, :p, :p])
    snn = profile_snn(g, samples)
    ann = profile_ann(build_teacher(TeacherConfig.mirror(g.config)), samples)
    ratio = compare(snn, ann)
    out = _out_dir(cfg)
    (out / "energy_snn.txt").write_text(snn.to_text())
    (out / "energy_snn.csv").write_text(snn.to_csv())
    (out / "energy_ann.txt").write_text(ann.to_text())
    (out / "energy_ann.csv").write_text(ann.to_csv())
    (out / "energy.json").write_text(snn.to_json())
    print(f"SNN {snn.total_uj:.6f} uJ, ANN {ann.total_uj:.6f} uJ, ratio {ratio:.4f}")
    return 0


def _sweep_seeds(cfg: RunConfig, n: int) -> list[int]:
    return [cfg.seed + i for i in range(n)]


def cmd_sweep_stages(cfg: RunConfig, args) -> int:
    """Distillation stage ablation: 4 arms x 3 noise levels x ``--seeds`` seeds."""
    out = _out_dir(cfg)
    seeds = _sweep_seeds(cfg, args.seeds)
    sigmas = (cfg.sigma,) if args.single_sigma and cfg.sigma else SWEEP_SIGMAS
    rows = []
    conv_rows = []
    dens: dict[str, list[float]] = {}
    for sigma in sigmas:
        data = prepare_data(cfg, sigma)
        teacher = build_teacher(cfg.teacher_config(), seed=cfg.seed)
        teacher, trun = train_teacher(teacher, data, cfg.loss_weights(), cfg.n_epochs, cfg.seed,
                                      cfg.batch_size, wall_clock=False,
                                      on_epoch=_progress(f"teacher s{sigma:g}"))
        ckpt.save_checkpoint(teacher, out / f"teacher_sigma{sigma:g}.ckpt")
        target = trun.noisy_psnr + 1.5
        for arm in SWEEP_ARMS:
            kd = cfg.kd_config(arm)
            for seed in seeds:
                g = build_student(cfg.student_config(), seed=seed)
                g, run = train_student(g, teacher if kd.active else None, data, kd, cfg.loss_weights(),
                                       cfg.n_epochs, seed, cfg.batch_size, wall_clock=False,
                                       on_epoch=_progress(f"{arm} s{sigma:g} seed{seed}"))
                run.write_csv(out / f"run_{arm}_sigma{sigma:g}_seed{seed}.csv")
                reach = run.epochs_to_reach(target)
                f = run.final
                rows.append((arm, sigma, seed, f.val_psnr, f.val_ssim, reach, f.volt_density, run.noisy_psnr))
                if arm in ("decoder", "none") and data.val:
                    d = _vmem_export(g, data.val, out / f"vmem_{arm}_sigma{sigma:g}_seed{seed}.csv")
                    dens.setdefault(arm, []).append(d)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("arm,stages,sigma,seed,val_psnr,val_ssim,epochs_to_target,volt_density,noisy_psnr\n")
        for arm, sigma, seed, p, s, reach, vd, noisy in rows:
            fh.write(f"{arm},{ARM_LABELS[arm]},{sigma:g},{seed},{p:.6f},{s:.6f},"
                     f"{'' if reach is None else reach},{vd:.6f},{noisy:.6f}\n")
    table = sweep_table(rows, sigmas)
    (out / "sweep_table.txt").write_text(table)
    for sigma in sigmas:
        kd_e = [r[5] for r in rows if r[0] == "decoder" and r[1] == sigma]
        no_e = [r[5] for r in rows if r[0] == "none" and r[1] == sigma]
        conv_rows.append((sigma, kd_e, no_e))
    report = convergence_report(conv_rows, dens)
    (out / "sweep_report.txt").write_text(report)
    print(table + report, end="")
    return 0


def sweep_table(rows, sigmas) -> str:
    """Stage-ablation table: arms as rows, one PSNR/SSIM column pair per sigma."""
    head = ["stages"] + [f"sigma={s:g} PSNR/SSIM" for s in sigmas]
    body = []
    for arm in SWEEP_ARMS:
        cells = [ARM_LABELS[arm]]
        for s in sigmas:
            sel = [r for r in rows if r[0] == arm and r[1] == s]
            if sel:
                cells.append(f"{np.mean([r[3] for r in sel]):.3f}/{np.mean([r[4] for r in sel]):.4f}")
            else:
                cells.append("-")
        body.append(cells)
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def convergence_report(conv_rows, dens) -> str:
    lines = ["", "epochs to reach noisy PSNR + 1.5 dB (decoder KD vs none):"]
    for sigma, kd_e, no_e in conv_rows:
        def fmt(v):
            return ",".join("never" if e is None else str(e) for e in v)
        ratio = "n/a"
        if kd_e and no_e and all(e is not None for e in kd_e + no_e):
            ratio = f"{np.mean(no_e) / np.mean(kd_e):.3f}"
        lines.append(f"  sigma={sigma:g}: kd [{fmt(kd_e)}] none [{fmt(no_e)}] speed-up ratio {ratio}")
    if dens:
        lines.append("membrane density (|v| > 0.01 v_th):")
        for arm in ("decoder", "none"):
            if arm in dens:
                lines.append(f"  {ARM_LABELS[arm]}: {np.mean(dens[arm]):.6f}")
    return "\n".join(lines) + "\n"


def cmd_denoise(cfg: RunConfig, args) -> int:
    if not args.input or not args.output:
        raise ConfigError("denoise needs --input and --output")
    g = _load_model(args.checkpoint or cfg.student_checkpoint)
    img = load_image(args.input)
    out, _, _ = restore(g, TensorRec(img.values[None]))
    save_image(args.output, ImageBuffer(np.clip(out.data[0], 0, 1)))
    print(f"wrote {args.output}")
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "sweep-stages": cmd_sweep_stages,
    "denoise": cmd_denoise,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikeir", description="Spiking image restoration with feature distillation.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--kd", help="stage set: all, mid, decoder, none, or a comma list")
    ap.add_argument("--gamma", type=float)
    ap.add_argument("--lambda", dest="lambda_freq", type=float)
    ap.add_argument("--timesteps", type=int)
    ap.add_argument("--sigma", type=float)
    ap.add_argument("--out")
    ap.add_argument("--teacher", dest="teacher_checkpoint", help="teacher checkpoint path")
    ap.add_argument("--checkpoint", help="model checkpoint for eval, profile and denoise")
    ap.add_argument("--input", help="denoise: input image (PGM/PPM)")
    ap.add_argument("--output", help="denoise: output image path")
    ap.add_argument("--pred", help="eval: manifest of restored images to score instead of running a model")
    ap.add_argument("--seeds", type=int, default=3, help="sweep-stages: seeds per arm")
    ap.add_argument("--single-sigma", action="store_true", help="sweep-stages: only the configured sigma")
    ap.add_argument("--train-images", type=int, default=25, help="make-data: training images")
    ap.add_argument("--val-images", type=int, default=5, help="make-data: validation images")
    ap.add_argument("--size", type=int, default=64, help="make-data: image side")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, {
        "seed": args.seed, "epochs": args.epochs, "kd": args.kd, "gamma": args.gamma,
        "lambda_freq": args.lambda_freq, "timesteps": args.timesteps, "sigma": args.sigma,
        "out": args.out, "teacher_checkpoint": args.teacher_checkpoint,
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.kd is not None:
            cfg.kd_config()
        return COMMANDS[args.command](cfg, args)
    except SpikeIRError as e:
        print(f"spikeir {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
