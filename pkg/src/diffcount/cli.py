"""Command-line entry points.

    diffcount gen-dataset --out data/ --n 30000
    diffcount train --config exp.ini --out model.ckpt [--jdm]
    diffcount sample --config exp.ini --checkpoint model.ckpt --solver solver1 \
        --steps 50 --init normal --seed 0 --n 64 --out samples/ [--jdm]
    diffcount evaluate --dir samples/ --profile standard --out verdicts.csv
    diffcount verify-bounds --out bounds.json
    diffcount convergence --out convergence.csv
    diffcount sweep --config exp.ini --checkpoint model.ckpt --out report.csv
    diffcount correlate --report report.csv --out correlations.csv
    diffcount report --report report.csv --out tables
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_gen_dataset(sub):
    p = sub.add_parser("gen-dataset", help="generate a labeled shape dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--profile", default="standard",
                   choices=["standard", "calibration"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--format", default="pgm", choices=["pgm", "png"])
    p.add_argument("--gray", action="store_true",
                   help="gray intensity variant with occupancy masks")


def _cmd_gen_dataset(args):
    from .shapes import (PROFILES, generate_dataset, write_manifest,
                         write_pgm, write_png)
    os.makedirs(args.out, exist_ok=True)
    profile = PROFILES[args.profile]
    images, scenes = generate_dataset(args.n, profile, seed=args.seed,
                                      image_size=(args.size, args.size))
    masks = None
    if args.gray:
        from .joint import make_gray_dataset
        images, masks = make_gray_dataset(scenes, seed=args.seed)
    writer = write_pgm if args.format == "pgm" else write_png
    names = []
    for i, img in enumerate(images):
        name = f"img_{i:06d}.{args.format}"
        writer(img, os.path.join(args.out, name))
        if masks is not None:
            writer(masks[i], os.path.join(args.out, f"mask_{i:06d}.{args.format}"))
        names.append(name)
    write_manifest(scenes, names, os.path.join(args.out, "manifest.csv"))
    print(f"wrote {args.n} images to {args.out}")


def _add_train(sub):
    p = sub.add_parser("train", help="train the denoising model")
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--jdm", action="store_true",
                   help="joint image+mask channels")
    p.add_argument("--log-every", type=int, default=0)


def _cmd_train(args):
    from .experiment import load_config, prepare_dataset, train_model
    from .models import save_checkpoint
    cfg = load_config(args.config)
    if args.jdm and not cfg.gray:
        print("note: --jdm forces the gray dataset variant", file=sys.stderr)
        cfg.gray = True
    data = prepare_dataset(cfg)
    result = train_model(cfg, data, jdm=args.jdm, log_every=args.log_every)
    save_checkpoint(result.net, args.out)
    print(f"trained {result.steps} steps; "
          f"val loss {result.initial_val_loss:.4f} -> "
          f"{result.final_val_loss:.4f}; saved {args.out}")


def _add_sample(sub):
    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--solver", default="solver1",
                   choices=["ancestral", "solver1", "solver2", "reference"])
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--init", default="normal", choices=["normal", "diffused"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jdm", action="store_true")
    p.add_argument("--trajectory", help="CSV path for the trajectory dump")


def _cmd_sample(args):
    from .experiment import load_config, prepare_dataset, to_unit
    from .models import load_checkpoint
    from .samplers import SamplerConfig, sample, trajectory_to_csv
    from .shapes import write_pgm
    cfg = load_config(args.config)
    if args.jdm:
        cfg.gray = True
    net = load_checkpoint(args.checkpoint)
    if args.jdm != (net.n_channels == 2):
        raise SystemExit("--jdm flag does not match checkpoint channel count")
    steps = cfg.T if args.solver == "ancestral" else args.steps
    data = prepare_dataset(cfg) if args.init == "diffused" else None
    train_flat = None
    if data is not None:
        train_flat = data.joint_flat if args.jdm else data.model_flat
    sconf = SamplerConfig(solver=args.solver, steps=steps, init=args.init,
                          seed=args.seed,
                          record_trajectory=bool(args.trajectory))
    flat, traj = sample(net, sconf, cfg.schedule(), dataset=train_flat,
                        n=args.n)
    size = net.image_shape[0] if net.image_shape else cfg.model_size
    os.makedirs(args.out, exist_ok=True)
    if net.n_channels == 2:
        images = to_unit(flat.reshape(args.n, 2, size, size))
        for i in range(args.n):
            write_pgm(images[i, 0], os.path.join(args.out, f"sample_{i:05d}.pgm"))
            write_pgm(images[i, 1], os.path.join(args.out, f"sample_{i:05d}_mask.pgm"))
    else:
        images = to_unit(flat.reshape(args.n, size, size))
        for i in range(args.n):
            write_pgm(images[i], os.path.join(args.out, f"sample_{i:05d}.pgm"))
    if args.trajectory:
        trajectory_to_csv(traj, args.trajectory)
    print(f"wrote {args.n} samples to {args.out}")


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="count and judge a directory of images")
    p.add_argument("--dir", required=True)
    p.add_argument("--profile", default="standard",
                   choices=["standard", "calibration"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--native-size", type=int, default=64,
                   help="upscale smaller images to this size before counting")
    p.add_argument("--out", required=True, help="verdict CSV path")


def _cmd_evaluate(args):
    from .experiment import evaluate_images
    from .metrics import failure_rates
    from .shapes import read_pgm
    names = sorted(f for f in os.listdir(args.dir)
                   if f.endswith((".pgm", ".png")) and "mask" not in f)
    if not names:
        raise SystemExit(f"no images found in {args.dir}")
    imgs = []
    for f in names:
        path = os.path.join(args.dir, f)
        if f.endswith(".pgm"):
            imgs.append(read_pgm(path))
        else:
            from PIL import Image
            imgs.append(np.asarray(Image.open(path).convert("L"),
                                   dtype=float) / 255.0)
    verdicts = evaluate_images(np.array(imgs), args.profile,
                               native_size=args.native_size,
                               threshold=args.threshold)
    with open(args.out, "w") as fh:
        fh.write("filename,n_triangle,n_square,n_pentagon,counting_ready,"
                 "is_hallucination,low_confidence\n")
        for name, v in zip(names, verdicts):
            fh.write(f"{name},{v.counts['triangle']},{v.counts['square']},"
                     f"{v.counts['pentagon']},{int(v.counting_ready)},"
                     f"{int(v.is_hallucination)},{int(v.low_confidence)}\n")
    rates = failure_rates(verdicts)
    print(f"n={rates.n}  CHR={100 * rates.chr:.2f}%  "
          f"NCFR={100 * rates.ncfr:.2f}%  TFR={100 * rates.tfr:.2f}%")


def _add_verify_bounds(sub):
    p = sub.add_parser("verify-bounds",
                       help="numerically check the error-bound identities")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--T", type=int, nargs="+", default=[10, 100, 1000])
    p.add_argument("--perturbations", type=float, nargs="+",
                   default=[0.0, 0.05, 0.1, 0.2])


def _cmd_verify_bounds(args):
    from .bounds import (convergence_order, diffused_prior_gap,
                         trajectory_error_decomposition,
                         verify_kl_decomposition)
    from .models import GMM, GMMScoreModel
    from .samplers import SamplerConfig
    from .schedules import build_schedule
    report = {"kl_decomposition": [], "prior_gap": [], "budget": {},
              "convergence": {}}
    for T in args.T:
        sched = build_schedule("linear", T)
        gap = diffused_prior_gap(np.array([10.0]), 1.0, sched)
        report["prior_gap"].append({"T": T, "mu0": 10.0, "var0": 1.0,
                                    "gap": float(gap)})
        for pert in args.perturbations:
            dec = verify_kl_decomposition(T, sched, pert)
            report["kl_decomposition"].append({
                "T": T, "perturbation": pert, "lhs": float(dec.lhs),
                "rhs": float(dec.rhs), "prior_gap": float(dec.prior_gap),
                "gap": float(dec.gap),
                "holds": bool(dec.lhs <= dec.rhs + 1e-9)})
    sched = build_schedule("linear", 100)
    gmm = GMM([1.0], [[0.0]], [1e6])
    model = GMMScoreModel(gmm, sched)
    budget = trajectory_error_decomposition(
        model, model.with_bias(0.01),
        SamplerConfig(solver="solver1", steps=32, seed=0), gmm, sched,
        initial_offset=1e-3)
    report["budget"] = {
        "propagated_initial": float(budget.propagated_initial),
        "model_error_contrib": float(budget.model_error_contrib),
        "truncation_contrib": float(budget.truncation_contrib),
        "total_endpoint_error": float(budget.total_endpoint_error),
        "sum_vs_total_rel": float(budget.sum_vs_total_rel),
    }
    sched = build_schedule("linear", 1000)
    gmm2 = GMM([0.5, 0.5], [[-0.5], [0.5]], [0.3, 0.5])
    for solver in ("solver1", "solver2"):
        slope = convergence_order(solver, gmm2, sched, [8, 16, 32, 64, 128])
        report["convergence"][solver] = float(slope)
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _add_convergence(sub):
    p = sub.add_parser("convergence", help="solver convergence study CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--solvers", default="solver1,solver2")
    p.add_argument("--Ns", default="8,16,32,64,128")
    p.add_argument("--seed", type=int, default=0)


def _cmd_convergence(args):
    from .bounds import convergence_order
    from .models import GMM
    from .schedules import build_schedule
    sched = build_schedule("linear", 1000)
    gmm = GMM([0.5, 0.5], [[-0.5], [0.5]], [0.3, 0.5])
    Ns = [int(v) for v in args.Ns.split(",")]
    lines = ["solver,N,error,slope"]
    for solver in args.solvers.split(","):
        slope, errors = convergence_order(solver, gmm, sched, Ns,
                                          seed=args.seed, return_errors=True)
        for N, err in errors:
            lines.append(f"{solver},{N},{err:.9g},{slope:.4f}")
        print(f"{solver}: slope {slope:.3f}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="run the full sampling grid")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--threshold", type=float, default=None,
                   help="counting threshold (default 0.5, 0.3 for gray)")


def _cmd_sweep(args):
    from .experiment import load_config, prepare_dataset, run_sweep
    from .joint import GRAY_THRESHOLD
    from .models import load_checkpoint
    cfg = load_config(args.config)
    net = load_checkpoint(args.checkpoint)
    if net.n_channels == 2 and not cfg.gray:
        cfg.gray = True
    if not os.path.exists(args.checkpoint):
        raise SystemExit(f"missing checkpoint {args.checkpoint}")
    threshold = args.threshold
    if threshold is None:
        threshold = GRAY_THRESHOLD if cfg.gray else 0.5
    data = prepare_dataset(cfg)

    def progress(solver, steps, init, seed, rates, fid):
        print(f"  {solver:<9} steps={steps:<5d} init={init:<8} seed={seed}: "
              f"CHR={100 * rates.chr:5.2f}%  FID={fid:.4f}")

    run_sweep(cfg, net, data, args.out, threshold=threshold,
              progress=progress)
    print(f"report at {args.out}")


def _add_correlate(sub):
    p = sub.add_parser("correlate",
                       help="failure-rate vs FID correlations from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)


def _cmd_correlate(args):
    from .experiment import correlate_report, read_report
    rows = read_report(args.report)
    if not rows:
        print("empty report; nothing to correlate")
        return
    _, text = correlate_report(rows, args.out)
    print(text)


def _add_report(sub):
    p = sub.add_parser("report", help="format a sweep report into tables")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default="tables", help="output path prefix")


def _cmd_report(args):
    from .experiment import read_report, write_report_tables
    rows = read_report(args.report)
    if not rows:
        print("warning: empty report")
        for suffix in ("_rates.csv", "_rates.txt"):
            with open(args.out + suffix, "w") as fh:
                fh.write("")
        return
    print(write_report_tables(rows, args.out))


_COMMANDS = {
    "gen-dataset": _cmd_gen_dataset,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "verify-bounds": _cmd_verify_bounds,
    "convergence": _cmd_convergence,
    "sweep": _cmd_sweep,
    "correlate": _cmd_correlate,
    "report": _cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="diffcount",
        description="diffusion sampling lab with exact counting metrics")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_gen_dataset, _add_train, _add_sample, _add_evaluate,
                _add_verify_bounds, _add_convergence, _add_sweep,
                _add_correlate, _add_report):
        add(sub)
    args = parser.parse_args(argv)
    _COMMANDS[args.command](args)


if __name__ == "__main__":
    main()
