"""Sweep orchestration: dataset, training, sampling grid, report rows.

One INI config file drives an experiment end to end. All randomness
flows from a single master seed through named sub-streams (dataset,
gray, train, cell:<id>), so a rerun reproduces the report byte for byte
and completed grid cells can be skipped by their content hash.

Report CSV columns:
    cell_id, solver, steps, init, seed, chr, ncfr, tfr, fid, n_samples
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import counting
from .metrics import DownsampleFeatures, failure_rates, pearson, spearman
from .models import (TinyNet, TrainConfig, load_checkpoint, save_checkpoint,
                     train_tinynet)
from .samplers import SamplerConfig, sample
from .schedules import NoiseSchedule, build_schedule
from .shapes import (PROFILES, derive_seed, downscale, generate_dataset,
                     upscale)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "default_config",
    "prepare_dataset",
    "train_model",
    "run_sweep",
    "evaluate_images",
    "read_report",
    "write_report_tables",
    "correlate_report",
]

REPORT_HEADER = "cell_id,solver,steps,init,seed,chr,ncfr,tfr,fid,n_samples"


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    # dataset
    profile: str = "standard"
    n_images: int = 30000
    image_size: int = 64
    model_scale: int = 2          # model raster = image_size / model_scale
    gray: bool = False            # gray intensity variant (joint testbed)
    # schedule
    schedule_kind: str = "linear"
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    # model / training
    hidden: tuple = (512, 512)
    activation: str = "silu"
    time_dim: int = 16
    lr: float = 2e-4
    train_steps: int = 40000
    batch: int = 256
    # sweep grid
    solvers: tuple = ("solver1", "solver2", "ancestral")
    step_counts: tuple = (25, 50, 100)
    inits: tuple = ("normal", "diffused")
    seeds: tuple = (0, 1, 2)
    n_samples: int = 4000
    out_dir: str = "runs/default"

    @property
    def model_size(self) -> int:
        return self.image_size // self.model_scale

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule_kind, self.T, self.beta_min,
                              self.beta_max)


def _parse_tuple(raw: str, cast):
    return tuple(cast(v.strip()) for v in raw.split(",") if v.strip())


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        s = cp["experiment"]
        cfg.master_seed = s.getint("master_seed", cfg.master_seed)
        cfg.out_dir = s.get("out_dir", cfg.out_dir)
    if cp.has_section("dataset"):
        s = cp["dataset"]
        cfg.profile = s.get("profile", cfg.profile)
        cfg.n_images = s.getint("n", cfg.n_images)
        cfg.image_size = s.getint("image_size", cfg.image_size)
        cfg.model_scale = s.getint("model_scale", cfg.model_scale)
        cfg.gray = s.getboolean("gray", cfg.gray)
    if cp.has_section("schedule"):
        s = cp["schedule"]
        cfg.schedule_kind = s.get("kind", cfg.schedule_kind)
        cfg.T = s.getint("T", cfg.T)
        cfg.beta_min = s.getfloat("beta_min", cfg.beta_min)
        cfg.beta_max = s.getfloat("beta_max", cfg.beta_max)
    if cp.has_section("model"):
        s = cp["model"]
        if s.get("hidden"):
            cfg.hidden = _parse_tuple(s["hidden"], int)
        cfg.activation = s.get("activation", cfg.activation)
        cfg.time_dim = s.getint("time_dim", cfg.time_dim)
    if cp.has_section("train"):
        s = cp["train"]
        cfg.lr = s.getfloat("lr", cfg.lr)
        cfg.train_steps = s.getint("steps", cfg.train_steps)
        cfg.batch = s.getint("batch", cfg.batch)
    if cp.has_section("sweep"):
        s = cp["sweep"]
        if s.get("solvers"):
            cfg.solvers = _parse_tuple(s["solvers"], str)
        if s.get("steps"):
            cfg.step_counts = _parse_tuple(s["steps"], int)
        if s.get("inits"):
            cfg.inits = _parse_tuple(s["inits"], str)
        if s.get("seeds"):
            cfg.seeds = _parse_tuple(s["seeds"], int)
        cfg.n_samples = s.getint("n_samples", cfg.n_samples)
    return cfg


def default_config() -> str:
    """INI text with every knob spelled out."""
    cfg = ExperimentConfig()
    return f"""[experiment]
master_seed = {cfg.master_seed}
out_dir = {cfg.out_dir}

[dataset]
profile = {cfg.profile}
n = {cfg.n_images}
image_size = {cfg.image_size}
model_scale = {cfg.model_scale}
gray = {str(cfg.gray).lower()}

[schedule]
kind = {cfg.schedule_kind}
T = {cfg.T}
beta_min = {cfg.beta_min}
beta_max = {cfg.beta_max}

[model]
hidden = {",".join(map(str, cfg.hidden))}
activation = {cfg.activation}
time_dim = {cfg.time_dim}

[train]
lr = {cfg.lr}
steps = {cfg.train_steps}
batch = {cfg.batch}

[sweep]
solvers = {",".join(cfg.solvers)}
steps = {",".join(map(str, cfg.step_counts))}
inits = {",".join(cfg.inits)}
seeds = {",".join(map(str, cfg.seeds))}
n_samples = {cfg.n_samples}
"""


# ---------------------------------------------------------------------------
# dataset and training
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    images: np.ndarray          # native-resolution [0,1] images
    scenes: list
    model_flat: np.ndarray      # model-scale rows in [-1, 1]
    masks: np.ndarray | None = None   # gray variant occupancy masks
    joint_flat: np.ndarray | None = None


def to_unit(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def from_unit(x: np.ndarray) -> np.ndarray:
    return np.asarray(x) * 2.0 - 1.0


def prepare_dataset(cfg: ExperimentConfig) -> PreparedData:
    """Deterministic dataset build from the config's master seed."""
    profile = PROFILES[cfg.profile]
    seed = derive_seed(cfg.master_seed, "dataset")
    images, scenes = generate_dataset(cfg.n_images, profile, seed=seed,
                                      image_size=(cfg.image_size,) * 2)
    masks = None
    joint_flat = None
    if cfg.gray:
        from .joint import make_gray_dataset
        images, masks = make_gray_dataset(
            scenes, seed=derive_seed(cfg.master_seed, "gray"))
        small_img = downscale(images, cfg.model_scale)
        small_mask = downscale(masks, cfg.model_scale)
        joint = np.stack([small_img, small_mask], axis=1)
        joint_flat = from_unit(joint.reshape(len(joint), -1))
    small = downscale(images, cfg.model_scale)
    model_flat = from_unit(small.reshape(len(small), -1))
    return PreparedData(images=images, scenes=scenes, model_flat=model_flat,
                        masks=masks, joint_flat=joint_flat)


def train_model(cfg: ExperimentConfig, data: PreparedData,
                jdm: bool = False, log_every: int = 0):
    """Train the denoiser (image-only or joint) defined by the config."""
    size = cfg.model_size
    tc = TrainConfig(lr=cfg.lr, steps=cfg.train_steps, batch=cfg.batch,
                     seed=derive_seed(cfg.master_seed, "train") % 2 ** 32,
                     log_every=log_every)
    if jdm:
        if data.joint_flat is None:
            raise ValueError("config must set gray=true for joint training")
        net = TinyNet(input_dim=2 * size * size, hidden=cfg.hidden,
                      time_dim=cfg.time_dim, activation=cfg.activation,
                      n_channels=2, image_shape=(size, size),
                      seed=cfg.master_seed, dtype=np.float32)
        return train_tinynet(net, data.joint_flat, cfg.schedule(), tc)
    net = TinyNet(input_dim=size * size, hidden=cfg.hidden,
                  time_dim=cfg.time_dim, activation=cfg.activation,
                  n_channels=1, image_shape=(size, size),
                  seed=cfg.master_seed, dtype=np.float32)
    return train_tinynet(net, data.model_flat, cfg.schedule(), tc)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_images(images: np.ndarray, profile, native_size: int = 64,
                    threshold: float = 0.5):
    """Judge a stack of [0,1] images, upscaling to the counter's
    calibrated resolution first when needed."""
    if isinstance(profile, str):
        profile = PROFILES[profile]
    arr = np.asarray(images, dtype=float)
    if arr.shape[-1] < native_size:
        factor = native_size // arr.shape[-1]
        arr = upscale(arr, factor)
    return [counting.judge(img, profile, threshold=threshold) for img in arr]


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _cell_id(cfg: ExperimentConfig, solver: str, steps: int, init: str,
             seed: int) -> str:
    key = (f"master={cfg.master_seed};n={cfg.n_samples};T={cfg.T};"
           f"solver={solver};steps={steps};init={init};seed={seed}")
    return hashlib.sha1(key.encode()).hexdigest()[:12]


def _grid(cfg: ExperimentConfig):
    for solver in cfg.solvers:
        step_list = [cfg.T] if solver == "ancestral" else cfg.step_counts
        for steps in step_list:
            for init in cfg.inits:
                for seed in cfg.seeds:
                    yield solver, int(steps), init, int(seed)


def read_report(path):
    rows = []
    if not os.path.exists(path):
        return rows
    with open(path) as fh:
        header = fh.readline().strip()
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header: {header}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            c = line.split(",")
            rows.append({
                "cell_id": c[0], "solver": c[1], "steps": int(c[2]),
                "init": c[3], "seed": int(c[4]), "chr": float(c[5]),
                "ncfr": float(c[6]), "tfr": float(c[7]), "fid": float(c[8]),
                "n_samples": int(c[9]),
            })
    return rows


def run_sweep(cfg: ExperimentConfig, net: TinyNet, data: PreparedData,
              report_path, threshold: float = 0.5, progress=None):
    """Sample and evaluate every grid cell, appending rows to the report.

    Cells already present in the report (matched by content hash) are
    skipped, so an interrupted sweep resumes without recomputation and a
    completed one is a no-op.
    """
    done = {r["cell_id"] for r in read_report(report_path)}
    schedule = cfg.schedule()
    size = cfg.model_size
    joint = net.n_channels == 2
    train_flat = data.joint_flat if joint else data.model_flat
    featurizer = DownsampleFeatures(8)
    if joint:
        ref_imgs = to_unit(train_flat.reshape(-1, 2, size, size)[:, 0])
    else:
        ref_imgs = to_unit(train_flat.reshape(-1, size, size))
    ref_feats = featurizer(ref_imgs)

    new_file = not os.path.exists(report_path)
    os.makedirs(os.path.dirname(os.path.abspath(report_path)), exist_ok=True)
    with open(report_path, "a") as out:
        if new_file:
            out.write(REPORT_HEADER + "\n")
        for solver, steps, init, seed in _grid(cfg):
            cid = _cell_id(cfg, solver, steps, init, seed)
            if cid in done:
                continue
            cell_seed = derive_seed(cfg.master_seed,
                                    f"cell:{solver}:{steps}:{init}:{seed}")
            sconf = SamplerConfig(solver=solver, steps=steps, init=init,
                                  seed=cell_seed % 2 ** 32)
            flat, _ = sample(net, sconf, schedule, dataset=train_flat,
                             n=cfg.n_samples)
            if joint:
                images = to_unit(flat.reshape(-1, 2, size, size)[:, 0])
            else:
                images = to_unit(flat.reshape(-1, size, size))
            from .metrics import InsufficientSamplesError, frechet_distance
            try:
                fid = frechet_distance(featurizer(images), ref_feats)
            except InsufficientSamplesError:
                fid = float("nan")   # cells below d+1 samples
            verdicts = evaluate_images(images, cfg.profile,
                                       native_size=cfg.image_size,
                                       threshold=threshold)
            rates = failure_rates(verdicts)
            out.write(f"{cid},{solver},{steps},{init},{seed},"
                      f"{rates.chr:.6f},{rates.ncfr:.6f},{rates.tfr:.6f},"
                      f"{fid:.6f},{rates.n}\n")
            out.flush()
            if progress:
                progress(solver, steps, init, seed, rates, fid)
    return read_report(report_path)


# ---------------------------------------------------------------------------
# report shaping
# ---------------------------------------------------------------------------

def _cell_means(rows):
    """Mean metrics per (solver, steps, init) across seeds."""
    groups = {}
    for r in rows:
        key = (r["solver"], r["steps"], r["init"])
        groups.setdefault(key, []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        out[key] = {m: float(np.mean([r[m] for r in rs]))
                    for m in ("chr", "ncfr", "tfr", "fid")}
        out[key]["n_seeds"] = len(rs)
    return out


def write_report_tables(rows, out_prefix):
    """Emit the failure-rate pivot (CSV plus aligned text)."""
    means = _cell_means(rows)
    solvers = sorted({k[0] for k in means},
                     key=lambda s: (s == "ancestral", s))
    inits = sorted({k[2] for k in means}, reverse=True)  # normal first
    csv_lines = ["solver,steps," + ",".join(
        f"chr_{i},ncfr_{i},tfr_{i},fid_{i}" for i in inits)]
    txt = [f"{'solver':<10} {'steps':>6} " + " ".join(
        f"{('CHR% ' + i):>12} {('FID ' + i):>12}" for i in inits)]
    for solver in solvers:
        steps_list = sorted({k[1] for k in means if k[0] == solver})
        for steps in steps_list:
            cells = [means.get((solver, steps, i)) for i in inits]
            if all(c is None for c in cells):
                continue
            csv_parts = [solver, str(steps)]
            txt_parts = [f"{solver:<10} {steps:>6d} "]
            for c in cells:
                if c is None:
                    csv_parts += ["", "", "", ""]
                    txt_parts.append(f"{'-':>12} {'-':>12}")
                else:
                    csv_parts += [f"{c['chr']:.6f}", f"{c['ncfr']:.6f}",
                                  f"{c['tfr']:.6f}", f"{c['fid']:.6f}"]
                    txt_parts.append(f"{100 * c['chr']:>12.2f} "
                                     f"{c['fid']:>12.4f}")
            csv_lines.append(",".join(csv_parts))
            txt.append(" ".join(txt_parts))
    with open(f"{out_prefix}_rates.csv", "w") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    with open(f"{out_prefix}_rates.txt", "w") as fh:
        fh.write("\n".join(txt) + "\n")

    # correlation summary alongside, when the grid is large enough
    results, corr_csv = correlate_report(rows)
    if results:
        with open(f"{out_prefix}_correlations.csv", "w") as fh:
            fh.write(corr_csv + "\n")
        txt.append("")
        txt.append(f"{'metric':<6} {'measure':<9} {'variant':<15} "
                   f"{'coeff':>8} {'p':>10}")
        for (metric, measure, variant), res in sorted(results.items()):
            txt.append(f"{metric:<6} {measure:<9} {variant:<15} "
                       f"{res.coefficient:>8.4f} {res.p_value:>10.4g}")
    return "\n".join(txt)


def correlate_report(rows, out_path=None):
    """Correlations of each failure rate against FID over grid cells.

    Cell means (over seeds) are the observations. Each metric appears in
    two variants: ODE-solver cells only, and with the ancestral rows
    folded in.
    """
    means = _cell_means(rows)
    lines = ["metric,measure,variant,coefficient,p_value,n"]
    results = {}
    for metric in ("chr", "ncfr", "tfr"):
        for variant in ("ode_only", "incl_ancestral"):
            keys = [k for k in means
                    if variant == "incl_ancestral" or k[0] != "ancestral"]
            xs = [means[k]["fid"] for k in keys]
            ys = [means[k][metric] for k in keys]
            if len(xs) < 3 or np.std(xs) == 0 or np.std(ys) == 0:
                continue
            for measure, fn in (("pearson", pearson), ("spearman", spearman)):
                res = fn(xs, ys)
                results[(metric, measure, variant)] = res
                lines.append(f"{metric},{measure},{variant},"
                             f"{res.coefficient:.6f},{res.p_value:.6g},"
                             f"{res.n}")
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return results, "\n".join(lines)
