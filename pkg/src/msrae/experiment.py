"""End-to-end experiment driver: cohorts, per-(variant, fold) jobs, reports.

Directory layout under the configured output directory::

    <out_dir>/<cohort-name>/data/               manifest.json + patches.msrt
    <out_dir>/<cohort-name>/<variant>/fold<k>/  checkpoint/, train_log.csv, scores.csv
    <out_dir>/<cohort-name>/report/             summary.json, curves/*.csv

Every job derives its seed from the master seed as the entropy tuple
``(master_seed, variant_index, fold)`` (variant index in the canonical
variant tuple), fed to the Philox seed sequence; fold x variant jobs are
therefore independent and can run in parallel processes.  Wall-clock
numbers are confined to the ``wall_ms`` column of training logs, so
checkpoints, scores, and reports are byte-reproducible.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits
except ImportError:  # pragma: no cover
    _threadpool_limits = None


def _single_threaded_blas():
    """BLAS pinned to one thread inside jobs: multi-threaded gemm is slower
    at these sizes and would tie results to the thread count."""
    return _threadpool_limits(1) if _threadpool_limits is not None else nullcontext()

from . import corrupt as corrupt_mod
from . import detect as detect_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import phantom as phantom_mod
from . import train as train_mod
from .tensor import Rng

TRAIN_GRADE_THRESHOLD = 0.2  # training pools never see grades at or above this


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    master_seed: int = 1337
    out_dir: str = "out"
    cohort: phantom_mod.CohortSpec = field(default_factory=phantom_mod.CohortSpec)
    variants: tuple[str, ...] = corrupt_mod.VARIANTS
    loss: model_mod.LossConfig = field(default_factory=model_mod.LossConfig)
    train: train_mod.TrainConfig = field(default_factory=train_mod.TrainConfig)
    model: model_mod.ModelConfig = field(default_factory=model_mod.ModelConfig)
    tasks: tuple[metrics_mod.TaskSpec, ...] = metrics_mod.DEFAULT_TASKS
    calibration_grade_threshold: float = 0.2
    gridsearch_scale_factor: float = 0.25

    def __post_init__(self):
        for v in self.variants:
            if v not in corrupt_mod.VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")


def desk_config(seed: int = 1337, out_dir: str = "out") -> ExperimentConfig:
    """Reduced configuration sized for a laptop CPU run.

    Patches shrink to 12x12x4 voxels with a proportionally larger vessel
    so rasterized grades stay within tolerance; the 64-channel code keeps
    the autoencoder overcomplete (64 * 3 * 3 * 1 = 576 = 4 * 12 * 12).
    """
    cohort = phantom_mod.CohortSpec(
        n_subjects=20, k_folds=5, patch_shape=(4, 12, 12), seed=seed,
        appearance=phantom_mod.AppearanceConfig(
            wall_radius_frac=(0.36, 0.40), lumen_intensity=(0.40, 0.46),
            wall_intensity=(0.30, 0.34), background_intensity=(0.28, 0.32),
            texture_noise=(0.012, 0.02), wall_texture=(0.30, 0.40),
            wall_texture_density=0.5, center_jitter=(0.02, 0.08)),
        name="desk20x5")
    return ExperimentConfig(
        name="desk", master_seed=seed, out_dir=out_dir, cohort=cohort,
        model=model_mod.ModelConfig(enc_channels=(8, 64), dec_channels=(16, 8)),
        train=train_mod.TrainConfig(scale=0.1),
    )


def full_config(seed: int = 1337, out_dir: str = "out") -> ExperimentConfig:
    """Full-protocol preset: 90 subjects, 10 folds, 80x80x8 patches."""
    cohort = phantom_mod.CohortSpec(
        n_subjects=90, k_folds=10, patch_shape=(8, 80, 80), seed=seed,
        name="full90x10")
    return ExperimentConfig(
        name="full", master_seed=seed, out_dir=out_dir, cohort=cohort,
        model=model_mod.ModelConfig(enc_channels=(16, 96), dec_channels=(32, 16)),
        train=train_mod.TrainConfig(scale=1.0),
    )


# --------------------------------------------------------------------- #
# config (de)serialization                                               #
# --------------------------------------------------------------------- #


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["tasks"] = [{"name": t.name, "negative": list(t.negative), "positive": list(t.positive)}
                  for t in cfg.tasks]
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    try:
        cohort_d = dict(d["cohort"])
        cohort_d["patch_shape"] = tuple(cohort_d["patch_shape"])
        cohort_d["strata"] = tuple(phantom_mod.Stratum(**s) for s in cohort_d["strata"])
        cohort_d["appearance"] = phantom_mod.AppearanceConfig(
            **{k: tuple(v) if isinstance(v, list) else v
               for k, v in cohort_d["appearance"].items()})
        cohort = phantom_mod.CohortSpec(**cohort_d)
        model_d = dict(d["model"])
        model_cfg = model_mod.ModelConfig(
            in_channels=model_d["in_channels"],
            enc_channels=tuple(model_d["enc_channels"]),
            dec_channels=tuple(model_d["dec_channels"]))
        train_d = dict(d["train"])
        train_d["stages"] = tuple(train_mod.Stage(**s) if isinstance(s, dict)
                                  else train_mod.Stage(*s) for s in train_d["stages"])
        train_cfg = train_mod.TrainConfig(**train_d)
        tasks = tuple(metrics_mod.TaskSpec(
            name=t["name"], negative=tuple(t["negative"]), positive=tuple(t["positive"]))
            for t in d["tasks"])
        return ExperimentConfig(
            name=d["name"], master_seed=int(d["master_seed"]), out_dir=d["out_dir"],
            cohort=cohort, variants=tuple(d["variants"]),
            loss=model_mod.LossConfig(**d["loss"]), train=train_cfg, model=model_cfg,
            tasks=tasks,
            calibration_grade_threshold=float(d["calibration_grade_threshold"]),
            gridsearch_scale_factor=float(d["gridsearch_scale_factor"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fp:
        json.dump(config_to_dict(cfg), fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fp:
        try:
            d = json.load(fp)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(d)


# --------------------------------------------------------------------- #
# paths and seeds                                                        #
# --------------------------------------------------------------------- #


def cohort_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, cfg.cohort.name, "data")


def job_dir(cfg: ExperimentConfig, variant: str, fold: int) -> str:
    return os.path.join(cfg.out_dir, cfg.cohort.name, variant, f"fold{fold}")


def report_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, cfg.cohort.name, "report")


def job_seed(master_seed: int, variant: str, fold: int) -> tuple[int, int, int]:
    """Documented job-seed derivation: (master seed, variant index, fold)."""
    return (int(master_seed), corrupt_mod.VARIANTS.index(variant), int(fold))


def _check_job(cfg: ExperimentConfig, variant: str, fold: int) -> None:
    if variant not in cfg.variants:
        raise ConfigError(f"variant {variant!r} not in config variants {cfg.variants}")
    if not 0 <= fold < cfg.cohort.k_folds:
        raise ConfigError(f"fold {fold} outside [0, {cfg.cohort.k_folds})")


def _load_cohort(cfg: ExperimentConfig) -> phantom_mod.Cohort:
    path = cohort_dir(cfg)
    try:
        return phantom_mod.load_cohort(path)
    except FileNotFoundError as exc:
        raise MissingArtifactError(
            f"cohort not found at {path}; run gen-data first") from exc


# --------------------------------------------------------------------- #
# commands                                                               #
# --------------------------------------------------------------------- #


def run_gen_data(cfg: ExperimentConfig, force: bool = False) -> dict:
    path = cohort_dir(cfg)
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"cohort directory {path} is not empty (use --force)")
    cohort = phantom_mod.build_cohort(cfg.cohort)
    phantom_mod.save_cohort(path, cohort)
    summary = {
        "path": path,
        "n_subjects": cfg.cohort.n_subjects,
        "k_folds": cfg.cohort.k_folds,
        "n_patches": len(cohort.patches),
        "strata": phantom_mod.stratum_counts(cohort),
        "fold_split_subjects": [
            {"train": len(f.train), "val": len(f.val), "test": len(f.test)}
            for f in cohort.folds],
    }
    return summary


def run_train(cfg: ExperimentConfig, variant: str, fold: int, full: bool = False) -> str:
    """Train one (variant, fold) job; returns the checkpoint directory."""
    _check_job(cfg, variant, fold)
    cohort = _load_cohort(cfg)
    train_cfg = replace(cfg.train, scale=1.0) if full else cfg.train
    spec = corrupt_mod.spec_for_variant(variant)
    seed = job_seed(cfg.master_seed, variant, fold)
    rng = Rng(seed)
    model_mod.check_code_capacity(cfg.model, cfg.cohort.patch_shape)
    params = model_mod.init_params(cfg.model, rng.split(0))
    pool, pool_ids = cohort.train_pool(fold, TRAIN_GRADE_THRESHOLD)

    out = job_dir(cfg, variant, fold)
    os.makedirs(out, exist_ok=True)
    log_path = os.path.join(out, "train_log.csv")
    header = train_mod.schedule_header(train_cfg, variant=variant, fold=fold, seed=seed)
    with open(log_path, "w", newline="") as fp:
        for line in header:
            fp.write(line + "\n")
        fp.write(",".join(train_mod.LOG_COLUMNS) + "\n")
        fp.flush()

        def on_epoch(row: dict) -> None:
            fp.write(",".join(
                repr(row[c]) if isinstance(row[c], float) else str(row[c])
                for c in train_mod.LOG_COLUMNS) + "\n")
            fp.flush()

        train_mod.train(params, pool, spec, cfg.loss, train_cfg, rng.split(1),
                        pool_ids=pool_ids, on_epoch=on_epoch)
    ckpt = os.path.join(out, "checkpoint")
    model_mod.save_checkpoint(ckpt, params, cfg.loss)
    return ckpt


SCORE_COLUMNS = ("patch_id", "subject_id", "split", "stenosis_grade", "abnormality_grade")


def run_score(cfg: ExperimentConfig, variant: str, fold: int) -> str:
    """Calibrate on validation normals and score validation + test patches."""
    _check_job(cfg, variant, fold)
    cohort = _load_cohort(cfg)
    ckpt = os.path.join(job_dir(cfg, variant, fold), "checkpoint")
    if not os.path.isdir(ckpt):
        raise MissingArtifactError(f"checkpoint not found at {ckpt}; run train first")
    params, _ = model_mod.load_checkpoint(ckpt)
    normals = cohort.normal_patches(fold, "val", cfg.calibration_grade_threshold)
    stats = detect_mod.calibrate(params, normals)
    rows = cohort.eval_rows(fold)
    grades = detect_mod.score_patches(params, stats, np.stack([r.tensor for r in rows]))
    path = os.path.join(job_dir(cfg, variant, fold), "scores.csv")
    with open(path, "w", newline="") as fp:
        fp.write(f"# calibration mu={stats.mu!r} sigma={stats.sigma!r} "
                 f"n_voxels={stats.n_voxels} threshold={stats.threshold!r} "
                 f"grade_threshold={cfg.calibration_grade_threshold!r}\n")
        fp.write(",".join(SCORE_COLUMNS) + "\n")
        for row, g in zip(rows, grades):
            fp.write(f"{row.patch_id},{row.subject_id},{row.split},"
                     f"{row.stenosis_grade!r},{int(g)}\n")
    return path


def read_scores(path) -> tuple[dict, list[dict]]:
    """Parse a scores CSV back into (calibration header fields, rows)."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"scores file not found: {path}")
    with open(path) as fp:
        lines = [ln.rstrip("\n") for ln in fp]
    calib = {}
    for token in lines[0].removeprefix("# calibration ").split():
        key, val = token.split("=", 1)
        calib[key] = int(val) if key == "n_voxels" else float(val)
    rows = []
    for ln in lines[2:]:
        if not ln:
            continue
        pid, sid, split, grade, score = ln.split(",")
        rows.append({"patch_id": pid, "subject_id": sid, "split": split,
                     "stenosis_grade": float(grade), "abnormality_grade": int(score)})
    return calib, rows


def _collect_samples(cfg: ExperimentConfig):
    """Test-split samples and grades per variant, from all folds' score files."""
    missing = []
    samples: dict[str, list[metrics_mod.ScoredSample]] = {}
    grades: dict[str, list[float]] = {}
    for variant in cfg.variants:
        samples[variant], grades[variant] = [], []
        for fold in range(cfg.cohort.k_folds):
            path = os.path.join(job_dir(cfg, variant, fold), "scores.csv")
            if not os.path.exists(path):
                missing.append(path)
                continue
            _, rows = read_scores(path)
            for row in rows:
                if row["split"] != "test":
                    continue
                samples[variant].append(metrics_mod.ScoredSample(
                    score=row["abnormality_grade"], label=0, fold=fold,
                    patch_id=row["patch_id"]))
                grades[variant].append(row["stenosis_grade"])
    if missing:
        raise MissingArtifactError(
            "missing score files:\n  " + "\n  ".join(missing))
    return samples, grades


def _directional_claim(task_report: dict, variants) -> dict:
    """Pooled-AUC comparison of mixing variants against non-mixing ones."""
    msr = [v for v in variants if corrupt_mod.spec_for_variant(v).alpha > 0]
    plain = [v for v in variants if corrupt_mod.spec_for_variant(v).alpha == 0]
    pairs = []
    for vm in msr:
        for vp in plain:
            rm = task_report["variants"][vm]
            rp = task_report["variants"][vp]
            _, p = metrics_mod.mann_whitney_u(rm["fold_auc"], rp["fold_auc"])
            pairs.append({
                "msr_variant": vm, "other_variant": vp,
                "pooled_auc_msr": rm["pooled_auc"], "pooled_auc_other": rp["pooled_auc"],
                "holds": rm["pooled_auc"] >= rp["pooled_auc"],
                "p_fold_auc": p,
            })
    return {"pairs": pairs, "all_hold": all(p["holds"] for p in pairs) if pairs else None}


def run_report(cfg: ExperimentConfig) -> dict:
    """Aggregate all score files into summary.json and per-curve CSVs."""
    samples, grades = _collect_samples(cfg)
    report = metrics_mod.evaluate_experiment(samples, cfg.tasks, grades)

    rdir = report_dir(cfg)
    curves_dir = os.path.join(rdir, "curves")
    os.makedirs(curves_dir, exist_ok=True)
    for task_name, task_rep in report["tasks"].items():
        for variant, vrep in task_rep["variants"].items():
            roc = vrep.pop("roc_curve")
            pr = vrep.pop("pr_curve")
            base = os.path.join(curves_dir, f"{task_name}__{variant}")
            with open(base + "__roc.csv", "w", newline="") as fp:
                fp.write("threshold,fpr,tpr\n")
                for t, x, y in roc:
                    fp.write(f"{t!r},{x!r},{y!r}\n")
            with open(base + "__pr.csv", "w", newline="") as fp:
                fp.write("threshold,recall,precision\n")
                for t, x, y in pr:
                    fp.write(f"{t!r},{x!r},{y!r}\n")

    first_task = cfg.tasks[0].name if cfg.tasks else None
    if first_task:
        report["directional_claim"] = {
            "task": first_task,
            **_directional_claim(report["tasks"][first_task], cfg.variants),
        }
    report["variants"] = list(cfg.variants)
    report["config_name"] = cfg.name
    report["master_seed"] = cfg.master_seed
    with open(os.path.join(rdir, "summary.json"), "w") as fp:
        json.dump(report, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return report


def _run_job(args) -> None:
    cfg_dict, variant, fold, full, kind = args
    cfg = config_from_dict(cfg_dict)
    with _single_threaded_blas():
        if kind in ("train", "both"):
            run_train(cfg, variant, fold, full=full)
        if kind in ("score", "both"):
            run_score(cfg, variant, fold)


def run_jobs(cfg: ExperimentConfig, kind: str, variants=None, folds=None,
             jobs: int = 1, full: bool = False) -> list[tuple[str, int]]:
    """Run train and/or score for a set of (variant, fold) jobs, optionally
    in parallel worker processes."""
    variants = list(variants) if variants else list(cfg.variants)
    folds = list(folds) if folds is not None else list(range(cfg.cohort.k_folds))
    for v in variants:
        for f in folds:
            _check_job(cfg, v, f)
    work = [(config_to_dict(cfg), v, f, full, kind) for v in variants for f in folds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_job, work))
    else:
        for item in work:
            _run_job(item)
    return [(v, f) for v in variants for f in folds]


def run_all(cfg: ExperimentConfig, jobs: int = 1, full: bool = False) -> dict:
    """gen-data (if needed) + every train/score job + report."""
    if not os.path.isdir(cohort_dir(cfg)):
        run_gen_data(cfg)
    run_jobs(cfg, "both", jobs=jobs, full=full)
    return run_report(cfg)


# --------------------------------------------------------------------- #
# grid search                                                            #
# --------------------------------------------------------------------- #

DEFAULT_GRID = {
    "lam": [0.001],
    "gamma": [0.0005],
    "alpha": [0.0, 0.1],
    "sigma": [0.0, 0.001, 0.1],
}


def _float_entropy(value: float) -> int:
    """Stable integer encoding of a float for seed derivation."""
    return struct.unpack("<Q", struct.pack("<d", float(value)))[0]


def run_gridsearch(cfg: ExperimentConfig, grid: dict | None = None) -> list[dict]:
    """Train + score every grid point at reduced scale; rank by validation
    pooled AUC on the first task.  Seeds derive from the point's values,
    so the ranking is independent of grid-row ordering."""
    grid = dict(DEFAULT_GRID if grid is None else grid)
    for key in ("lam", "gamma", "alpha", "sigma"):
        if key not in grid or not grid[key]:
            raise ConfigError(f"grid must list values for {key!r}")
    cohort = _load_cohort(cfg)
    task = cfg.tasks[0]
    scale = cfg.train.scale * cfg.gridsearch_scale_factor
    train_cfg = replace(cfg.train, scale=scale)
    results = []
    with _single_threaded_blas():
        for lam, gamma, alpha, sigma in product(
                grid["lam"], grid["gamma"], grid["alpha"], grid["sigma"]):
            loss_cfg = model_mod.LossConfig(lam=lam, gamma=gamma,
                                            recon_norm=cfg.loss.recon_norm,
                                            sparsity_on_clean=cfg.loss.sparsity_on_clean)
            spec = corrupt_mod.CorruptionSpec(alpha=alpha, sigma=sigma)
            samples: list[metrics_mod.ScoredSample] = []
            grades: list[float] = []
            for fold in range(cfg.cohort.k_folds):
                entropy = (cfg.master_seed, 9001, fold,
                           _float_entropy(lam), _float_entropy(gamma),
                           _float_entropy(alpha), _float_entropy(sigma))
                rng = Rng(entropy)
                params = model_mod.init_params(cfg.model, rng.split(0))
                pool, ids = cohort.train_pool(fold, TRAIN_GRADE_THRESHOLD)
                train_mod.train(params, pool, spec, loss_cfg, train_cfg, rng.split(1),
                                pool_ids=ids)
                normals = cohort.normal_patches(fold, "val",
                                                cfg.calibration_grade_threshold)
                stats = detect_mod.calibrate(params, normals)
                rows = [r for r in cohort.eval_rows(fold) if r.split == "val"]
                scored = detect_mod.score_patches(
                    params, stats, np.stack([r.tensor for r in rows]))
                for row, s in zip(rows, scored):
                    samples.append(metrics_mod.ScoredSample(
                        score=int(s), label=0, fold=fold, patch_id=row.patch_id))
                    grades.append(row.stenosis_grade)
            labeled = metrics_mod.label_samples(samples, grades, task)
            _, auc = metrics_mod.roc_auc(labeled)
            results.append({"lam": lam, "gamma": gamma, "alpha": alpha, "sigma": sigma,
                            "val_pooled_auc": auc})
    results.sort(key=lambda r: (-r["val_pooled_auc"], r["lam"], r["gamma"],
                                r["alpha"], r["sigma"]))
    return results


def write_gridsearch_csv(path, results: list[dict]) -> None:
    with open(path, "w", newline="") as fp:
        fp.write("rank,lam,gamma,alpha,sigma,val_pooled_auc\n")
        for i, row in enumerate(results, start=1):
            fp.write(f"{i},{row['lam']!r},{row['gamma']!r},{row['alpha']!r},"
                     f"{row['sigma']!r},{row['val_pooled_auc']!r}\n")
