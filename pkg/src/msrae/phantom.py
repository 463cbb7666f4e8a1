"""Synthetic vessel-cross-section volumes with exact area ground truth.

Each patch is a noisy three-intensity volume: a bright lumen disk inside
a darker vessel-wall disk on a dark background, extruded along the depth
axis with mild per-slice center jitter.  Areas are measured on the
rasterized voxel grid of the central slice (lumen voxel count ``L_a``,
vessel voxel count ``W_a``), so the stored stenosis grade
``1 - L_a / W_a`` is exactly consistent with the image.

A cohort groups subjects (each with its own appearance profile) into
k rotation folds.  Within a fold, training uses only patches below the
normality grade threshold from the training subjects; validation and
test subjects contribute their full grade range.  Generation is
bit-reproducible from (spec, seed): every subject renders from its own
derived random stream.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import DTYPE, Rng, read_tensor, write_tensor


def stenosis_grade(lumen_area: float, wall_area: float) -> float:
    """Fractional narrowing ``1 - L_a / W_a`` of a cross-section."""
    if wall_area <= 0:
        raise ValueError(f"wall area must be positive, got {wall_area}")
    if not 0 <= lumen_area <= wall_area:
        raise ValueError(f"lumen area {lumen_area} outside [0, {wall_area}]")
    return 1.0 - lumen_area / wall_area


@dataclass(frozen=True)
class AppearanceConfig:
    """Subject-level sampling ranges; these are the difficulty knobs.

    ``wall_texture`` is the extra Gaussian heterogeneity of the vessel
    wall ring (plaque speckle): the textured area grows with the stenosis
    grade, which is what makes diseased cross-sections poorly
    reconstructable.
    """

    wall_radius_frac: tuple[float, float] = (0.26, 0.33)  # of min(H, W)
    lumen_intensity: tuple[float, float] = (0.70, 0.85)
    wall_intensity: tuple[float, float] = (0.35, 0.50)
    background_intensity: tuple[float, float] = (0.10, 0.20)
    texture_noise: tuple[float, float] = (0.015, 0.03)
    wall_texture: tuple[float, float] = (0.15, 0.25)
    wall_texture_density: float = 0.5  # fraction of ring voxels speckled
    center_jitter: tuple[float, float] = (0.2, 0.5)  # per-slice, voxels

    def __post_init__(self):
        for name in ("lumen_intensity", "wall_intensity", "background_intensity"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{name} range {lo, hi} outside [0, 1]")
        if not 0 <= self.wall_texture_density <= 1:
            raise ValueError("wall_texture_density outside [0, 1]")


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    wall_radius: float
    lumen_intensity: float
    wall_intensity: float
    background_intensity: float
    texture_noise: float
    center_jitter: float
    wall_texture: float = 0.0
    wall_texture_density: float = 1.0

    def __post_init__(self):
        if self.wall_radius <= 0:
            raise ValueError("wall radius must be positive")
        for name in ("lumen_intensity", "wall_intensity", "background_intensity"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class LabeledPatch:
    tensor: np.ndarray  # [1, D, H, W]
    lumen_area: int
    wall_area: int
    stenosis_grade: float
    subject_id: str
    patch_id: str
    target_grade: float
    split: str | None = None


@dataclass(frozen=True)
class Stratum:
    lo: float
    hi: float
    per_subject: int


# Grade mix for validation/test pools: ~37% below 0.3, ~56% below 0.4,
# ~15% above 0.7; training keeps only the sub-0.2 patches.
DEFAULT_STRATA = (
    Stratum(0.00, 0.20, 50),
    Stratum(0.20, 0.30, 24),
    Stratum(0.30, 0.40, 38),
    Stratum(0.40, 0.70, 58),
    Stratum(0.70, 0.90, 30),
)

GRADE_TOLERANCE = 0.03  # max |achieved - target| before a render is rejected


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 20
    k_folds: int = 5
    patch_shape: tuple[int, int, int] = (8, 32, 32)  # (D, H, W)
    strata: tuple[Stratum, ...] = DEFAULT_STRATA
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    seed: int = 0
    name: str = "cohort"

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        object.__setattr__(
            self, "strata",
            tuple(s if isinstance(s, Stratum) else Stratum(*s) for s in self.strata))
        if self.n_subjects % self.k_folds:
            raise ValueError(
                f"{self.n_subjects} subjects do not divide into {self.k_folds} folds")
        if any(s % 4 for s in self.patch_shape):
            raise ValueError(f"patch extents must be divisible by 4: {self.patch_shape}")

    def patches_per_subject(self) -> int:
        return sum(s.per_subject for s in self.strata)


@dataclass(frozen=True)
class FoldSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def split_of(self, subject_id: str) -> str | None:
        if subject_id in self.train:
            return "train"
        if subject_id in self.val:
            return "val"
        if subject_id in self.test:
            return "test"
        return None


def make_subject_profile(rng: Rng, subject_id: str, appearance: AppearanceConfig,
                         patch_shape: tuple[int, int, int]) -> SubjectProfile:
    _, h, w = patch_shape
    radius = float(rng.uniform(*appearance.wall_radius_frac)) * min(h, w)
    jitter = float(rng.uniform(*appearance.center_jitter))
    if radius + jitter + 1.0 > min(h, w) / 2:
        raise ValueError(
            f"wall radius {radius:.2f} with jitter {jitter:.2f} does not fit a "
            f"{h}x{w} cross-section")
    return SubjectProfile(
        subject_id=subject_id,
        wall_radius=radius,
        lumen_intensity=float(rng.uniform(*appearance.lumen_intensity)),
        wall_intensity=float(rng.uniform(*appearance.wall_intensity)),
        background_intensity=float(rng.uniform(*appearance.background_intensity)),
        texture_noise=float(rng.uniform(*appearance.texture_noise)),
        center_jitter=jitter,
        wall_texture=float(rng.uniform(*appearance.wall_texture)),
        wall_texture_density=appearance.wall_texture_density,
    )


def render_patch(profile: SubjectProfile, target_grade: float, rng: Rng,
                 patch_shape: tuple[int, int, int], patch_id: str = "p000",
                 with_jitter: bool = True) -> LabeledPatch:
    """Rasterize one vessel patch whose central slice hits ``target_grade``.

    The lumen is the set of the k nearest vessel voxels to the lumen
    center (stable tie-break by flat index), with k chosen so the central
    slice's voxel-count grade matches the target as closely as the grid
    allows; a residual above GRADE_TOLERANCE raises.
    """
    if not 0.0 <= target_grade <= 0.95:
        raise ValueError(f"target grade {target_grade} outside [0, 0.95]")
    d, h, w = patch_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base_cy, base_cx = (h - 1) / 2.0, (w - 1) / 2.0
    j = profile.center_jitter if with_jitter else 0.0

    # lumen offset relative to the wall center, shared by all slices
    if with_jitter:
        max_off = 0.3 * profile.wall_radius
        off_y = float(rng.uniform(-max_off, max_off))
        off_x = float(rng.uniform(-max_off, max_off))
    else:
        off_y = off_x = 0.0

    centers = []
    for _ in range(d):
        jy = float(rng.uniform(-j, j)) if with_jitter else 0.0
        jx = float(rng.uniform(-j, j)) if with_jitter else 0.0
        centers.append((base_cy + jy, base_cx + jx))

    z_mid = d // 2
    cy, cx = centers[z_mid]
    wall_mid = (yy - cy) ** 2 + (xx - cx) ** 2 <= profile.wall_radius ** 2
    wall_area = int(np.count_nonzero(wall_mid))
    if wall_area < 4:
        raise ValueError(f"wall radius {profile.wall_radius:.2f} rasterizes to "
                         f"{wall_area} voxels; too small for grading")
    k = int(round((1.0 - target_grade) * wall_area))
    k = min(max(k, 1), wall_area)
    achieved = stenosis_grade(k, wall_area)
    if abs(achieved - target_grade) > GRADE_TOLERANCE:
        raise ValueError(
            f"cannot hit grade {target_grade:.3f} on a {wall_area}-voxel wall "
            f"(closest {achieved:.3f})")

    volume = np.empty((d, h, w), dtype=np.float64)
    ring = np.zeros((d, h, w), dtype=bool)
    for z, (wy, wx) in enumerate(centers):
        wall = (yy - wy) ** 2 + (xx - wx) ** 2 <= profile.wall_radius ** 2
        flat = np.flatnonzero(wall)
        d2 = (yy.ravel()[flat] - (wy + off_y)) ** 2 + (xx.ravel()[flat] - (wx + off_x)) ** 2
        kz = min(k, len(flat))
        lumen_flat = flat[np.argsort(d2, kind="stable")[:kz]]
        sl = np.full((h * w,), profile.background_intensity)
        sl[flat] = profile.wall_intensity
        ring_flat = np.zeros(h * w, dtype=bool)
        ring_flat[flat] = True
        ring_flat[lumen_flat] = False
        sl[lumen_flat] = profile.lumen_intensity
        volume[z] = sl.reshape(h, w)
        ring[z] = ring_flat.reshape(h, w)

    if profile.texture_noise > 0:
        volume = volume + rng.normal((d, h, w), 0.0, profile.texture_noise, dtype=np.float64)
    if profile.wall_texture > 0:
        speckle = rng.normal((d, h, w), 0.0, profile.wall_texture, dtype=np.float64)
        if profile.wall_texture_density < 1.0:
            ring = ring & (rng.uniform(size=(d, h, w)) < profile.wall_texture_density)
        volume = volume + ring * speckle

    return LabeledPatch(
        tensor=volume[None].astype(DTYPE),
        lumen_area=k,
        wall_area=wall_area,
        stenosis_grade=achieved,
        subject_id=profile.subject_id,
        patch_id=patch_id,
        target_grade=float(target_grade),
    )


# --------------------------------------------------------------------- #
# cohorts                                                                #
# --------------------------------------------------------------------- #


@dataclass
class Cohort:
    spec: CohortSpec
    subjects: list[SubjectProfile]
    patches: list[LabeledPatch]
    folds: list[FoldSplit]

    def patch_grades(self) -> np.ndarray:
        return np.array([p.stenosis_grade for p in self.patches])

    def indices_for(self, fold: int, split: str) -> list[int]:
        subjects = getattr(self.folds[fold], split)
        return [i for i, p in enumerate(self.patches) if p.subject_id in subjects]

    def train_pool(self, fold: int, grade_threshold: float = 0.2):
        """Normals-only training patches: (stacked array, patch ids)."""
        idx = [i for i in self.indices_for(fold, "train")
               if self.patches[i].stenosis_grade < grade_threshold]
        arr = np.stack([self.patches[i].tensor for i in idx])
        return arr, [self.patches[i].patch_id for i in idx]

    def normal_patches(self, fold: int, split: str, grade_threshold: float = 0.2):
        idx = [i for i in self.indices_for(fold, split)
               if self.patches[i].stenosis_grade < grade_threshold]
        return np.stack([self.patches[i].tensor for i in idx])

    def eval_rows(self, fold: int) -> list[LabeledPatch]:
        """Validation + test patches of a fold, with split tags set."""
        rows = []
        for split in ("val", "test"):
            for i in self.indices_for(fold, split):
                p = self.patches[i]
                rows.append(LabeledPatch(
                    tensor=p.tensor, lumen_area=p.lumen_area, wall_area=p.wall_area,
                    stenosis_grade=p.stenosis_grade, subject_id=p.subject_id,
                    patch_id=p.patch_id, target_grade=p.target_grade, split=split))
        return rows


def _fold_splits(subject_ids: list[str], k: int) -> list[FoldSplit]:
    """Rotation folds over k equal subject groups with 6:2:2 ratios.

    Validation and test each take ``max(1, round(k / 5))`` groups; with
    k = 5 that is one group each, so every subject is tested exactly once
    across the folds.
    """
    size = len(subject_ids) // k
    groups = [subject_ids[i * size:(i + 1) * size] for i in range(k)]
    test_g = max(1, round(k / 5))
    val_g = max(1, round(k / 5))
    if k - test_g - val_g < 1:
        raise ValueError(f"too few folds ({k}) for a train/val/test rotation")
    folds = []
    for f in range(k):
        test_idx = [(f + i) % k for i in range(test_g)]
        val_idx = [(f + test_g + i) % k for i in range(val_g)]
        used = set(test_idx) | set(val_idx)
        train_idx = [g for g in range(k) if g not in used]
        folds.append(FoldSplit(
            train=tuple(s for g in train_idx for s in groups[g]),
            val=tuple(s for g in val_idx for s in groups[g]),
            test=tuple(s for g in test_idx for s in groups[g]),
        ))
    return folds


def build_cohort(spec: CohortSpec) -> Cohort:
    """Render every subject's patches and assign rotation folds."""
    root = Rng(spec.seed)
    subjects, patches = [], []
    for i in range(spec.n_subjects):
        sid = f"s{i:03d}"
        srng = root.split(i)
        profile = make_subject_profile(srng, sid, spec.appearance, spec.patch_shape)
        subjects.append(profile)
        counter = 0
        for stratum in spec.strata:
            for _ in range(stratum.per_subject):
                target = float(srng.uniform(stratum.lo, stratum.hi))
                patch = render_patch(profile, target, srng, spec.patch_shape,
                                     patch_id=f"{sid}_p{counter:03d}")
                patches.append(patch)
                counter += 1
    folds = _fold_splits([s.subject_id for s in subjects], spec.k_folds)
    return Cohort(spec=spec, subjects=subjects, patches=patches, folds=folds)


def audit_splits(cohort: Cohort, grade_threshold: float = 0.2) -> dict:
    """Leakage audit: split disjointness per fold and normals-only training.

    Returns per-fold results plus overall booleans; used by the scan
    command and the acceptance checks.
    """
    by_id = {p.patch_id: p for p in cohort.patches}
    report = {"folds": [], "splits_disjoint": True, "train_normals_only": True}
    for f, fold in enumerate(cohort.folds):
        sets = [set(fold.train), set(fold.val), set(fold.test)]
        disjoint = (not (sets[0] & sets[1]) and not (sets[0] & sets[2])
                    and not (sets[1] & sets[2]))
        # rebuild the pool the trainer actually sees and re-check its grades
        _, pool_ids = cohort.train_pool(f, grade_threshold)
        offenders = [pid for pid in pool_ids
                     if by_id[pid].stenosis_grade >= grade_threshold]
        report["folds"].append({
            "fold": f, "disjoint": disjoint, "train_pool_size": len(pool_ids),
            "offending_patches": offenders,
        })
        report["splits_disjoint"] &= disjoint
        report["train_normals_only"] &= not offenders
    return report


def stratum_counts(cohort: Cohort) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in cohort.spec.strata:
        key = f"[{s.lo:.2f},{s.hi:.2f})"
        counts[key] = sum(1 for p in cohort.patches if s.lo <= p.target_grade < s.hi + 1e-12)
    return counts


# --------------------------------------------------------------------- #
# on-disk format: manifest.json + one concatenated MSRT shard            #
# --------------------------------------------------------------------- #

_MANIFEST = "manifest.json"
_SHARD = "patches.msrt"


def save_cohort(directory, cohort: Cohort) -> None:
    os.makedirs(directory, exist_ok=True)
    rows = []
    with open(os.path.join(directory, _SHARD), "wb") as fp:
        offset = 0
        for p in cohort.patches:
            rows.append({
                "patch_id": p.patch_id, "subject_id": p.subject_id,
                "target_grade": p.target_grade, "stenosis_grade": p.stenosis_grade,
                "lumen_area": p.lumen_area, "wall_area": p.wall_area,
                "offset": offset,
            })
            offset += write_tensor(fp, p.tensor)
    manifest = {
        "format": "msrae-cohort",
        "version": 1,
        "spec": asdict(cohort.spec),
        "subjects": [asdict(s) for s in cohort.subjects],
        "patches": rows,
        "folds": [asdict(f) for f in cohort.folds],
    }
    with open(os.path.join(directory, _MANIFEST), "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_cohort(directory) -> Cohort:
    path = os.path.join(directory, _MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no cohort manifest at {path}")
    with open(path) as fp:
        manifest = json.load(fp)
    sdict = manifest["spec"]
    spec = CohortSpec(
        n_subjects=sdict["n_subjects"], k_folds=sdict["k_folds"],
        patch_shape=tuple(sdict["patch_shape"]),
        strata=tuple(Stratum(**s) for s in sdict["strata"]),
        appearance=AppearanceConfig(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in sdict["appearance"].items()}),
        seed=sdict["seed"], name=sdict["name"],
    )
    subjects = [SubjectProfile(**s) for s in manifest["subjects"]]
    patches = []
    with open(os.path.join(directory, _SHARD), "rb") as fp:
        for row in manifest["patches"]:
            fp.seek(row["offset"])
            tensor = read_tensor(fp)
            patches.append(LabeledPatch(
                tensor=tensor, lumen_area=row["lumen_area"], wall_area=row["wall_area"],
                stenosis_grade=row["stenosis_grade"], subject_id=row["subject_id"],
                patch_id=row["patch_id"], target_grade=row["target_grade"]))
    folds = [FoldSplit(train=tuple(f["train"]), val=tuple(f["val"]), test=tuple(f["test"]))
             for f in manifest["folds"]]
    return Cohort(spec=spec, subjects=subjects, patches=patches, folds=folds)
