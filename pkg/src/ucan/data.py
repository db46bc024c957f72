"""Volume IO, intensity normalization, domain labels, sampling and the phantom generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

from ucan.core import (
    NUM_DOMAINS,
    TRACERS,
    DegenerateInputError,
    DomainLabel,
    InvalidRecordError,
    MissingModalityError,
    NormRecord,
    ShapeMismatchError,
    Study,
    TracerId,
    ValidationError,
    Volume,
    ordinal,
)

STUDY_FORMAT = "ucan-study"
STUDY_FORMAT_VERSION = 1
SIDECAR = "study.json"
MR_FILE = "mr.nii"
ROI_DIR = "roi"

# Model outputs may overshoot [-1, 1] by rounding.
DENORM_TOLERANCE = 1e-4


def pet_filename(tracer: TracerId) -> str:
    return f"pet_{tracer.value}.nii"


# -- normalization -----------------------------------------------------------


def norm_record_for(v: Volume) -> NormRecord:
    vmax = float(np.max(v.data))
    if not vmax > 0:
        raise DegenerateInputError(f"cannot normalize a volume whose maximum is {vmax}; need a positive entry")
    return NormRecord(vmax)


def normalize(v: Volume) -> tuple[Volume, NormRecord]:
    """Scale by the volume maximum into [-1, 1]; the maximum voxel maps to exactly 1."""
    rec = norm_record_for(v)
    return v.with_data(v.data / rec.max_value * 2.0 - 1.0), rec


def denormalize(v: Volume, rec: NormRecord) -> Volume:
    """Inverse of :func:`normalize`. Negative results are kept as-is."""
    if not (np.isfinite(rec.max_value) and rec.max_value > 0):
        raise InvalidRecordError(f"normalization max must be positive, got {rec.max_value}")
    lo, hi = float(np.min(v.data)), float(np.max(v.data))
    if lo < -1 - DENORM_TOLERANCE or hi > 1 + DENORM_TOLERANCE:
        raise ValidationError(f"normalized volume outside [-1, 1]: range [{lo:.6g}, {hi:.6g}]")
    return v.with_data((v.data + 1.0) / 2.0 * rec.max_value)


# -- domain labels -------------------------------------------------------------


def make_domain_label(tracer: TracerId, shape: Sequence[int]) -> DomainLabel:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValidationError(f"label shape must be three positive integers, got {shape}")
    channels = np.zeros((NUM_DOMAINS, *shape), dtype=np.uint8)
    channels[ordinal(tracer)] = 1
    channels.setflags(write=False)
    return DomainLabel(channels, tracer)


# -- training pairs ------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    x_pet: Volume
    x_mr: Volume
    y_gt: Volume
    m_target: DomainLabel
    m_source: DomainLabel
    study_id: str = ""

    @property
    def source(self) -> TracerId:
        return self.m_source.tracer

    @property
    def target(self) -> TracerId:
        return self.m_target.tracer


def sample_task(rng: np.random.Generator) -> tuple[TracerId, TracerId]:
    """Uniform source, then a uniform target among the other two domains."""
    source = TRACERS[int(rng.integers(NUM_DOMAINS))]
    others = [t for t in TRACERS if t is not source]
    target = others[int(rng.integers(len(others)))]
    return source, target


def make_sample(study: Study, source: TracerId, target: TracerId) -> TrainingSample:
    if source is target:
        raise ValidationError(f"source and target tracer must differ, got {source.value} twice")
    for t in (source, target):
        if t not in study.pet:
            raise MissingModalityError(f"study {study.id!r} has no tracer {t.value}")
    x_pet, _ = normalize(study.pet[source])
    y_gt, _ = normalize(study.pet[target])
    x_mr, _ = normalize(study.mr)
    return TrainingSample(
        x_pet=x_pet,
        x_mr=x_mr,
        y_gt=y_gt,
        m_target=make_domain_label(target, study.shape),
        m_source=make_domain_label(source, study.shape),
        study_id=study.id,
    )


def sample_training_pair(study: Study, rng: np.random.Generator) -> TrainingSample:
    """Draw a random (source, target) task and return the normalized training sample."""
    source, target = sample_task(rng)
    return make_sample(study, source, target)


def brain_mask(mr: Volume, threshold: float = 0.1) -> np.ndarray:
    """MR-derived foreground mask: voxels above ``threshold`` times the MR maximum."""
    vmax = float(np.max(mr.data))
    if vmax <= 0:
        return np.ones(mr.shape, dtype=bool)
    return mr.data > threshold * vmax


def bounding_box(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        return tuple((0, s) for s in mask.shape)
    return tuple((int(i.min()), int(i.max()) + 1) for i in idx)


def random_patch_origin(
    shape: Sequence[int],
    patch_shape: Sequence[int],
    rng: np.random.Generator,
    bbox: Sequence[tuple[int, int]] | None = None,
) -> tuple[int, int, int]:
    """Patch origin whose centre falls inside ``bbox`` while staying within the volume."""
    if any(p > s for p, s in zip(patch_shape, shape)):
        raise ShapeMismatchError(f"patch {tuple(patch_shape)} larger than volume {tuple(shape)}")
    if bbox is None:
        bbox = tuple((0, s) for s in shape)
    origin = []
    for s, p, (lo, hi) in zip(shape, patch_shape, bbox):
        centre = int(rng.integers(lo, max(hi, lo + 1)))
        origin.append(int(np.clip(centre - p // 2, 0, s - p)))
    return tuple(origin)  # type: ignore[return-value]


def crop_sample(sample: TrainingSample, origin: Sequence[int], patch_shape: Sequence[int]) -> TrainingSample:
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    crop = lambda v: v.with_data(v.data[sl])  # noqa: E731
    return TrainingSample(
        x_pet=crop(sample.x_pet),
        x_mr=crop(sample.x_mr),
        y_gt=crop(sample.y_gt),
        m_target=make_domain_label(sample.target, patch_shape),
        m_source=make_domain_label(sample.source, patch_shape),
        study_id=sample.study_id,
    )


# -- cross validation ----------------------------------------------------------


def split_folds(study_ids: Sequence[str], k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Seeded k-fold partition. Returns ``(train_ids, test_ids)`` per fold."""
    ids = list(study_ids)
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got k={k}")
    if k > len(ids):
        raise ValidationError(f"cannot split {len(ids)} studies into {k} folds")
    if len(set(ids)) != len(ids):
        raise ValidationError("study ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(perm, k):
        test = {ids[i] for i in chunk}
        folds.append(([i for i in ids if i not in test], [i for i in ids if i in test]))
    return folds


# -- phantom generator ---------------------------------------------------------

THALAMUS = "thalamus"
PHANTOM_ROIS = (THALAMUS,) + tuple(f"region_{i}" for i in range(1, 9))


def _smooth_field(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    f -= f.mean()
    return f / (np.abs(f).max() + 1e-12)


def _standardize(f: np.ndarray, mask: np.ndarray, against=()) -> np.ndarray:
    """Zero-mean, unit-variance inside ``mask``, orthogonalized against ``against``."""
    f = f - f[mask].mean()
    for g in against:
        f = f - (f[mask] @ g[mask]) / (g[mask] @ g[mask]) * g
    f = f / (f[mask].std() + 1e-12)
    return np.where(mask, f, 0.0)


def _ellipsoid(coords, centre, radii) -> np.ndarray:
    r2 = sum(((c - m) / r) ** 2 for c, m, r in zip(coords, centre, radii))
    return r2 <= 1.0


def tracer_b_from_a(a: np.ndarray) -> np.ndarray:
    """Smooth monotone map relating tracer A to tracer B (before regional deviation)."""
    return 2.5 * np.power(np.clip(a, 0, None), 0.6)


def generate_phantom_study(
    id: str,
    shape: Sequence[int],
    rng: np.random.Generator,
    voxel_size_mm: Sequence[float] = (1.2, 1.055, 1.055),
    thalamus_deviation: float = 0.2,
) -> Study:
    """Synthetic three-tracer study over shared ellipsoidal anatomy.

    Tracer B is a monotone function of tracer A except inside the thalamus
    blob, where it is scaled down by ``1 - thalamus_deviation``. A deficit
    rather than an excess keeps B's maximum outside the blob, so the
    max-normalized A/B relation is the same in every study. Tracer C shares
    only the anatomy term with A and is dominated by an independent field.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValidationError(f"phantom shape must have every extent >= 16, got {shape}")
    coords = np.meshgrid(*[np.linspace(-1, 1, s) for s in shape], indexing="ij")
    sigma = max(shape) / 10.0

    brain_r = 0.85 + 0.05 * rng.uniform(-1, 1, 3)
    brain = _ellipsoid(coords, (0, 0, 0), brain_r)

    rois: dict[str, np.ndarray] = {}
    centres = [(0.0, 0.0, 0.0)] + [
        (sz * 0.42, sy * 0.42, sx * 0.42) for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)
    ]
    for name, c in zip(PHANTOM_ROIS, centres):
        c = tuple(ci + 0.05 * rng.uniform(-1, 1) for ci in c)
        radii = tuple(0.16 + 0.06 * rng.uniform(0, 1, 3))
        m = _ellipsoid(coords, c, radii) & brain
        # guarantee a nonempty mask even on coarse grids
        centre_idx = tuple(int(round((ci + 1) / 2 * (s - 1))) for ci, s in zip(c, shape))
        m[centre_idx] = True
        rois[name] = m

    anatomy = np.zeros(shape)
    for name, m in rois.items():
        anatomy += rng.uniform(0.3, 1.0) * ndimage.gaussian_filter(m.astype(float), 1.0)
    anatomy = np.clip(anatomy, 0, 1)

    # z-scored inside the brain; the tracer-specific fields are made orthogonal to
    # the shared anatomy so cross-tracer correlations are fixed by the weights below
    z_anat = _standardize(anatomy, brain)
    z_a = _standardize(_smooth_field(shape, sigma, rng), brain, against=[z_anat])
    z_c = _standardize(_smooth_field(shape, sigma, rng), brain, against=[z_anat, z_a])

    mr = brain * (0.55 + 0.35 * anatomy + 0.1 * _smooth_field(shape, sigma, rng))

    a = brain * (1.0 + 0.25 * (0.6 * z_anat + 0.8 * z_a))

    thal_soft = ndimage.gaussian_filter(rois[THALAMUS].astype(float), 1.0)
    thal_soft /= max(thal_soft.max(), 1e-12)
    b = tracer_b_from_a(a) * (1.0 - thalamus_deviation * thal_soft)

    c = brain * (1.0 + 0.25 * (0.3 * z_anat + 0.954 * z_c))

    vs = tuple(float(v) for v in voxel_size_mm)
    pet = {
        TracerId.A: Volume(np.clip(a, 0, None), vs),
        TracerId.B: Volume(np.clip(b, 0, None), vs),
        TracerId.C: Volume(np.clip(c, 0, None), vs),
    }
    masks = {k: Volume(v.astype(np.float64), vs) for k, v in rois.items()}
    return Study(id=id, pet=pet, mr=Volume(mr, vs), roi_masks=masks)


def phantom_cohort(n: int, shape: Sequence[int], seed: int) -> list[Study]:
    """``n`` phantom studies with independent child streams of ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(n)
    return [
        generate_phantom_study(f"phantom_{i:03d}", shape, np.random.default_rng(s)) for i, s in enumerate(streams)
    ]


# -- study IO --------------------------------------------------------------------


def save_volume(v: Volume, path: str | Path, dtype=np.float64) -> None:
    affine = np.diag([*v.voxel_size_mm, 1.0])
    img = nib.Nifti1Image(np.asarray(v.data, dtype=dtype), affine)
    img.header.set_zooms(v.voxel_size_mm)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ShapeMismatchError(f"{path} holds a {data.ndim}D image, expected 3D")
    return Volume(data.astype(np.float64), tuple(float(z) for z in img.header.get_zooms()[:3]))


def save_study(study: Study, path: str | Path) -> Path:
    path = Path(path)
    (path / ROI_DIR).mkdir(parents=True, exist_ok=True)
    for t in TRACERS:
        save_volume(study.pet[t], path / pet_filename(t))
    save_volume(study.mr, path / MR_FILE)
    for name, mask in study.roi_masks.items():
        save_volume(mask, path / ROI_DIR / f"{name}.nii", dtype=np.uint8)
    sidecar = {
        "format": STUDY_FORMAT,
        "version": STUDY_FORMAT_VERSION,
        "id": study.id,
        "shape": list(study.shape),
        "voxel_size_mm": list(study.voxel_size_mm),
        "norm_records": {t.value: study.norm_records[t].to_dict() for t in TRACERS},
        "rois": sorted(study.roi_masks),
    }
    (path / SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_study(path: str | Path) -> Study:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"study directory {path} does not exist")
    sidecar_path = path / SIDECAR
    if not sidecar_path.is_file():
        raise MissingModalityError(f"{path} has no {SIDECAR} sidecar")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("format") != STUDY_FORMAT:
        raise ValidationError(f"{sidecar_path}: unrecognized format {meta.get('format')!r}")

    def need(p: Path, what: str) -> Volume:
        if not p.is_file():
            raise MissingModalityError(f"study {meta.get('id')!r} is missing {what} ({p.name})")
        return load_volume(p)

    pet = {t: need(path / pet_filename(t), f"tracer {t.value}") for t in TRACERS}
    mr = need(path / MR_FILE, "the MR volume")
    masks = {name: need(path / ROI_DIR / f"{name}.nii", f"ROI {name}") for name in meta.get("rois", [])}
    records = {TracerId(k): NormRecord.from_dict(v) for k, v in meta.get("norm_records", {}).items()}
    study = Study(id=str(meta["id"]), pet=pet, mr=mr, roi_masks=masks, norm_records=records or {})
    if list(study.shape) != list(meta.get("shape", study.shape)):
        raise ShapeMismatchError(f"{path}: volumes have shape {study.shape}, sidecar says {meta['shape']}")
    return study


def load_studies(root: str | Path) -> list[Study]:
    """Every study directory directly under ``root``, sorted by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    return [load_study(p) for p in sorted(root.iterdir()) if (p / SIDECAR).is_file()]
