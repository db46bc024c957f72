"""Volumetric metrics, sliding-window inference and report emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage, stats

from ucan.core import (
    TASKS,
    DegenerateInputError,
    NormRecord,
    ShapeMismatchError,
    Study,
    TracerId,
    ValidationError,
    Volume,
    task_name,
)
from ucan.data import brain_mask, denormalize, make_domain_label, normalize
from ucan.nets import DuSEGenerator, generator_forward, generator_from_checkpoint

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-voxel support per axis
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METHOD = "UCAN"
BASELINE = "copy-input"
MISSING = "n/a"


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


# -- metrics ---------------------------------------------------------------------


def nmse(pred, gt, mask=None) -> float:
    """Normalized mean squared error in percent: 100 * sum((pred-gt)^2) / sum(gt^2)."""
    p, g = _pair(pred, gt)
    if mask is not None:
        m = _arr(mask).astype(bool)
        p, g = p[m], g[m]
    denom = float(np.sum(g * g))
    if denom == 0:
        raise DegenerateInputError("NMSE undefined: ground truth is all zero")
    return 100.0 * float(np.sum((p - g) ** 2)) / denom


def gaussian_kernel1d(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, kernel, axis=axis, mode="reflect")
    return x


def ssim_map(pred, gt, data_range: float | None = None) -> np.ndarray:
    """Local SSIM with a separable Gaussian window (population covariances)."""
    p, g = _pair(pred, gt)
    if data_range is None:
        data_range = float(g.max() - g.min())
    if data_range == 0:
        data_range = 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    k = gaussian_kernel1d()
    mu_p, mu_g = _local_mean(p, k), _local_mean(g, k)
    var_p = _local_mean(p * p, k) - mu_p**2
    var_g = _local_mean(g * g, k) - mu_g**2
    cov = _local_mean(p * g, k) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2)
    return num / den


def ssim(pred, gt, mask=None, data_range: float | None = None) -> float:
    """Mean local SSIM; dynamic range from the ground truth (max - min, 1 if constant).

    Without a mask the mean excludes a border of one window radius, where the
    window is truncated by the volume edge. With a mask the mean is over the
    mask voxels.
    """
    p, g = _pair(pred, gt)
    smap = ssim_map(p, g, data_range)
    if mask is not None:
        m = _arr(mask).astype(bool)
        if not m.any():
            raise ValidationError("SSIM mask is empty")
        return float(smap[m].mean())
    r = SSIM_RADIUS
    if min(smap.shape) > 2 * r:
        smap = smap[r:-r, r:-r, r:-r]
    return float(smap.mean())


def roi_bias(pred, gt, mask) -> float:
    """Relative error of summed intensity inside the ROI."""
    p, g = _pair(pred, gt)
    m = _arr(mask)
    if m.shape != g.shape:
        raise ShapeMismatchError(f"mask shape {m.shape} != volume shape {g.shape}")
    m = m.astype(bool)
    if not m.any():
        raise ValidationError("ROI mask is empty")
    gt_sum = float(np.sum(g[m]))
    if gt_sum == 0:
        raise DegenerateInputError("ROI bias undefined: ground truth sums to zero inside the ROI")
    return (float(np.sum(p[m])) - gt_sum) / gt_sum


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value; NaN with fewer than two pairs or zero variance."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or np.allclose(a - b, (a - b)[0]):
        return math.nan
    return float(stats.ttest_rel(a, b).pvalue)


# -- sliding-window inference ------------------------------------------------------


def window_starts(size: int, patch: int, overlap: float) -> list[int]:
    if patch >= size:
        return [0]
    stride = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def cosine_window(patch_shape: Sequence[int]) -> np.ndarray:
    """Separable raised-cosine weight, strictly positive so every voxel is covered."""
    w = np.ones((), dtype=np.float64)
    for p in patch_shape:
        i = np.arange(p, dtype=np.float64)
        w = np.multiply.outer(w, 0.5 - 0.5 * np.cos(2 * np.pi * (i + 0.5) / p))
    return w


def window_weight_sum(shape: Sequence[int], patch_shape: Sequence[int], overlap: float) -> np.ndarray:
    """Unnormalized accumulated blending weight; dividing by it makes weights sum to 1."""
    acc = np.zeros(shape)
    w = cosine_window(patch_shape)
    for origin in _origins(shape, patch_shape, overlap):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
        acc[sl] += w
    return acc


def _origins(shape, patch_shape, overlap):
    axes = [window_starts(s, p, overlap) for s, p in zip(shape, patch_shape)]
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                yield (z, y, x)


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _resolve_generator(model) -> DuSEGenerator:
    if isinstance(model, DuSEGenerator):
        return model
    return generator_from_checkpoint(model)


@torch.no_grad()
def infer_normalized(
    model,
    x_pet: np.ndarray,
    x_mr: np.ndarray,
    target: TracerId,
    patch_shape: Sequence[int] | None = None,
    overlap: float = 0.5,
) -> np.ndarray:
    """Translate a normalized volume with overlapping patches and cosine blending.

    Axes where the volume is smaller than the patch are padded with -1 (the
    normalized background) to the next multiple of the network stride and
    processed in one pass.
    """
    g = _resolve_generator(model)
    was_training = g.training
    g.eval()
    x_pet, x_mr = np.asarray(x_pet, np.float64), np.asarray(x_mr, np.float64)
    if x_pet.shape != x_mr.shape:
        raise ShapeMismatchError(f"PET shape {x_pet.shape} != MR shape {x_mr.shape}")
    shape = x_pet.shape
    mult = g.spec.multiple
    if patch_shape is None:
        patch_shape = shape
    eff = tuple(p if s >= p else _ceil_to(s, mult) for s, p in zip(shape, patch_shape))
    if any(p % mult for p in eff):
        raise ShapeMismatchError(f"patch shape {eff} not divisible by {mult}")
    padded = tuple(max(s, p) for s, p in zip(shape, eff))
    pad = [(0, p - s) for s, p in zip(shape, padded)]
    pet = np.pad(x_pet, pad, constant_values=-1.0)
    mr = np.pad(x_mr, pad, constant_values=-1.0)

    dtype = next(g.parameters()).dtype
    label = torch.tensor(make_domain_label(target, eff).channels[None], dtype=dtype)
    weight = cosine_window(eff)
    acc = np.zeros(padded)
    norm = np.zeros(padded)
    for origin in _origins(padded, eff, overlap):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, eff))
        tp = torch.from_numpy(np.ascontiguousarray(pet[sl]))[None, None].to(dtype)
        tm = torch.from_numpy(np.ascontiguousarray(mr[sl]))[None, None].to(dtype)
        out = generator_forward(g, tp, tm, label)[0, 0].double().numpy()
        acc[sl] += weight * out
        norm[sl] += weight
    g.train(was_training)
    out = acc / norm
    return out[tuple(slice(0, s) for s in shape)]


def infer_whole_volume(
    model,
    pet: Volume,
    mr: Volume,
    target: TracerId,
    patch_shape: Sequence[int] | None = None,
    overlap: float = 0.5,
    target_record: NormRecord | None = None,
) -> Volume:
    """Synthesize ``target`` from raw (un-normalized) PET and MR volumes.

    With ``target_record`` the result is denormalized into the target tracer's
    intensity scale; otherwise it is returned in normalized [-1, 1] space.
    """
    if pet.shape != mr.shape:
        raise ShapeMismatchError(f"PET shape {pet.shape} != MR shape {mr.shape}")
    x_pet, _ = normalize(pet)
    x_mr, _ = normalize(mr)
    out = pet.with_data(infer_normalized(model, x_pet.data, x_mr.data, target, patch_shape, overlap))
    return denormalize(out, target_record) if target_record is not None else out


def copy_input_baseline(study: Study, source: TracerId, target: TracerId) -> Volume:
    """Normalized source volume mapped into the target's intensity scale."""
    x, _ = normalize(study.pet[source])
    return denormalize(x, study.norm_records[target])


# -- reports -------------------------------------------------------------------------

ROW_FIELDS = ["method", "fold", "task", "study_id", "nmse_percent", "ssim"]
BIAS_FIELDS = ["method", "fold", "task", "study_id", "roi", "bias"]


def _mean_std(values: Iterable) -> dict:
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], float)
    if len(v) == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


@dataclass
class MetricReport:
    """Per-(method, fold, task, study) metric rows plus per-ROI bias rows.

    Missing values are stored as ``None`` and written as ``n/a``.
    """

    rows: list[dict] = field(default_factory=list)
    bias_rows: list[dict] = field(default_factory=list)

    def extend(self, other: "MetricReport") -> None:
        self.rows.extend(other.rows)
        self.bias_rows.extend(other.bias_rows)

    @property
    def methods(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r["method"], None)
        return list(seen)

    @property
    def rois(self) -> list[str]:
        return sorted({r["roi"] for r in self.bias_rows})

    def task_aggregates(self) -> dict:
        out: dict = {}
        for method in self.methods:
            out[method] = {}
            for s, t in TASKS:
                name = task_name(s, t)
                sel = [r for r in self.rows if r["method"] == method and r["task"] == name]
                out[method][name] = {
                    "nmse_percent": _mean_std(r["nmse_percent"] for r in sel),
                    "ssim": _mean_std(r["ssim"] for r in sel),
                }
        return out

    def roi_aggregates(self, method: str = METHOD) -> dict:
        out: dict = {}
        for s, t in TASKS:
            name = task_name(s, t)
            out[name] = {}
            for roi in self.rois:
                sel = [r["bias"] for r in self.bias_rows if r["method"] == method and r["task"] == name and r["roi"] == roi]
                out[name][roi] = _mean_std(sel)
        return out

    def significance(self, method: str = METHOD, reference: str = BASELINE, metric: str = "nmse_percent") -> dict:
        """Paired t-test p-value per task between two methods, paired by (fold, study)."""
        out = {}
        for s, t in TASKS:
            name = task_name(s, t)
            a = {(r["fold"], r["study_id"]): r[metric] for r in self.rows if r["method"] == method and r["task"] == name}
            b = {(r["fold"], r["study_id"]): r[metric] for r in self.rows if r["method"] == reference and r["task"] == name}
            keys = sorted(k for k in a if k in b and a[k] is not None and b[k] is not None)
            out[name] = paired_t_test([a[k] for k in keys], [b[k] for k in keys])
        return out

    def table(self) -> list[list[str]]:
        """Methods x tasks, cells ``ssim/nmse`` as in the comparison tables."""
        agg = self.task_aggregates()
        header = ["SSIM/NMSE(x100%)"] + [task_name(s, t) for s, t in TASKS]
        body = []
        for method in self.methods:
            cells = [method]
            for s, t in TASKS:
                a = agg[method][task_name(s, t)]
                sv, nv = a["ssim"]["mean"], a["nmse_percent"]["mean"]
                cells.append(MISSING if sv is None or nv is None else f"{sv:.3f}/{nv:.2f}")
            body.append(cells)
        return [header] + body


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return MISSING
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse(v: str):
    return None if v == MISSING else float(v)


def _write_csv(path: Path, fieldnames: list[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fieldnames})


def emit_report(report: MetricReport, path: str | Path) -> dict[str, Path]:
    """Write metrics.csv, bias.csv, table.csv and summary.json into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": path / "metrics.csv",
        "bias": path / "bias.csv",
        "table": path / "table.csv",
        "summary": path / "summary.json",
    }
    _write_csv(files["metrics"], ROW_FIELDS, report.rows)
    _write_csv(files["bias"], BIAS_FIELDS, report.bias_rows)
    with open(files["table"], "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report.table())
    methods = report.methods
    summary = {
        "tasks": [task_name(s, t) for s, t in TASKS],
        "methods": methods,
        "per_task": report.task_aggregates(),
        "roi_bias": {m: report.roi_aggregates(m) for m in methods if any(r["method"] == m for r in report.bias_rows)},
        "paired_t_test_nmse": (
            {k: (None if math.isnan(p) else p) for k, p in report.significance().items()}
            if METHOD in methods and BASELINE in methods
            else {}
        ),
    }
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return files


def read_report(path: str | Path) -> MetricReport:
    path = Path(path)
    rows, bias_rows = [], []
    with open(path / "metrics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "method": r["method"],
                    "fold": int(r["fold"]),
                    "task": r["task"],
                    "study_id": r["study_id"],
                    "nmse_percent": _parse(r["nmse_percent"]),
                    "ssim": _parse(r["ssim"]),
                }
            )
    bias_path = path / "bias.csv"
    if bias_path.is_file():
        with open(bias_path, newline="") as fh:
            for r in csv.DictReader(fh):
                bias_rows.append(
                    {
                        "method": r["method"],
                        "fold": int(r["fold"]),
                        "task": r["task"],
                        "study_id": r["study_id"],
                        "roi": r["roi"],
                        "bias": _parse(r["bias"]),
                    }
                )
    return MetricReport(rows, bias_rows)


def emit_plots(report: MetricReport, path: str | Path, method: str = METHOD) -> Path:
    """Grouped bar chart of mean ROI bias (percent) with std error bars, one group per ROI."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    agg = report.roi_aggregates(method)
    rois = report.rois
    tasks = [task_name(s, t) for s, t in TASKS]
    width = 0.8 / len(tasks)
    x = np.arange(len(rois))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(rois) + 2), 4.0), dpi=100)
    for i, name in enumerate(tasks):
        means = [100 * (agg[name][r]["mean"] or 0.0) for r in rois]
        stds = [100 * (agg[name][r]["std"] or 0.0) for r in rois]
        ax.bar(x + (i - (len(tasks) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=name)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(rois, rotation=30, ha="right")
    ax.set_ylabel("Bias (%)")
    ax.set_title(f"ROI bias, {method}")
    ax.legend(ncol=3, fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


# -- study-level evaluation -----------------------------------------------------------


def evaluate_prediction(
    pred: Volume | None,
    study: Study,
    source: TracerId,
    target: TracerId,
    method: str,
    fold: int = 0,
    full_fov: bool = False,
) -> MetricReport:
    """Metric rows for one synthesized volume; a ``None`` prediction yields n/a rows."""
    name = task_name(source, target)
    gt = study.pet.get(target)
    report = MetricReport()
    if pred is None or gt is None:
        report.rows.append(
            {"method": method, "fold": fold, "task": name, "study_id": study.id, "nmse_percent": None, "ssim": None}
        )
        for roi in sorted(study.roi_masks):
            report.bias_rows.append(
                {"method": method, "fold": fold, "task": name, "study_id": study.id, "roi": roi, "bias": None}
            )
        return report
    mask = None if full_fov else brain_mask(study.mr)
    report.rows.append(
        {
            "method": method,
            "fold": fold,
            "task": name,
            "study_id": study.id,
            "nmse_percent": nmse(pred, gt, mask),
            "ssim": ssim(pred, gt, mask),
        }
    )
    for roi in sorted(study.roi_masks):
        report.bias_rows.append(
            {
                "method": method,
                "fold": fold,
                "task": name,
                "study_id": study.id,
                "roi": roi,
                "bias": roi_bias(pred, gt, study.roi_masks[roi]),
            }
        )
    return report


def evaluate_study(
    model,
    study: Study,
    fold: int = 0,
    patch_shape: Sequence[int] | None = None,
    overlap: float = 0.5,
    full_fov: bool = False,
    tasks: Sequence[tuple[TracerId, TracerId]] = TASKS,
    baseline: bool = True,
) -> MetricReport:
    """Run every translation task on one study, plus the copy-input baseline."""
    report = MetricReport()
    for source, target in tasks:
        pred = infer_whole_volume(
            model, study.pet[source], study.mr, target, patch_shape, overlap, study.norm_records[target]
        )
        report.extend(evaluate_prediction(pred, study, source, target, METHOD, fold, full_fov))
        if baseline:
            base = copy_input_baseline(study, source, target)
            report.extend(evaluate_prediction(base, study, source, target, BASELINE, fold, full_fov))
    return report

