"""Contour metrics, clinical volumes and agreement statistics.

Distances are computed on contours in pixel units and converted to mm with
the contour's pixel spacing. Study summaries use the population SD; paired
agreement statistics use the sample SD.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imaging import Contour, DimensionError, as_mask, point_to_polyline, polygon_area, rasterize_polygon

log = logging.getLogger(__name__)

GOOD_APD_MM = 5.0
MIN_SAMPLES = 200
Z95 = 1.96


class UndefinedMetricError(ValueError):
    """The metric has no defined value for these inputs."""


@dataclass
class SliceMetrics:
    dice: float
    apd_mm: float
    hausdorff_mm: float
    conformity: float
    good: bool

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice {self.dice} outside [0, 1]")
        if self.apd_mm < 0 or self.hausdorff_mm < 0:
            raise ValueError("distances must be non-negative")


@dataclass
class StudyMetrics:
    n: int
    dice_mean: float
    dice_sd: float
    apd_mean: float
    apd_sd: float
    hausdorff_mean: float
    hausdorff_sd: float
    conformity_mean: float
    conformity_sd: float
    good_pct: float


@dataclass
class ClinicalIndices:
    edv_ml: float
    esv_ml: float
    ef_pct: float


@dataclass
class AgreementStats:
    n: int
    pearson_r: float
    slope: float
    intercept: float
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    cv_pct: float
    rpc: float


# --------------------------------------------------------------------------
# overlap


def dice(auto, manual) -> float:
    """Pixel-count Dice overlap of two boolean masks."""
    a, m = as_mask(auto, "auto"), as_mask(manual, "manual")
    if a.shape != m.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {m.shape}")
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        raise UndefinedMetricError("Dice is undefined for two empty masks")
    return 2.0 * int(np.logical_and(a, m).sum()) / total


def contour_dice(auto: Contour, manual: Contour, shape: tuple[int, int]) -> float:
    """Dice of the pixel regions enclosed by two closed contours."""
    return dice(rasterize_polygon(auto.points, shape), rasterize_polygon(manual.points, shape))


def conformity(dice_value: float) -> float:
    if dice_value <= 0:
        raise UndefinedMetricError("conformity is undefined for Dice = 0")
    return (3.0 * dice_value - 2.0) / dice_value


def classify_good(apd_mm: float) -> bool:
    return apd_mm < GOOD_APD_MM


# --------------------------------------------------------------------------
# distances


def densify(contour: Contour, min_points: int = MIN_SAMPLES) -> np.ndarray:
    """Points spaced evenly by arc length, at least ``min_points`` of them."""
    p = contour.points
    closed = contour.closed
    ring = np.vstack([p, p[:1]]) if closed else p
    seg = np.hypot(*np.diff(ring, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(min_points, len(p))
    if total <= 0:
        raise ValueError("contour has zero length")
    t = np.linspace(0.0, total, n, endpoint=not closed)
    return np.column_stack([np.interp(t, s, ring[:, 0]), np.interp(t, s, ring[:, 1])])


def _check_pair(auto: Contour, manual: Contour):
    if len(auto.points) == 0 or len(manual.points) == 0:
        raise ValueError("empty contour")
    if not np.isclose(auto.pixel_spacing, manual.pixel_spacing):
        raise ValueError(f"pixel spacings differ: {auto.pixel_spacing} vs {manual.pixel_spacing}")


def directed_distances(src: Contour, dst: Contour, min_points: int = MIN_SAMPLES) -> np.ndarray:
    """Pixel distance from each densified point of ``src`` to the polyline of ``dst``."""
    return point_to_polyline(densify(src, min_points), dst.points, closed=dst.closed)


def apd(auto: Contour, manual: Contour, symmetric: bool = False, min_points: int = MIN_SAMPLES) -> float:
    """Average perpendicular distance in mm, auto to manual.

    With ``symmetric`` the two directed means are averaged.
    """
    _check_pair(auto, manual)
    d = float(directed_distances(auto, manual, min_points).mean())
    if symmetric:
        d = 0.5 * (d + float(directed_distances(manual, auto, min_points).mean()))
    return d * auto.pixel_spacing


def hausdorff(auto: Contour, manual: Contour, min_points: int = MIN_SAMPLES) -> float:
    """Symmetric Hausdorff distance in mm."""
    _check_pair(auto, manual)
    d = max(directed_distances(auto, manual, min_points).max(), directed_distances(manual, auto, min_points).max())
    return float(d) * auto.pixel_spacing


def slice_metrics(auto: Contour, manual: Contour, shape: tuple[int, int],
                  symmetric_apd: bool = False) -> SliceMetrics:
    dm = contour_dice(auto, manual, shape)
    d = apd(auto, manual, symmetric=symmetric_apd)
    cc = conformity(dm) if dm > 0 else float("-inf")
    return SliceMetrics(dm, d, hausdorff(auto, manual), cc, classify_good(d))


def study_metrics(per_slice) -> StudyMetrics:
    rows = list(per_slice)
    if not rows:
        raise ValueError("no slices to summarize")

    def ms(name):
        v = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        return float(v.mean()), float(v.std())

    good = sum(bool(r.good) for r in rows)
    return StudyMetrics(len(rows), *ms("dice"), *ms("apd_mm"), *ms("hausdorff_mm"), *ms("conformity"),
                        100.0 * good / len(rows))


# --------------------------------------------------------------------------
# clinical indices


def slice_area_px(item) -> float:
    """Area in pixels of a contour (shoelace), a mask (pixel count) or a number."""
    if isinstance(item, Contour):
        return abs(polygon_area(item.points))
    arr = np.asarray(item)
    if arr.ndim == 2:
        return float(as_mask(arr).sum())
    return float(item)


def stack_volume_ml(stack, spacing_mm: float, thickness_mm: float) -> float:
    """Disc summation: every slice contributes ``area * spacing^2 * thickness``."""
    if thickness_mm <= 0 or spacing_mm <= 0:
        raise ValueError("spacing and thickness must be positive")
    areas = [slice_area_px(s) for s in stack]
    if not areas:
        raise ValueError("empty stack")
    return float(np.sum(areas)) * spacing_mm ** 2 * thickness_mm / 1000.0


def ejection_fraction(edv: float, esv: float) -> float:
    if edv == 0:
        raise UndefinedMetricError("ejection fraction is undefined for EDV = 0")
    return 100.0 * (edv - esv) / edv


def clinical_indices(ed_stack, es_stack, thickness_mm: float, spacing_mm: float) -> ClinicalIndices:
    edv = stack_volume_ml(ed_stack, spacing_mm, thickness_mm)
    esv = stack_volume_ml(es_stack, spacing_mm, thickness_mm)
    if esv > edv:
        log.warning("ESV %.2f exceeds EDV %.2f", esv, edv)
    return ClinicalIndices(edv, esv, ejection_fraction(edv, esv))


# --------------------------------------------------------------------------
# agreement


def agreement(auto_vals, manual_vals) -> AgreementStats:
    """Correlation, regression and Bland-Altman statistics of paired values."""
    a = np.asarray(auto_vals, dtype=np.float64)
    m = np.asarray(manual_vals, dtype=np.float64)
    if a.shape != m.shape or a.ndim != 1:
        raise ValueError("auto and manual must be 1D and of equal length")
    if len(a) < 3:
        raise ValueError("agreement needs at least 3 pairs")
    dm, da = m - m.mean(), a - a.mean()
    sxx = float(dm @ dm)
    if sxx == 0:
        raise UndefinedMetricError("manual values have zero variance")
    syy = float(da @ da)
    sxy = float(dm @ da)
    r = sxy / np.sqrt(sxx * syy) if syy > 0 else float("nan")
    slope = sxy / sxx
    intercept = float(a.mean() - slope * m.mean())
    diff = a - m
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    mean_all = float(np.concatenate([a, m]).mean())
    cv = 100.0 * sd / mean_all if mean_all != 0 else float("nan")
    return AgreementStats(len(a), float(r), float(slope), intercept, bias, sd,
                          bias - Z95 * sd, bias + Z95 * sd, cv, Z95 * sd)


# --------------------------------------------------------------------------
# reports


def write_metrics_json(path, per_slice, labels=None) -> None:
    rows = [asdict(r) for r in per_slice]
    if labels is not None:
        for row, lab in zip(rows, labels):
            row["slice"] = lab
    payload = {"slices": rows, "summary": asdict(study_metrics(per_slice)) if rows else None}
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True))


def write_metrics_csv(path, per_slice, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "dice", "apd_mm", "hausdorff_mm", "conformity", "good"])
        for i, r in enumerate(per_slice):
            lab = labels[i] if labels is not None else i + 1
            w.writerow([lab, f"{r.dice:.6f}", f"{r.apd_mm:.6f}", f"{r.hausdorff_mm:.6f}",
                        f"{r.conformity:.6f}", int(r.good)])


def write_agreement_csv(path, auto_vals, manual_vals, labels=None) -> None:
    """Per-pair scatter and Bland-Altman coordinates for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "auto", "manual", "mean", "difference"])
        for i, (a, m) in enumerate(zip(auto_vals, manual_vals)):
            lab = labels[i] if labels is not None else i + 1
            w.writerow([lab, f"{a:.6f}", f"{m:.6f}", f"{(a + m) / 2:.6f}", f"{a - m:.6f}"])
