"""Study records, on-disk study directories and training-set preparation."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Contour, polygon_area, polygon_centroid, resample
from .io import (FormatError, read_contour_csv, read_keyvalue, read_pgm, write_contour_csv,
                 write_keyvalue, write_pgm)

IMAGE_SIDE = 256


class LoadError(FormatError):
    pass


@dataclass
class SliceRecord:
    image: np.ndarray
    contour: Contour | None = None


@dataclass
class StudyRecord:
    """One short-axis stack, ordered base to apex."""

    id: str
    slices: list[SliceRecord]
    spacing_mm: float
    thickness_mm: float
    phase: str = "ED"
    pathology: str = ""
    patient: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.slices:
            raise ValueError(f"study {self.id}: no slices")
        if self.spacing_mm <= 0 or self.thickness_mm <= 0:
            raise ValueError(f"study {self.id}: spacing and thickness must be positive")
        if not self.patient:
            self.patient = self.id

    def __len__(self):
        return len(self.slices)


_SLICE_RE = re.compile(r"slice_(\d+)\.pgm$")


def save_study(record: StudyRecord, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_keyvalue(d / "metadata.txt", {
        "id": record.id, "patient": record.patient, "spacing_mm": repr(record.spacing_mm),
        "thickness_mm": repr(record.thickness_mm), "phase": record.phase, "pathology": record.pathology,
    })
    for i, s in enumerate(record.slices, 1):
        write_pgm(d / f"slice_{i}.pgm", s.image)
        if s.contour is not None:
            write_contour_csv(d / f"contour_{i}.csv", s.contour)
    return d


def load_study(directory, image_side: int | None = IMAGE_SIDE) -> StudyRecord:
    """Read ``slice_<i>.pgm``, optional ``contour_<i>.csv`` and ``metadata.txt``."""
    d = Path(directory)
    meta_path = d / "metadata.txt"
    if not meta_path.exists():
        raise LoadError(f"{meta_path}: missing metadata file")
    meta = read_keyvalue(meta_path)
    for key in ("spacing_mm", "thickness_mm"):
        if key not in meta:
            raise LoadError(f"{meta_path}: missing {key}")
    try:
        spacing = float(meta["spacing_mm"])
        thickness = float(meta["thickness_mm"])
    except ValueError:
        raise LoadError(f"{meta_path}: spacing/thickness not numeric") from None
    indexed = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := _SLICE_RE.match(p.name)))
    if not indexed:
        raise LoadError(f"{d}: no slice_<i>.pgm files")
    slices = []
    for i, path in indexed:
        try:
            img = read_pgm(path)
        except FormatError as exc:
            raise LoadError(str(exc)) from None
        if image_side is not None and img.shape != (image_side, image_side):
            raise LoadError(f"{path}: expected {image_side}x{image_side}, got {img.shape[1]}x{img.shape[0]}")
        cpath = d / f"contour_{i}.csv"
        contour = None
        if cpath.exists():
            try:
                contour = read_contour_csv(cpath, spacing)
            except FormatError as exc:
                raise LoadError(str(exc)) from None
        slices.append(SliceRecord(img, contour))
    try:
        return StudyRecord(id=meta.get("id", d.name), slices=slices, spacing_mm=spacing,
                           thickness_mm=thickness, phase=meta.get("phase", "ED"),
                           pathology=meta.get("pathology", ""), patient=meta.get("patient", ""))
    except ValueError as exc:
        raise LoadError(f"{meta_path}: {exc}") from None


def load_studies(root) -> list[StudyRecord]:
    root = Path(root)
    if (root / "metadata.txt").exists():
        return [load_study(root)]
    dirs = sorted(p for p in root.iterdir() if (p / "metadata.txt").exists())
    if not dirs:
        raise LoadError(f"{root}: no study directories found")
    return [load_study(p) for p in dirs]


# --------------------------------------------------------------------------
# training samples


@dataclass
class Sample:
    """A full slice with its reference contour and provenance."""

    image: np.ndarray
    contour: Contour
    study: str = ""
    index: int = 0
    n_slices: int = 1

    @property
    def center(self) -> tuple[float, float]:
        return polygon_centroid(self.contour.points)

    @property
    def area(self) -> float:
        return abs(polygon_area(self.contour.points))


def samples_from(records) -> list[Sample]:
    out = []
    for rec in records:
        for i, s in enumerate(rec.slices, 1):
            if s.contour is not None:
                out.append(Sample(s.image, s.contour, rec.id, i, len(rec)))
    return out


@dataclass
class ContourGroups:
    large: list[Sample]
    small: list[Sample]
    threshold: float


def split_contour_groups(records) -> ContourGroups:
    """Split annotated slices at the median contour area (ties go to ``large``)."""
    samples = samples_from(records)
    if not samples:
        raise ValueError("no reference contours to split")
    areas = np.array([s.area for s in samples])
    threshold = float(np.median(areas))
    large = [s for s, a in zip(samples, areas) if a >= threshold]
    small = [s for s, a in zip(samples, areas) if a < threshold]
    return ContourGroups(large, small, threshold)


def select_network(slice_index: int, n_slices: int) -> str:
    """``"small"`` for the apical third of the stack, ``"large"`` otherwise."""
    if not 1 <= slice_index <= n_slices:
        raise ValueError(f"slice index {slice_index} outside 1..{n_slices}")
    return "small" if slice_index > math.ceil(2 * n_slices / 3) else "large"


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    factor: int = 10
    max_translate_px: float = 10.0
    max_rotate_deg: float = 15.0
    pca_intensity_scale: float = 0.1
    pca_components: int = 3
    pca_grid: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("augmentation factor must be >= 1")


def intensity_pca(images, n_components: int = 3, grid: int = 16):
    """Top principal intensity modes of the (coarsely resampled) training images.

    Returns ``(eigenvalues, modes)`` with each mode a ``grid x grid`` unit-norm map.
    """
    X = np.stack([resample(np.asarray(im, float), grid, grid, "bilinear").ravel() for im in images])
    X = X - X.mean(axis=0)
    cov = X.T @ X / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    return np.maximum(vals[order], 0.0), vecs[:, order].T.reshape(-1, grid, grid)


def rigid_transform(image, points, angle_deg: float, shift, order: int = 1):
    """Rotate about the image center by ``angle_deg`` then translate by ``shift=(dx, dy)``.

    Returns the warped image (bilinear for ``order=1``) and the identically
    mapped ``(x, y)`` points.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    th = np.deg2rad(angle_deg)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    t = np.asarray(shift, dtype=np.float64)
    pts = None
    if points is not None:
        pts = (np.asarray(points, float) - c) @ R.T + c + t
    # output (x, y) -> input (x, y): R^T (q - c - t) + c; ndimage works in (row, col)
    Rinv = R.T
    M = Rinv[::-1, ::-1]
    off_xy = c - Rinv @ (c + t)
    warped = ndimage.affine_transform(image, M, offset=off_xy[::-1], order=order, mode="constant", cval=0.0)
    return warped, pts


def augment_dataset(samples, cfg: AugmentConfig) -> list[Sample]:
    """Enlarge a sample list ``cfg.factor`` times.

    Each original is followed by ``factor - 1`` copies with a random rotation,
    translation and PCA intensity perturbation; contours move with the image.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to augment")
    if cfg.factor == 1:
        return samples
    rng = np.random.default_rng(cfg.seed)
    vals, modes = intensity_pca([s.image for s in samples], cfg.pca_components, cfg.pca_grid)
    out = []
    for s in samples:
        out.append(s)
        h, w = s.image.shape
        full_modes = [resample(m, h, w, "bilinear") for m in modes]
        for _ in range(cfg.factor - 1):
            ang = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
            shift = rng.uniform(-cfg.max_translate_px, cfg.max_translate_px, 2)
            img, pts = rigid_transform(s.image, s.contour.points, ang, shift)
            coef = rng.normal(0.0, 1.0, len(vals)) * cfg.pca_intensity_scale * np.sqrt(vals)
            for a, m in zip(coef, full_modes):
                img = img + a * m
            img = np.clip(img, 0.0, 1.0)
            out.append(replace(s, image=img, contour=Contour(pts, s.contour.pixel_spacing)))
    return out
