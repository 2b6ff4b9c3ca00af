"""Inter-slice misalignment correction.

LV centers along a stack are assumed to drift smoothly, so a per-axis
quadratic in the slice index is fitted by ordinary least squares. Each
contour is then translated from its observed center to the fitted one.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .imaging import Contour, polygon_centroid

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-12


class AlignmentError(ArithmeticError):
    """The least-squares system is singular."""


@dataclass
class CenterSeries:
    observed: np.ndarray  # (n, 2) observed (x, y), base -> apex

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.observed)):
            raise ValueError("non-finite center coordinates")

    @property
    def n(self) -> int:
        return len(self.observed)

    @classmethod
    def from_contours(cls, contours) -> "CenterSeries":
        return cls(np.array([polygon_centroid(c.points) for c in contours]))


@dataclass
class QuadraticFit:
    ax: float
    bx: float
    cx: float
    ay: float
    by: float
    cy: float
    residual_rms_x: float = 0.0
    residual_rms_y: float = 0.0


@dataclass
class NoiseModel:
    sigma_w: float
    sigma_v: float


def solve_linear(A, b) -> np.ndarray:
    """Gaussian elimination with partial pivoting."""
    M = np.array(A, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = len(x)
    scale = np.abs(M).max() if M.size else 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) <= PIVOT_TOL * max(scale, 1.0):
            raise AlignmentError("rank-deficient normal equations")
        if p != k:
            M[[k, p]] = M[[p, k]]
            x[[k, p]] = x[[p, k]]
        f = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= f[:, None] * M[k, k:]
        x[k + 1:] -= f * x[k]
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - M[k, k + 1:] @ x[k + 1:]) / M[k, k]
    return x


def design(n: int) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=np.float64)
    return np.column_stack([i * i, i, np.ones(n)])


def fit_quadratic(series: CenterSeries) -> QuadraticFit:
    """Per-axis least squares of center against slice index on ``(i^2, i, 1)``."""
    n = series.n
    if n < 3:
        raise ValueError(f"quadratic fit needs at least 3 slices, got {n}")
    X = design(n)
    XtX = X.T @ X
    coef = [solve_linear(XtX, X.T @ series.observed[:, ax]) for ax in range(2)]
    rms = [float(np.sqrt(np.mean((series.observed[:, ax] - X @ coef[ax]) ** 2))) for ax in range(2)]
    return QuadraticFit(*coef[0], *coef[1], rms[0], rms[1])


def corrected_centers(fit: QuadraticFit, n: int) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=np.float64)
    x = (fit.ax * i + fit.bx) * i + fit.cx
    y = (fit.ay * i + fit.by) * i + fit.cy
    return np.column_stack([x, y])


def noise_model(fit: QuadraticFit, series: CenterSeries) -> NoiseModel:
    """Residual SD per axis with ``n - 3`` degrees of freedom (0 for a saturated fit)."""
    n = series.n
    if n <= 3:
        return NoiseModel(0.0, 0.0)
    r = series.observed - corrected_centers(fit, n)
    s = np.sqrt((r ** 2).sum(axis=0) / (n - 3))
    return NoiseModel(float(s[0]), float(s[1]))


def align_contours(contours, observed, corrected) -> list[Contour]:
    """Translate contour ``i`` by ``corrected[i] - observed[i]``."""
    contours = list(contours)
    obs = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
    cor = np.asarray(corrected, dtype=np.float64).reshape(-1, 2)
    if not len(contours) == len(obs) == len(cor):
        raise ValueError("contours, observed and corrected lengths differ")
    return [c.translated(*(q - p)) for c, p, q in zip(contours, obs, cor)]


def translate_image(image, shift):
    """Bilinear translation of an image by ``shift=(dx, dy)``; zero fill."""
    from scipy import ndimage
    dx, dy = shift
    return ndimage.shift(np.asarray(image, dtype=np.float64), (dy, dx), order=1, mode="constant", cval=0.0)


@dataclass
class AlignmentResult:
    observed: np.ndarray
    corrected: np.ndarray
    fit: QuadraticFit | None
    noise: NoiseModel
    contours: list[Contour]

    @property
    def residuals(self) -> np.ndarray:
        return self.observed - self.corrected


def align_stack(contours) -> AlignmentResult:
    """Fit, correct and translate a base-to-apex list of contours.

    Fewer than three contours are passed through unchanged.
    """
    contours = list(contours)
    series = CenterSeries.from_contours(contours) if contours else CenterSeries(np.empty((0, 2)))
    if series.n < 3:
        log.warning("only %d slices: alignment skipped", series.n)
        return AlignmentResult(series.observed, series.observed.copy(), None, NoiseModel(0.0, 0.0), contours)
    fit = fit_quadratic(series)
    cor = corrected_centers(fit, series.n)
    return AlignmentResult(series.observed, cor, fit, noise_model(fit, series),
                           align_contours(contours, series.observed, cor))


def write_alignment_report(path, result: AlignmentResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "observed_x", "observed_y", "corrected_x", "corrected_y", "residual_x", "residual_y"])
        for i, (o, c) in enumerate(zip(result.observed, result.corrected), 1):
            w.writerow([i, *(f"{v:.6f}" for v in (*o, *c, *(o - c)))])
        w.writerow([])
        w.writerow(["sigma_w", f"{result.noise.sigma_w:.6f}"])
        w.writerow(["sigma_v", f"{result.noise.sigma_v:.6f}"])
