"""Region-based level-set segmentation with a shape prior.

The field is negative inside the contour. The energy combines contour
length, a two-phase piecewise-constant region fit and a quadratic penalty
pulling the field toward the prior's signed distance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .imaging import (Contour, DimensionError, NoContourError, extract_zero_contour,
                      reinitialize, resample, signed_distance)

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-8


class DegenerateRegionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EnergyWeights:
    alpha1: float = 1.0   # length
    alpha2: float = 0.5   # region fit
    alpha3: float = 0.25  # shape prior

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("energy weights must be non-negative")


@dataclass(frozen=True)
class EvolutionConfig:
    gamma: float = 5.0
    epsilon: float = 1.5
    max_iters: int = 1000
    length_tol: float = 0.5
    check_every: int = 10
    patience: int = 3
    reinit_every: int = 50
    backtrack: bool = False
    max_halvings: int = 20

    def __post_init__(self):
        if self.gamma <= 0 or self.epsilon <= 0 or self.max_iters < 1:
            raise ValueError("gamma, epsilon must be positive and max_iters >= 1")


@dataclass(frozen=True)
class RegionMeans:
    c1: float  # outside (H = 1)
    c2: float  # inside


def heaviside(z, eps: float):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(z / eps))


def dirac(z, eps: float):
    return (eps / np.pi) / (eps * eps + z * z)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


def gradient(phi):
    """Central differences with replicated borders; returns ``(d/dx, d/dy)``."""
    p = np.pad(phi, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def curvature(phi):
    """``div(grad phi / |grad phi|)`` by central differences."""
    gx, gy = gradient(phi)
    norm = np.maximum(np.hypot(gx, gy), GRAD_FLOOR)
    nxx, _ = gradient(gx / norm)
    _, nyy = gradient(gy / norm)
    return nxx + nyy


def region_means(image, phi, epsilon: float = 1.5) -> RegionMeans:
    """Smoothed-Heaviside weighted means outside (``c1``) and inside (``c2``)."""
    _check_shapes(image, phi)
    H = heaviside(phi, epsilon)
    out_w, in_w = H.sum(), (1.0 - H).sum()
    if out_w < 1e-9 or in_w < 1e-9:
        raise DegenerateRegionError("one of the two regions is empty")
    return RegionMeans(float((image * H).sum() / out_w), float((image * (1.0 - H)).sum() / in_w))


def energy(phi, image, phi_shape, weights: EnergyWeights = EnergyWeights(), epsilon: float = 1.5) -> float:
    image = np.asarray(image, dtype=np.float64)
    _check_shapes(phi, image, phi_shape)
    gx, gy = gradient(phi)
    e_len = np.sum(dirac(phi, epsilon) * np.hypot(gx, gy))
    m = region_means(image, phi, epsilon)
    H = heaviside(phi, epsilon)
    e_reg = np.sum((image - m.c1) ** 2 * H + (image - m.c2) ** 2 * (1.0 - H))
    e_shape = np.sum((phi - phi_shape) ** 2)
    return float(weights.alpha1 * e_len + weights.alpha2 * e_reg + weights.alpha3 * e_shape)


def flow(phi, image, phi_shape, weights: EnergyWeights, epsilon: float):
    """Descent velocity ``d phi / dt`` of the gradient flow."""
    m = region_means(image, phi, epsilon)
    force = (weights.alpha1 * curvature(phi)
             + weights.alpha2 * ((image - m.c2) ** 2 - (image - m.c1) ** 2)
             - 2.0 * weights.alpha3 * (phi - phi_shape))
    return dirac(phi, epsilon) * force


def evolve_step(phi, image, phi_shape, weights: EnergyWeights = EnergyWeights(),
                cfg: EvolutionConfig = EvolutionConfig(), iteration: int = 0) -> np.ndarray:
    """One explicit update ``phi + gamma * dphi/dt``.

    With ``cfg.backtrack`` the step is halved until the energy does not
    increase; after ``max_halvings`` failures the field is returned unchanged.
    """
    phi = np.asarray(phi, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    _check_shapes(phi, image, phi_shape)
    v = flow(phi, image, phi_shape, weights, cfg.epsilon)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite level-set update at iteration {iteration}")
    if not cfg.backtrack:
        return phi + cfg.gamma * v
    e0 = energy(phi, image, phi_shape, weights, cfg.epsilon)
    step = cfg.gamma
    for _ in range(cfg.max_halvings + 1):
        trial = phi + step * v
        if energy(trial, image, phi_shape, weights, cfg.epsilon) <= e0:
            return trial
        step *= 0.5
    return phi.copy()


def prior_field(shape_mask, grid_shape: tuple[int, int]) -> np.ndarray:
    """Signed distance of the prior mask expressed on the image grid.

    A mask on a coarser grid is converted at its own resolution, resampled
    bilinearly, rescaled to image pixels and reinitialized.
    """
    mask = np.asarray(shape_mask, dtype=bool)
    sdf = signed_distance(mask)
    if mask.shape == tuple(grid_shape):
        return sdf
    scale = np.sqrt((grid_shape[0] / mask.shape[0]) * (grid_shape[1] / mask.shape[1]))
    up = resample(sdf, grid_shape[0], grid_shape[1], "bilinear") * scale
    return reinitialize(up)


def segment(image, shape_mask, weights: EnergyWeights = EnergyWeights(),
            cfg: EvolutionConfig = EvolutionConfig(), pixel_spacing: float = 1.0,
            trace: list | None = None) -> tuple[Contour, np.ndarray]:
    """Evolve from the prior until the contour length is stationary.

    The prior's signed distance is both the initial field and the shape
    target. Every ``check_every`` iterations the zero contour is measured;
    ``patience`` consecutive length changes below ``length_tol`` stop the
    loop. ``trace`` collects ``(iteration, energy, length)`` rows.
    """
    image = np.asarray(image, dtype=np.float64)
    phi_shape = prior_field(shape_mask, image.shape)
    phi = phi_shape.copy()
    prev_len = extract_zero_contour(phi).length
    if trace is not None:
        trace.append((0, energy(phi, image, phi_shape, weights, cfg.epsilon), prev_len))
    calm = 0
    for k in range(1, cfg.max_iters + 1):
        phi = evolve_step(phi, image, phi_shape, weights, cfg, iteration=k)
        if cfg.reinit_every and k % cfg.reinit_every == 0:
            phi = reinitialize(phi)
        if k % cfg.check_every == 0:
            length = extract_zero_contour(phi).length
            if trace is not None:
                trace.append((k, energy(phi, image, phi_shape, weights, cfg.epsilon), length))
            calm = calm + 1 if abs(length - prev_len) < cfg.length_tol else 0
            prev_len = length
            if calm >= cfg.patience:
                log.debug("level set stationary after %d iterations", k)
                break
    try:
        contour = extract_zero_contour(phi, pixel_spacing)
    except NoContourError:
        raise NoContourError("level set lost its contour during evolution") from None
    return contour, phi
