"""Parameter-bundle flattening and the full-batch optimizers used for training."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Cost became non-finite during optimization."""


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(getattr(params, f.name)) for f in dataclasses.fields(params)])


def unflatten(template, vec: np.ndarray):
    out, pos = {}, 0
    for f in dataclasses.fields(template):
        ref = getattr(template, f.name)
        out[f.name] = vec[pos:pos + ref.size].reshape(ref.shape).copy()
        pos += ref.size
    return type(template)(**out)


def param_arrays(params) -> dict[str, np.ndarray]:
    return {f.name: getattr(params, f.name) for f in dataclasses.fields(params)}


@dataclass
class OptimConfig:
    """How a cost is minimized.

    ``method`` is ``"lbfgs"`` (scipy L-BFGS-B), ``"gd"`` (gradient descent with
    backtracking line search) or ``"fixed"`` (plain gradient steps of ``step``).
    ``memory`` is the number of L-BFGS correction pairs kept.
    """

    method: str = "lbfgs"
    max_iter: int = 400
    tol: float = 1e-9
    step: float = 1.0
    memory: int = 10


@dataclass
class OptimResult:
    x: np.ndarray
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _checked(fun, stage):
    def wrapped(x):
        cost, grad = fun(x)
        if not np.isfinite(cost) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"{stage}: cost diverged (J={cost!r}, |x|max={np.abs(x).max():.3g})")
        return cost, grad
    return wrapped


def minimize(fun, x0: np.ndarray, cfg: OptimConfig, stage: str = "training") -> OptimResult:
    """Minimize ``fun(x) -> (cost, grad)`` from ``x0``.

    The returned history holds the cost at every accepted iterate, starting
    with the initial point; it is non-increasing for ``lbfgs`` and ``gd``.
    """
    fun = _checked(fun, stage)
    if cfg.method == "lbfgs":
        history = [fun(x0)[0]]

        def record(intermediate_result):
            history.append(float(intermediate_result.fun))

        res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", callback=record,
                                options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-12,
                                         "maxcor": cfg.memory})
        return OptimResult(res.x, history, int(res.nit))
    if cfg.method == "gd":
        return _backtracking_gd(fun, x0, cfg)
    if cfg.method == "fixed":
        x = x0.copy()
        cost, grad = fun(x)
        history = [cost]
        for it in range(cfg.max_iter):
            x = x - cfg.step * grad
            cost, grad = fun(x)
            history.append(cost)
        return OptimResult(x, history, cfg.max_iter)
    raise ValueError(f"unknown optimizer {cfg.method!r}")


def _backtracking_gd(fun, x0, cfg: OptimConfig) -> OptimResult:
    x = x0.copy()
    cost, grad = fun(x)
    history = [cost]
    step = cfg.step
    it = 0
    for it in range(1, cfg.max_iter + 1):
        gg = float(grad @ grad)
        if gg == 0.0:
            break
        for _ in range(40):
            trial = x - step * grad
            new_cost, new_grad = fun(trial)
            if new_cost <= cost - 1e-4 * step * gg:
                break
            step *= 0.5
        else:
            log.debug("line search failed at iteration %d", it)
            break
        rel = (cost - new_cost) / max(abs(cost), 1e-300)
        x, cost, grad = trial, new_cost, new_grad
        history.append(cost)
        step *= 2.0
        if rel < cfg.tol:
            break
    return OptimResult(x, history, it)
