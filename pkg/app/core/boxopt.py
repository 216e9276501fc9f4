"""Box-constrained limited-memory BFGS with gradient projection.

Active bounds are handled by projecting the gradient and every trial point
onto the box; the quasi-Newton direction is computed on the free variables
with the classic two-loop recursion and accepted through Armijo backtracking
along the projected path.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from ..models.schemas import Box, OptimizerConfig
from .exceptions import InvalidArgumentError, NumericalFailureError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]

ARMIJO_C1 = 1e-4
CURVATURE_EPS = 1e-10
MAX_BACKTRACKS = 60


class Status(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class OptimizeResult:
    x: np.ndarray
    fun: float
    status: Status
    n_iters: int
    n_evals: int
    projected_grad_norm: float


def box_arrays(box: Box) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)


def projected_gradient(x: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return x - np.clip(x - g, lower, upper)


def _evaluate(objective: Objective, x: np.ndarray) -> Tuple[float, np.ndarray]:
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalFailureError(
            "objective returned a non-finite value or gradient",
            diagnostics={"x": x.tolist(), "f": f},
        )
    return f, g


def _two_loop(g: np.ndarray, history: Deque[Tuple[np.ndarray, np.ndarray]], free: np.ndarray) -> np.ndarray:
    """-H g restricted to the free variables"""
    q = np.where(free, g, 0.0)
    saved = []
    for s, y in reversed(history):
        s_f, y_f = s * free, y * free
        sy = float(s_f @ y_f)
        if sy <= CURVATURE_EPS * np.linalg.norm(s_f) * np.linalg.norm(y_f) or sy <= 0.0:
            continue
        rho = 1.0 / sy
        a = rho * float(s_f @ q)
        q = q - a * y_f
        saved.append((s_f, y_f, rho, a))

    if saved:
        s_f, y_f, _, _ = saved[0]
        gamma = float(s_f @ y_f) / float(y_f @ y_f)
    else:
        gamma = 1.0 / max(1.0, float(np.linalg.norm(q, np.inf)))
    r = gamma * q

    for s_f, y_f, rho, a in reversed(saved):
        b = rho * float(y_f @ r)
        r = r + (a - b) * s_f
    return -r


def minimize(
    objective: Objective,
    box: Box,
    x0: Sequence[float],
    config: Optional[OptimizerConfig] = None,
) -> OptimizeResult:
    """Minimize a differentiable objective inside a box"""
    config = config or OptimizerConfig()
    lower, upper = box_arrays(box)
    x = np.asarray(x0, dtype=float)
    if x.shape != lower.shape:
        raise InvalidArgumentError(f"x0 has shape {x.shape}, box has dimension {lower.shape[0]}")
    x = np.clip(x, lower, upper)

    f, g = _evaluate(objective, x)
    n_evals = 1
    history: Deque[Tuple[np.ndarray, np.ndarray]] = deque(maxlen=config.memory)
    status = Status.MAX_ITERS
    pg_norm = float(np.linalg.norm(projected_gradient(x, g, lower, upper), np.inf))

    iteration = 0
    stalled = 0
    if pg_norm <= config.grad_tol:
        status = Status.CONVERGED

    while status is Status.MAX_ITERS and iteration < config.max_iters:
        iteration += 1
        at_lower = (x <= lower) & (g > 0)
        at_upper = (x >= upper) & (g < 0)
        free = ~(at_lower | at_upper)

        d = _two_loop(g, history, free)
        if float(d @ g) >= 0.0:
            history.clear()
            d = _two_loop(g, history, free)

        step = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            x_new = np.clip(x + step * d, lower, upper)
            delta = x_new - x
            if not np.any(delta):
                break
            f_new, g_new = _evaluate(objective, x_new)
            n_evals += 1
            if f_new <= f + ARMIJO_C1 * float(g @ delta):
                accepted = True
                break
            step *= 0.5

        if not accepted:
            if history:
                logger.debug(f"Line search failed at iteration {iteration}, resetting curvature memory")
                history.clear()
                continue
            status = Status.CONVERGED if pg_norm <= config.grad_tol else Status.DEGENERATE
            break

        s, y = x_new - x, g_new - g
        if float(s @ y) > CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y))

        f_prev = f
        x, f, g = x_new, f_new, g_new
        pg_norm = float(np.linalg.norm(projected_gradient(x, g, lower, upper), np.inf))

        if pg_norm <= config.grad_tol:
            status = Status.CONVERGED
            break
        # two consecutive negligible decreases count as a stall
        if (f_prev - f) <= config.f_tol * max(abs(f_prev), abs(f), 1.0):
            stalled += 1
            if stalled >= 2:
                status = Status.DEGENERATE
                break
        else:
            stalled = 0

    logger.debug(f"minimize finished: status={status.value}, f={f:.6g}, iters={iteration}, evals={n_evals}")
    return OptimizeResult(
        x=x, fun=f, status=status, n_iters=iteration, n_evals=n_evals, projected_grad_norm=pg_norm
    )


def start_points(box: Box, n_starts: int, rng_seed: int) -> np.ndarray:
    """Stratified (Latin hypercube) starting points inside the box"""
    lower, upper = box_arrays(box)
    sampler = qmc.LatinHypercube(d=lower.shape[0], seed=rng_seed)
    return qmc.scale(sampler.random(n_starts), lower, upper)


def multistart_minimize(
    objective: Objective,
    box: Box,
    n_starts: int,
    rng_seed: int,
    config: Optional[OptimizerConfig] = None,
    extra_starts: Optional[Sequence[Sequence[float]]] = None,
    max_workers: int = 1,
) -> OptimizeResult:
    """Best of several independent ``minimize`` runs; ties go to the earliest start"""
    if n_starts < 1:
        raise InvalidArgumentError("n_starts must be at least 1")
    starts: List[np.ndarray] = list(start_points(box, n_starts, rng_seed))
    if extra_starts is not None:
        starts.extend(np.asarray(s, dtype=float) for s in extra_starts)

    def run(x0: np.ndarray):
        try:
            return minimize(objective, box, x0, config)
        except NumericalFailureError as e:
            return e

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run, starts))
    else:
        outcomes = [run(x0) for x0 in starts]

    results = [o for o in outcomes if isinstance(o, OptimizeResult)]
    failures = [o for o in outcomes if isinstance(o, NumericalFailureError)]
    if not results:
        raise failures[-1]
    if failures:
        logger.warning(f"{len(failures)} of {len(starts)} optimizer starts failed numerically")

    best = results[0]
    for result in results[1:]:
        if result.fun < best.fun:
            best = result
    return best
