"""Curriculum construction, validation and schedule lookup"""

import bisect
import logging
import math
from typing import Dict, List, Sequence

import numpy as np
from pydantic import ValidationError

from ..models.schemas import Curriculum, EnvMode, EnvParams, PsiLadder, ScheduleEntry
from .exceptions import InvalidArgumentError, InvalidCurriculumError

logger = logging.getLogger(__name__)

DEFAULT_PARAMS = EnvParams(kappa=0.31, p=0.05)

# Rungs of the reference study, easiest first
LADDERS: Dict[EnvMode, PsiLadder] = {
    EnvMode.KP: PsiLadder(
        rungs=[
            EnvParams(kappa=0.31, p=0.05),
            EnvParams(kappa=0.41, p=0.07),
            EnvParams(kappa=0.51, p=0.09),
            EnvParams(kappa=0.61, p=0.11),
        ]
    ),
    EnvMode.KAPPA: PsiLadder(rungs=[EnvParams(kappa=k, p=0.0) for k in (0.31, 0.41, 0.51, 0.61)]),
    EnvMode.P: PsiLadder(rungs=[EnvParams(kappa=0.31, p=p) for p in (0.05, 0.07, 0.09, 0.11)]),
}

# Inclusive segment end epochs over a 1000-epoch run
REFERENCE_EPOCHS = 1000
MANUAL_VECTOR = (197.0, 395.0, 774.0)
BO_VECTOR = (160.0, 417.0, 736.0)
PAPER_BOUNDS = ((150.0, 330.0, 730.0), (250.0, 450.0, 830.0))


def ladder_for(env_mode: EnvMode) -> PsiLadder:
    return LADDERS[EnvMode(env_mode)]


def default_params(env_mode: EnvMode) -> EnvParams:
    """Baseline training environment for a mode"""
    env_mode = EnvMode(env_mode)
    if env_mode is EnvMode.KAPPA:
        return EnvParams(kappa=0.31, p=0.0)
    return DEFAULT_PARAMS


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def from_changepoints(x: Sequence[float], ladder: PsiLadder, max_epoch: int) -> Curriculum:
    """Build a curriculum from a search vector.

    Coordinate x_i is the last epoch spent on rung i-1, so the rung switch
    happens at t_i = round(x_i) + 1.
    """
    x = [float(v) for v in x]
    if len(ladder) != len(x) + 1:
        raise InvalidArgumentError(f"a {len(x)}-d vector needs a ladder of {len(x) + 1} rungs, got {len(ladder)}")
    if not all(math.isfinite(v) for v in x):
        raise InvalidCurriculumError(f"non-finite changepoint vector {x}")

    changepoints = [_round_half_up(v) + 1 for v in x]
    bounds = [0] + changepoints + [max_epoch]
    if any(a >= b for a, b in zip(bounds, bounds[1:])):
        raise InvalidCurriculumError(
            f"changepoints {changepoints} must ascend strictly inside (0, {max_epoch})",
            changepoints=changepoints,
        )
    try:
        return Curriculum(changepoints=changepoints, segments=list(ladder.rungs), max_epoch=max_epoch)
    except ValidationError as e:
        raise InvalidCurriculumError(str(e), changepoints=changepoints) from e


def constant_curriculum(params: EnvParams, max_epoch: int) -> Curriculum:
    return Curriculum(changepoints=[], segments=[params], max_epoch=max_epoch)


def to_vector(curriculum: Curriculum) -> List[float]:
    """Inverse of ``from_changepoints``"""
    return [float(t - 1) for t in curriculum.changepoints]


def segment_index(curriculum: Curriculum, epoch: int) -> int:
    if not 0 <= epoch < curriculum.max_epoch:
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {curriculum.max_epoch})")
    return bisect.bisect_right(curriculum.changepoints, epoch)


def param_at(curriculum: Curriculum, epoch: int) -> EnvParams:
    """Environment parameters in force at an epoch (half-open segments)"""
    return curriculum.segments[segment_index(curriculum, epoch)]


def schedule_indices(curriculum: Curriculum) -> np.ndarray:
    """Segment index for every epoch in [0, max_epoch)"""
    return np.searchsorted(np.asarray(curriculum.changepoints, dtype=int), np.arange(curriculum.max_epoch), side="right")


def scale_vector(x: Sequence[float], from_epochs: int, to_epochs: int) -> List[float]:
    """Rescale a search vector to a run of a different length"""
    ratio = to_epochs / from_epochs
    return [(float(v) + 1.0) * ratio - 1.0 for v in x]


def scale_bounds(lower: Sequence[float], upper: Sequence[float], from_epochs: int, to_epochs: int):
    return scale_vector(lower, from_epochs, to_epochs), scale_vector(upper, from_epochs, to_epochs)


def to_schedule(curriculum: Curriculum) -> List[ScheduleEntry]:
    return [
        ScheduleEntry(start_epoch=start, kappa=params.kappa, p=params.p)
        for start, params in zip(curriculum.starts, curriculum.segments)
    ]


def from_schedule(entries: Sequence[ScheduleEntry], max_epoch: int) -> Curriculum:
    entries = sorted(entries, key=lambda e: e.start_epoch)
    if not entries or entries[0].start_epoch != 0:
        raise InvalidCurriculumError("a schedule must start at epoch 0")
    try:
        return Curriculum(
            changepoints=[e.start_epoch for e in entries[1:]],
            segments=[EnvParams(kappa=e.kappa, p=e.p) for e in entries],
            max_epoch=max_epoch,
        )
    except ValidationError as e:
        raise InvalidCurriculumError(str(e)) from e


def reference_curricula(env_mode: EnvMode, max_epoch: int = REFERENCE_EPOCHS) -> Dict[str, Curriculum]:
    """Manual and searched curricula of the reference study, rescaled to max_epoch"""
    ladder = ladder_for(env_mode)
    out = {}
    for name, vector in (("manual", MANUAL_VECTOR), ("bo", BO_VECTOR)):
        if max_epoch != REFERENCE_EPOCHS:
            vector = scale_vector(vector, REFERENCE_EPOCHS, max_epoch)
        out[name] = from_changepoints(vector, ladder, max_epoch)
    return out
