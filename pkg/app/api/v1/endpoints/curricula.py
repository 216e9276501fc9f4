from fastapi import APIRouter, HTTPException, Query

from ....core.curriculum import REFERENCE_EPOCHS, from_changepoints, ladder_for, reference_curricula, to_schedule
from ....core.exceptions import InvalidArgumentError
from ....models.schemas import (
    Curriculum,
    CurriculumResolveRequest,
    CurriculumScheduleResponse,
    EnvMode,
    ReferenceCurriculaResponse,
)

router = APIRouter()


def _schedule_response(curriculum: Curriculum) -> CurriculumScheduleResponse:
    return CurriculumScheduleResponse(
        changepoints=curriculum.changepoints,
        max_epoch=curriculum.max_epoch,
        schedule=to_schedule(curriculum),
    )


@router.get("/paper", response_model=ReferenceCurriculaResponse)
async def get_reference_curricula(
    env_mode: EnvMode = Query(EnvMode.KP),
    max_epoch: int = Query(REFERENCE_EPOCHS, gt=0, description="Rescale the reference schedules to this run length"),
):
    """Manual and searched curricula of the reference study"""
    try:
        curricula = reference_curricula(env_mode, max_epoch)
    except InvalidArgumentError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return ReferenceCurriculaResponse(
        env_mode=env_mode,
        manual=_schedule_response(curricula["manual"]),
        bo=_schedule_response(curricula["bo"]),
    )


@router.post("/resolve", response_model=CurriculumScheduleResponse)
async def resolve_curriculum(request: CurriculumResolveRequest):
    """Turn a changepoint vector into an epoch schedule"""
    try:
        curriculum = from_changepoints(request.x, ladder_for(request.env_mode), request.max_epoch)
    except InvalidArgumentError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return _schedule_response(curriculum)
