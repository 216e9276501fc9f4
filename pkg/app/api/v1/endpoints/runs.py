from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query

from ....core.bo_search import select_best_trial
from ....db.run_store import RunStore, get_run_store
from ....models.schemas import RunManifest, RunSummary, SearchResult, SelectionMode, TrialRecord, TrialSummary

router = APIRouter()


def _trial_summary(trial: TrialRecord) -> TrialSummary:
    return TrialSummary(
        index=trial.index,
        x=trial.x,
        changepoints=trial.curriculum.changepoints if trial.curriculum else None,
        y=trial.y,
        phase=trial.phase,
        curve_peak=trial.curve_peak,
    )


def _require_search(store: RunStore, run_id: str) -> SearchResult:
    if store.get_run(run_id) is None:
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found")
    result = store.search_result(run_id)
    if result is None or not result.trials:
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' has no search trials")
    return result


@router.get("/", response_model=List[RunSummary])
async def list_runs(store: RunStore = Depends(get_run_store)):
    """List runs, newest first"""
    return [
        RunSummary(
            run_id=manifest.run_id,
            mode=manifest.mode,
            profile=manifest.profile,
            seed=manifest.seed,
            created_at=manifest.created_at,
            n_outputs=len(manifest.outputs),
        )
        for _, manifest in store.list_runs()
    ]


@router.get("/{run_id}", response_model=RunManifest)
async def get_run(run_id: str, store: RunStore = Depends(get_run_store)):
    found = store.get_run(run_id)
    if found is None:
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found")
    return found[1]


@router.get("/{run_id}/trials", response_model=List[TrialSummary])
async def get_trials(run_id: str, store: RunStore = Depends(get_run_store)):
    """Trial records of a search run (training curves omitted)"""
    result = _require_search(store, run_id)
    return [_trial_summary(t) for t in result.trials]


@router.get("/{run_id}/best", response_model=TrialSummary)
async def get_best_trial(
    run_id: str,
    mode: SelectionMode = Query(SelectionMode.FINAL, description="final objective or evaluation-curve peak"),
    window: Optional[int] = Query(None, ge=1, description="Only consider the last N trials"),
    store: RunStore = Depends(get_run_store),
):
    result = _require_search(store, run_id)
    return _trial_summary(select_best_trial(result, mode, window))
