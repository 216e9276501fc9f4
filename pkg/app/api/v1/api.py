from fastapi import APIRouter

# Import endpoints
from .endpoints import curricula, runs

api_router = APIRouter()
api_router.include_router(runs.router, prefix="/runs", tags=["runs"])
api_router.include_router(curricula.router, prefix="/curricula", tags=["curricula"])
