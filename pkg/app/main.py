from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from .api.v1.api import api_router
from .core.config import settings
from .db.run_store import close_run_store, open_run_store


@asynccontextmanager
async def lifespan(_app: FastAPI):
    await open_run_store()
    yield
    await close_run_store()


def create_application() -> FastAPI:
    application = FastAPI(
        lifespan=lifespan,
        title=settings.project_name,
        version="1.0.0",
        description="Read-only results service for curriculum search runs",
        openapi_url=f"{settings.api_v1_str}/openapi.json",
    )

    application.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    application.include_router(api_router, prefix=settings.api_v1_str)

    return application


app = create_application()


@app.get("/")
async def root():
    return {"message": "Welcome to the Curriculum BO results service", "docs": "/docs"}


@app.get("/health")
async def health_check():
    return {"status": "healthy"}
