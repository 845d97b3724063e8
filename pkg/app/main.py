"""FastAPI application bootstrap and router registration for the online query service."""

from fastapi import FastAPI
import uvicorn

from app.api.endpoints import online_router
from app.core.config import get_settings
from app.core.logging import configure_logging

configure_logging(get_settings().log_level)

app = FastAPI(
    title="Reduced Basis Online Service",
    description="Online solves against a reduced basis built by the weak greedy",
    version="0.1.0"
)

# Include routers
app.include_router(online_router, prefix="/api")


if __name__ == "__main__":
    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True)
