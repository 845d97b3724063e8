"""API endpoints for online queries against a saved reduced basis."""

import logging
from functools import lru_cache
from pathlib import Path
from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException
from fastapi.concurrency import run_in_threadpool
from pydantic import BaseModel, Field

from app.core.config import get_settings
from app.core.errors import BasisFileError, InvalidArgumentError, NumericalFailureError
from app.services.greedy import ReducedBasis, online_batch
from app.services.persistence import load_basis, read_header

logger = logging.getLogger(__name__)


class SolveRequest(BaseModel):
    y: List[List[float]] = Field(..., min_length=1, description="Parameter vectors, one per row")
    lift: bool = Field(False, description="Include the high-fidelity coefficients of each reduced solution")


class OnlineResult(BaseModel):
    row: int
    vnorm: float
    residual: Optional[float] = None
    coeffs: List[float]
    lifted: Optional[List[float]] = None


class SolveResponse(BaseModel):
    n: int
    results: List[OnlineResult]


@lru_cache(maxsize=4)
def _load_cached(path: str, mtime: float) -> ReducedBasis:
    logger.info("loading basis %s", path)
    return load_basis(path)


def get_basis_path() -> Path:
    path = get_settings().basis_path
    if path is None or not Path(path).is_file():
        raise HTTPException(status_code=503, detail="no reduced basis available (set RBGREEDY_BASIS_PATH)")
    return Path(path)


def get_basis(path: Path = Depends(get_basis_path)) -> ReducedBasis:
    try:
        return _load_cached(str(path), path.stat().st_mtime)
    except BasisFileError as e:
        raise HTTPException(status_code=500, detail=f"basis file is unreadable: {e}")


# Create router
online_router = APIRouter(tags=["Online Queries"])


@online_router.get("/online/basis")
async def basis_info(path: Path = Depends(get_basis_path)):
    """Header of the served basis: dimensions, mesh and coefficient model."""
    try:
        header = read_header(path)
    except BasisFileError as e:
        raise HTTPException(status_code=500, detail=f"basis file is unreadable: {e}")
    return {"path": str(path), **header}


@online_router.post("/online/solve", response_model=SolveResponse)
async def solve(request: SolveRequest, rb: ReducedBasis = Depends(get_basis)):
    """
    Reduced solutions for each row of y, with their V-norm and, when the operator is
    available, the Riesz norm of the high-fidelity residual.
    """
    bad = [i for i, row in enumerate(request.y) if len(row) != rb.d]
    if bad:
        raise HTTPException(status_code=422, detail=f"rows {bad} do not have d={rb.d} entries")
    try:
        rows = await run_in_threadpool(online_batch, rb, request.y, None, request.lift)
    except InvalidArgumentError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except NumericalFailureError as e:
        logger.error("online solve failed: %s", e)
        raise HTTPException(status_code=500, detail=str(e))
    return SolveResponse(n=rb.n, results=[OnlineResult(**r) for r in rows])
