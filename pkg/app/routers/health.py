"""Health check endpoints."""

import logging
from datetime import datetime

import numpy as np
from fastapi import APIRouter

from app.models import ParticleState
from app.schemas import HealthResponse, ModelParams
from app.services.particle_service import ParticleSimulator, make_rng

router = APIRouter()
logger = logging.getLogger(__name__)


def kernel_smoke_run() -> int:
    """Run a tiny simulation through the compiled kernels; returns the event count."""
    params = ModelParams(n_particles=4, alpha=1.0, beta=1.0, mu_n=1.0)
    sim = ParticleSimulator(params, ParticleState(np.zeros(4, dtype=np.int64)), make_rng(0))
    result = sim.simulate_until(1.0, record=True)
    return result.n_events


@router.get("/health", response_model=HealthResponse)
async def health_check():
    """
    Health check endpoint.

    Verifies:
    - API service is running
    - The compiled event kernel runs a short simulation
    """
    kernel_status = "healthy"
    try:
        kernel_smoke_run()
    except Exception as e:
        logger.error(f"Kernel health check failed: {e}")
        kernel_status = f"unhealthy: {str(e)}"

    overall_status = "healthy" if kernel_status == "healthy" else "degraded"

    return HealthResponse(
        status=overall_status,
        kernel=kernel_status,
        timestamp=datetime.utcnow()
    )
