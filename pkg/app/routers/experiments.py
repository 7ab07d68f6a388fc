"""Experiment and oracle endpoints."""

import asyncio
import logging

from fastapi import APIRouter, HTTPException, Query

from app.errors import ConfigError, DomainError
from app.schemas import ExperimentConfig, ExperimentResponse, GapOracleResponse
from app.services.experiment_service import ExperimentService
from app.services.longtime_service import gap_chain_oracle_n2

router = APIRouter()
logger = logging.getLogger(__name__)


@router.post("/experiments", response_model=ExperimentResponse)
async def run_experiment(config: ExperimentConfig):
    """
    Run one experiment configuration and return its records.

    The run happens in a worker thread; records are not written to disk here,
    the CLI does that.
    """
    try:
        service = ExperimentService(config)
        return await asyncio.to_thread(service.run)

    except (ConfigError, DomainError) as e:
        logger.warning(f"Rejected experiment {config.kind.value}: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error running experiment: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Failed to run experiment: {str(e)}")


@router.get("/oracle/n2", response_model=GapOracleResponse)
async def oracle_n2(
    alpha: float = Query(..., ge=0.0),
    beta: float = Query(..., ge=0.0),
    mu2: float = Query(..., ge=0.0),
    truncation: int = Query(200, ge=10),
):
    """Exact stationary law of the N = 2 gap |x_1 - x_2|."""
    try:
        result = gap_chain_oracle_n2(alpha, beta, mu2, truncation)
        return GapOracleResponse(
            alpha=alpha,
            beta=beta,
            mu2=mu2,
            truncation=result.truncation,
            mean_gap=result.mean_gap,
            mass_defect=result.mass_defect,
            distribution=result.distribution.tolist(),
        )

    except (DomainError, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error computing gap oracle: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Failed to compute gap oracle: {str(e)}")
