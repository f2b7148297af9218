from .analysis import router as analysis_router
from .experiments import router as experiments_router

__all__ = [
    "analysis_router",
    "experiments_router",
]
