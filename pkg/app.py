from fastapi import FastAPI, Request, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from config import settings
from utils.exceptions import LabError
from utils.logging_setup import configure_logging
from utils.responses import error_response
import uvicorn
import logging
import os

# Set up logging
configure_logging(settings.LOG_LEVEL)
logger = logging.getLogger(__name__)

# Import routes
from routes import analysis_router, experiments_router

# Create FastAPI app
app = FastAPI(
    title=settings.APP_NAME,
    version=settings.APP_VERSION,
    description="Beacon Game Lab - membership-inference games on genomic summary statistics",
    docs_url="/docs",
    redoc_url="/redoc"
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=False,  # Must be False when allow_origins=["*"]
    allow_methods=["*"],
    allow_headers=["*"],
    max_age=3600,
)


# Domain errors: 4xx with the error class and details
@app.exception_handler(LabError)
async def lab_error_handler(request: Request, exc: LabError):
    logger.warning(f"⚠️ {type(exc).__name__} on {request.url.path}: {exc.message}")
    return error_response(message=exc.message, errors=exc.to_dict(), status_code=exc.status_code)


# Global exception handler
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    logger.error(f"Global exception: {str(exc)}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "success": False,
            "message": "Internal server error",
            "detail": str(exc) if settings.DEBUG else "An error occurred"
        },
    )


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    return JSONResponse(
        status_code=exc.status_code,
        content={
            "success": False,
            "message": exc.detail,
        },
    )


# Health check endpoint
@app.get("/")
def root():
    return {
        "success": True,
        "message": f"{settings.APP_NAME} is running",
        "version": settings.APP_VERSION
    }


@app.get("/health")
def health_check():
    return {
        "success": True,
        "message": "Service is healthy",
        "status": "ok"
    }


@app.get("/health/db")
def health_check_db():
    """Check run registry connectivity"""
    from database import check_db_connection
    if check_db_connection():
        return {
            "success": True,
            "message": "Database connection successful",
            "status": "ok"
        }
    return {
        "success": False,
        "message": "Database connection failed",
        "status": "error"
    }


# Include routers with /api prefix
app.include_router(analysis_router, prefix="/api")
app.include_router(experiments_router, prefix="/api")


# Startup event
@app.on_event("startup")
def startup_event():
    logger.info(f"🚀 {settings.APP_NAME} v{settings.APP_VERSION} is starting...")
    logger.info(f"📚 Documentation available at: /docs")
    logger.info(f"🔗 Run registry: {settings.DATABASE_URL}")
    logger.info(f"📂 Artifacts: {settings.OUTPUT_DIR} (workers={settings.WORKERS})")

    # Initialize run registry tables
    try:
        from database import init_db
        init_db()
    except Exception as e:
        logger.error(f"❌ Run registry initialization failed: {str(e)}", exc_info=True)

    logger.info("✅ API ready to receive requests")


# Shutdown event
@app.on_event("shutdown")
def shutdown_event():
    logger.info(f"👋 Shutting down {settings.APP_NAME}...")


# Run the application
if __name__ == "__main__":
    port = int(os.getenv("PORT", "8000"))
    uvicorn.run(
        "app:app",
        host="0.0.0.0",
        port=port,
        reload=settings.DEBUG,
        log_level=settings.LOG_LEVEL.lower()
    )
