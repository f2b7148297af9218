from sqlalchemy import create_engine, text
from sqlalchemy.orm import declarative_base, sessionmaker
from config import settings
import logging

logger = logging.getLogger(__name__)


def make_engine(url: str = None):
    """Build an engine for the run registry.

    sqlite needs check_same_thread off because FastAPI background tasks
    write from a worker thread.
    """
    url = url or settings.DATABASE_URL
    if url.startswith("sqlite"):
        return create_engine(
            url,
            echo=settings.DEBUG,
            connect_args={"check_same_thread": False},
        )
    return create_engine(
        url,
        echo=settings.DEBUG,
        pool_pre_ping=True,       # Verify connections before use (handles stale connections)
        pool_size=5,
        max_overflow=10,
        pool_recycle=1800,
    )


engine = make_engine()

# Create session factory
SessionLocal = sessionmaker(
    autocommit=False,
    autoflush=False,
    bind=engine
)

# Create base class for models
Base = declarative_base()


# Dependency for FastAPI routes
def get_db():
    """
    Get database session for dependency injection in FastAPI routes
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def init_db(bind=None):
    """
    Create the run registry tables
    """
    # models register themselves on Base.metadata at import time
    import models.experiment_run  # noqa: F401

    try:
        logger.info("Creating run registry tables...")
        Base.metadata.create_all(bind=bind or engine)
        logger.info("✅ Run registry tables ready")
    except Exception as e:
        logger.error(f"❌ Failed to create run registry tables: {str(e)}", exc_info=True)
        raise


def check_db_connection(bind=None) -> bool:
    """
    Test database connection
    """
    try:
        with (bind or engine).connect() as conn:
            conn.execute(text("SELECT 1"))
            logger.info("✅ Database connection successful")
            return True
    except Exception as e:
        logger.error(f"❌ Database connection failed: {e}")
        return False
