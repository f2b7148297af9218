import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from database import Base, get_db, init_db
from models.population import MembershipPrior, Population
from services.mechanisms import gaussian_mechanism_theorem2
from services.population import generate_population


@pytest.fixture
def toy_population():
    """Two individuals, two SNVs, written out by hand."""
    return Population(np.array([[1, 0], [1, 1]]), np.array([0.5, 0.5]))


@pytest.fixture
def small_population():
    return generate_population(12, 40, rng_seed=7)


@pytest.fixture
def tiny_population():
    """K = 4, m = 3: small enough to enumerate every membership vector."""
    return generate_population(4, 3, rng_seed=3)


@pytest.fixture
def ordering_population():
    return generate_population(10, 16, rng_seed=11)


@pytest.fixture
def half_prior():
    def build(k: int) -> MembershipPrior:
        return MembershipPrior.bernoulli(k, 0.5)

    return build


@pytest.fixture
def gdp_mechanism(ordering_population):
    return gaussian_mechanism_theorem2(8.0, ordering_population.num_snvs, 5)


# ── run registry ───────────────────────────────────────────────

@pytest.fixture
def registry_engine():
    engine = create_engine(
        "sqlite://",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    init_db(engine)
    yield engine
    Base.metadata.drop_all(bind=engine)


@pytest.fixture
def db_session(registry_engine):
    session = sessionmaker(autocommit=False, autoflush=False, bind=registry_engine)()
    try:
        yield session
    finally:
        session.close()


@pytest.fixture
def client(registry_engine):
    from app import app

    factory = sessionmaker(autocommit=False, autoflush=False, bind=registry_engine)

    def override_get_db():
        db = factory()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    with TestClient(app) as test_client:
        yield test_client
    app.dependency_overrides.clear()
