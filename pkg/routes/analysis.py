# routes/analysis.py
# Closed-form trade-off and privacy-conversion calculators

from typing import List

from fastapi import APIRouter, Query
from pydantic import BaseModel, Field

from services.analysis import (
    compose_effective_mu,
    composed_gdp_mu,
    dp_to_gdp,
    gaussian_tradeoff,
    gdp_to_dp,
    lemma1_F,
    lemma1_F_composed,
    tradeoff_curve,
)
from utils.responses import success_response

router = APIRouter(prefix="/analysis", tags=["Analysis"])


# ===== SCHEMAS =====

class Lemma1Request(BaseModel):
    alpha: float = Field(..., gt=0, lt=1)
    beta: float = Field(..., gt=0, lt=1)
    m_hat: List[float] = Field(..., min_length=1)


class ComposedMuRequest(BaseModel):
    per_snv_shifts: List[float] = Field(..., min_length=1)
    variances: List[float] = Field(..., min_length=1)


# ===== ENDPOINTS =====

@router.get("/tradeoff")
def get_tradeoff(
    mu: float = Query(..., ge=0),
    alpha: float = Query(..., ge=0, le=1),
):
    """Type-II error of the best α-level test between N(0,1) and N(μ,1)"""
    return success_response({"mu": mu, "alpha": alpha, "beta": float(gaussian_tradeoff(mu, alpha))})


@router.get("/tradeoff-curve")
def get_tradeoff_curve(
    mu: float = Query(..., ge=0),
    points: int = Query(101, ge=2, le=10001),
):
    curve = tradeoff_curve(mu, points)
    return success_response({"mu": mu, "points": [{"alpha": p.alpha, "beta": p.beta} for p in curve]})


@router.get("/gdp-to-dp")
def get_gdp_to_dp(
    mu: float = Query(..., gt=0),
    epsilon: float = Query(..., ge=0),
):
    return success_response({"mu": mu, "epsilon": epsilon, "delta": float(gdp_to_dp(mu, epsilon))})


@router.get("/dp-to-gdp")
def get_dp_to_gdp(
    epsilon: float = Query(..., ge=0),
    delta: float = Query(..., gt=0, lt=1),
):
    """Smallest μ whose (ε, δ(ε)) curve passes through the given point"""
    return success_response({"epsilon": epsilon, "delta": delta, "mu": dp_to_gdp(epsilon, delta)})


@router.post("/lemma1")
def post_lemma1(payload: Lemma1Request):
    return success_response({
        "F": lemma1_F(payload.alpha, payload.beta, payload.m_hat),
        "F_composed": lemma1_F_composed(payload.alpha, payload.beta, payload.m_hat),
        "gdp_mu": composed_gdp_mu(payload.m_hat),
    })


@router.post("/composed-mu")
def post_composed_mu(payload: ComposedMuRequest):
    return success_response({"mu": compose_effective_mu(payload.per_snv_shifts, payload.variances)})
