"""Small HTTP wrapper around a trained model for online scoring.

The batch pipeline (extraction, training, evaluation) stays file-based via
the CLI; the service only wraps inference: /health, /predict, /explain.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .biomarkers import BIOMARKER_GROUPS, BIOMARKER_NAMES
from .features import DEEP_WIDTH, NormalizationStats
from .fusion import load_model


class PredictRequest(BaseModel):
    scan_id: str = "scan"
    x1: list[float] = Field(..., description=f"{DEEP_WIDTH} deep features")
    biomarkers: dict[str, float] = Field(
        ..., description="all 18 named biomarker values")


class PredictResponse(BaseModel):
    scan_id: str
    probability: float
    contributions: dict[str, float]
    model_hash: str


class ExplainResponse(PredictResponse):
    group_subtotals: dict[str, float]


def _normalized(stats: NormalizationStats, req: PredictRequest):
    if len(req.x1) != DEEP_WIDTH:
        raise HTTPException(422, f"x1 must have {DEEP_WIDTH} entries")
    missing = [n for n in BIOMARKER_NAMES if n not in req.biomarkers]
    if missing:
        raise HTTPException(422, f"missing biomarkers: {missing}")
    x1 = np.asarray(req.x1, dtype=float)
    z1 = (x1 - stats.x1_mean) / stats.x1_std
    zb = np.array([(req.biomarkers[n] - stats.biom_mean[n])
                   / stats.biom_std[n] for n in BIOMARKER_NAMES])
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(zb))):
        raise HTTPException(422, "non-finite feature values")
    return z1, zb


def create_app(model_path, stats_path=None) -> FastAPI:
    model = load_model(model_path)
    if stats_path is None:
        stats_path = str(model_path) + ".stats.json"
    stats = NormalizationStats.from_json_dict(
        json.loads(Path(stats_path).read_text()))
    app = FastAPI(title="ctquant", version="1.0")

    @app.get("/health")
    def health():
        return {"status": "ok", "model_hash": model.content_hash()}

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        z1, zb = _normalized(stats, req)
        report = model.predict(req.scan_id, z1, zb)
        return PredictResponse(**report.to_json_dict())

    @app.post("/explain", response_model=ExplainResponse)
    def explain(req: PredictRequest):
        z1, zb = _normalized(stats, req)
        report = model.predict(req.scan_id, z1, zb)
        groups = {"deep_features": ("deep_features",), **BIOMARKER_GROUPS}
        subtotals = {g: sum(report.contributions[m] for m in members)
                     for g, members in groups.items()}
        return ExplainResponse(**report.to_json_dict(),
                               group_subtotals=subtotals)

    return app
