"""
Main FastAPI application
Model service for federated random forests

Endpoints:
  GET    /                      API info
  GET    /health                Health check
  POST   /api/models            Upload a model document
  GET    /api/models            List loaded models
  GET    /api/models/{model_id}  Model summary
  DELETE /api/models/{model_id}  Unload a model
  POST   /api/predict           Predict rows with a loaded model
"""
import json
import logging
import os
import sys
import time
from typing import Optional

# Ensure src/ is on the path when running from different directories
sys.path.insert(0, os.path.dirname(__file__))

from fastapi import Body, FastAPI, Header, HTTPException, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from dotenv import load_dotenv

from errors import DataError, FedForestError, MissingSiteError, ModelFormatError
from model_registry import model_registry
from models import ModelInfo, ModelUploadResponse, PredictRequest, PredictResponse

# ─── Load env ────────────────────────────────────────────────────────────────
# Try .env in project root (parent of src/) first, then cwd, then system env

_HERE     = os.path.dirname(os.path.abspath(__file__))   # src/
_ROOT     = os.path.dirname(_HERE)                        # project root
_ENV_PATH = os.path.join(_ROOT, ".env")

if os.path.exists(_ENV_PATH):
    load_dotenv(_ENV_PATH, override=True)
else:
    load_dotenv(override=True)   # fallback: search cwd / parent dirs

FEDFOREST_API_KEY = os.getenv("FEDFOREST_API_KEY", "default-secret-key-change-me")
FEDFOREST_MODEL_DIR = os.getenv("FEDFOREST_MODEL_DIR", "")

logger = logging.getLogger("fedforest.service")

# ─── App setup ───────────────────────────────────────────────────────────────

app = FastAPI(
    title="FedForest Model Service",
    description=(
        "Serves random forests trained with the federated protocol. "
        "Upload a model document, then predict rows with optional site ids."
    ),
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.on_event("startup")
async def preload_models():
    if FEDFOREST_MODEL_DIR and os.path.isdir(FEDFOREST_MODEL_DIR):
        loaded = model_registry.load_directory(FEDFOREST_MODEL_DIR)
        logger.info("preloaded %d models from %s", len(loaded), FEDFOREST_MODEL_DIR)


# ─── Auth helper ─────────────────────────────────────────────────────────────

def verify_api_key(x_api_key: str):
    """Raises 401 if API key is invalid"""
    if not FEDFOREST_API_KEY or x_api_key != FEDFOREST_API_KEY:
        raise HTTPException(
            status_code=status.HTTP_401_UNAUTHORIZED,
            detail="Invalid or missing API key",
        )


def _unknown_model(model_id: str) -> HTTPException:
    return HTTPException(status_code=404, detail=f"Model {model_id!r} not found")


# ─── Endpoints ───────────────────────────────────────────────────────────────

@app.get("/", tags=["Info"])
async def root():
    """API information and available endpoints"""
    return {
        "service": "FedForest Model Service",
        "version": "1.0.0",
        "status": "active",
        "description": "Prediction service for federated random forests",
        "endpoints": {
            "upload":  "POST   /api/models",
            "list":    "GET    /api/models",
            "model":   "GET    /api/models/{model_id}",
            "delete":  "DELETE /api/models/{model_id}",
            "predict": "POST   /api/predict",
            "health":  "GET    /health",
            "docs":    "GET    /docs",
        },
    }


@app.get("/health", tags=["Info"])
async def health_check():
    """Liveness and loaded model count"""
    return {
        "status": "healthy",
        "loaded_models": model_registry.get_model_count(),
        "timestamp": int(time.time()),
    }


@app.post("/api/models", tags=["Models"], response_model=ModelUploadResponse)
async def upload_model(
    document: dict = Body(...),
    x_api_key: str = Header(..., alias="x-api-key"),
):
    """Register a model document as written by `fedforest train`"""
    verify_api_key(x_api_key)
    try:
        model_id, forest = model_registry.add_document(json.dumps(document, sort_keys=True))
    except ModelFormatError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return ModelUploadResponse(modelId=model_id, trees=len(forest.trees))


@app.get("/api/models", tags=["Models"])
async def list_models(x_api_key: str = Header(..., alias="x-api-key")):
    verify_api_key(x_api_key)
    return {"status": "success", "models": [m.model_dump() for m in model_registry.list_models()]}


@app.get("/api/models/{model_id}", tags=["Models"], response_model=ModelInfo)
async def get_model_info(model_id: str, x_api_key: str = Header(..., alias="x-api-key")):
    verify_api_key(x_api_key)
    info = model_registry.info(model_id)
    if info is None:
        raise _unknown_model(model_id)
    return info


@app.delete("/api/models/{model_id}", tags=["Models"])
async def delete_model(model_id: str, x_api_key: str = Header(..., alias="x-api-key")):
    verify_api_key(x_api_key)
    if not model_registry.remove_model(model_id):
        raise _unknown_model(model_id)
    return {"status": "deleted", "modelId": model_id}


@app.post("/api/predict", tags=["Predict"], response_model=PredictResponse)
async def predict(
    request: PredictRequest,
    x_api_key: str = Header(..., alias="x-api-key"),
):
    """
    Predict with a loaded model.

    - `rows` must have the model's number of features
    - `sites` is optional and uses the client ids of the training files; rows without a known
      site follow the larger child at client splits
    - `siteFallback=false` turns a missing site at a client split into a 422
    """
    verify_api_key(x_api_key)
    forest = model_registry.get_model(request.modelId)
    if forest is None:
        raise _unknown_model(request.modelId)
    try:
        sites = forest.site_indices(request.sites)
        predictions = forest.predict(request.rows, sites, site_fallback=request.siteFallback)
    except (DataError, MissingSiteError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return PredictResponse(modelId=request.modelId, predictions=[float(p) for p in predictions])


# ─── Global exception handler ─────────────────────────────────────────────────

@app.exception_handler(FedForestError)
async def fedforest_exception_handler(request: Request, exc: FedForestError):
    logger.warning("request to %s failed: %s", request.url.path, exc)
    return JSONResponse(status_code=422, content={"status": "error", "detail": str(exc)})


@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Catch-all, always JSON"""
    logger.exception("unhandled exception on %s", request.url.path)
    return JSONResponse(status_code=500, content={"status": "error", "detail": "internal error"})


# ─── Entry point ─────────────────────────────────────────────────────────────

def serve(host: str = "0.0.0.0", port: Optional[int] = None, log_level: str = "info"):
    import uvicorn
    port = int(port or os.environ.get("PORT", 8000))
    logger.info("starting model service on port %d", port)
    uvicorn.run(app, host=host, port=port, log_level=log_level)


if __name__ == "__main__":
    serve()
