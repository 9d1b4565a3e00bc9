"""FastAPI inference service over a trained checkpoint."""
import base64
import binascii
import io
import logging
from contextlib import asynccontextmanager
from typing import List, Optional

import torch
from fastapi import Depends, FastAPI, HTTPException
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer
from pydantic import BaseModel, Field

from rpca.config import config
from rpca.data import eval_transform, load_image
from rpca.errors import RPCAError
from rpca.gradcam import gradcam, overlay
from rpca.metrics import top_k_indices
from rpca.train import Checkpoint

logger = logging.getLogger(__name__)

_checkpoint: Optional[Checkpoint] = None


def set_checkpoint(checkpoint: Optional[Checkpoint]):
    """Install the model served by the API (also used by tests)."""
    global _checkpoint
    _checkpoint = checkpoint
    if checkpoint is not None:
        logger.info("Serving %s/%s with %d classes", checkpoint.variant.kind, checkpoint.variant.backbone, len(checkpoint.classes))


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the configured checkpoint on startup."""
    logger.info("Starting rpca server on %s:%s", config.host, config.port)
    if config.checkpoint and _checkpoint is None:
        try:
            set_checkpoint(Checkpoint.load(config.checkpoint, device="cpu"))
        except RPCAError as e:
            # CheckpointError included: truncated weights, unreadable files
            logger.error("Could not load checkpoint %s; prediction endpoints will return 503: %s", config.checkpoint, e)
    elif _checkpoint is None:
        logger.warning("No checkpoint configured; prediction endpoints will return 503")

    yield

    logger.info("rpca server shutting down")


app = FastAPI(title="rpca API", version="0.1.0", lifespan=lifespan)

bearer_scheme = HTTPBearer()


class PredictRequest(BaseModel):
    image_base64: str
    top_k: int = Field(3, ge=1)


class ClassScore(BaseModel):
    class_index: int
    label: str
    probability: float


class PredictResponse(BaseModel):
    variant: str
    backbone: str
    predictions: List[ClassScore]


class GradcamRequest(BaseModel):
    image_base64: str
    target_class: Optional[int] = None
    alpha: float = Field(0.4, ge=0.0, le=1.0)


class GradcamResponse(BaseModel):
    target_class: int
    predicted_class: int
    predicted_label: str
    all_zero: bool
    overlay_png_base64: str


def _authorize(auth: HTTPAuthorizationCredentials):
    if auth.credentials != config.bearer_token:
        raise HTTPException(status_code=403, detail="Invalid or expired token")


def _require_checkpoint() -> Checkpoint:
    if _checkpoint is None:
        raise HTTPException(status_code=503, detail="No model loaded")
    return _checkpoint


def _decode_image(payload: str) -> torch.Tensor:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as e:
        raise HTTPException(status_code=422, detail=f"image_base64 is not valid base64: {e}")
    try:
        return eval_transform(load_image(io.BytesIO(raw)))
    except RPCAError as e:
        raise HTTPException(status_code=422, detail=str(e))


@app.get("/health")
async def health():
    """
    Health check endpoint.
    Returns JSON { "status": "ok" } with HTTP 200.
    """
    return {"status": "ok"}


@app.post("/rpca/api/v1/predict", response_model=PredictResponse)
def predict(payload: PredictRequest, auth: HTTPAuthorizationCredentials = Depends(bearer_scheme)):
    """Top-k classes for one base64-encoded image."""
    _authorize(auth)
    checkpoint = _require_checkpoint()
    image = _decode_image(payload.image_base64)
    k = min(payload.top_k, len(checkpoint.classes))
    try:
        checkpoint.model.eval()
        with torch.no_grad():
            probs = torch.softmax(checkpoint.model(image.unsqueeze(0)), dim=-1)[0]
    except RPCAError as e:
        raise HTTPException(status_code=422, detail=str(e))
    top = top_k_indices(probs.unsqueeze(0), k)[0].tolist()
    return PredictResponse(
        variant=checkpoint.variant.kind,
        backbone=checkpoint.variant.backbone,
        predictions=[ClassScore(class_index=i, label=checkpoint.classes[i], probability=float(probs[i])) for i in top],
    )


@app.post("/rpca/api/v1/gradcam", response_model=GradcamResponse)
def explain(payload: GradcamRequest, auth: HTTPAuthorizationCredentials = Depends(bearer_scheme)):
    """Grad-CAM overlay (PNG, base64) for one base64-encoded image."""
    _authorize(auth)
    checkpoint = _require_checkpoint()
    image = _decode_image(payload.image_base64)
    try:
        heatmap = gradcam(checkpoint.model, image, payload.target_class)
        png = overlay(heatmap, image, payload.alpha)
    except RPCAError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return GradcamResponse(
        target_class=heatmap.target_class,
        predicted_class=heatmap.predicted_class,
        predicted_label=checkpoint.classes[heatmap.predicted_class],
        all_zero=heatmap.flat,
        overlay_png_base64=base64.b64encode(png).decode("ascii"),
    )
