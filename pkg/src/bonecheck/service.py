"""HTTP prediction service backing the web UI.

Endpoints:
  GET  /health  -> {"status":"ok"}
  GET  /models  -> {"models":[{"name","input_size"}]}
  POST /predict -> multipart (image file, models comma-list, cam bool);
                   JSON array of per-model predictions.
                   413 oversize upload, 400 undecodable image, 404 unknown model.

Models are loaded once at startup and shared read-only; each request
owns its private inference/CAM state. Uploaded images are discarded
after the response.
"""

from __future__ import annotations

import base64
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import data as dat
from . import evaluation as ev
from . import gradcam as gc
from .models import ModelGraph, load_checkpoint

ENV_MODELS_DIR = "BONECHECK_MODELS_DIR"
DEFAULT_MAX_UPLOAD = 10 * 1024 * 1024


@dataclass
class ServiceConfig:
    registry: dict[str, str]           # model name -> checkpoint path
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD
    cam_enabled: bool = True
    static_dir: str | None = None      # optional web UI bundle
    models: dict[str, ModelGraph] = field(default_factory=dict)

    def __post_init__(self):
        if not self.registry:
            raise ValueError("service needs at least one registered model")


def resolve_registry(model_flags: list[str], models_dir: str | None) -> dict[str, str]:
    """name=path flags, else *.ckpt files from a directory (or $BONECHECK_MODELS_DIR)."""
    registry: dict[str, str] = {}
    for flag in model_flags:
        if "=" not in flag:
            raise ValueError(f"--model expects name=path, got {flag!r}")
        name, path = flag.split("=", 1)
        registry[name] = path
    if not registry:
        root = models_dir or os.environ.get(ENV_MODELS_DIR)
        if not root:
            raise ValueError(
                f"no models registered: pass --model name=path, --models-dir, "
                f"or set ${ENV_MODELS_DIR}")
        for p in sorted(Path(root).glob("*.ckpt")):
            registry[p.stem] = str(p)
        if not registry:
            raise ValueError(f"no *.ckpt files under {root}")
    return registry


def create_app(config: ServiceConfig) -> FastAPI:
    # fail fast: a missing/corrupt checkpoint must refuse to start
    models: dict[str, ModelGraph] = {name: load_checkpoint(path)
                                     for name, path in config.registry.items()}
    config.models = models
    app = FastAPI(title="bonecheck abnormality predictor")

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/models")
    def list_models():
        return {"models": [{"name": name,
                            "input_size": list(model.input_shape)}
                           for name, model in models.items()]}

    @app.post("/predict")
    async def predict(image: UploadFile = File(...),
                      models_param: str = Form("", alias="models"),
                      cam: bool = Form(False)):
        blob = await image.read()
        if len(blob) > config.max_upload_bytes:
            return JSONResponse(status_code=413, content={
                "error": f"upload exceeds limit of {config.max_upload_bytes} bytes"})
        names = [n.strip() for n in models_param.split(",") if n.strip()] \
            or list(models)
        unknown = [n for n in names if n not in models]
        if unknown:
            return JSONResponse(status_code=404, content={
                "error": f"unknown model name(s): {', '.join(unknown)}"})

        responses = []
        for name in names:
            model = models[name]
            t0 = time.perf_counter()
            _, h, w = model.input_shape
            try:
                arr = dat.load_image_bytes(blob, (h, w))
            except dat.DatasetError as e:
                return JSONResponse(status_code=400, content={"error": str(e)})
            p_normal = ev.predict_image(model, arr)
            decision = ev.decide(p_normal)
            entry = {"model": name,
                     "probability_normal": p_normal,
                     "probability_abnormal": 1.0 - p_normal,
                     "decision": decision,
                     "elapsed_ms": 0.0}
            if cam and config.cam_enabled:
                if model.kind == "ensemble":
                    maps = gc.cam_for_ensemble(model, arr, explained_class=decision)
                    heatmap = maps[0][1]
                else:
                    heatmap = gc.grad_cam(model, arr, explained_class=decision)
                png = gc.overlay_png_bytes(heatmap, arr)
                entry["cam_png_base64"] = base64.b64encode(png).decode("ascii")
            entry["elapsed_ms"] = (time.perf_counter() - t0) * 1000.0
            responses.append(entry)
        return responses

    if config.static_dir:
        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="ui")
    return app
