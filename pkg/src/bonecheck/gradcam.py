"""Gradient-weighted class activation maps and overlay rendering.

The explained score is the pre-sigmoid logit z for the normal class and
-z for abnormal (the logit keeps gradients alive where sigmoid
saturates). Channel weights are the spatial means of d(score)/dA; the
map is ReLU of the weighted channel sum, normalized by its max (an
all-zero map stays all-zero), then bilinearly upsampled to input size.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import data as dat
from .autograd import Tensor, backward
from .models import ModelGraph


class GradCamError(ValueError):
    pass


@dataclass
class CamHeatmap:
    values: np.ndarray       # (h,w) in [0,1] at target-layer resolution
    upsampled: np.ndarray    # (H,W) in [0,1] at input resolution
    raw: np.ndarray          # pre-ReLU weighted channel sum, unnormalized
    target_layer: str
    explained_class: str


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    # align-corners sampling; degenerate axes collapse to index 0
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def grad_cam(model: ModelGraph, image: np.ndarray,
             target_layer: str | None = None,
             explained_class: str = dat.LABEL_ABNORMAL) -> CamHeatmap:
    """Heatmap for one image; image is (1,H,W) or (1,1,H,W) in [0,1]."""
    if model.kind == "ensemble":
        raise GradCamError("use cam_for_ensemble for ensembles")
    if explained_class not in (dat.LABEL_NORMAL, dat.LABEL_ABNORMAL):
        raise GradCamError(f"unknown class {explained_class!r}")
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if target_layer is None:
        target_layer = model.last_conv_layer()
    if target_layer not in model.shapes:
        raise GradCamError(f"unknown layer name {target_layer!r}")
    if len(model.shapes[target_layer]) != 3:
        raise GradCamError(f"target layer {target_layer!r} is not a 4-D activation")

    model.set_requires_grad(True)
    try:
        _, acts = model.forward(Tensor(arr), capture={target_layer, "head"})
        logit = acts["head"]
        score = logit if explained_class == dat.LABEL_NORMAL else _negate(logit)
        backward(score)
        activation = acts[target_layer]
    finally:
        model.set_requires_grad(False)

    a = activation.data[0]                       # (C,h,w)
    da = activation.grad[0] if activation.grad is not None else np.zeros_like(a)
    alpha = da.mean(axis=(1, 2))                 # channel weights
    raw = np.tensordot(alpha, a, axes=1)         # (h,w)
    cam = np.maximum(raw, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    H, W = arr.shape[2], arr.shape[3]
    return CamHeatmap(values=cam, upsampled=np.clip(_bilinear_resize(cam, H, W), 0, 1),
                      raw=raw, target_layer=target_layer,
                      explained_class=explained_class)


def _negate(t: Tensor) -> Tensor:
    from .autograd import scale
    return scale(t, -1.0)


def cam_for_ensemble(ensemble: ModelGraph, image: np.ndarray,
                     explained_class: str = dat.LABEL_ABNORMAL,
                     ) -> list[tuple[str, CamHeatmap]]:
    """Independent Grad-CAM per member at each member's default target layer."""
    if ensemble.kind != "ensemble":
        raise GradCamError("cam_for_ensemble expects an ensemble graph")
    out = []
    for name, member in ensemble.member_graphs.items():
        try:
            out.append((name, grad_cam(member, image, None, explained_class)))
        except Exception as e:
            raise GradCamError(f"member {name}: {e}") from e
    return out


def _colormap(v: np.ndarray) -> np.ndarray:
    """Monotone blue -> red: (r,g,b) = (255v, 0, 255(1-v)). v in [0,1], (H,W)."""
    r = np.round(v * 255.0)
    b = np.round((1.0 - v) * 255.0)
    g = np.zeros_like(r)
    return np.stack([r, g, b], axis=-1)


def overlay(heatmap: CamHeatmap, image: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Alpha-blend the colormapped heatmap over the grayscale image.

    Returns an (H,W,3) uint8 array; alpha=0 reproduces the grayscale
    image exactly.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim == 3:
        arr = arr[0]
    if heatmap.upsampled.shape != arr.shape:
        raise GradCamError(
            f"heatmap {heatmap.upsampled.shape} vs image {arr.shape} dimension mismatch")
    gray = np.round(np.clip(arr, 0, 1) * 255.0)
    if alpha == 0.0:
        return np.repeat(gray[:, :, None], 3, axis=2).astype(np.uint8)
    gray_rgb = np.repeat(gray[:, :, None], 3, axis=2)
    heat_rgb = _colormap(heatmap.upsampled)
    blended = np.round((1.0 - alpha) * gray_rgb + alpha * heat_rgb)
    return np.clip(blended, 0, 255).astype(np.uint8)


def overlay_png_bytes(heatmap: CamHeatmap, image: np.ndarray, alpha: float = 0.4) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(overlay(heatmap, image, alpha), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_overlay_png(heatmap: CamHeatmap, image: np.ndarray, path,
                     alpha: float = 0.4) -> None:
    with open(path, "wb") as f:
        f.write(overlay_png_bytes(heatmap, image, alpha))


def write_heatmap_csv(heatmap: CamHeatmap, path) -> None:
    np.savetxt(path, heatmap.upsampled, delimiter=",", fmt="%.6f")
