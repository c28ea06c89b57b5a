"""Grad-CAM heatmaps for the live/spoof decision.

Channel weights are the spatially averaged gradients of the target-class
logit with respect to a spatial feature layer. The heatmap is the ReLU of the
weighted channel sum, bilinearly upsampled to the input size and min-max
normalised per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayerError

CLASS_NAMES = ("live", "spoof")
DEFAULT_LAYER = "backbone"


@dataclass
class Heatmap:
    """Normalised heatmap of one image (``values`` is 1xHxW in [0, 1])."""

    values: torch.Tensor
    target_class: str
    layer_id: str
    raw: Optional[torch.Tensor] = None

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


def class_index(target) -> int:
    if isinstance(target, str):
        if target not in CLASS_NAMES:
            raise ValueError(f"target class must be one of {CLASS_NAMES}, got {target!r}")
        return CLASS_NAMES.index(target)
    idx = int(target)
    if idx not in (0, 1):
        raise ValueError(f"target class index must be 0 or 1, got {idx}")
    return idx


def resolve_layer(model: nn.Module, layer: Union[str, nn.Module, None]) -> tuple:
    """Return ``(name, module)`` for a layer given by dotted name or module."""
    if layer is None:
        layer = DEFAULT_LAYER
    if isinstance(layer, nn.Module):
        for name, mod in model.named_modules():
            if mod is layer:
                return name or "model", mod
        raise LayerError("layer module is not part of the model")
    modules = dict(model.named_modules())
    if layer not in modules:
        spatial = [n for n, m in modules.items() if isinstance(m, nn.Conv2d)]
        raise LayerError(f"unknown layer {layer!r}; convolutional layers include {spatial[-5:]}")
    return layer, modules[layer]


def _default_score(out, cls: int) -> torch.Tensor:
    logits = out.v_c if hasattr(out, "v_c") else out
    return logits[:, cls]


def normalise(cam: torch.Tensor) -> torch.Tensor:
    """Per-image min-max to [0, 1]; a flat map becomes 1 where positive and 0 elsewhere."""
    flat = cam.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    flat_map = span <= 1e-12
    scaled = (cam - lo) / torch.where(flat_map, torch.ones_like(span), span)
    return torch.where(flat_map, (cam > 0).to(cam.dtype), scaled)


def grad_cam_batch(model: nn.Module, x: torch.Tensor, target_class, layer=None,
                   score_fn: Optional[Callable] = None, normalize: bool = True) -> torch.Tensor:
    """Heatmaps for an NxCxHxW batch, returned as Nx1xHxW."""
    cls = class_index(target_class)
    _, module = resolve_layer(model, layer)
    score_fn = score_fn or _default_score
    captured = {}

    def hook(_mod, _inp, output):
        captured["act"] = output

    was_training = model.training
    model.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            out = model(x.detach())
            act = captured.get("act")
            if not isinstance(act, torch.Tensor) or act.dim() != 4:
                shape = None if not isinstance(act, torch.Tensor) else tuple(act.shape)
                raise LayerError(f"Grad-CAM needs a spatial NxCxHxW layer, got activation shape {shape}")
            score = score_fn(out, cls)
            (grads,) = torch.autograd.grad(score.sum(), act)
    finally:
        handle.remove()
        model.train(was_training)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    # Bilinear interpolation of a nonnegative map stays nonnegative; clamp guards rounding.
    cam = cam.clamp(min=0.0)
    return normalise(cam) if normalize else cam


def grad_cam(model: nn.Module, x: torch.Tensor, target_class, layer=None,
             score_fn: Optional[Callable] = None) -> Heatmap:
    """Grad-CAM heatmap of a single CxHxW (or 1xCxHxW) image."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise ValueError(f"grad_cam takes one image, got shape {tuple(x.shape)}; use grad_cam_batch")
    name, _ = resolve_layer(model, layer)
    raw = grad_cam_batch(model, x, target_class, layer, score_fn, normalize=False)
    cls = CLASS_NAMES[class_index(target_class)]
    return Heatmap(normalise(raw)[0], cls, name, raw[0])


def heatmap_filename(sample_id: str, target_class: str, layer_id: str) -> str:
    return f"{sample_id}.{target_class}.{layer_id}.png"


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.45, cmap: str = "jet") -> np.ndarray:
    """Blend a CxHxW image in [0,1] with an HxW heatmap; returns HxWx3 uint8."""
    from matplotlib import colormaps

    rgb = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    colour = colormaps[cmap](np.clip(heat, 0.0, 1.0))[..., :3]
    mixed = (1 - alpha) * rgb + alpha * colour
    return np.round(np.clip(mixed, 0.0, 1.0) * 255).astype(np.uint8)


def save_overlay(heatmap: Heatmap, image, sample_id: str, out_dir) -> Path:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    path = out_dir / heatmap_filename(sample_id, heatmap.target_class, heatmap.layer_id)
    Image.fromarray(overlay(img, heatmap.numpy()[0])).save(path)
    return path
