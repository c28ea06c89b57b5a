"""Local binary pattern texture gate.

8 neighbours at radius 1, a neighbour >= centre sets its bit, borders use
replicate padding and codes are divided by 255. Bit ``k`` belongs to
``NEIGHBOURS[k]`` (clockwise from the top-left pixel).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError

LUMA = (0.299, 0.587, 0.114)
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def to_gray(x: torch.Tensor) -> torch.Tensor:
    """(N,C,H,W) -> (N,1,H,W); 3-channel input uses the luma weights."""
    if x.shape[1] == 3:
        w = torch.tensor(LUMA, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        return (x * w).sum(dim=1, keepdim=True)
    if x.shape[1] == 1:
        return x
    return x.mean(dim=1, keepdim=True)


@torch.no_grad()
def lbp_map(image):
    """Texture mask in [0, 1] for a CxHxW image or an NxCxHxW batch.

    Returns a 1xHxW (or Nx1xHxW) array of the same kind as the input
    (numpy in, numpy out).
    """
    as_numpy = isinstance(image, np.ndarray)
    x = torch.from_numpy(np.asarray(image)) if as_numpy else image
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"expected CxHxW or NxCxHxW, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise DimensionError(f"LBP needs at least 3x3 pixels, got {h}x{w}")
    gray = to_gray(x.detach())
    padded = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    code = torch.zeros_like(gray)
    for bit, (dy, dx) in enumerate(NEIGHBOURS):
        nb = padded[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        code = code + (nb >= gray).to(gray.dtype) * float(1 << bit)
    mask = code / 255.0
    if unbatched:
        mask = mask.squeeze(0)
    return mask.numpy() if as_numpy else mask
