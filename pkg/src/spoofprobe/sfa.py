"""Semantic feature augmentation (SFA).

Two convolutional VAEs, ``live`` and ``spoof``, map an image to bounded
single-channel maps. An LBP texture mask mixes them into a contrastive pair::

    M_live  =  lbp * G_live - (1 - lbp) * G_spoof
    M_spoof = -M_live

During training each image receives the map *opposite* to its label and the
generators are optimised against a frozen target model. At inference
``sfa_apply`` adds the map *matching* the label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .datasets import Dataset
from .errors import ConfigurationError, DimensionError, TrainingDivergenceError
from .lbp import lbp_map
from .models import CHECKPOINT_SCHEMA, read_meta, state_hash

logger = logging.getLogger(__name__)

HIDDEN_DIMS = (32, 64, 128, 256, 512)
PROB_EPS = 1e-7


class MapVAE(nn.Module):
    """Image-to-map variational autoencoder.

    Five stride-2 conv/BN/LeakyReLU encoder units, a spatial Gaussian latent
    and a mirrored transposed-conv decoder. The output passes through
    ``alpha * tanh`` so every value lies in [-alpha, alpha].
    """

    def __init__(self, in_channels: int = 3, hidden_dims: Sequence[int] = HIDDEN_DIMS,
                 latent_channels: int = 32, alpha: float = 0.1):
        super().__init__()
        self.alpha = alpha
        units, c = [], in_channels
        for h in hidden_dims:
            units.append(nn.Sequential(nn.Conv2d(c, h, 3, 2, 1), nn.BatchNorm2d(h), nn.LeakyReLU(0.2)))
            c = h
        self.encoder = nn.Sequential(*units)
        self.fc_mu = nn.Conv2d(c, latent_channels, 1)
        self.fc_logvar = nn.Conv2d(c, latent_channels, 1)
        self.decoder_input = nn.Conv2d(latent_channels, c, 1)
        rev = list(hidden_dims[::-1]) + [hidden_dims[0]]
        self.decoder = nn.Sequential(*[
            nn.Sequential(nn.ConvTranspose2d(a, b, 3, 2, 1, output_padding=1), nn.BatchNorm2d(b), nn.LeakyReLU(0.2))
            for a, b in zip(rev[:-1], rev[1:])
        ])
        self.final = nn.Conv2d(hidden_dims[0], 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(map, kl)``; samples the latent only in training mode."""
        h = self.encoder(x)
        mu, logvar = self.fc_mu(h), self.fc_logvar(h).clamp(-10.0, 10.0)
        z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar) if self.training else mu
        out = self.final(self.decoder(self.decoder_input(z)))
        if out.shape[-2:] != x.shape[-2:]:
            out = F.interpolate(out, size=x.shape[-2:], mode="bilinear", align_corners=False)
        kl = -0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).flatten(1).sum(dim=1).mean()
        return self.alpha * torch.tanh(out), kl

    @torch.no_grad()
    def zero_output_(self) -> "MapVAE":
        """Force the output layer to produce exactly zero maps."""
        self.final.weight.zero_()
        self.final.bias.zero_()
        return self


class SfaGenerators(nn.Module):
    def __init__(self, in_channels: int = 3, alpha: float = 0.1, latent_channels: int = 32,
                 hidden_dims: Sequence[int] = HIDDEN_DIMS, use_lbp: bool = True):
        super().__init__()
        if alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {alpha}")
        self.config = dict(in_channels=in_channels, alpha=alpha, latent_channels=latent_channels,
                           hidden_dims=list(hidden_dims), use_lbp=use_lbp)
        self.alpha = alpha
        self.use_lbp = use_lbp
        self.live = MapVAE(in_channels, hidden_dims, latent_channels, alpha)
        self.spoof = MapVAE(in_channels, hidden_dims, latent_channels, alpha)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        g_live, kl_live = self.live(x)
        g_spoof, kl_spoof = self.spoof(x)
        return g_live, g_spoof, kl_live + kl_spoof

    def mask_for(self, x: torch.Tensor) -> torch.Tensor:
        """LBP mask of ``x``, or all ones when the texture gate is ablated."""
        if self.use_lbp:
            return lbp_map(x)
        return torch.ones_like(x[:, :1])

    def zero_output_(self) -> "SfaGenerators":
        self.live.zero_output_()
        self.spoof.zero_output_()
        return self


def build_generators(seed: int = 0, **kwargs) -> SfaGenerators:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SfaGenerators(**kwargs)


class ActivationMapPair(NamedTuple):
    m_live: torch.Tensor
    m_spoof: torch.Tensor


def combine_maps(g_live: torch.Tensor, g_spoof: torch.Tensor, mask: torch.Tensor) -> ActivationMapPair:
    if not (g_live.shape == g_spoof.shape == mask.shape):
        raise DimensionError(
            f"generator maps {tuple(g_live.shape)}/{tuple(g_spoof.shape)} and mask {tuple(mask.shape)} differ")
    m_live = mask * g_live - (1.0 - mask) * g_spoof
    return ActivationMapPair(m_live, -m_live)


def compose_maps(x: torch.Tensor, gens: SfaGenerators, mask: Optional[torch.Tensor] = None) -> ActivationMapPair:
    """Contrastive map pair for a batch; ``mask`` defaults to ``gens.mask_for(x)``."""
    mask = gens.mask_for(x) if mask is None else mask
    g_live, g_spoof, _ = gens(x)
    return combine_maps(g_live, g_spoof, mask)


def _label_weight(y, like: torch.Tensor) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=like.dtype, device=like.device)
    return y.reshape(-1, 1, 1, 1) if y.dim() else y


class _StraightThroughClamp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


def clamp_pixels(x: torch.Tensor, straight_through: bool = False) -> torch.Tensor:
    """Clamp to [0, 1]; the straight-through variant passes gradients unchanged."""
    return _StraightThroughClamp.apply(x) if straight_through else x.clamp(0.0, 1.0)


def opposite_map(y, pair: ActivationMapPair) -> torch.Tensor:
    w = _label_weight(y, pair.m_live)
    return w * pair.m_live + (1 - w) * pair.m_spoof


def matching_map(y, pair: ActivationMapPair) -> torch.Tensor:
    w = _label_weight(y, pair.m_live)
    return w * pair.m_spoof + (1 - w) * pair.m_live


def training_composite(x, y, gens: SfaGenerators, mask=None, straight_through: bool = False,
                       pair: Optional[ActivationMapPair] = None) -> torch.Tensor:
    """``x`` plus the map opposite to its label (spoof gets M_live, live gets M_spoof), clamped."""
    pair = compose_maps(x, gens, mask) if pair is None else pair
    return clamp_pixels(x + opposite_map(y, pair), straight_through)


def sfa_perturbation(x, y, gens: SfaGenerators, mask=None) -> torch.Tensor:
    """The unclamped SFA term: M_spoof for spoof samples, M_live for live ones."""
    return matching_map(y, compose_maps(x, gens, mask))


def sfa_apply(x, y, gens: SfaGenerators, mask=None) -> torch.Tensor:
    return clamp_pixels(x + sfa_perturbation(x, y, gens, mask))


@torch.no_grad()
def sfa_apply_predicted(x: torch.Tensor, model: nn.Module, gens: SfaGenerators, mask=None):
    """Predicted-label mode for unlabeled probing.

    Uses the frozen model's binary prediction in place of ``y``. Returns
    ``(x_infer, y_hat)`` so callers can report which labels were used.
    """
    # argmax returns the first maximum, matching the tie-break to live
    y_hat = model(x).v_c.argmax(dim=1)
    return sfa_apply(x, y_hat, gens, mask), y_hat


def sfa_loss(d_probs: torch.Tensor, y) -> torch.Tensor:
    """Binary cross-entropy of the discriminator output against the flipped label."""
    d = torch.as_tensor(d_probs).clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = torch.as_tensor(y, dtype=d.dtype, device=d.device)
    return -((1 - y) * torch.log(d) + y * torch.log(1 - d)).mean()


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SfaTrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta_kl: float = 1e-4
    seed: int = 0
    # Class of the frozen model's softmax read as the discriminator output D.
    # "spoof" trains composites toward the opposite label; "live" is kept
    # for comparison runs.
    discriminator: str = "spoof"

    def __post_init__(self):
        if self.discriminator not in ("live", "spoof"):
            raise ConfigurationError(f"discriminator must be 'live' or 'spoof', got {self.discriminator!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.beta_kl < 0:
            raise ConfigurationError(f"invalid SFA training config {self}")


def discriminator_prob(model, x: torch.Tensor, which: str = "spoof") -> torch.Tensor:
    return torch.softmax(model(x).v_c, dim=1)[:, 1 if which == "spoof" else 0]


def train_sfa(gens: SfaGenerators, frozen_model: nn.Module, dataset: Dataset,
              config: SfaTrainConfig = SfaTrainConfig()):
    """Optimise the generators against a frozen target model.

    Minimises ``sfa_loss + beta_kl * KL`` over generator parameters only. The
    target model is held in eval mode with gradients disabled, so neither its
    parameters nor its batch-norm statistics change. Returns
    ``(gens, history)``.
    """
    history = []
    if config.epochs == 0:
        gens.eval()
        return gens, history
    device = next(gens.parameters()).device
    grad_flags = [p.requires_grad for p in frozen_model.parameters()]
    frozen_model.eval()
    frozen_model.requires_grad_(False)
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(gens.parameters(), lr=config.learning_rate)
    pixels = torch.from_numpy(np.array(dataset.pixels))
    labels = torch.from_numpy(np.array(dataset.y))
    masks = torch.cat([gens.mask_for(pixels[i:i + 256]) for i in range(0, len(pixels), 256)])
    n = len(dataset)
    try:
        for epoch in range(1, config.epochs + 1):
            gens.train()
            order = torch.randperm(n, generator=gen)
            tot_l1, tot_kl, seen = 0.0, 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:
                    continue
                x, y, mask = pixels[idx].to(device), labels[idx].to(device), masks[idx].to(device)
                g_live, g_spoof, kl = gens(x)
                x_train = training_composite(x, y, gens, straight_through=True,
                                             pair=combine_maps(g_live, g_spoof, mask))
                l1 = sfa_loss(discriminator_prob(frozen_model, x_train, config.discriminator), y)
                if not torch.isfinite(l1):
                    raise TrainingDivergenceError(epoch, float(l1))
                loss = l1 + config.beta_kl * kl
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot_l1 += float(l1.detach()) * len(idx)
                tot_kl += float(kl.detach()) * len(idx)
                seen += len(idx)
            history.append({"epoch": epoch, "l1": tot_l1 / seen, "kl": tot_kl / seen})
            logger.info("sfa epoch %d L1 %.4f KL %.2f", epoch, tot_l1 / seen, tot_kl / seen)
    finally:
        for p, flag in zip(frozen_model.parameters(), grad_flags):
            p.requires_grad_(flag)
    gens.eval()
    return gens, history


# ---------------------------------------------------------------------------
# persistence and export


def save_generators(gens: SfaGenerators, directory, model_sha256: str, beta_kl: float,
                    extra: Optional[dict] = None) -> Path:
    from .models import code_version

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(gens.state_dict(), directory / "sfa.pt")
    meta = {"schema_version": CHECKPOINT_SCHEMA, "kind": "sfa", "alpha": gens.alpha, "beta_kl": beta_kl,
            "frozen_model_sha256": model_sha256, "config": gens.config, "code_version": code_version(),
            "state_sha256": state_hash(gens)}
    meta.update(extra or {})
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_generators(directory, map_location="cpu") -> Tuple[SfaGenerators, dict]:
    meta = read_meta(directory, "sfa")
    gens = SfaGenerators(**meta["config"])
    gens.load_state_dict(torch.load(Path(directory) / "sfa.pt", map_location=map_location, weights_only=True))
    gens.eval()
    return gens, meta


def encode_signed16(m: np.ndarray, alpha: float) -> np.ndarray:
    """Map values in [-alpha, alpha] to uint16 with 32768 as zero."""
    return np.round(np.clip(m / alpha, -1.0, 1.0) * 32767.0 + 32768.0).astype(np.uint16)


def decode_signed16(a: np.ndarray, alpha: float) -> np.ndarray:
    return (a.astype(np.float64) - 32768.0) / 32767.0 * alpha


def export_activation_maps(pair: ActivationMapPair, ids: Sequence[str], out_dir, alpha: float) -> list:
    """Write ``{id}.live.png`` / ``{id}.spoof.png`` 16-bit maps plus a scale sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, sid in enumerate(ids):
        for name, m in (("live", pair.m_live), ("spoof", pair.m_spoof)):
            arr = encode_signed16(m[k, 0].detach().cpu().numpy(), alpha)
            path = out_dir / f"{sid}.{name}.png"
            Image.fromarray(arr).save(path)
            written.append(path)
    (out_dir / "scale.json").write_text(json.dumps({"alpha": alpha, "zero": 32768, "full_scale": 32767}))
    return written


def config_dict(config: SfaTrainConfig) -> dict:
    return asdict(config)
