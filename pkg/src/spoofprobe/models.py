"""Multitask face anti-spoofing model.

A shared backbone feeds four fully connected heads (attributes, spoof type,
illumination, live/spoof) from its pooled features, and two geometric map
heads (depth, reflection) built from a 3x3 convolution on the last spatial
feature map followed by bilinear upsampling to 14x14.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .datasets import MAP_SIZE, NUM_ATTRS, NUM_ILLUM, NUM_TYPES, Dataset
from .errors import CheckpointError, ConfigurationError, DimensionError, TrainingDivergenceError
from .losses import LossWeights, loss_terms

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


# ---------------------------------------------------------------------------
# backbones


def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU-maxpool blocks."""

    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.blocks = nn.Sequential(*[
            nn.Sequential(_conv_bn(a, b), nn.MaxPool2d(2)) for a, b in zip(chans[:-1], chans[1:])
        ])
        self.out_channels = widths[-1]
        self.downsample = 2 ** len(widths)

    def forward(self, x):
        return self.blocks(x)


class VGGStyle(nn.Module):
    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.blocks = nn.Sequential(*[
            nn.Sequential(_conv_bn(a, b), _conv_bn(b, b), nn.MaxPool2d(2)) for a, b in zip(chans[:-1], chans[1:])
        ])
        self.out_channels = widths[-1]
        self.downsample = 2 ** len(widths)

    def forward(self, x):
        return self.blocks(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetStyle(nn.Module):
    def __init__(self, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        self.stem = _conv_bn(in_channels, widths[0])
        chans = (widths[0],) + tuple(widths)
        self.blocks = nn.Sequential(*[BasicBlock(a, b, 2) for a, b in zip(chans[:-1], chans[1:])])
        self.out_channels = widths[-1]
        self.downsample = 2 ** len(widths)

    def forward(self, x):
        return self.blocks(self.stem(x))


class DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.bn = nn.BatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, growth, 3, 1, 1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(F.relu(self.bn(x)))], dim=1)


class DenseNetStyle(nn.Module):
    def __init__(self, in_channels=3, growth=12, layers=(2, 2, 2, 2), stem=16):
        super().__init__()
        mods = [nn.Conv2d(in_channels, stem, 3, 1, 1, bias=False)]
        c = stem
        for n in layers:
            for _ in range(n):
                mods.append(DenseLayer(c, growth))
                c += growth
            c_out = c // 2
            mods.append(nn.Sequential(nn.BatchNorm2d(c), nn.ReLU(inplace=True),
                                      nn.Conv2d(c, c_out, 1, bias=False), nn.AvgPool2d(2)))
            c = c_out
        self.blocks = nn.Sequential(*mods, nn.BatchNorm2d(c), nn.ReLU(inplace=True))
        self.out_channels = c
        self.downsample = 2 ** len(layers)

    def forward(self, x):
        return self.blocks(x)


class TinyCNN(nn.Module):
    """Under 1k parameters with tiny heads; used for finite-difference checks."""

    def __init__(self, in_channels=3):
        super().__init__()
        self.blocks = nn.Sequential(nn.Conv2d(in_channels, 4, 3, 1, 1), nn.Tanh(), nn.AvgPool2d(2),
                                    nn.Conv2d(4, 6, 3, 1, 1), nn.Tanh(), nn.AvgPool2d(2))
        self.out_channels = 6
        self.downsample = 4

    def forward(self, x):
        return self.blocks(x)


BACKBONES: Dict[str, Callable[..., nn.Module]] = {
    "small-cnn": SmallCNN,
    "vgg-style": VGGStyle,
    "resnet-style": ResNetStyle,
    "densenet-style": DenseNetStyle,
    "tiny-cnn": TinyCNN,
}


def register_backbone(name: str, factory: Callable[..., nn.Module]) -> None:
    """Add a backbone. ``factory(in_channels=...)`` must return a module that
    maps NxCxHxW to a spatial feature map and exposes ``out_channels``."""
    if name in BACKBONES:
        raise ConfigurationError(f"backbone {name!r} already registered")
    BACKBONES[name] = factory


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    feature_dim: int
    spatial_feature_dims: Tuple[int, int, int]

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ConfigurationError("feature_dim must be positive")


# ---------------------------------------------------------------------------
# model


@dataclass
class MultitaskOutput:
    """Six head outputs, each with a leading batch dimension."""

    v_f: torch.Tensor
    v_t: torch.Tensor
    v_i: torch.Tensor
    v_d: torch.Tensor
    v_r: torch.Tensor
    v_c: torch.Tensor

    def head(self, s: str) -> torch.Tensor:
        return getattr(self, f"v_{s}")

    def detach(self) -> "MultitaskOutput":
        return MultitaskOutput(**{f.name: getattr(self, f.name).detach() for f in fields(self)})

    def __getitem__(self, idx) -> "MultitaskOutput":
        return MultitaskOutput(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @staticmethod
    def cat(outs) -> "MultitaskOutput":
        return MultitaskOutput(**{f.name: torch.cat([getattr(o, f.name) for o in outs]) for f in fields(MultitaskOutput)})


class MultitaskModel(nn.Module):
    def __init__(self, backbone: str = "small-cnn", num_attrs: int = NUM_ATTRS, num_types: int = NUM_TYPES,
                 num_illum: int = NUM_ILLUM, image_size: int = 64, in_channels: int = 3,
                 map_size: int = MAP_SIZE):
        super().__init__()
        if backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {backbone!r}; available: {sorted(BACKBONES)}")
        self.config = dict(backbone=backbone, num_attrs=num_attrs, num_types=num_types, num_illum=num_illum,
                           image_size=image_size, in_channels=in_channels, map_size=map_size)
        self.backbone = BACKBONES[backbone](in_channels=in_channels)
        c = self.backbone.out_channels
        self.head_f = nn.Linear(c, num_attrs)
        self.head_t = nn.Linear(c, num_types)
        self.head_i = nn.Linear(c, num_illum)
        self.head_c = nn.Linear(c, 2)
        self.depth_head = nn.Conv2d(c, 1, 3, 1, 1)
        self.reflection_head = nn.Conv2d(c, 1, 3, 1, 1)

    @property
    def backbone_spec(self) -> BackboneSpec:
        size = self.config["image_size"]
        h = math.ceil(size / getattr(self.backbone, "downsample", 1))
        c = self.backbone.out_channels
        return BackboneSpec(self.config["backbone"], c, (c, h, h))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.backbone((x - 0.5) / 0.5)

    def _check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        want = (cfg["in_channels"], cfg["image_size"], cfg["image_size"])
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"model expects Nx{want[0]}x{want[1]}x{want[2]} input, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> MultitaskOutput:
        fmap = self.features(x)
        pooled = fmap.mean(dim=(2, 3))
        size = (self.config["map_size"],) * 2
        v_d = F.interpolate(self.depth_head(fmap), size=size, mode="bilinear", align_corners=False)
        v_r = F.interpolate(self.reflection_head(fmap), size=size, mode="bilinear", align_corners=False)
        return MultitaskOutput(
            v_f=self.head_f(pooled), v_t=self.head_t(pooled), v_i=self.head_i(pooled),
            v_d=v_d, v_r=v_r, v_c=self.head_c(pooled),
        )


def build_model(backbone: str = "small-cnn", seed: int = 0, **kwargs) -> MultitaskModel:
    """Construct a model with seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultitaskModel(backbone, **kwargs)


def forward(model: MultitaskModel, pixels) -> MultitaskOutput:
    """Inference-mode forward pass for one CxHxW image or an NxCxHxW batch.

    A single image gives outputs without the batch dimension.
    """
    x = torch.as_tensor(pixels, dtype=next(model.parameters()).dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x.to(next(model.parameters()).device))
    model.train(was_training)
    return out[0] if single else out


def predict_binary(model_or_logits, pixels=None):
    """Class (0 live / 1 spoof) and softmax confidence.

    Accepts either a model plus pixels or raw ``v_c`` logits. Exactly equal
    logits resolve to class 0.
    """
    if pixels is None:
        v_c = torch.as_tensor(model_or_logits)
    else:
        v_c = forward(model_or_logits, pixels).v_c
    single = v_c.dim() == 1
    if single:
        v_c = v_c.unsqueeze(0)
    cls = (v_c[:, 1] > v_c[:, 0]).long()
    conf = torch.softmax(v_c, dim=1).gather(1, cls[:, None]).squeeze(1)
    return (int(cls[0]), float(conf[0])) if single else (cls, conf)


@torch.no_grad()
def predict_dataset(model: MultitaskModel, pixels: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    device = next(model.parameters()).device
    preds = [predict_binary(model(pixels[i:i + batch_size].to(device)).v_c)[0].cpu()
             for i in range(0, len(pixels), batch_size)]
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def accuracy(model: MultitaskModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    b = dataset.batch()
    return float((predict_dataset(model, b.pixels) == b.y).float().mean())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError(f"invalid training config {self}")


def train(model: MultitaskModel, dataset: Dataset, config: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights()):
    """Fit the model on the composite multitask loss with Adam.

    Returns ``(model, history)``; history holds one dict per epoch with the
    mean loss and running binary accuracy.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    history = []
    if config.epochs == 0:
        return model, history
    device = next(model.parameters()).device
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    data = dataset.batch()
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            b = _index_batch(data, idx).to(device)
            out = model(b.pixels)
            loss = loss_terms(out, b, b, weights).total
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((predict_binary(out.v_c.detach())[0] == b.y).sum())
            seen += len(idx)
        sched.step()
        history.append({"epoch": epoch, "loss": total / seen, "accuracy": correct / seen})
        logger.info("epoch %d loss %.4f acc %.4f", epoch, total / seen, correct / seen)
    model.eval()
    return model, history


def _index_batch(b, idx):
    return type(b)(**{k: v[idx] for k, v in vars(b).items()})


# ---------------------------------------------------------------------------
# checkpoints


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(model: MultitaskModel, directory, seed: int = 0, weights: LossWeights = LossWeights(),
               extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    meta = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "multitask",
        "backbone": model.config["backbone"],
        "head_dims": {k: model.config[k] for k in ("num_attrs", "num_types", "num_illum")},
        "image_size": model.config["image_size"],
        "in_channels": model.config["in_channels"],
        "weights": weights.to_dict(),
        "seed": seed,
        "code_version": code_version(),
        "state_sha256": state_hash(model),
    }
    meta.update(extra or {})
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def read_meta(directory, kind: str) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise CheckpointError(f"checkpoint metadata not found: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint metadata {path}: {exc}") from exc
    if meta.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{path}: schema_version {meta.get('schema_version')!r} != supported {CHECKPOINT_SCHEMA}")
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return meta


def load_model(directory, map_location="cpu") -> Tuple[MultitaskModel, dict]:
    meta = read_meta(directory, "multitask")
    model = MultitaskModel(meta["backbone"], image_size=meta["image_size"], in_channels=meta["in_channels"],
                           **meta["head_dims"])
    state = torch.load(Path(directory) / "model.pt", map_location=map_location, weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def parameters_snapshot(model: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
