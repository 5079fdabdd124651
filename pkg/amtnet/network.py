"""Shared front-end with twin residual branches and their two heads.

The recognition path is ``shared -> main -> fc`` and the auxiliary path is
``shared -> aux -> dis``. Both branches are 18-layer-style residual bodies of
identical structure with independently drawn weights.
"""
from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import yaml
from torch import nn
from torch.nn import functional as F

from .errors import CacheFormatError, InvalidInput, NumericalError, ShapeError, UnsupportedOperation

LOGGER = logging.getLogger(__name__)

STAGE_WIDTHS = (64, 128, 256, 512)
STAGE_STRIDES = (1, 2, 2, 2)
BLOCKS_PER_STAGE = 2

CHECKPOINT_FORMAT = "amtnet-checkpoint"
CHECKPOINT_VERSION = 1

PARTITIONS = ("shared", "recognition", "auxiliary")
_PARTITION_OF = {"shared": "shared", "main": "recognition", "fc": "recognition", "aux": "auxiliary", "dis": "auxiliary"}


def scaled_width(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.downsample: Optional[nn.Sequential] = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class SharedLayer(nn.Module):
    """conv 7x7/2 -> BN -> ReLU -> max-pool 3x3/2; quarters both input axes."""

    def __init__(self, out_channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(1, out_channels, 7, stride=2, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(F.relu(self.bn(self.conv(x))))


class ResidualBranch(nn.Module):
    def __init__(self, in_channels: int, width: float = 1.0) -> None:
        super().__init__()
        self.in_channels = in_channels
        stages: List[nn.Sequential] = []
        channels = in_channels
        for base, stride in zip(STAGE_WIDTHS, STAGE_STRIDES):
            out_channels = scaled_width(base, width)
            blocks = [BasicBlock(channels, out_channels, stride)]
            blocks.extend(BasicBlock(out_channels, out_channels) for _ in range(BLOCKS_PER_STAGE - 1))
            stages.append(nn.Sequential(*blocks))
            channels = out_channels
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.out_channels = channels
        self.pool = nn.AdaptiveAvgPool2d(1)

    def feature_map(self, r: torch.Tensor) -> torch.Tensor:
        return self.layer4(self.layer3(self.layer2(self.layer1(r))))

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.feature_map(r)), 1)


class AMTNet(nn.Module):
    def __init__(self, n_class: int, n_aux: int, width: float = 1.0, with_aux: bool = True) -> None:
        super().__init__()
        self.n_class = n_class
        self.n_aux = n_aux
        self.width = width
        stem = scaled_width(STAGE_WIDTHS[0], width)
        self.shared = SharedLayer(stem)
        self.main = ResidualBranch(stem, width)
        self.fc = nn.Linear(self.main.out_channels, n_class)
        self.aux: Optional[ResidualBranch] = None
        self.dis: Optional[nn.Linear] = None
        if with_aux:
            self.aux = ResidualBranch(stem, width)
            self.dis = nn.Linear(self.aux.out_channels, n_aux)

    @property
    def pruned(self) -> bool:
        return self.aux is None

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Recognition logits and, unless pruned, auxiliary logits."""
        r = self.shared(x)
        logits = self.fc(self.main(r))
        if self.aux is None or self.dis is None:
            return logits, None
        return logits, self.dis(self.aux(r))

    def auxiliary_logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.aux is None or self.dis is None:
            raise UnsupportedOperation("the auxiliary branch has been pruned")
        return self.dis(self.aux(self.shared(x)))


def _init_weights(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=1.0 / np.sqrt(module.in_features))
            nn.init.zeros_(module.bias)


def init_params(n_class: int, n_aux: int, seed: int, width: float = 1.0, with_aux: bool = True) -> AMTNet:
    """Build a freshly initialized network; the global torch RNG is left untouched."""
    if n_class < 2:
        raise InvalidInput(f"n_class must be at least 2, got {n_class}")
    if n_aux not in (2, 3):
        raise InvalidInput(f"n_aux must be 2 or 3, got {n_aux}")
    if width <= 0:
        raise InvalidInput(f"width must be positive, got {width}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AMTNet(n_class, n_aux, width, with_aux)
        _init_weights(model)
    return model


def _as_batch(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"expected (1, T, F) or (B, 1, T, F) input, got shape {tuple(x.shape)}")


def shared_forward(model: AMTNet, x: torch.Tensor) -> torch.Tensor:
    batch, single = _as_batch(x)
    if not torch.isfinite(batch).all():
        raise NumericalError("input feature contains non-finite values")
    r = model.shared(batch)
    return r.squeeze(0) if single else r


def branch_forward(branch: ResidualBranch, r: torch.Tensor) -> torch.Tensor:
    batch, single = _as_batch(r)
    if batch.shape[1] != branch.in_channels:
        raise ShapeError(f"branch expects {branch.in_channels} channels, got {batch.shape[1]}")
    if batch.shape[2] < 1 or batch.shape[3] < 1:
        raise ShapeError(f"representation has an empty axis: {tuple(batch.shape)}")
    e = branch(batch)
    return e.squeeze(0) if single else e


def predict_heads(model: AMTNet, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Class probabilities of both heads."""
    if model.pruned:
        raise UnsupportedOperation("the auxiliary branch has been pruned")
    batch, single = _as_batch(x)
    logits, aux_logits = model(batch)
    p, p_aux = torch.softmax(logits, dim=1), torch.softmax(aux_logits, dim=1)
    return (p.squeeze(0), p_aux.squeeze(0)) if single else (p, p_aux)


def predict_recognition(model: AMTNet, x: torch.Tensor) -> torch.Tensor:
    batch, single = _as_batch(x)
    r = model.shared(batch)
    p = torch.softmax(model.fc(model.main(r)), dim=1)
    return p.squeeze(0) if single else p


def embed(model: AMTNet, x: torch.Tensor) -> torch.Tensor:
    """Pooled recognition-branch embedding."""
    return branch_forward(model.main, shared_forward(model, x))


@torch.no_grad()
def infer(
    model: AMTNet,
    features: torch.Tensor,
    batch_size: int = 64,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inference-mode probabilities for a stacked (N, 1, T, F) tensor."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    probs: List[np.ndarray] = []
    aux_probs: List[np.ndarray] = []
    try:
        for start in range(0, int(features.shape[0]), batch_size):
            chunk = features[start : start + batch_size].to(device=device, dtype=dtype)
            logits, aux_logits = model(chunk)
            probs.append(torch.softmax(logits, dim=1).cpu().numpy())
            if aux_logits is not None:
                aux_probs.append(torch.softmax(aux_logits, dim=1).cpu().numpy())
    finally:
        model.train(was_training)
    p = np.concatenate(probs) if probs else np.zeros((0, model.n_class))
    p_aux = np.concatenate(aux_probs) if aux_probs else None
    return p, p_aux


def prune_aux(model: AMTNet) -> AMTNet:
    """Copy of the model without the auxiliary branch and discriminator."""
    pruned = copy.deepcopy(model)
    pruned.aux = None
    pruned.dis = None
    return pruned


def partition_parameters(model: AMTNet) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
    parts: Dict[str, List[Tuple[str, nn.Parameter]]] = {name: [] for name in PARTITIONS}
    for name, param in model.named_parameters():
        parts[_PARTITION_OF[name.split(".", 1)[0]]].append((name, param))
    return parts


def partition_state(model: AMTNet, partition: str) -> Dict[str, torch.Tensor]:
    """Parameters and buffers (batch-norm statistics included) of one partition."""
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if _PARTITION_OF[name.split(".", 1)[0]] == partition
    }


def parameter_count(model: nn.Module) -> int:
    return sum(param.numel() for param in model.parameters())


def save_checkpoint(
    path: Union[str, Path],
    model: AMTNet,
    config: Optional[dict] = None,
    factor: Optional[str] = None,
) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    state = {
        name: tensor.detach().cpu().to(torch.float32) if tensor.is_floating_point() else tensor.detach().cpu()
        for name, tensor in model.state_dict().items()
    }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "pruned": model.pruned,
        "n_class": model.n_class,
        "n_aux": model.n_aux,
        "width": model.width,
        "factor": factor,
        "state": state,
        "config": yaml.safe_dump(config, sort_keys=False) if config is not None else None,
    }
    torch.save(payload, target)
    LOGGER.info("Checkpoint written to %s", target)
    return target


def load_checkpoint(path: Union[str, Path]) -> Tuple[AMTNet, dict]:
    """Rebuild a model from a checkpoint; returns the model and the checkpoint metadata."""
    source = Path(path)
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, ValueError) as exc:
        raise CacheFormatError(f"{source}: unreadable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CacheFormatError(f"{source}: not an amtnet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CacheFormatError(f"{source}: unsupported checkpoint version {payload.get('version')}")
    model = AMTNet(
        int(payload["n_class"]),
        int(payload["n_aux"]),
        float(payload["width"]),
        with_aux=not payload["pruned"],
    )
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise CacheFormatError(f"{source}: state does not match the recorded architecture: {exc}") from exc
    model.eval()
    meta = {key: value for key, value in payload.items() if key != "state"}
    if meta.get("config"):
        meta["config"] = yaml.safe_load(meta["config"])
    return model, meta
