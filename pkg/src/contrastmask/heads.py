"""Learnable components: backbone stand-in, CL head, CAM head and mask head.

All modules work on NCHW tensors at a single RoI resolution R.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig

CHECKPOINT_VERSION = 1


def _conv_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Stride-1 conv stack standing in for ResNet-FPN + RoIAlign."""

    def __init__(self, channels: int, blocks: int = 3):
        super().__init__()
        layers = _conv_relu(3, channels)
        for _ in range(blocks - 1):
            layers += _conv_relu(channels, channels)
        self.body = nn.Sequential(*layers)

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        return self.body(crop)


class Encoder(nn.Module):
    def __init__(self, channels: int, blocks: int = 8):
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(blocks):
            layers += _conv_relu(channels, channels)
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Projector(nn.Module):
    """Per-location MLP as 1x1 convs; no rectifier after the last layer."""

    def __init__(self, channels: int, layers: int = 3):
        super().__init__()
        mods: list[nn.Module] = []
        for k in range(layers):
            mods.append(nn.Conv2d(channels, channels, 1))
            if k < layers - 1:
                mods.append(nn.ReLU(inplace=False))
        self.body = nn.Sequential(*mods)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.body(y)


class CLHead(nn.Module):
    def __init__(self, channels: int, encoder_blocks: int = 8, projector_layers: int = 3):
        super().__init__()
        self.encoder = Encoder(channels, encoder_blocks)
        self.projector = Projector(channels, projector_layers)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y = self.encoder(x)
        return y, self.projector(y)


def expected_cl_head_params(channels: int, encoder_blocks: int = 8, projector_layers: int = 3) -> int:
    C = channels
    return encoder_blocks * (9 * C * C + C) + projector_layers * (C * C + C)


def normalize_cam(raw: torch.Tensor) -> torch.Tensor:
    """Per-map min-max to [0, 1]; constant maps become 0.5 everywhere."""
    flat = raw.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    tol = 16 * torch.finfo(raw.dtype).eps
    const = span <= tol * torch.maximum(hi.abs(), torch.ones_like(hi))
    norm = (flat - lo) / torch.where(const, torch.ones_like(span), span)
    norm = torch.where(const, torch.full_like(norm, 0.5), norm)
    return norm.view_as(raw)


class CamHead(nn.Module):
    """Two conv blocks, global average pooling and a linear classifier.

    Each block halves the lattice (``downsample=True``), as a box head works on
    coarser RoI features; the CAM is then resized bilinearly back to R x R.
    """

    def __init__(self, channels: int, num_classes: int, downsample: bool = True):
        super().__init__()
        pool = [nn.MaxPool2d(2, ceil_mode=True)] if downsample else []
        self.convs = nn.Sequential(
            *_conv_relu(channels, channels), *pool, *_conv_relu(channels, channels), *pool
        )
        self.fc = nn.Linear(channels, num_classes)
        self.num_classes = num_classes

    def raw_cam(self, feat: torch.Tensor, target_class: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        w = self.fc.weight[target_class]  # (B, C)
        raw = torch.einsum("bc,bchw->bhw", w, feat)
        if raw.shape[1:] != size:
            raw = F.interpolate(raw[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]
        return raw

    def forward(self, x: torch.Tensor, target_class: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (class_logits, normalised CAM of shape (B, R, R)).

        ``target_class=None`` selects the argmax class per proposal.
        """
        feat = self.convs(x)
        logits = self.fc(feat.mean(dim=(2, 3)))
        if target_class is None:
            target_class = logits.argmax(dim=1)
        target_class = torch.as_tensor(target_class, dtype=torch.long)
        if ((target_class < 0) | (target_class >= self.num_classes)).any():
            raise ValueError(f"class id out of range [0, {self.num_classes})")
        return logits, normalize_cam(self.raw_cam(feat, target_class, tuple(x.shape[2:])))


class MaskHead(nn.Module):
    """Class-agnostic mask head over the fused [Y, X] (+ CAM) input."""

    def __init__(self, channels: int, use_cl: bool = True, use_cam: bool = True):
        super().__init__()
        self.use_cl, self.use_cam = use_cl, use_cam
        cin = 2 * channels if use_cl else channels
        layers = _conv_relu(cin, channels)
        for _ in range(3):
            layers += _conv_relu(channels, channels)
        self.convs = nn.Sequential(*layers)
        self.predictor = nn.Conv2d(channels, 1, 1)

    def fuse(self, x: torch.Tensor, y: torch.Tensor | None, cam: torch.Tensor | None) -> torch.Tensor:
        if self.use_cl:
            if y is None or y.shape != x.shape:
                raise ValueError("Y must match X in shape")
            inp = torch.cat([y, x], dim=1)
        else:
            inp = x
        if self.use_cam:
            if cam is None or cam.shape != (x.shape[0], *x.shape[2:]):
                raise ValueError("CAM must be (B, R, R) matching X")
            inp = inp + cam[:, None]
        return inp

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None, cam: torch.Tensor | None = None) -> torch.Tensor:
        return self.predictor(self.convs(self.fuse(x, y, cam)))[:, 0]


class ContrastMaskModel(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        C = cfg.channels
        self.cfg = cfg
        self.backbone = Backbone(C, cfg.backbone_blocks)
        self.cl_head = CLHead(C, cfg.encoder_blocks, cfg.projector_layers)
        self.cam_head = CamHead(C, cfg.num_classes)
        self.mask_head = MaskHead(C, use_cl=cfg.use_cl, use_cam=cfg.use_cam)
        init_weights(self)

    def forward(self, crops: torch.Tensor, target_class: torch.Tensor | None = None) -> dict[str, torch.Tensor | None]:
        """``crops`` is (B, 3, R, R). The CAM fed to the mask head and used for
        partitions carries no gradient."""
        x = self.backbone(crops)
        logits, cam = self.cam_head(x, target_class)
        cam = cam.detach()
        y = z = None
        if self.cfg.use_cl:
            y, z = self.cl_head(x)
        mask_logits = self.mask_head(x, y, cam)
        return {"x": x, "y": y, "z": z, "class_logits": logits, "cam": cam, "mask_logits": mask_logits}


def crops_to_tensor(crops: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(crops).astype(np.float32)  # B, R, R, 3
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# checkpoints: npz of named arrays plus a JSON metadata record


def save_checkpoint(model: ContrastMaskModel, path: str | Path, step: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(), "step": step, **(extra or {})}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[ContrastMaskModel, dict]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = TrainConfig.from_dict(meta["config"])
        model = ContrastMaskModel(cfg)
        state = {k[len("param/") :]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta
