"""Shared convolutional image encoder and its EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def out_size(self) -> int:
        return self.image_size // 2 ** len(self.widths)


class Encoder(nn.Module):
    """Stride-2 conv stages with batch norm and ReLU.

    ``images_seen`` counts images passed through ``forward``; the trainer reads it
    to report per-step encoder cost.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        layers = []
        c_in = 3
        for c in config.widths:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.images_seen = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) -> (N, C_img, H/8, W/8)."""
        s = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected (N, 3, {s}, {s}) images, got {tuple(x.shape)}")
        self.images_seen += x.shape[0]
        return self.body(x)


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) array in [0, 1] -> (N, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def encode(encoder: Encoder, images) -> torch.Tensor:
    """Eval-mode, no-grad feature maps for an image batch."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            dtype = next(encoder.parameters()).dtype
            return encoder(to_tensor(images, dtype))
    finally:
        encoder.train(was_training)


class EmaTeacher:
    """Shadow copy of the student encoder, blended toward it after each step.

    Parameters and floating-point buffers (batch-norm statistics) are blended
    with the same momentum; integer buffers are copied.
    """

    def __init__(self, student: Encoder, beta: float):
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {beta}")
        self.beta = float(beta)
        self.step = 0
        self.model = copy.deepcopy(student)
        self.model.images_seen = 0
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def _check_schema(self, student: Encoder):
        mine = {k: v.shape for k, v in self.model.state_dict().items()}
        theirs = {k: v.shape for k, v in student.state_dict().items()}
        if mine != theirs:
            raise ValueError("teacher and student parameter schemas differ")

    @torch.no_grad()
    def update(self, student: Encoder) -> "EmaTeacher":
        self._check_schema(student)
        b = self.beta
        src = student.state_dict()
        for name, t in self.model.state_dict().items():
            s = src[name]
            if t.is_floating_point():
                # b*t + (1-b)*s written as an increment: exact when t == s
                t.add_(s - t, alpha=1.0 - b)
            else:
                t.copy_(s)
        self.step += 1
        return self

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        self.model.eval()
        with torch.no_grad():
            return self.model(x)

    def state_dict(self):
        return self.model.state_dict()


def init_teacher(student: Encoder, beta: float) -> EmaTeacher:
    return EmaTeacher(student, beta)


def ema_update(teacher: EmaTeacher, student: Encoder) -> EmaTeacher:
    """theta_T <- beta * theta_T + (1 - beta) * theta_S, in place."""
    return teacher.update(student)
