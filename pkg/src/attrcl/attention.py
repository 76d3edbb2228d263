"""Per-attribute text-guided attention heads and the head registry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class HeadConfig:
    c_img: int = 64
    dim: int = 128
    text_dim: int = 512
    hidden: int = 128

    def __post_init__(self):
        for k in ("c_img", "dim", "text_dim", "hidden"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")

    @classmethod
    def reference(cls) -> "HeadConfig":
        """Configuration for a 1024-channel backbone map (parameter budgeting)."""
        return cls(c_img=1024, dim=128, text_dim=512, hidden=128)


def head_param_count(config: HeadConfig) -> int:
    c, d, t, h = config.c_img, config.dim, config.text_dim, config.hidden
    conv = d * c + d
    norm = 2 * d
    text = d * t + d
    mlp1 = h * 2 * d + h
    mlp2 = d * h + d
    return conv + norm + text + mlp1 + mlp2


def _fan_in_uniform_(weight: torch.Tensor, generator: torch.Generator):
    fan_in = weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=generator, dtype=weight.dtype)
                     * 2 * bound - bound)


class AttentionHead(nn.Module):
    """Channel reduction, attribute projection, spatial softmax pooling and
    channel gating for one attribute."""

    def __init__(self, config: HeadConfig, attribute: str = "", seed: int = 0):
        super().__init__()
        self.config = config
        self.attribute = attribute
        d = config.dim
        self.conv = nn.Conv2d(config.c_img, d, kernel_size=1)
        self.norm = nn.BatchNorm2d(d)
        self.text_proj = nn.Linear(config.text_dim, d)
        self.mlp1 = nn.Linear(2 * d, config.hidden)
        self.mlp2 = nn.Linear(config.hidden, d)
        g = torch.Generator().manual_seed(int(seed))
        for layer in (self.conv, self.text_proj, self.mlp1, self.mlp2):
            _fan_in_uniform_(layer.weight, g)
            nn.init.zeros_(layer.bias)

    def forward(self, fmap: torch.Tensor, t_raw: torch.Tensor, return_attention: bool = False):
        reduced = reduce_features(self, fmap)
        attr = project_text(self, t_raw)
        if attr.dim() == 1:
            attr = attr.expand(reduced.shape[0], -1)
        amap, pooled = spatial_attention(reduced, attr)
        out = channel_attention(self, pooled, attr)
        if return_attention:
            return out, amap
        return out


def reduce_features(head: AttentionHead, fmap: torch.Tensor) -> torch.Tensor:
    """tanh(BN(conv1x1(fmap))): (N, C_img, h, w) -> (N, D, h, w)."""
    if fmap.dim() != 4 or fmap.shape[1] != head.config.c_img:
        raise ValueError(f"expected (N, {head.config.c_img}, h, w) feature map, "
                         f"got {tuple(fmap.shape)}")
    return torch.tanh(head.norm(head.conv(fmap)))


def project_text(head: AttentionHead, t_raw: torch.Tensor) -> torch.Tensor:
    if t_raw.shape[-1] != head.config.text_dim:
        raise ValueError(f"text embedding has dim {t_raw.shape[-1]}, "
                         f"expected {head.config.text_dim}")
    return head.text_proj(t_raw)


def spatial_attention(reduced: torch.Tensor, attr: torch.Tensor):
    """Scaled dot-product scores against the attribute vector, softmax over all
    positions, then attention-weighted spatial sum.

    reduced: (N, D, h, w); attr: (N, D) or (D,).
    Returns the (N, h, w) attention map and the (N, D) pooled vector.
    """
    n, d, h, w = reduced.shape
    if attr.dim() == 1:
        attr = attr.expand(n, -1)
    if attr.shape != (n, d):
        raise ValueError(f"attribute vector shape {tuple(attr.shape)} does not match ({n}, {d})")
    scores = torch.einsum("ndhw,nd->nhw", reduced, attr) / math.sqrt(d)
    amap = F.softmax(scores.reshape(n, h * w), dim=1).reshape(n, h, w)
    pooled = torch.einsum("ndhw,nhw->nd", reduced, amap)
    return amap, pooled


def channel_attention(head: AttentionHead, pooled: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
    """pooled * sigmoid(W2 relu(W1 [pooled; attr]))."""
    if pooled.shape != attr.shape or pooled.shape[-1] != head.config.dim:
        raise ValueError(f"pooled {tuple(pooled.shape)} and attribute {tuple(attr.shape)} "
                         f"must both have last dim {head.config.dim}")
    u = torch.cat([pooled, attr], dim=-1)
    gate = torch.sigmoid(head.mlp2(F.relu(head.mlp1(u))))
    return pooled * gate


class HeadRegistry:
    """One attention head per attribute; frozen heads never receive updates."""

    def __init__(self):
        self.heads: dict[str, AttentionHead] = {}
        self.frozen: set[str] = set()

    def __contains__(self, attribute):
        return attribute in self.heads

    def __len__(self):
        return len(self.heads)

    def __getitem__(self, attribute) -> AttentionHead:
        try:
            return self.heads[attribute]
        except KeyError:
            raise KeyError(f"no attention head for attribute {attribute!r}") from None

    def add_head(self, attribute: str, config: HeadConfig, seed: int = 0) -> AttentionHead:
        if attribute in self.heads:
            raise ValueError(f"attention head for {attribute!r} already exists")
        head = AttentionHead(config, attribute, seed)
        self.heads[attribute] = head
        return head

    def freeze(self, attribute: str):
        head = self[attribute]
        head.eval()
        for p in head.parameters():
            p.requires_grad_(False)
        self.frozen.add(attribute)

    def parameter_count(self) -> int:
        return sum(p.numel() for h in self.heads.values() for p in h.parameters())

    def to(self, dtype):
        for h in self.heads.values():
            h.to(dtype)
        return self


def add_head(registry: HeadRegistry, attribute: str, config: HeadConfig, seed: int = 0) -> HeadRegistry:
    registry.add_head(attribute, config, seed)
    return registry


def forward_head(registry: HeadRegistry, attribute: str, fmap: torch.Tensor,
                 t_raw: torch.Tensor) -> torch.Tensor:
    return registry[attribute](fmap, t_raw)
