"""Calibration-free multi-view map network.

backbone -> neck (FPN or PANet) -> one STN per view -> two-layer large-kernel
fusion -> hierarchical-query decoder. Camera parameters never enter the model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError
from .map_model import NUM_CLASSES

BACKBONE_PRESETS = {
    "nano": {"channels": (32, 64, 128), "neck_channels": 16},
    "tiny": {"channels": (64, 128, 256), "neck_channels": 32},
}
NUM_VIEWS = 4


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "nano"
    neck_mode: str = "panet"
    embed_dim: int = 64
    num_decoder_layers: int = 2
    num_queries: int = 50
    num_points: int = 20
    bev_size: int = 50
    fusion_kernel: int = 7
    image_size: tuple[int, int] = (128, 128)
    num_heads: int = 4
    num_sampling_points: int = 4
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.preset not in BACKBONE_PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.neck_mode not in ("fpn", "panet"):
            raise ConfigurationError(f"neck_mode must be 'fpn' or 'panet', got {self.neck_mode!r}")
        ints = (
            self.embed_dim,
            self.num_decoder_layers,
            self.num_queries,
            self.num_points,
            self.bev_size,
            self.fusion_kernel,
            self.num_heads,
            self.num_sampling_points,
            *self.image_size,
        )
        if any(int(v) <= 0 for v in ints):
            raise ConfigurationError("model sizes must be positive")
        if self.num_points < 2:
            raise ConfigurationError("need at least two points per element")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.image_size[0] % 16 or self.image_size[1] % 16:
            raise ConfigurationError("image size must be a multiple of 16")

    @property
    def channels(self) -> tuple[int, int, int]:
        return BACKBONE_PRESETS[self.preset]["channels"]

    @property
    def neck_channels(self) -> int:
        return BACKBONE_PRESETS[self.preset]["neck_channels"]

    @property
    def neck_out_channels(self) -> int:
        # three pyramid levels stacked at stride 4
        return 3 * self.neck_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class FeatureMap(NamedTuple):
    data: torch.Tensor  # (B, C, H, W)
    stride: int


class Prediction(NamedTuple):
    class_logits: torch.Tensor  # (B, M, num_classes + 1); last slot is no-object
    points: torch.Tensor  # (B, M, N_e, 2) in [0, 1]


class ModelOutput(NamedTuple):
    final: Prediction
    layers: list[Prediction]  # one per decoder layer, last == final
    thetas: torch.Tensor  # (B, V, 2, 3)


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(nn.Conv2d(cin, cout, k, stride, k // 2, bias=False), _norm(cout), nn.SiLU())


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = ConvNormAct(c, c)
        self.conv2 = nn.Sequential(nn.Conv2d(c, c, 3, 1, 1, bias=False), _norm(c))

    def forward(self, x):
        return F.silu(x + self.conv2(self.conv1(x)))


class Backbone(nn.Module):
    """Small residual CNN emitting stride-4, 8 and 16 feature maps."""

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = nn.Sequential(ConvNormAct(3, c0 // 2, 3, 2), ConvNormAct(c0 // 2, c0, 3, 2), ResBlock(c0))
        self.stage2 = nn.Sequential(ConvNormAct(c0, c1, 3, 2), ResBlock(c1))
        self.stage3 = nn.Sequential(ConvNormAct(c1, c2, 3, 2), ResBlock(c2))
        self.out_channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> list[FeatureMap]:
        c3 = self.stem(x)
        c4 = self.stage2(c3)
        c5 = self.stage3(c4)
        return [FeatureMap(c3, 4), FeatureMap(c4, 8), FeatureMap(c5, 16)]


class Neck(nn.Module):
    """FPN top-down fusion, optionally followed by a PANet bottom-up path.

    The bottom-up path concatenates the downsampled lower level with the
    top-down feature of the same stride. All three levels are then upsampled
    to stride 4 and stacked along channels.
    """

    def __init__(self, in_channels: Sequence[int], channels: int, mode: str = "panet"):
        super().__init__()
        if mode not in ("fpn", "panet"):
            raise ConfigurationError(f"unknown neck mode {mode!r}")
        self.mode = mode
        self.lateral = nn.ModuleList([nn.Conv2d(c, channels, 1) for c in in_channels])
        self.smooth = nn.ModuleList([ConvNormAct(channels, channels) for _ in in_channels])
        self.downsample = nn.ModuleList([ConvNormAct(channels, channels, 3, 2) for _ in range(2)])
        self.merge = nn.ModuleList([ConvNormAct(2 * channels, channels) for _ in range(2)])
        if mode == "fpn":
            del self.downsample, self.merge
        self.out_channels = 3 * channels

    def forward(self, pyramid: Sequence[FeatureMap], mode: str | None = None) -> FeatureMap:
        if len(pyramid) != 3:
            raise ContractError(f"neck expects 3 pyramid levels, got {len(pyramid)}")
        strides = [p.stride for p in pyramid]
        if not all(a < b for a, b in zip(strides, strides[1:])):
            raise ContractError(f"pyramid strides must increase, got {strides}")
        lat = [conv(p.data) for conv, p in zip(self.lateral, pyramid)]
        top = [None, None, lat[2]]
        for i in (1, 0):
            top[i] = lat[i] + F.interpolate(top[i + 1], size=lat[i].shape[-2:], mode="nearest")
        outs = [s(t) for s, t in zip(self.smooth, top)]
        if self.mode == "panet":
            for i in (1, 2):
                down = self.downsample[i - 1](outs[i - 1])
                outs[i] = self.merge[i - 1](torch.cat([down, outs[i]], dim=1))
        size = outs[0].shape[-2:]
        stacked = [outs[0]] + [F.interpolate(o, size=size, mode="bilinear", align_corners=False) for o in outs[1:]]
        return FeatureMap(torch.cat(stacked, dim=1), pyramid[0].stride)


class STN(nn.Module):
    """Localization net -> affine grid -> bilinear sampler, initialised to the identity warp."""

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.localization = nn.Sequential(
            nn.Conv2d(channels, 16, 3, 2, 1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(16 * 16, hidden),
            nn.SiLU(),
        )
        self.fc_theta = nn.Linear(hidden, 6)
        nn.init.zeros_(self.fc_theta.weight)
        with torch.no_grad():
            self.fc_theta.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))

    def regress(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_theta(self.localization(x)).view(-1, 2, 3)

    @staticmethod
    def warp(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        # float32 grids land ~1e-6 px off the pixel centers; sample in double so the identity warp is exact
        xd = x.double()
        grid = F.affine_grid(theta.double(), list(x.shape), align_corners=False)
        return F.grid_sample(xd, grid, mode="bilinear", padding_mode="zeros", align_corners=False).to(x.dtype)

    def forward(self, feature: FeatureMap) -> tuple[FeatureMap, torch.Tensor]:
        theta = self.regress(feature.data)
        return FeatureMap(self.warp(feature.data, theta), feature.stride), theta


class Fusion(nn.Module):
    """Channel concatenation of the views, then two large-kernel convolutions."""

    def __init__(self, channels: int, num_views: int, out_channels: int, kernel: int, bev_size: int):
        super().__init__()
        self.num_views = num_views
        self.conv1 = nn.Conv2d(num_views * channels, out_channels, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel, padding=kernel // 2)
        self.bev_size = bev_size

    def forward(self, warped: Sequence[FeatureMap]) -> FeatureMap:
        if len(warped) != self.num_views:
            raise ContractError(f"fusion expects {self.num_views} views, got {len(warped)}")
        shapes = {tuple(w.data.shape) for w in warped}
        if len(shapes) != 1:
            raise ContractError(f"view feature shapes differ: {sorted(shapes)}")
        x = torch.cat([w.data for w in warped], dim=1)
        x = self.conv2(F.silu(self.conv1(x)))
        h, w = x.shape[-2:]
        stride = warped[0].stride
        if (h, w) != (self.bev_size, self.bev_size):
            x = F.interpolate(x, size=(self.bev_size, self.bev_size), mode="bilinear", align_corners=False)
        return FeatureMap(x, stride)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class PointSampler(nn.Module):
    """Cross-attention from point queries to the BEV map by sampling a few
    learned offsets around each query's reference point."""

    def __init__(self, dim: int, heads: int, n_samples: int):
        super().__init__()
        self.heads, self.n_samples = heads, n_samples
        self.offsets = nn.Linear(dim, heads * n_samples * 2)
        self.weights = nn.Linear(dim, heads * n_samples)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.offsets.weight)
        with torch.no_grad():
            ang = torch.arange(heads * n_samples, dtype=torch.float32) * (2 * math.pi / (heads * n_samples))
            rad = 0.02 * (1 + torch.arange(heads * n_samples) % n_samples)
            self.offsets.bias.copy_(torch.stack([rad * ang.cos(), rad * ang.sin()], -1).flatten())
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def forward(self, q: torch.Tensor, ref: torch.Tensor, bev: torch.Tensor) -> torch.Tensor:
        # q (B, Q, D), ref (B, Q, 2) in [0,1] with (x, y); bev (B, D, H, W), row 0 at y = 1
        b, nq, d = q.shape
        h, s = self.heads, self.n_samples
        value = self.value(bev.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(b * h, d // h, *bev.shape[-2:])
        loc = ref[:, :, None, None, :] + self.offsets(q).view(b, nq, h, s, 2)
        attn = self.weights(q).view(b, nq, h, s).softmax(-1)
        grid = torch.stack([loc[..., 0] * 2 - 1, 1 - loc[..., 1] * 2], -1)  # (B, Q, H, S, 2)
        grid = grid.permute(0, 2, 1, 3, 4).reshape(b * h, nq, s, 2)
        sampled = F.grid_sample(value, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        # sampled (B*H, D/H, Q, S)
        attn = attn.permute(0, 2, 1, 3).reshape(b * h, 1, nq, s)
        out = (sampled * attn).sum(-1).view(b, d, nq).transpose(1, 2)
        return self.out(out)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, n_samples: int):
        super().__init__()
        self.intra = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.inter = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross = PointSampler(dim, heads, n_samples)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))
        self.norms = nn.ModuleList([nn.LayerNorm(dim) for _ in range(4)])

    def forward(self, x, pos, ref, bev, m, n):
        b, _, d = x.shape
        # self-attention among the points of each instance, then among instances per point slot
        t = (x + pos).view(b * m, n, d)
        x = self.norms[0](x + self.intra(t, t, x.reshape(b * m, n, d), need_weights=False)[0].reshape(b, m * n, d))
        t = (x + pos).view(b, m, n, d).transpose(1, 2).reshape(b * n, m, d)
        v = x.view(b, m, n, d).transpose(1, 2).reshape(b * n, m, d)
        y = self.inter(t, t, v, need_weights=False)[0].view(b, n, m, d).transpose(1, 2).reshape(b, m * n, d)
        x = self.norms[1](x + y)
        x = self.norms[2](x + self.cross(x + pos, ref, bev))
        return self.norms[3](x + self.ffn(x))


class MapDecoder(nn.Module):
    """Instance queries plus point queries shared by every instance, refined
    by cascaded decoder layers; each layer has its own class and point heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.m, self.n = cfg.num_queries, cfg.num_points
        self.instance_embed = nn.Parameter(torch.randn(self.m, d) * 0.5)
        self.point_embed = nn.Parameter(torch.randn(self.n, d) * 0.5)
        self.bev_pos = nn.Parameter(torch.randn(d, cfg.bev_size, cfg.bev_size) * 0.02)
        self.ref_init = nn.Linear(d, 2)
        self.ref_pos = nn.Sequential(nn.Linear(2, d), nn.SiLU(), nn.Linear(d, d))
        self.layers = nn.ModuleList(
            [DecoderLayer(d, cfg.num_heads, cfg.num_sampling_points) for _ in range(cfg.num_decoder_layers)]
        )
        self.cls_heads = nn.ModuleList(
            [nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, cfg.num_classes + 1)) for _ in self.layers]
        )
        self.reg_heads = nn.ModuleList(
            [nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 2)) for _ in self.layers]
        )

    def queries(self) -> torch.Tensor:
        """Hierarchical queries, (M * N_e, D): instance embedding + point embedding."""
        return (self.instance_embed[:, None, :] + self.point_embed[None, :, :]).reshape(self.m * self.n, -1)

    def forward(self, bev: FeatureMap) -> list[Prediction]:
        feat = bev.data + self.bev_pos
        b = feat.shape[0]
        x = self.queries().unsqueeze(0).expand(b, -1, -1).contiguous()
        ref = torch.sigmoid(self.ref_init(x))
        outs = []
        for layer, cls_head, reg_head in zip(self.layers, self.cls_heads, self.reg_heads):
            x = layer(x, self.ref_pos(ref), ref, feat, self.m, self.n)
            points = torch.sigmoid(inverse_sigmoid(ref) + reg_head(x))
            logits = cls_head(x.view(b, self.m, self.n, -1).mean(2))
            outs.append(Prediction(logits, points.view(b, self.m, self.n, 2)))
            ref = points
        return outs


class MapNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.backbone = Backbone(cfg.channels)
        self.neck = Neck(cfg.channels, cfg.neck_channels, cfg.neck_mode)
        self.stns = nn.ModuleList([STN(cfg.neck_out_channels) for _ in range(NUM_VIEWS)])
        self.fusion = Fusion(cfg.neck_out_channels, NUM_VIEWS, cfg.embed_dim, cfg.fusion_kernel, cfg.bev_size)
        self.decoder = MapDecoder(cfg)
        self.register_buffer("pixel_mean", torch.tensor([0.45, 0.45, 0.45]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1), persistent=False)

    # individual stages, exposed for testing and ablations
    def backbone_forward(self, images: torch.Tensor) -> list[FeatureMap]:
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != tuple(self.cfg.image_size):
            raise ContractError(
                f"expected images (B, 3, {self.cfg.image_size[0]}, {self.cfg.image_size[1]}), got {tuple(images.shape)}"
            )
        return self.backbone((images - self.pixel_mean) / self.pixel_std)

    def neck_forward(self, pyramid: Sequence[FeatureMap]) -> FeatureMap:
        return self.neck(pyramid)

    def stn_forward(self, feature: FeatureMap, view: int = 0) -> FeatureMap:
        return self.stns[view](feature)[0]

    def fuse_views(self, warped: Sequence[FeatureMap]) -> FeatureMap:
        return self.fusion(warped)

    def decode_map(self, bev: FeatureMap) -> Prediction:
        return self.decoder(bev)[-1]

    def forward(self, images: torch.Tensor) -> ModelOutput:
        """images: (B, V, 3, H, W) float in [0, 1] with V == 4, or V == 1 for single-view mode."""
        if images.dim() != 5:
            raise ContractError(f"expected (B, V, 3, H, W), got {tuple(images.shape)}")
        b, v = images.shape[:2]
        if v not in (1, NUM_VIEWS):
            raise ContractError(f"expected 1 or {NUM_VIEWS} views, got {v}")
        pyramid = self.backbone_forward(images.flatten(0, 1))
        neck = self.neck_forward(pyramid)
        per_view = neck.data.view(b, v, *neck.data.shape[1:])
        warped, thetas = [], []
        for k in range(NUM_VIEWS):
            if k < v:
                out, theta = self.stns[k](FeatureMap(per_view[:, k], neck.stride))
            else:
                out = FeatureMap(torch.zeros_like(per_view[:, 0]), neck.stride)
                theta = torch.zeros(b, 2, 3, dtype=images.dtype, device=images.device)
            warped.append(out)
            thetas.append(theta)
        bev = self.fuse_views(warped)
        layers = self.decoder(bev)
        return ModelOutput(layers[-1], layers, torch.stack(thetas, 1))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> MapNet:
    """Construct a model with a seeded, reproducible initialisation."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = MapNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack (h, w, 3) uint8 views into a (V, 3, h, w) float tensor in [0, 1]."""
    t = torch.stack([torch.from_numpy(np.array(im)).permute(2, 0, 1) for im in images]).to(dtype)
    return t / 255.0
