"""Network blocks and the three pipeline models, all 2D.

Slices are processed independently because inter-slice spacing is an order of
magnitude coarser than in-plane spacing. The pipeline is: a feature extractor
turns the 6 selected CTA frames into a single high-level map, a generator
fuses the four perfusion maps, the temporal MIP and that high-level map into a
pseudo-DWI, and a segmentation net with switchable normalization and
squeeze-excitation encoder blocks labels the pseudo-DWI. A small strided
context encoder provides the 16-d embedding used by the contextual loss.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InputValidationError

SN_EPS = 1e-5
SN_MOMENTUM = 0.1


class SwitchableNorm2d(nn.Module):
    """Normalization that blends instance, layer and batch statistics.

    Softmax-normalized importance weights select among the three candidate
    means, and a second softmax selects among the three variances. All
    variances are biased (population) estimates. Batch statistics keep running
    EMA copies (momentum 0.1) used in eval mode; instance and layer statistics
    always come from the current input.
    """

    def __init__(self, num_features: int, eps: float = SN_EPS, momentum: float = SN_MOMENTUM):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.mean_weight = nn.Parameter(torch.ones(3))
        self.var_weight = nn.Parameter(torch.ones(3))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise InputValidationError(f"expected N,C,H,W input, got shape {tuple(x.shape)}")
        n, c, h, w = x.shape

        mean_in = x.mean((2, 3), keepdim=True)
        var_in = x.var((2, 3), unbiased=False, keepdim=True)

        # layer and batch stats assembled from instance moments
        mean_ln = mean_in.mean(1, keepdim=True)
        var_ln = (var_in + mean_in**2).mean(1, keepdim=True) - mean_ln**2

        if self.training:
            mean_bn = mean_in.mean(0, keepdim=True)
            var_bn = (var_in + mean_in**2).mean(0, keepdim=True) - mean_bn**2
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean_bn.reshape(c))
                self.running_var.mul_(1 - m).add_(m * var_bn.reshape(c))
        else:
            mean_bn = self.running_mean.reshape(1, c, 1, 1)
            var_bn = self.running_var.reshape(1, c, 1, 1)

        mw = torch.softmax(self.mean_weight, dim=0)
        vw = torch.softmax(self.var_weight, dim=0)
        mean = mw[0] * mean_in + mw[1] * mean_ln + mw[2] * mean_bn
        var = vw[0] * var_in + vw[1] * var_ln + vw[2] * var_bn

        out = (x - mean) / torch.sqrt(var + self.eps)
        return out * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)


class SEBlock(nn.Module):
    """Channel gate: spatial mean -> bottleneck MLP -> sigmoid -> rescale.

    The bottleneck keeps at least 4 units. With all-zero parameters the gate
    is sigmoid(0) = 0.5, so the block exactly halves its input.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = x.mean((2, 3))
        gate = torch.relu(self.fc1(gate))
        gate = torch.sigmoid(self.fc2(gate))
        return x * gate.unsqueeze(-1).unsqueeze(-1)


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "switch":
        return SwitchableNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise InputValidationError(f"unknown norm kind {kind!r}")


class ConvBlock(nn.Module):
    """conv3x3 -> norm -> ReLU, twice, with an optional SE gate at the end."""

    def __init__(self, in_ch: int, out_ch: int, norm: str = "batch", se: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _make_norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _make_norm(norm, out_ch)
        self.se = SEBlock(out_ch) if se else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.norm1(self.conv1(x)))
        x = torch.relu(self.norm2(self.conv2(x)))
        if self.se is not None:
            x = self.se(x)
        return x


class UNet(nn.Module):
    """Same-padding U-Net: encoder ladder base*2^i, transposed-conv decoder.

    Spatial dims must be divisible by 2**depth. se_encoder adds an SE gate to
    every encoder block including the bottleneck; decoder blocks never get one.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        base_ch: int = 32,
        depth: int = 4,
        norm: str = "batch",
        se_encoder: bool = False,
    ):
        super().__init__()
        if depth < 1:
            raise InputValidationError(f"depth must be >= 1, got {depth}")
        self.depth = depth
        widths = [base_ch * 2**i for i in range(depth + 1)]

        self.encoders = nn.ModuleList()
        prev = in_ch
        for width in widths[:-1]:
            self.encoders.append(ConvBlock(prev, width, norm, se_encoder))
            prev = width
        self.bottleneck = ConvBlock(widths[-2], widths[-1], norm, se_encoder)
        self.pool = nn.MaxPool2d(2)

        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths[:-1]):
            self.upsamples.append(nn.ConvTranspose2d(width * 2, width, 2, stride=2))
            self.decoders.append(ConvBlock(width * 2, width, norm, se=False))
        self.head = nn.Conv2d(base_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        factor = 2**self.depth
        if h % factor or w % factor:
            raise InputValidationError(
                f"spatial dims {(h, w)} must be divisible by {factor} for depth {self.depth}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


class FeatureExtractor(nn.Module):
    """6 selected CTA frames -> one high-level map in [0,1]."""

    def __init__(self, base_ch: int = 32, depth: int = 4, n_frames: int = 6):
        super().__init__()
        self.net = UNet(n_frames, 1, base_ch, depth, norm="batch")

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(frames))


class PseudoDwiGenerator(nn.Module):
    """[cbf, cbv, mtt, tmax, mip, high-level] -> pseudo-DWI in [0,1]."""

    IN_CHANNELS = ("cbf", "cbv", "mtt", "tmax", "mip", "high_level")

    def __init__(self, base_ch: int = 32, depth: int = 4):
        super().__init__()
        self.net = UNet(len(self.IN_CHANNELS), 1, base_ch, depth, norm="batch")

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(maps))


class ContextEncoder(nn.Module):
    """Five stride-2 convs with two adaptive pools; any input -> 16-d vector."""

    def __init__(self):
        super().__init__()
        widths = [1, 8, 16, 32, 32, 16]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(5)
        )
        self.pool_mid = nn.AdaptiveAvgPool2d(8)
        self.pool_out = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = torch.relu(conv(x))
            if i == 2:
                x = self.pool_mid(x)
        x = self.pool_out(x)
        return x.flatten(1)


class SegmentationNet(nn.Module):
    """Lesion head: switchable norm everywhere, SE in the encoder, 2-class logits."""

    def __init__(self, in_ch: int = 1, base_ch: int = 32, depth: int = 4):
        super().__init__()
        self.net = UNet(in_ch, 2, base_ch, depth, norm="switch", se_encoder=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=1)


def init_weights(module: nn.Module) -> None:
    """Xavier-uniform conv/linear weights, zero biases, identity norm affines."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, SwitchableNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            nn.init.ones_(m.mean_weight)
            nn.init.ones_(m.var_weight)
